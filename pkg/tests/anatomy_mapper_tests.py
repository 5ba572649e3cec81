from __future__ import absolute_import
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from src.anatomy_mapper import AnatomyMapper, export_beta, extract_beta, load_beta
from src.config import PatchConfig
from src.errors import ArgumentError
from src.losses import loss_beta
from src.phantom import render_slice, sample_acquisition, synth_tissue_maps
from src.visualizer import Visualizer


def _mapper(**changes):
    torch.manual_seed(0)
    values = dict(image_size=16, base=8, depth=2, out_channels=4)
    values.update(changes)
    return AnatomyMapper(**values).double().eval()


class TestAnatomyMapper(unittest.TestCase):

    def test_output_shape(self):
        mapper = _mapper()
        beta = mapper(torch.rand(3, 1, 16, 16, dtype=torch.float64))
        self.assertEqual(tuple(beta.shape), (3, 4, 16, 16))
        self.assertEqual(tuple(mapper(torch.rand(16, 16, dtype=torch.float64)).shape), (1, 4, 16, 16))

    def test_affine_invariance(self):
        """Positive intensity scale and shift leave beta unchanged"""
        torch.manual_seed(1)
        image = torch.rand(2, 1, 16, 16, dtype=torch.float64)
        for norm in ("none", "instance"):
            mapper = _mapper(norm=norm)
            with torch.no_grad():
                base = mapper(image)
                for a in (0.5, 2.0):
                    moved = mapper(a * image + 0.1)
                    self.assertLess(float((moved - base).norm() / base.norm()), 1e-4)

    def test_constant_images(self):
        """A constant slice gives a finite beta that does not depend on its level"""
        mapper = _mapper()
        with torch.no_grad():
            low = mapper(torch.full((1, 1, 16, 16), 0.2, dtype=torch.float64))
            high = mapper(torch.full((1, 1, 16, 16), 0.7, dtype=torch.float64))
        self.assertTrue(torch.isfinite(low).all())
        self.assertTrue(torch.allclose(low, high, atol=1e-10))

    def test_deterministic(self):
        mapper = _mapper()
        image = torch.rand(1, 1, 16, 16).double()
        with torch.no_grad():
            self.assertTrue(torch.equal(mapper(image), mapper(image)))
        self.assertTrue(torch.equal(extract_beta(mapper, image.numpy()[0, 0]), mapper(image)[0].detach()))

    def test_wrong_shape(self):
        mapper = _mapper()
        with self.assertRaises(ArgumentError):
            mapper(torch.rand(1, 1, 32, 32, dtype=torch.float64))
        with self.assertRaises(ArgumentError):
            mapper(torch.rand(1, 2, 16, 16, dtype=torch.float64))

    def test_first_layer(self):
        mapper = _mapper(first_norm_eps=1e-6)
        self.assertEqual(mapper.first.padding_mode, "replicate")
        self.assertEqual(mapper.first_norm.eps, 1e-6)


class TestRenderedInvariance(unittest.TestCase):

    def setUp(self):
        images = []
        for seed in (0, 1):
            phantom = synth_tissue_maps(seed, (16, 16), 3)
            for contrast in ("T1w", "T2w", "FLAIR"):
                images.append(render_slice(phantom, sample_acquisition(seed, contrast)))
        self.images = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))

    def _worst_error(self, mapper):
        worst = 0.0
        with torch.no_grad():
            base = mapper(self.images)
            for a in (0.5, 2.0):
                moved = mapper(a * self.images + 0.1)
                for i in range(len(self.images)):
                    worst = max(worst, float((moved[i] - base[i]).norm() / base[i].norm()))
        return worst

    def test_float32_untrained(self):
        torch.manual_seed(0)
        mapper = AnatomyMapper(image_size=16, base=8, depth=2, out_channels=4).eval()
        self.assertEqual(self.images.dtype, torch.float32)
        self.assertLess(self._worst_error(mapper), 1e-4)

    def test_float32_after_updates(self):
        """A few optimizer steps pulling contrasts of one phantom together keep the invariance"""
        torch.manual_seed(0)
        mapper = AnatomyMapper(image_size=16, base=8, depth=2, out_channels=4)
        optimizer = torch.optim.Adam(mapper.parameters(), lr=1e-2)
        before = [p.detach().clone() for p in mapper.parameters()]
        for step in range(5):
            optimizer.zero_grad()
            loss = loss_beta(mapper(self.images[0:1]), mapper(self.images[1:2]), PatchConfig(tau=0.5))
            loss.backward()
            optimizer.step()
        self.assertTrue(any(not torch.equal(p, q) for p, q in zip(before, mapper.parameters())))
        self.assertLess(self._worst_error(mapper.eval()), 1e-4)


class TestExportBeta(unittest.TestCase):

    def test_export(self):
        beta = torch.randn(4, 8, 6)
        with tempfile.TemporaryDirectory() as tmp:
            paths = export_beta(beta, Path(tmp) / "beta", Visualizer(cell_size=0.5, dpi=30))
            self.assertEqual(paths["blob"].stat().st_size, 4 * 8 * 6 * 4)
            with open(paths["descriptor"]) as f:
                self.assertEqual(json.load(f), {"shape": [4, 8, 6], "dtype": "float32", "byteorder": "little"})
            self.assertTrue(paths["grid"].exists())
            raw = np.fromfile(paths["blob"], dtype="<f4").reshape(4, 8, 6)
            self.assertTrue(np.array_equal(raw, beta.numpy()))
            self.assertTrue(np.array_equal(load_beta(Path(tmp) / "beta"), beta.numpy()))

    def test_export_without_figure(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = export_beta(np.zeros((2, 4, 4)), tmp)
            self.assertNotIn("grid", paths)
            with self.assertRaises(ArgumentError):
                export_beta(np.zeros((4, 4)), tmp)


if __name__ == '__main__':
    unittest.main()
