from __future__ import absolute_import
import math
import tempfile
import unittest
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import gradcheck

from src.config import LossWeights, PatchConfig
from src.errors import ArgumentError, ConfigError, TrainingError
from src.losses import (COMPONENTS, CSV_HEADER, LossLogger, PatchDiscriminator, PerceptualNet,
                        discriminator_adv_loss, generator_adv_loss, loss_adv, loss_beta, loss_dir, loss_global,
                        loss_perc, loss_rec, loss_total, patch_vectors, read_loss_log)


def _double(*shape, seed=0):
    torch.manual_seed(seed)
    return torch.randn(*shape, dtype=torch.float64)


class TestLossBeta(unittest.TestCase):

    def test_identical_patches(self):
        """Indistinguishable patches give log P"""
        beta = torch.ones(1, 4, 8, 8)
        self.assertAlmostEqual(loss_beta(beta, beta.clone()).item(), math.log(16), places=5)

    def test_two_patch_oracle(self):
        beta = torch.tensor([[[[1.0, 0.0]], [[0.0, 1.0]]]])
        cfg = PatchConfig(patch_size=1, stride=1, tau=1.0)
        self.assertAlmostEqual(loss_beta(beta, beta.clone(), cfg).item(), 0.3133, places=4)

    def test_matches_explicit_loop(self):
        beta_src = _double(2, 3, 8, 8, seed=1)
        beta_tgt = _double(2, 3, 8, 8, seed=2)
        cfg = PatchConfig(patch_size=1, stride=2, tau=0.07)
        expected, count = 0.0, 0
        for b in range(2):
            src = [beta_src[b, :, i, j] for i in range(0, 8, 2) for j in range(0, 8, 2)]
            tgt = [beta_tgt[b, :, i, j] for i in range(0, 8, 2) for j in range(0, 8, 2)]
            for i, s in enumerate(src):
                sims = [float(F.cosine_similarity(s, t, dim=0)) / cfg.tau for t in tgt]
                expected += -sims[i] + math.log(sum(math.exp(v) for v in sims))
                count += 1
        self.assertAlmostEqual(loss_beta(beta_src, beta_tgt, cfg).item(), expected / count, places=6)

    def test_scale_invariant_per_patch(self):
        beta_src = _double(1, 3, 8, 8, seed=3)
        beta_tgt = _double(1, 3, 8, 8, seed=4)
        scaled = beta_src.clone()
        scaled[:, :, 0, 0] *= 3.0
        self.assertAlmostEqual(loss_beta(beta_src, beta_tgt).item(), loss_beta(scaled, beta_tgt).item(), places=9)

    def test_symmetric_option(self):
        a, b = _double(1, 3, 8, 8, seed=5), _double(1, 3, 8, 8, seed=6)
        both = 0.5 * (loss_beta(a, b) + loss_beta(b, a))
        self.assertAlmostEqual(loss_beta(a, b, PatchConfig(symmetric=True)).item(), both.item(), places=9)

    def test_patch_grid(self):
        self.assertEqual(tuple(patch_vectors(torch.zeros(2, 3, 8, 8)).shape), (2, 16, 3))
        self.assertEqual(tuple(patch_vectors(torch.zeros(3, 8, 8), patch_size=2, stride=2).shape), (1, 16, 12))

    def test_single_patch(self):
        with self.assertRaises(ArgumentError):
            loss_beta(torch.ones(1, 2, 1, 1), torch.ones(1, 2, 1, 1))
        with self.assertRaises(ArgumentError):
            loss_beta(torch.ones(1, 2, 8, 8), torch.ones(1, 2, 4, 4))

    def test_gradcheck(self):
        a = _double(1, 2, 4, 4, seed=7).requires_grad_()
        b = _double(1, 2, 4, 4, seed=8).requires_grad_()
        cfg = PatchConfig(tau=0.5)
        self.assertTrue(gradcheck(lambda x, y: loss_beta(x, y, cfg), (a, b), eps=1e-6, atol=1e-5))


class TestImageLosses(unittest.TestCase):

    def test_rec(self):
        target = torch.rand(2, 1, 8, 8, dtype=torch.float64) * 0.5
        self.assertEqual(loss_rec(target, target).item(), 0.0)
        self.assertAlmostEqual(loss_rec(target, target + 0.1).item(), 0.1, places=9)
        output = (target + 0.1 * _double(2, 1, 8, 8, seed=1)).requires_grad_()
        loss_rec(target, output).backward()
        expected = torch.sign(output.detach() - target) / target.numel()
        self.assertTrue(torch.allclose(output.grad, expected))
        with self.assertRaises(ArgumentError):
            loss_rec(target, target[:, :, :4])

    def test_perc(self):
        net = PerceptualNet(taps=(1, 2), width=8).double()
        a = torch.rand(1, 1, 16, 16, dtype=torch.float64)
        b = 1.0 - a
        self.assertEqual(loss_perc(a, a, net).item(), 0.0)
        self.assertGreater(loss_perc(a, b, net).item(), 0.0)
        self.assertAlmostEqual(loss_perc(a, b, net).item(), loss_perc(b, a, net).item(), places=12)
        out = b.clone().requires_grad_()
        loss_perc(a, out, net).backward()
        self.assertTrue(torch.isfinite(out.grad).all())
        self.assertGreater(out.grad.abs().sum().item(), 0.0)

    def test_perceptual_net(self):
        """Seeded, frozen, always in eval mode and independent of the global RNG"""
        torch.manual_seed(5)
        expected = torch.rand(1)
        torch.manual_seed(5)
        first = PerceptualNet(taps=(2, 4), seed=3)
        self.assertTrue(torch.equal(torch.rand(1), expected))
        second = PerceptualNet(taps=(4, 2), seed=3)
        for p, q in zip(first.parameters(), second.parameters()):
            self.assertTrue(torch.equal(p, q))
            self.assertFalse(p.requires_grad)
        first.train()
        self.assertFalse(first.training)
        self.assertEqual(len(first(torch.rand(1, 1, 16, 16))), 2)
        with self.assertRaises(ConfigError):
            PerceptualNet(taps=())
        with self.assertRaises(ConfigError):
            loss_perc(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8), None)

    def test_rec_gradcheck(self):
        target = _double(1, 1, 6, 6, seed=3)
        output = (target + _double(1, 1, 6, 6, seed=4)).requires_grad_()
        self.assertTrue(gradcheck(lambda o: loss_rec(target, o), (output,), eps=1e-6, atol=1e-5))

    def test_perc_gradcheck(self):
        net = PerceptualNet(taps=(1, 2), width=4).double()
        target = _double(1, 1, 8, 8, seed=5)
        output = _double(1, 1, 8, 8, seed=6).requires_grad_()
        self.assertTrue(gradcheck(lambda o: loss_perc(target, o, net), (output,), eps=1e-6, atol=1e-5))


class TestAdversarial(unittest.TestCase):

    def test_undecided_discriminator(self):
        """Zero logits give log 2 for the generator and 2 log 2 for the discriminator"""
        logits = torch.zeros(2, 1, 4, 4)
        self.assertAlmostEqual(generator_adv_loss(logits).item(), math.log(2), places=6)
        self.assertAlmostEqual(discriminator_adv_loss(logits, logits).item(), 2 * math.log(2), places=6)

    def test_loss_adv(self):
        torch.manual_seed(0)
        disc = PatchDiscriminator(1, base=4, layers=2)
        nn.init.zeros_(disc.model[-1].weight)
        nn.init.zeros_(disc.model[-1].bias)
        real = torch.rand(2, 1, 16, 16)
        fake = torch.rand(2, 1, 16, 16, requires_grad=True)
        gen, dis = loss_adv(disc, real, fake)
        self.assertAlmostEqual(gen.item(), math.log(2), places=6)
        self.assertAlmostEqual(dis.item(), 2 * math.log(2), places=6)
        dis.backward()
        self.assertIsNone(fake.grad)

    def test_discriminator_grid(self):
        disc = PatchDiscriminator(1, base=4, layers=3)
        self.assertEqual(tuple(disc(torch.rand(2, 32, 32)).shape), (2, 1, 4, 4))
        with self.assertRaises(ConfigError):
            PatchDiscriminator(layers=0)

    def test_generator_gradcheck(self):
        logits = _double(1, 1, 3, 3, seed=2).requires_grad_()
        self.assertTrue(gradcheck(generator_adv_loss, (logits,), eps=1e-6, atol=1e-5))

    def test_loss_adv_gradcheck(self):
        """Generator term of loss_adv is differentiable through the discriminator"""
        torch.manual_seed(0)
        disc = PatchDiscriminator(1, base=4, layers=2).double()
        real = _double(1, 1, 16, 16, seed=9)
        fake = _double(1, 1, 16, 16, seed=10).requires_grad_()
        self.assertTrue(gradcheck(lambda f: loss_adv(disc, real, f)[0], (fake,), eps=1e-6, atol=1e-5))


class TestEmbeddingLosses(unittest.TestCase):

    def test_global_values(self):
        e = torch.tensor([[1.0, 0.0]])
        self.assertAlmostEqual(loss_global(e, e, e).item(), 0.0, places=6)
        self.assertAlmostEqual(loss_global(e, e, torch.tensor([[0.0, 1.0]])).item(), 0.5, places=6)
        self.assertAlmostEqual(loss_global(e, -e, -e).item(), 2.0, places=6)
        with self.assertRaises(ArgumentError):
            loss_global(e, torch.zeros(1, 2), e)

    def test_global_range(self):
        values = loss_global(_double(8, 16, seed=1), _double(8, 16, seed=2), _double(8, 16, seed=3)).item()
        self.assertGreaterEqual(values, 0.0)
        self.assertLessEqual(values, 2.0)

    def test_dir_values(self):
        zero = torch.zeros(1, 2)
        e = torch.tensor([[1.0, 0.0]])
        self.assertAlmostEqual(loss_dir(e, zero, e, zero).item(), 0.0, places=6)
        self.assertAlmostEqual(loss_dir(e, zero, -e, zero).item(), 2.0, places=6)
        self.assertAlmostEqual(loss_dir(e, zero, torch.tensor([[0.0, 1.0]]), zero).item(), 1.0, places=6)

    def test_dir_degenerate_pairs(self):
        """A pair without style displacement counts as zero and is reported"""
        e_src = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        e_rec = torch.tensor([[1.0, 0.0], [0.0, -1.0]])
        m_src = torch.zeros(2, 2)
        m_tgt = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
        with self.assertLogs("src.losses", level="WARNING"):
            value = loss_dir(e_rec, e_src, m_tgt, m_src)
        self.assertAlmostEqual(value.item(), 1.0, places=6)
        self.assertTrue(math.isfinite(value.item()))

    def test_gradchecks(self):
        inputs = tuple(_double(3, 5, seed=s).requires_grad_() for s in range(4))
        self.assertTrue(gradcheck(loss_dir, inputs, eps=1e-6, atol=1e-5))
        self.assertTrue(gradcheck(loss_global, inputs[:3], eps=1e-6, atol=1e-5))


class TestTotal(unittest.TestCase):

    def test_unit_components(self):
        self.assertAlmostEqual(float(loss_total({k: 1.0 for k in COMPONENTS})), 14.1, places=9)
        self.assertEqual(float(loss_total({k: 0.0 for k in COMPONENTS})), 0.0)

    def test_weights_scale_components(self):
        components = {k: torch.tensor(float(i + 1)) for i, k in enumerate(COMPONENTS)}
        base = float(loss_total(components))
        doubled = float(loss_total(components, LossWeights(perc=2.0)))
        self.assertAlmostEqual(doubled - base, float(components["perc"]), places=5)

    def test_non_finite_component(self):
        components = {k: torch.tensor(0.5) for k in COMPONENTS}
        components["perc"] = torch.tensor(float("nan"))
        with self.assertRaises(TrainingError) as ctx:
            loss_total(components)
        self.assertEqual(ctx.exception.component, "perc")

    def test_missing_component(self):
        with self.assertRaises(ArgumentError):
            loss_total({"rec": 1.0})


class TestLossLogger(unittest.TestCase):

    def test_write_and_read(self):
        record = {name: float(i) / 4 for i, name in enumerate(CSV_HEADER[1:])}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run" / "losses.csv"
            with LossLogger(path) as log:
                log.log(1, record)
            with LossLogger(path, append=True) as log:
                log.log(2, record)
            with open(path) as f:
                self.assertEqual(f.readline().strip(), ",".join(CSV_HEADER))
            rows = read_loss_log(path)
        self.assertEqual([r["step"] for r in rows], [1, 2])
        self.assertEqual(rows[1]["L_rec"], record["L_rec"])
        self.assertEqual(rows[0]["total"], record["total"])


if __name__ == '__main__':
    unittest.main()
