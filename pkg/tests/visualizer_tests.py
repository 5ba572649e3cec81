from __future__ import absolute_import
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.visualizer import Visualizer


class TestVisualizer(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.viz = Visualizer(cell_size=0.8, dpi=40)

    def tearDown(self):
        self.tmp.cleanup()

    def test_heatmap_with_absent_cells(self):
        """Diagonal NaN cells are drawn without failing"""
        matrix = np.array([[np.nan, 25.0], [31.5, np.nan]])
        path = self.viz.save_heatmap(matrix, ["T1w", "T2w"], self.dir / "figs" / "psnr.png", "PSNR")
        self.assertTrue(path.exists())
        self.assertGreater(path.stat().st_size, 0)

    def test_beta_grid(self):
        path = self.viz.save_beta_grid(np.random.default_rng(0).normal(size=(5, 8, 8)), self.dir / "beta.png")
        self.assertTrue(path.exists())

    def test_comparison(self):
        images = [np.zeros((8, 8)), np.ones((8, 8)), np.full((8, 8), 0.5)]
        path = self.viz.save_comparison(images, self.dir / "cmp.png", ["source", "target", "harmonized"])
        self.assertTrue(path.exists())

    def test_loss_curves(self):
        names = ("L_rec", "total")
        rows = [{"step": s, "L_rec": 1.0 / s, "total": 2.0 / s} for s in range(1, 6)]
        path = self.viz.save_loss_curves(rows, self.dir / "losses.png", names)
        self.assertTrue(path.exists())


if __name__ == '__main__':
    unittest.main()
