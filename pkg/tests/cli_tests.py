from __future__ import absolute_import
import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path

from src.cli import build_parser, dispatch
from src.losses import read_loss_log
from src.phantom import Manifest, read_image
from tests.fixtures import tiny_config_dict, write_config


def run_cli(argv):
    """Exit code, stdout and stderr of one command."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = dispatch([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


class TestParser(unittest.TestCase):

    def test_usage_errors(self):
        """Both guidance flags, no guidance, train without encoders and unknown commands exit with 2"""
        base = ["harmonize", "--checkpoint", "c.pt", "--input", "a.png", "--out", "b.png"]
        self.assertEqual(run_cli(base + ["--target", "t.png", "--metadata", "t.json"])[0], 2)
        self.assertEqual(run_cli(base)[0], 2)
        self.assertEqual(run_cli(["render"])[0], 2)
        self.assertEqual(run_cli([])[0], 2)
        self.assertEqual(run_cli(["eval-matrix", "--checkpoint", "c", "--data", "d", "--guidance", "both",
                                  "--out", "o"])[0], 2)
        self.assertEqual(run_cli(["train", "--data", "d", "--out", "o"])[0], 2)

    def test_help(self):
        self.assertEqual(run_cli(["--help"])[0], 0)
        self.assertEqual(run_cli(["train", "--help"])[0], 0)

    def test_commands(self):
        parser = build_parser()
        args = parser.parse_args(["gen-data", "--out", "d", "--seed", "3"])
        self.assertEqual((args.command, args.seed, args.workers), ("gen-data", 3, None))


class TestCommands(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.config = write_config(cls.dir / "tiny.json")
        cls.data = cls.dir / "data"
        cls.clip = cls.dir / "clip.pt"
        cls.run_dir = cls.dir / "run"
        for argv in (["gen-data", "--config", cls.config, "--out", cls.data],
                     ["pretrain-clip", "--data", cls.data, "--config", cls.config, "--out", cls.clip],
                     ["train", "--data", cls.data, "--clip", cls.clip, "--config", cls.config, "--out", cls.run_dir]):
            code, _, err = run_cli(argv)
            if code != 0:
                raise AssertionError("{} failed: {}".format(argv[0], err))
        cls.manifest = Manifest.load(cls.data)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_gen_data_deterministic(self):
        for name in ("again_a", "again_b"):
            self.assertEqual(run_cli(["gen-data", "--config", self.config, "--out", self.dir / name])[0], 0)
        a = (self.dir / "again_a" / "manifest.json").read_bytes()
        self.assertEqual(a, (self.dir / "again_b" / "manifest.json").read_bytes())
        self.assertEqual(a, (self.data / "manifest.json").read_bytes())
        self.assertTrue((self.data / "phantom_config.json").exists())

    def test_seed_override(self):
        out = self.dir / "seeded"
        self.assertEqual(run_cli(["gen-data", "--config", self.config, "--out", out, "--seed", "7"])[0], 0)
        self.assertEqual(Manifest.load(out).config["seed"], 7)

    def test_train_outputs(self):
        self.assertTrue((self.run_dir / "final.pt").exists())
        self.assertTrue((self.run_dir / "step_000002.pt").exists())
        self.assertTrue((self.run_dir / "config.json").exists())
        self.assertTrue((self.run_dir / "losses.png").exists())
        self.assertEqual([r["step"] for r in read_loss_log(self.run_dir / "losses.csv")], [1, 2])

    def test_resume(self):
        data = tiny_config_dict()
        data["train"]["max_steps"] = 3
        longer = write_config(self.dir / "longer.json", data)
        out = self.dir / "resumed"
        code, _, err = run_cli(["train", "--data", self.data, "--clip", self.clip, "--config", longer,
                                "--out", out, "--resume", self.run_dir / "step_000002.pt"])
        self.assertEqual(code, 0, err)
        self.assertEqual([r["step"] for r in read_loss_log(out / "losses.csv")], [3])

    def test_resume_without_clip(self):
        """Resuming restores the encoders from the checkpoint and still applies --seed"""
        out = self.dir / "resumed_seeded"
        code, _, err = run_cli(["train", "--data", self.data, "--out", out, "--resume", self.run_dir / "step_000002.pt",
                                "--seed", "5"])
        self.assertEqual(code, 0, err)
        self.assertTrue((out / "final.pt").exists())
        with open(out / "config.json") as f:
            stored = json.load(f)
        self.assertEqual(stored["train"]["seed"], 5)
        self.assertEqual(stored["train"]["max_steps"], 2)

    def test_harmonize(self):
        src, tgt = self.manifest.pairs("test")[0]
        out = self.dir / "harmonized_text.png"
        code, _, err = run_cli(["harmonize", "--checkpoint", self.run_dir, "--input", self.data / src["image"],
                                "--metadata", self.data / tgt["metadata"], "--out", out])
        self.assertEqual(code, 0, err)
        self.assertEqual(read_image(out).shape, (16, 16))

        out = self.dir / "harmonized_image.png"
        figure = self.dir / "comparison.png"
        code, _, err = run_cli(["harmonize", "--checkpoint", self.run_dir / "final.pt", "--input", self.data / src["image"],
                                "--target", self.data / tgt["image"], "--out", out, "--figure", figure])
        self.assertEqual(code, 0, err)
        self.assertTrue(out.exists() and figure.exists())

    def test_runtime_errors(self):
        """Missing inputs exit with 1 and an error line"""
        code, _, err = run_cli(["harmonize", "--checkpoint", self.dir / "nowhere", "--input",
                                self.data / self.manifest.samples[0]["image"], "--target",
                                self.data / self.manifest.samples[1]["image"], "--out", self.dir / "x.png"])
        self.assertEqual(code, 1)
        self.assertIn("error:", err)
        code, _, err = run_cli(["gen-data", "--config", self.dir / "missing.json", "--out", self.dir / "x"])
        self.assertEqual(code, 1)

    def test_eval_matrix(self):
        out = self.dir / "eval_text"
        code, stdout, err = run_cli(["eval-matrix", "--checkpoint", self.run_dir, "--data", self.data,
                                     "--guidance", "text", "--out", out])
        self.assertEqual(code, 0, err)
        self.assertIn("Mean PSNR", stdout)
        for name in ("metrics.csv", "matrix_psnr.csv", "matrix_ssim.csv", "heatmap_psnr.png", "heatmap_ssim.png",
                     "baseline/matrix_psnr.csv", "summary.json"):
            self.assertTrue((out / name).exists(), name)
        with open(out / "summary.json") as f:
            summary = json.load(f)
        self.assertEqual(summary["guidance"], "text")
        self.assertEqual(summary["pairs"], len(self.manifest.pairs("test")))

    def test_export_beta(self):
        out = self.dir / "beta"
        code, _, err = run_cli(["export-beta", "--checkpoint", self.run_dir, "--input",
                                self.data / self.manifest.samples[0]["image"], "--out", out])
        self.assertEqual(code, 0, err)
        with open(out / "beta.json") as f:
            self.assertEqual(json.load(f)["shape"], [4, 16, 16])
        self.assertEqual((out / "beta.f32").stat().st_size, 4 * 16 * 16 * 4)
        self.assertTrue((out / "beta_grid.png").exists())

    def test_clip_eval(self):
        out = self.dir / "clip_eval.json"
        code, _, err = run_cli(["clip-eval", "--clip", self.clip, "--data", self.data, "--out", out])
        self.assertEqual(code, 0, err)
        with open(out) as f:
            report = json.load(f)
        self.assertEqual(report["n"], 3)
        self.assertIn("image_style_consistency", report)

    def test_ablate(self):
        out = self.dir / "ablate"
        code, stdout, err = run_cli(["ablate", "--data", self.data, "--config", self.config, "--out", out,
                                     "--clip", self.clip])
        self.assertEqual(code, 0, err)
        with open(out / "ablation.csv") as f:
            self.assertEqual(len(f.read().splitlines()), 6)
        self.assertIn("Full model", stdout)


if __name__ == '__main__':
    unittest.main()
