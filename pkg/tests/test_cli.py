import json
import unittest
from pathlib import Path

import json5
from click.testing import CliRunner
from scenes import SMALL_CUBE

from hrn_physics.cli import main
from hrn_physics.files import load_checkpoint, read_trajectory

TINY_RUN = {
    "scenario": {
        "name": "zero-g-collide",
        "n_trajectories": 2,
        "n_frames": 8,
        "overrides": {"shapes": [SMALL_CUBE, SMALL_CUBE], "force_interval": [1, 3]},
    },
    "model": {"effect_dim": 4, "hidden": 8, "effect_layers": 1, "psi_layers": 1},
    "optim": {"epochs": 1, "batch_size": 4, "max_samples_per_epoch": 4},
    "eval": {"horizon": 2, "stride": 1, "rollout_steps": 3},
}


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.runner = CliRunner()

    def invoke(self, *args, expect=0):
        result = self.runner.invoke(main, list(args), env={"HRN_SEED": None})
        if result.exit_code != expect:
            self.fail(f"exit {result.exit_code} for {args}:\n{result.output}")
        return result

    def write_config(self, path="run.json5", **sections):
        Path(path).write_text(json.dumps({**TINY_RUN, **sections}), encoding="utf-8")
        return path

    def generate(self, out, count=2, *extra):
        return self.invoke("gen", "--config", "run.json5", "--out", out, "-n", str(count), *extra)


class TestConfigCommand(CliTestCase):
    def test_prints_reference_config(self):
        result = self.invoke("config")
        data = json5.loads(result.output)
        self.assertEqual(data["seed"], 0)
        self.assertEqual(data["optim"]["batch_size"], 32)

    def test_writes_and_keeps_file(self):
        with self.runner.isolated_filesystem():
            first = self.invoke("config", "--out", "run.json5")
            self.assertIn("Wrote reference config", first.output)
            again = self.invoke("config", "--out", "run.json5", "--yes")
            self.assertIn("already up to date", again.output)

    def test_bad_config_file(self):
        with self.runner.isolated_filesystem():
            Path("run.json5").write_text("{model: {hiden: 3}}", encoding="utf-8")
            result = self.invoke("config", "--config", "run.json5", expect=1)
            self.assertIn("Error: model.hiden: unknown key", result.output)


class TestHelp(CliTestCase):
    def test_deterministic_flag_help(self):
        gen_help = " ".join(self.invoke("gen", "--help").output.split())
        self.assertIn("Single process, bit-reproducible mode", gen_help)
        for command in ("train", "rollout", "eval"):
            text = " ".join(self.invoke(command, "--help").output.split())
            self.assertIn("this command always runs in one process", text, command)


class TestPipeline(CliTestCase):
    def test_gen_zero_trajectories(self):
        with self.runner.isolated_filesystem():
            self.write_config()
            result = self.generate("data/train", 0)
            self.assertIn("No trajectories generated.", result.output)
            self.assertEqual(list(Path(".").rglob("*.hrnt")), [])

    def test_gen_is_deterministic(self):
        with self.runner.isolated_filesystem():
            self.write_config()
            self.generate("a", 2, "--deterministic")
            self.generate("b", 2, "--workers", "1")
            names = sorted(p.name for p in Path("a").iterdir())
            self.assertEqual(names, ["zero-g-collide-0000.hrnt", "zero-g-collide-0001.hrnt"])
            for name in names:
                self.assertEqual((Path("a") / name).read_bytes(), (Path("b") / name).read_bytes())
            traj = read_trajectory(Path("a") / names[1])
            self.assertEqual(traj.header.seed, 1)
            self.assertEqual(traj.header.config["run"]["scenario"]["n_frames"], 8)

    def test_train_needs_data(self):
        with self.runner.isolated_filesystem():
            self.write_config()
            result = self.invoke(
                "train", "--config", "run.json5", "--data", "missing", expect=1
            )
            self.assertIn("Error: data directory not found", result.output)
            Path("empty").mkdir()
            result = self.invoke("train", "--config", "run.json5", "--data", "empty", expect=1)
            self.assertIn("no .hrnt trajectories", result.output)

    def test_train_rollout_and_eval(self):
        with self.runner.isolated_filesystem():
            self.write_config()
            self.generate("data/train", 2, "--deterministic")
            self.invoke("gen", "--config", "run.json5", "--out", "data/test", "-n", "1",
                        "--seed", "100")

            result = self.invoke(
                "train", "--config", "run.json5", "--data", "data/train", "--out", "runs/hrn"
            )
            self.assertIn("epoch    1", result.output)
            self.assertTrue(Path("runs/hrn.json").exists())
            self.assertTrue(Path("runs/hrn.bin").exists())
            self.assertTrue(Path("runs/hrn.curve.csv").exists())
            checkpoint, manifest = load_checkpoint("runs/hrn")
            self.assertEqual(manifest["label"], "hrn")
            self.assertEqual(manifest["config"]["scenario"]["name"], "zero-g-collide")

            test_file = "data/test/zero-g-collide-0000.hrnt"
            result = self.invoke("rollout", "runs/hrn", test_file, "--config", "run.json5",
                                 "--steps", "0")
            self.assertIn("No ground-truth frames to score against.", result.output)
            seed_only = read_trajectory("reports/zero-g-collide-0000-rollout.hrnt")
            self.assertEqual(seed_only.n_frames, checkpoint.model.history)

            result = self.invoke("rollout", "runs/hrn", test_file, "--config", "run.json5",
                                 "--out", "r.hrnt", "--csv", "r.csv")
            self.assertIn("Cumulative MSE over 3 steps", result.output)
            self.assertEqual(read_trajectory("r.hrnt").n_frames, 2 + 3)
            self.assertEqual(len(Path("r.csv").read_text(encoding="utf-8").splitlines()), 4)

            result = self.invoke("eval", "runs/hrn", "oracle", "--config", "run.json5",
                                 "--test", "data/test", "--out", "reports")
            summary = json.loads(Path("reports/metrics.json").read_text(encoding="utf-8"))
            labels = [m["label"] for m in summary["models"]]
            self.assertEqual(labels, ["hrn", "oracle", "identity"])
            self.assertEqual(summary["models"][1]["position"], [0.0, 0.0])
            self.assertTrue(Path("reports/metrics.csv").exists())

    def test_resume_and_variant(self):
        with self.runner.isolated_filesystem():
            self.write_config()
            self.generate("data/train", 2, "--deterministic")
            self.invoke("train", "--config", "run.json5", "--data", "data/train",
                        "--out", "runs/flat", "--variant", "flat-graph")
            _, manifest = load_checkpoint("runs/flat")
            self.assertEqual(manifest["label"], "flat-graph")
            self.assertEqual(manifest["model"]["ablations"], ["flat-graph"])

            result = self.invoke("train", "--config", "run.json5", "--data", "data/train",
                                 "--out", "runs/flat", "--resume", "runs/flat", "--epochs", "2")
            self.assertIn("Resuming flat-graph at epoch 1", result.output)
            resumed, _ = load_checkpoint("runs/flat")
            self.assertEqual(resumed.epochs_done, 2)
            self.assertTrue(list(Path("runs").glob("flat.*.backup.json")))

    def test_eval_on_empty_directory(self):
        with self.runner.isolated_filesystem():
            Path("empty").mkdir()
            result = self.invoke("eval", "identity", "--test", "empty", expect=1)
            self.assertIn("Error: no .hrnt trajectories", result.output)


if __name__ == "__main__":
    unittest.main()
