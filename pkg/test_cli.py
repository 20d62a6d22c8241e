#!/usr/bin/env python3
"""
End-to-end tests of the command-line verbs and their exit codes.
"""

import contextlib
import io
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from controllers.export_controller import read_metrics
from data.enums import ExitCode, FileConstants
from main import main
from utils.runtime import RuntimeContext


def run_cli(*argv: str) -> tuple[int, str]:
    """Run the entry point and capture stdout."""
    out = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
        code = main(list(argv))
    return code, out.getvalue()


class TestCli(unittest.TestCase):
    """Test the train, eval, gradcheck and inspect verbs"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        RuntimeContext.reset_instance()
        RuntimeContext(threads=1)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)
        RuntimeContext.reset_instance()

    def train_args(self, out: Path) -> list[str]:
        return [
            "train",
            "--synthetic", "512",
            "--limit", "64",
            "--epochs", "2",
            "--batch-size", "32",
            "--no-augment",
            "--out", str(out),
        ]

    def test_inspect(self):
        code, out = run_cli("inspect", "--arch", "plane", "--attn", "clocal")
        self.assertEqual(code, ExitCode.SUCCESS)
        self.assertIn("global average pool, 10-d fc, softmax", out)
        self.assertIn("attention overhead: 1452 params", out)
        self.assertIn("clocal L=C/4", out)
        self.assertTrue(out.splitlines()[0].startswith("{"))

    def test_inspect_se(self):
        code, out = run_cli("inspect", "--arch", "plane", "--attn", "se")
        self.assertEqual(code, ExitCode.SUCCESS)
        self.assertIn("attention overhead: 9868 params", out)

    def test_gradcheck_single_op(self):
        code, out = run_cli("gradcheck", "--op", "conv2d")
        self.assertEqual(code, ExitCode.SUCCESS)
        self.assertIn("10/10 checks passed", out)
        self.assertNotIn("FAIL", out)

    def test_gradcheck_unknown_op(self):
        code, _ = run_cli("gradcheck", "--op", "lstm")
        self.assertEqual(code, ExitCode.USAGE_ERROR)

    def test_unknown_flag(self):
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                main(["inspect", "--bogus"])
        self.assertEqual(ctx.exception.code, ExitCode.USAGE_ERROR)

    def test_missing_data_source(self):
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                main(["train", "--epochs", "1"])
        self.assertEqual(ctx.exception.code, ExitCode.USAGE_ERROR)

    def test_missing_data_dir(self):
        code, _ = run_cli("train", "--data-dir", str(self.temp_dir / "nowhere"), "--out", str(self.temp_dir))
        self.assertEqual(code, ExitCode.DATA_ERROR)

    def test_invalid_value(self):
        code, _ = run_cli("train", "--synthetic", "32", "--lr", "-1", "--out", str(self.temp_dir))
        self.assertEqual(code, ExitCode.USAGE_ERROR)

    def test_train_then_eval(self):
        """Test the synthetic smoke run and evaluation of its best checkpoint"""
        out_dir = self.temp_dir / "run"
        code, out = run_cli(*self.train_args(out_dir))
        self.assertEqual(code, ExitCode.SUCCESS)
        self.assertIn("best_test_acc=", out)

        comment, rows = read_metrics(out_dir / FileConstants.METRICS_FILE)
        self.assertEqual(len(rows), 2)
        self.assertIn('"epochs": 2', comment)

        checkpoint = out_dir / FileConstants.BEST_CHECKPOINT
        code, out = run_cli("eval", "--checkpoint", str(checkpoint), "--synthetic", "512")
        self.assertEqual(code, ExitCode.SUCCESS)
        self.assertIn("test_acc=", out)

    def test_identical_runs_identical_metrics(self):
        """Test that strict-mode reruns differ only in the seconds column"""
        tables = []
        for name in ("a", "b"):
            out_dir = self.temp_dir / name
            code, _ = run_cli(*self.train_args(out_dir))
            self.assertEqual(code, ExitCode.SUCCESS)
            comment, rows = read_metrics(out_dir / FileConstants.METRICS_FILE)
            tables.append((comment, [{k: v for k, v in row.items() if k != "seconds"} for row in rows]))
        self.assertEqual(tables[0], tables[1])

    def test_eval_missing_checkpoint(self):
        code, _ = run_cli("eval", "--checkpoint", str(self.temp_dir / "absent.ckpt"), "--synthetic", "16")
        self.assertEqual(code, ExitCode.DATA_ERROR)

    def test_config_file_layering(self):
        """Test that flags override a --config file"""
        config = self.temp_dir / "base.json"
        config.write_text('{"epochs": 1, "seed": 7, "attention": "se"}', encoding="utf-8")
        out_dir = self.temp_dir / "layered"
        code, out = run_cli(
            "train", "--synthetic", "32", "--config", str(config), "--seed", "3", "--no-augment", "--out", str(out_dir)
        )
        self.assertEqual(code, ExitCode.SUCCESS)
        self.assertIn('"attention": "se"', out.splitlines()[0])
        self.assertIn('"seed": 3', out.splitlines()[0])


if __name__ == "__main__":
    unittest.main()
