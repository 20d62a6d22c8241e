#!/usr/bin/env python3
"""
Tests for the finite-difference oracle and the per-op gradient checks.
"""

import sys
import unittest
from pathlib import Path

import numpy as np

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from controllers.export_controller import format_gradcheck_table
from controllers.gradcheck_controller import (
    OP_CASES,
    GradReport,
    check_op,
    check_precision_agreement,
    corrupted,
    draw_inputs,
    finite_diff,
    relative_error,
    run_suite,
    select_cases,
)
from data.enums import GRADCHECK_SEEDS, KINK_MARGIN
from data.errors import GradcheckError
from models.layers import sigmoid
from utils.runtime import RuntimeContext


class TestFiniteDiff(unittest.TestCase):
    """Test the central-difference oracle itself"""

    def test_square(self):
        grad = finite_diff(lambda v: float(v[0] ** 2), np.array([3.0]))
        self.assertAlmostEqual(float(grad[0]), 6.0, delta=1e-8)

    def test_constant(self):
        grad = finite_diff(lambda v: 4.2, np.ones((2, 3)))
        np.testing.assert_array_equal(grad, np.zeros((2, 3)))

    def test_sigmoid_slope(self):
        grad = finite_diff(lambda v: float(sigmoid(v)[0]), np.array([0.0]))
        self.assertAlmostEqual(float(grad[0]), 0.25, delta=1e-9)

    def test_linear_map(self):
        """Test recovery of a coefficient matrix"""
        a = np.random.default_rng(0).uniform(-1.0, 1.0, (3, 4))
        x = np.random.default_rng(1).uniform(-1.0, 1.0, 4)
        rows = [finite_diff(lambda v, i=i: float(a[i] @ v), x) for i in range(3)]
        np.testing.assert_allclose(np.stack(rows), a, rtol=0.0, atol=1e-9)

    def test_does_not_modify_input(self):
        x = np.array([1.0, 2.0])
        finite_diff(lambda v: float(v.sum()), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])

    def test_errors(self):
        with self.assertRaises(GradcheckError):
            finite_diff(lambda v: 0.0, np.zeros(2, dtype=np.float32))
        with self.assertRaises(GradcheckError):
            finite_diff(lambda v: 0.0, np.zeros(2), h=0.0)
        with self.assertRaises(GradcheckError):
            finite_diff(lambda v: float("nan"), np.zeros(2))

    def test_relative_error(self):
        np.testing.assert_allclose(relative_error(np.array([3.0, 0.5]), np.array([1.0, 0.25])), [2.0 / 3.0, 0.25])
        self.assertEqual(float(relative_error(np.array(2.0), np.array(2.0))), 0.0)


class TestOpChecks(unittest.TestCase):
    """Test every registered backward pass against the oracle"""

    def setUp(self):
        RuntimeContext.reset_instance()
        RuntimeContext(threads=1)

    def tearDown(self):
        RuntimeContext.reset_instance()

    def test_registry(self):
        expected = {
            "conv2d",
            "maxpool2x2",
            "batchnorm_train",
            "batchnorm_infer",
            "dense",
            "relu",
            "sigmoid",
            "softmax",
            "softmax_cross_entropy",
            "build_descriptor",
            "combine_stage1",
            "strand_conv_stage2",
            "gate_and_scale",
            "clocal_forward",
            "se_forward",
        }
        self.assertTrue(expected <= set(OP_CASES))
        self.assertEqual(len(select_cases("all")), len(OP_CASES))
        with self.assertRaises(ValueError):
            select_cases("lstm")

    def test_every_op_passes_across_seeds(self):
        for name, case in OP_CASES.items():
            for seed in range(GRADCHECK_SEEDS):
                with self.subTest(op=name, seed=seed):
                    report = check_op(case, seed)
                    self.assertTrue(report.passed, msg=f"{report.target}: {report.max_rel_error:.3e}")
                    self.assertEqual(len(report.parts), len(case.targets))

    def test_clocal_block_targets(self):
        """Test that the full block is checked for x and both stages"""
        report = check_op(OP_CASES["clocal_forward"], seed=0)
        self.assertEqual(
            [part.target for part in report.parts], ["x", "stage1_w", "stage1_b", "stage2_w", "stage2_b"]
        )
        inputs, _ = draw_inputs(OP_CASES["clocal_forward"], 0)
        self.assertEqual(inputs["x"].shape, (2, 32, 4, 4))

    def test_corrupted_backward_fails(self):
        for name in ("conv2d", "clocal_forward", "se_forward"):
            report = check_op(corrupted(OP_CASES[name]), seed=1)
            self.assertFalse(report.passed, msg=name)
            self.assertGreater(report.max_rel_error, 1e-3)

    def test_precision_agreement(self):
        for name, case in OP_CASES.items():
            with self.subTest(op=name):
                report = check_precision_agreement(case, seed=0)
                self.assertTrue(report.passed, msg=f"{report.target}: {report.max_rel_error:.3e}")
                self.assertTrue(report.op.endswith("[f32]"))

    def test_tie_free_draws(self):
        inputs, projection = draw_inputs(OP_CASES["relu"], 3)
        self.assertTrue(np.all(np.abs(inputs["x"]) > KINK_MARGIN))
        self.assertEqual(projection.shape, inputs["x"].shape)

    def test_run_suite_order(self):
        reports = run_suite("relu", seed=4, seeds=2)
        self.assertEqual([(r.op, r.seed) for r in reports], [("relu", 4), ("relu[f32]", 4), ("relu", 5), ("relu[f32]", 5)])
        self.assertTrue(all(report.passed for report in reports))
        self.assertEqual(len(run_suite("dense", seeds=3, precision_check=False)), 3)

    def test_run_suite_reports_failure(self):
        reports = run_suite(seeds=1, precision_check=False, cases=[corrupted(OP_CASES["dense"])])
        self.assertFalse(reports[0].passed)


class TestGradReport(unittest.TestCase):
    """Test report values and the table layout"""

    def test_negative_error_rejected(self):
        with self.assertRaises(ValueError):
            GradReport("dense", "x", 0, -1.0, (0,), True)

    def test_table(self):
        rows = [
            GradReport("dense", "weight", 0, 2.5e-11, (1, 2), True),
            GradReport("relu", "x", 3, 0.5, (0, 1, 0, 0), False),
        ]
        lines = format_gradcheck_table(rows).splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[0].startswith("op"))
        self.assertTrue(lines[1].rstrip().endswith("PASS"))
        self.assertIn("1,2", lines[1])
        self.assertTrue(lines[2].rstrip().endswith("FAIL"))


if __name__ == "__main__":
    unittest.main()
