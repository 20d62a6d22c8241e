#!/usr/bin/env python3
"""
Tests for the optimizer, schedule, training loop, metrics output and checkpoints.
"""

import json
import os
import shutil
import struct
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from config.settings import AugmentConfig, TrainConfig
from controllers.checkpoint_controller import (
    checkpoint_load,
    checkpoint_save,
    decode_checkpoint,
    encode_checkpoint,
)
from controllers.export_controller import read_metrics
from controllers.training_controller import (
    AdamState,
    _train_epoch,
    adam_step,
    evaluate,
    l2_penalty,
    lr_at,
    model_for,
    penalized_names,
    run_protocol,
    train,
)
from data.dataset.cifar_loader import load_cifar10, synthetic_dataset, synthetic_split
from data.enums import FileConstants, L2Scope, NormMode
from data.errors import CheckpointError, NonFiniteLossError, ShapeError
from models.arch_spec import build_arch_spec
from models.network import build_named_model, forward_pass, model_forward
from utils.runtime import RuntimeContext


def tiny_config(**overrides) -> TrainConfig:
    values = {
        "arch": "plane",
        "attention": "clocal",
        "epochs": 1,
        "batch_size": 8,
        "eval_batch_size": 8,
        "augment": AugmentConfig.disabled(),
    }
    values.update(overrides)
    return TrainConfig(**values)


class TestSchedule(unittest.TestCase):
    """Test the step-decayed learning rate"""

    def test_examples(self):
        cfg = TrainConfig()
        self.assertAlmostEqual(lr_at(0, cfg), 0.01, delta=1e-12)
        self.assertAlmostEqual(lr_at(2, cfg), 0.0094, delta=1e-12)
        self.assertAlmostEqual(lr_at(3, cfg), 0.0094, delta=1e-12)
        self.assertAlmostEqual(lr_at(4, cfg), 0.008836, delta=1e-12)

    def test_negative_epoch(self):
        with self.assertRaises(ValueError):
            lr_at(-1, TrainConfig())

    @settings(max_examples=50)
    @given(
        epoch=st.integers(0, 500),
        decay=st.floats(0.01, 1.0),
        decay_every=st.integers(1, 10),
    )
    def test_non_increasing(self, epoch, decay, decay_every):
        cfg = TrainConfig(decay=decay, decay_every=decay_every)
        self.assertLessEqual(lr_at(epoch + 1, cfg), lr_at(epoch, cfg))


class TestConfig(unittest.TestCase):
    """Test TrainConfig validation and persistence"""

    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual((cfg.lr0, cfg.decay, cfg.decay_every, cfg.epochs), (0.01, 0.94, 2, 150))
        self.assertEqual((cfg.l2, cfg.batch_size, cfg.l2_scope), (1e-4, 128, L2Scope.CONV))

    def test_validation(self):
        for bad in ({"lr0": 0}, {"decay": 1.5}, {"batch_size": 0}, {"epochs": -1}, {"beta1": 1.0}, {"l2": -1}):
            with self.assertRaises(ValueError, msg=bad):
                TrainConfig(**bad)
        with self.assertRaises(ValueError):
            TrainConfig.from_dict({"momentum": 0.9})

    def test_save_load(self):
        temp_dir = Path(tempfile.mkdtemp())
        try:
            cfg = tiny_config(seed=4, attention="se")
            cfg.save(temp_dir / "config.json")
            loaded = TrainConfig.load(temp_dir / "config.json")
            self.assertEqual(loaded, cfg)
            self.assertEqual(TrainConfig.load(temp_dir / "absent.json"), TrainConfig())
        finally:
            shutil.rmtree(temp_dir, ignore_errors=True)


class TestAdam(unittest.TestCase):
    """Test the optimizer step"""

    def test_zero_gradient(self):
        params = {"w": np.array([0.3, -0.2])}
        new, state = adam_step(params, {"w": np.zeros(2)}, AdamState.fresh(params), 0.01)
        np.testing.assert_array_equal(new["w"], params["w"])
        self.assertEqual(state.t, 1)

    def test_first_step(self):
        """Test the bias-corrected first step is about lr * sign(g)"""
        params = {"w": np.array([0.0])}
        new, _ = adam_step(params, {"w": np.array([1.0])}, AdamState.fresh(params), 0.01)
        self.assertAlmostEqual(float(new["w"][0]), -0.01, delta=1e-9)

    def test_positive_gradient_decreases(self):
        params = {"w": np.array([0.5, -0.5, 2.0])}
        new, _ = adam_step(params, {"w": np.array([0.1, 3.0, 1e-4])}, AdamState(), 0.001)
        self.assertTrue(np.all(new["w"] < params["w"]))

    def test_deterministic_and_pure(self):
        params = {"w": np.array([1.0, 2.0])}
        grads = {"w": np.array([0.5, -0.5])}
        state = AdamState.fresh(params)
        a, state_a = adam_step(params, grads, state, 0.01)
        b, state_b = adam_step(params, grads, state, 0.01)
        np.testing.assert_array_equal(a["w"], b["w"])
        np.testing.assert_array_equal(state_a.v["w"], state_b.v["w"])
        np.testing.assert_array_equal(params["w"], [1.0, 2.0])
        self.assertEqual(state.t, 0)
        self.assertTrue(np.all(state_a.v["w"] >= 0))

    def test_weight_decay_direction(self):
        """Test that the L2 gradient alone shrinks every weight"""
        params = {"w": np.array([0.8, -0.3, 1.5])}
        penalty, grads = l2_penalty(params, ["w"], 1e-4)
        self.assertAlmostEqual(penalty, 1e-4 * (0.64 + 0.09 + 2.25))
        new, _ = adam_step(params, grads, AdamState(), 0.01)
        self.assertTrue(np.all(np.abs(new["w"]) < np.abs(params["w"])))

    def test_penalty_gradient(self):
        penalty, grads = l2_penalty({"w": np.array([1.0, 2.0])}, ["w"], 0.5)
        self.assertEqual(penalty, 2.5)
        np.testing.assert_array_equal(grads["w"], [1.0, 2.0])
        self.assertEqual(l2_penalty({"w": np.ones(2)}, ["w"], 0.0), (0.0, {}))

    def test_shape_errors(self):
        params = {"w": np.zeros(3)}
        with self.assertRaises(ShapeError):
            adam_step(params, {"w": np.zeros(2)}, AdamState(), 0.01)
        with self.assertRaises(ShapeError):
            adam_step(params, {}, AdamState(), 0.01)

    def test_penalized_scope(self):
        """Test that the default scope covers conv weights only"""
        model = build_named_model("plane", "clocal")
        names = penalized_names(model, TrainConfig())
        self.assertIn("conv0.weight", names)
        self.assertNotIn("fc7.weight", names)
        self.assertFalse(any(".attn." in name or name.endswith("bias") for name in names))
        wide = penalized_names(model, TrainConfig(l2_scope=L2Scope.ALL))
        self.assertIn("conv0.attn.stage2_w", wide)


class TestTraining(unittest.TestCase):
    """Test the epoch loop and its outputs"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        RuntimeContext.reset_instance()
        RuntimeContext(threads=1)
        self.train_data, self.test_data = synthetic_split(16, seed=0)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)
        RuntimeContext.reset_instance()

    def test_zero_epochs(self):
        model = model_for(tiny_config())
        result = train(model, self.train_data, self.test_data, tiny_config(epochs=0))
        self.assertEqual(result.history, [])
        for name, value in model.params.items():
            np.testing.assert_array_equal(result.model.params[name], value)

    def test_learns_separable_classes(self):
        """Test that a two-class set is fitted perfectly within 20 epochs"""
        data = synthetic_dataset(16, seed=1, classes=2)
        cfg = tiny_config(attention="none", epochs=20, l2=0.0)
        result = train(model_for(cfg), data, data.head(8), cfg)
        self.assertEqual(max(metrics.train_acc for metrics in result.history), 1.0)
        self.assertLess(result.history[-1].train_loss, result.history[0].train_loss)

    def test_trailing_single_sample_batch_trains(self):
        """Test that a final batch of one image still takes an optimizer step"""
        data, _ = synthetic_split(9, seed=0)
        cfg = tiny_config()
        model = model_for(cfg)
        state, loss, accuracy, _ = _train_epoch(
            model, AdamState.fresh(model.params), data, cfg, 0, cfg.lr0, penalized_names(model, cfg)
        )
        self.assertEqual(state.t, 2)
        self.assertTrue(np.isfinite(loss))
        self.assertTrue(0.0 <= accuracy <= 1.0)

    def test_metrics_file(self):
        """Test one CSV row per epoch under a config comment"""
        cfg = tiny_config(epochs=2)
        result = train(model_for(cfg), self.train_data, self.test_data, cfg, out_dir=self.temp_dir)
        comment, rows = read_metrics(self.temp_dir / FileConstants.METRICS_FILE)
        self.assertEqual(json.loads(comment), cfg.to_dict())
        self.assertEqual(len(rows), 2)
        self.assertEqual(list(rows[0]), list(FileConstants.METRICS_COLUMNS))
        self.assertEqual([int(row["epoch"]) for row in rows], [0, 1])
        for row in rows:
            self.assertTrue(0.0 <= float(row["test_acc"]) <= 1.0)
        self.assertTrue((self.temp_dir / FileConstants.BEST_CHECKPOINT).is_file())
        self.assertTrue((self.temp_dir / FileConstants.CONFIG_FILE).is_file())
        self.assertGreaterEqual(result.best_epoch, 0)

    def test_strict_mode_determinism(self):
        cfg = tiny_config(epochs=2, augment=AugmentConfig())
        a = train(model_for(cfg), self.train_data, self.test_data, cfg)
        b = train(model_for(cfg), self.train_data, self.test_data, cfg)
        for left, right in zip(a.history, b.history, strict=True):
            self.assertEqual(
                (left.train_loss, left.train_acc, left.test_loss, left.test_acc),
                (right.train_loss, right.train_acc, right.test_loss, right.test_acc),
            )
        for name, value in a.model.params.items():
            np.testing.assert_array_equal(b.model.params[name], value)

    def test_non_finite_loss(self):
        cfg = tiny_config()
        with mock.patch(
            "controllers.training_controller.softmax_cross_entropy", return_value=(float("nan"), None)
        ):
            with self.assertRaises(NonFiniteLossError) as ctx:
                train(model_for(cfg), self.train_data, self.test_data, cfg)
        self.assertEqual((ctx.exception.epoch, ctx.exception.batch), (0, 0))

    def test_interrupt_flushes_checkpoint(self):
        cfg = tiny_config(epochs=3)

        def stop(metrics):
            raise KeyboardInterrupt

        with self.assertRaises(KeyboardInterrupt):
            train(model_for(cfg), self.train_data, self.test_data, cfg, out_dir=self.temp_dir, on_epoch=stop)
        self.assertTrue((self.temp_dir / FileConstants.LAST_CHECKPOINT).is_file())
        _, rows = read_metrics(self.temp_dir / FileConstants.METRICS_FILE)
        self.assertEqual(len(rows), 1)

    def test_evaluate_independent_of_threads(self):
        model = model_for(tiny_config())
        strict = evaluate(model, self.train_data, batch_size=5)
        RuntimeContext.reset_instance()
        RuntimeContext(threads=4)
        self.assertEqual(evaluate(model, self.train_data, batch_size=5), strict)
        self.assertTrue(0.0 <= strict[1] <= 1.0)

    def test_repeated_runs(self):
        cfg = tiny_config(seed=10)
        runs = run_protocol(cfg, self.train_data, self.test_data, self.temp_dir, repeats=2)
        self.assertEqual([run.seed for run in runs], [10, 11])
        self.assertTrue((self.temp_dir / "run_10" / FileConstants.METRICS_FILE).is_file())
        self.assertTrue((self.temp_dir / "run_11" / FileConstants.METRICS_FILE).is_file())
        lines = (self.temp_dir / FileConstants.SUMMARY_FILE).read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "seed,best_test_acc,best_epoch,final_test_acc,epochs")
        self.assertTrue(lines[-2].startswith("mean,"))
        self.assertTrue(lines[-1].startswith("std,"))
        with self.assertRaises(ValueError):
            run_protocol(cfg, self.train_data, self.test_data, self.temp_dir, repeats=0)


SLOW_TESTS = os.environ.get("CHANLOC_SLOW_TESTS") == "1"
CIFAR_DIR = os.environ.get("CHANLOC_CIFAR_DIR")


@unittest.skipUnless(SLOW_TESTS, "set CHANLOC_SLOW_TESTS=1 to run the desk-scale training run")
class TestSmokeTraining(unittest.TestCase):
    """Test the desk-scale run: plane + C-Local, 2000 images, 5 epochs, batch 128, seed 0"""

    def setUp(self):
        RuntimeContext.reset_instance()
        RuntimeContext()
        if CIFAR_DIR:
            self.train_data, self.test_data = load_cifar10(Path(CIFAR_DIR), limit=2000)
            self.augment = AugmentConfig()
        else:
            # Shifted noise prototypes lose their identity, so the synthetic run trains unaugmented
            self.train_data, self.test_data = synthetic_split(2000, seed=0)
            self.augment = AugmentConfig.disabled()

    def tearDown(self):
        RuntimeContext.reset_instance()

    def test_beats_chance_with_decreasing_loss(self):
        cfg = TrainConfig(arch="plane", attention="clocal", epochs=5, batch_size=128, seed=0, augment=self.augment)
        result = train(model_for(cfg), self.train_data, self.test_data, cfg)
        losses = [metrics.train_loss for metrics in result.history]
        self.assertEqual(len(losses), 5)
        self.assertGreater(result.history[-1].train_acc, 0.30)
        for epoch in range(1, 5):
            self.assertLess(losses[epoch], losses[epoch - 1], msg=f"epoch {epoch}: {losses}")


class TestCheckpoint(unittest.TestCase):
    """Test checkpoint persistence"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.path = self.temp_dir / "model.ckpt"
        self.model = build_named_model("plane", "se", seed=2)
        self.x = synthetic_dataset(4, seed=5).x
        # Move the running statistics away from their initial values
        forward_pass(self.model, self.x, NormMode.TRAIN)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_round_trip(self):
        """Test that a reloaded model reproduces the forward pass bit for bit"""
        checkpoint_save(self.model, self.path)
        loaded = checkpoint_load(self.path)
        self.assertEqual(loaded.spec, self.model.spec)
        for name, value in self.model.buffers.items():
            np.testing.assert_array_equal(loaded.buffers[name], value)
        np.testing.assert_array_equal(model_forward(loaded, self.x), model_forward(self.model, self.x))

    def test_rebuilds_architecture_from_record(self):
        """Test that every variant reloads without naming its architecture"""
        for arch in ("plane", "allcnn", "resnet"):
            model = build_named_model(arch, "clocal", seed=4, strand_ratio=4)
            path = self.temp_dir / f"{arch}.ckpt"
            checkpoint_save(model, path)
            loaded = checkpoint_load(path)
            self.assertEqual(loaded.spec, model.spec, msg=arch)
            self.assertEqual(loaded.spec.strand_ratio, 4)
            np.testing.assert_array_equal(model_forward(loaded, self.x), model_forward(model, self.x))

    def test_record_without_arch_name(self):
        raw = encode_checkpoint(self.model)
        contents = decode_checkpoint(raw)
        contents.records[FileConstants.ARCH_RECORD] = np.frombuffer(b'{"attention": "se"}', dtype=np.uint8)
        with mock.patch("controllers.checkpoint_controller.decode_checkpoint", return_value=contents):
            self.path.write_bytes(raw)
            with self.assertRaises(CheckpointError):
                checkpoint_load(self.path)

    def test_header(self):
        raw = encode_checkpoint(self.model)
        self.assertEqual(raw[:4], b"CLKB")
        version, fingerprint = struct.unpack("<IQ", raw[4:16])
        self.assertEqual(version, 1)
        self.assertEqual(fingerprint, self.model.fingerprint)
        contents = decode_checkpoint(raw)
        self.assertEqual(contents.arch_description()["attention"], "se")
        self.assertEqual(contents.records["conv0.weight"].dtype, np.float32)

    def test_mismatched_spec(self):
        checkpoint_save(self.model, self.path)
        with self.assertRaises(CheckpointError):
            checkpoint_load(self.path, build_arch_spec("plane", "clocal"))

    def test_bad_magic(self):
        raw = bytearray(encode_checkpoint(self.model))
        raw[:4] = b"XXXX"
        self.path.write_bytes(bytes(raw))
        with self.assertRaises(CheckpointError):
            checkpoint_load(self.path)

    def test_truncated(self):
        self.path.write_bytes(encode_checkpoint(self.model)[:-5])
        with self.assertRaises(CheckpointError):
            checkpoint_load(self.path)
        with self.assertRaises(CheckpointError):
            decode_checkpoint(b"CLKB")

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            checkpoint_load(self.temp_dir / "absent.ckpt")

    def test_backup_on_overwrite(self):
        checkpoint_save(self.model, self.path)
        first = self.path.read_bytes()
        self.model.params["fc7.bias"][0] = 1.0
        checkpoint_save(self.model, self.path)
        backup = self.path.with_name(self.path.name + FileConstants.BACKUP_SUFFIX)
        self.assertEqual(backup.read_bytes(), first)
        self.assertNotEqual(self.path.read_bytes(), first)


if __name__ == "__main__":
    unittest.main()
