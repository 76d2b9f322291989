import math
import os
import tempfile
import unittest

import pytest

from klora import ConfigError, DivergenceError, ShapeError
from klora import checkpoint
from klora.adapters import init_adapter, make_frozen_linear, trainable_parameters
from klora.linalg import DenseMatrix, Rng
from klora.planner import LayerSpec, plan_kron_lora, plan_lora
from klora.reports import SequentialRunReport
from klora.tasks import make_cluster_classification, make_teacher_regression
from klora.train import (
    OptimizerState,
    ToyModel,
    TrainConfig,
    accuracy,
    adamw_step,
    init_head,
    linear_schedule,
    run_comparison,
    run_sequential,
    train,
)


class ScheduleTestCase(unittest.TestCase):

    def test_linear_decay(self):
        self.assertEqual(linear_schedule(0, 10, 1.0), 1.0)
        self.assertEqual(linear_schedule(5, 10, 1.0), 0.5)
        self.assertEqual(linear_schedule(10, 10, 1.0), 0.0)

    def test_zero_horizon(self):
        with pytest.raises(ConfigError):
            linear_schedule(0, 0, 1.0)

    def test_step_out_of_range(self):
        with pytest.raises(ValueError):
            linear_schedule(11, 10, 1.0)


class AdamWTestCase(unittest.TestCase):

    def test_first_step(self):
        param = DenseMatrix.from_rows([[1.0, -1.0]])
        grads = {"w": DenseMatrix.from_rows([[0.5, -2.0]])}
        state = OptimizerState(lr=0.1, weight_decay=0.0)
        adamw_step([("w", param)], grads, state)
        # the bias-corrected first step moves every entry by lr against the gradient sign
        self.assertAlmostEqual(param[0, 0], 0.9, places=6)
        self.assertAlmostEqual(param[0, 1], -0.9, places=6)
        self.assertEqual(state.step_count, 1)

    def test_decoupled_weight_decay(self):
        param = DenseMatrix.from_rows([[1.0]])
        state = OptimizerState(lr=0.1, weight_decay=0.01)
        adamw_step([("w", param)], {"w": DenseMatrix.from_rows([[0.5]])}, state)
        self.assertAlmostEqual(param[0, 0], 1.0 - 0.001 - 0.1, places=6)

    def test_zero_gradient_only_decays(self):
        param = DenseMatrix.from_rows([[2.0]])
        state = OptimizerState(lr=0.1, weight_decay=0.5)
        adamw_step([("w", param)], {"w": DenseMatrix(1, 1)}, state)
        self.assertEqual(param[0, 0], 2.0 - 0.1 * 0.5 * 2.0)

    def test_matches_scalar_reference(self):
        rng = Rng(60)
        lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.05
        param = DenseMatrix.randn(2, 3, rng)
        expected = list(param.data)
        m, v = [0.0] * 6, [0.0] * 6
        state = OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        for t in range(1, 6):
            grad = DenseMatrix.randn(2, 3, rng)
            adamw_step([("w", param)], {"w": grad}, state)
            for i, g in enumerate(grad.data):
                m[i] = b1 * m[i] + (1 - b1) * g
                v[i] = b2 * v[i] + (1 - b2) * g * g
                m_hat = m[i] / (1 - b1**t)
                v_hat = v[i] / (1 - b2**t)
                expected[i] = expected[i] * (1 - lr * wd)
                expected[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
        for actual, wanted in zip(param.data, expected):
            self.assertLessEqual(abs(actual - wanted), 1e-12)

    def test_constant_gradient_moves_by_lr(self):
        param = DenseMatrix.from_rows([[0.0, 0.0]])
        grad = DenseMatrix.from_rows([[0.25, -4.0]])
        state = OptimizerState(lr=1e-3, weight_decay=0.0)
        for _ in range(200):
            before = list(param.data)
            adamw_step([("w", param)], {"w": grad}, state)
        self.assertAlmostEqual(param[0, 0] - before[0], -1e-3, delta=1e-9)
        self.assertAlmostEqual(param[0, 1] - before[1], 1e-3, delta=1e-9)
        self.assertAlmostEqual(param[0, 0], -0.2, delta=1e-6)

    def test_zero_lr_is_identity(self):
        rng = Rng(61)
        param = DenseMatrix.randn(3, 3, rng)
        before = param.copy()
        state = OptimizerState(lr=0.0, weight_decay=0.01)
        for _ in range(3):
            adamw_step([("w", param)], {"w": DenseMatrix.randn(3, 3, rng)}, state)
        self.assertEqual(param, before)

    def test_missing_gradient(self):
        with pytest.raises(ShapeError):
            adamw_step([("w", DenseMatrix(1, 1))], {}, OptimizerState())

    def test_gradient_shape(self):
        with pytest.raises(ShapeError):
            adamw_step([("w", DenseMatrix(1, 1))], {"w": DenseMatrix(1, 2)}, OptimizerState())


class TrainConfigTestCase(unittest.TestCase):

    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual((cfg.lr, cfg.batch_size, cfg.weight_decay), (3e-4, 8, 0.01))
        self.assertEqual(cfg.schedule, "linear")

    def test_invalid(self):
        for kwargs in ({"epochs": 0}, {"batch_size": 0}, {"lr": -1.0},
                       {"schedule": "cosine"}, {"beta2": 1.0}):
            with pytest.raises(ConfigError):
                TrainConfig(**kwargs)


class AccuracyTestCase(unittest.TestCase):

    def test_accuracy(self):
        logits = DenseMatrix.from_rows([[2, 0, 1], [1, 3, 0]])
        targets = DenseMatrix.from_rows([[1, 0, 0], [0, 1, 1]])
        self.assertAlmostEqual(accuracy(logits, targets), 2.0 / 3.0)


class TrainTestCase(unittest.TestCase):

    def setUp(self):
        self.layer = make_frozen_linear(12, 32, Rng(0))
        self.plan = plan_kron_lora(LayerSpec(32, 12), r=2, target_slice=4)
        self.task = make_teacher_regression(
            self.layer, self.plan, seed=1, n_train=40, n_val=20, n_test=20
        )

    def test_report(self):
        cfg = TrainConfig(epochs=2, lr=1e-3, batch_size=8, seed=3, dropout=False)
        report = train(init_adapter(self.plan, Rng(2)), self.layer, self.task, cfg)
        self.assertEqual(report.steps, 10)
        self.assertEqual([e.epoch for e in report.epochs], [1, 2])
        self.assertEqual(report.kind, "KRONLORA")
        self.assertIsNone(report.test_accuracy)
        self.assertLess(report.final_val_loss, report.initial_val_loss)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=1, seed=4)
        a = train(init_adapter(self.plan, Rng(2)), self.layer, self.task, cfg)
        b = train(init_adapter(self.plan, Rng(2)), self.layer, self.task, cfg)
        self.assertEqual(a.model_dump(), b.model_dump())

    def test_checkpoints_written(self):
        cfg = TrainConfig(epochs=2, seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            report = train(init_adapter(self.plan, Rng(2)), self.layer, self.task, cfg,
                           checkpoint_dir=tmp)
            path = checkpoint.checkpoint_path(tmp, report.best_checkpoint)
            self.assertTrue(os.path.exists(path))
            self.assertEqual(checkpoint.load(path).plan.kind, self.plan.kind)

    def test_frozen_layer_untouched(self):
        weight, bias = self.layer.weight.copy(), self.layer.bias.copy()
        cfg = TrainConfig(epochs=2, lr=1e-2, seed=6)
        train(init_adapter(self.plan, Rng(2)), self.layer, self.task, cfg)
        self.assertEqual(list(self.layer.weight.data), list(weight.data))
        self.assertEqual(list(self.layer.bias.data), list(bias.data))

    def test_zero_lr_keeps_parameters(self):
        adapter = init_adapter(self.plan, Rng(2))
        before = {name: m.copy() for name, m in trainable_parameters(adapter)}
        train(adapter, self.layer, self.task, TrainConfig(epochs=2, lr=0.0, seed=7))
        for name, m in trainable_parameters(adapter):
            self.assertEqual(list(m.data), list(before[name].data), name)

    def test_divergence(self):
        self.task.train.targets[0, 0] = float("nan")
        adapter = init_adapter(self.plan, Rng(2))
        with pytest.raises(DivergenceError) as exc:
            train(adapter, self.layer, self.task, TrainConfig(epochs=1))
        self.assertIn("epoch 1", str(exc.value))

    def test_task_mismatch(self):
        task = make_cluster_classification(16, 3, seed=0, n_train=8, n_val=4, n_test=4)
        with pytest.raises(ConfigError):
            train(init_adapter(self.plan, Rng(2)), self.layer, task, TrainConfig())

    def test_head_gradients_used(self):
        task = make_cluster_classification(32, 3, seed=0, n_train=16, n_val=8, n_test=8)
        head = init_head(3, 12, Rng(1))
        before = head.weight.copy()
        model = ToyModel(self.layer, init_adapter(self.plan, Rng(2)), head)
        self.assertEqual([n for n, _ in model.parameters()][-2:], ["head.weight", "head.bias"])
        train(model.adapter, self.layer, task, TrainConfig(epochs=1), head=head)
        self.assertNotEqual(head.weight, before)


@pytest.mark.slow
class ConvergenceTestCase(unittest.TestCase):
    """The hidden update is a random adapter of the student's plan, drawn
    independently of the student's initialization."""

    def setUp(self):
        self.plan = plan_kron_lora(LayerSpec(32, 12), r=2, target_slice=4)

    def run_seed(self, seed, cfg):
        layer = make_frozen_linear(12, 32, Rng(100 + seed))
        task = make_teacher_regression(layer, self.plan, seed=200 + seed)
        report = train(init_adapter(self.plan, Rng(seed)), layer, task, cfg)
        return report, report.final_val_loss / report.initial_val_loss

    def test_realizable_target(self):
        cfg = TrainConfig(epochs=40, lr=1e-2, batch_size=8, weight_decay=0.0,
                          dropout=False)
        for seed in range(10):
            report, ratio = self.run_seed(seed, cfg)
            self.assertEqual(report.steps, 2000)
            self.assertLessEqual(ratio, 1e-3, "seed %d" % seed)

    def test_default_optimizer_budget(self):
        # lr 3e-4 over 500 steps moves each factor entry by at most ~0.075.
        cfg = TrainConfig(epochs=10, lr=3e-4, batch_size=8, dropout=False)
        for seed in range(10):
            report, ratio = self.run_seed(seed, cfg)
            self.assertEqual(report.steps, 500)
            self.assertLess(ratio, 1.0, "seed %d" % seed)
            self.assertGreater(ratio, 1e-3, "seed %d" % seed)


class SequentialTestCase(unittest.TestCase):

    def setUp(self):
        self.layer = make_frozen_linear(8, 8, Rng(0))
        self.plan = plan_kron_lora(LayerSpec(8, 8), r=2, target_slice=4)
        self.cfg = TrainConfig(epochs=2, lr=1e-2, seed=1)

    def factory(self):
        return init_adapter(self.plan, Rng(3))

    def test_identical_tasks_control(self):
        task = make_cluster_classification(8, 3, seed=4, n_train=120, n_test=300,
                                           separation=4.0)
        report = run_sequential(self.factory, self.layer, task, task, self.cfg, self.cfg)
        self.assertEqual(report.delta_T1, report.acc_T1_after_T2 - report.acc_T1_after_T1)
        self.assertGreaterEqual(report.delta_T1, -0.02)

    def test_fresh_adapter_control(self):
        t1 = make_cluster_classification(8, 3, seed=5, n_train=60, n_val=20, n_test=30)
        t2 = make_cluster_classification(8, 3, seed=6, n_train=60, n_val=20, n_test=30)
        report = run_sequential(self.factory, self.layer, t1, t2, self.cfg, self.cfg,
                                continue_training=False)
        self.assertFalse(report.continued)
        self.assertEqual(report.delta_T1, 0.0)

    def test_arity_mismatch(self):
        t1 = make_cluster_classification(8, 3, seed=5, n_train=10, n_val=5, n_test=5)
        t2 = make_cluster_classification(8, 4, seed=6, n_train=10, n_val=5, n_test=5)
        with pytest.raises(ConfigError):
            run_sequential(self.factory, self.layer, t1, t2, self.cfg, self.cfg)

    def test_comparison_arms(self):
        t1 = make_cluster_classification(8, 3, seed=5, n_train=24, n_val=12, n_test=12)
        t2 = make_cluster_classification(8, 3, seed=6, n_train=24, n_val=12, n_test=12)
        plans = [plan_lora(LayerSpec(8, 8), 2), self.plan]
        cfg = TrainConfig(epochs=1, seed=2)
        report = run_comparison(plans, self.layer, t1, t2, cfg, cfg, init_seed=3,
                                reverse=True)
        self.assertEqual([arm.kind for arm in report.arms], ["LORA", "KRONLORA"])
        for arm in report.arms:
            self.assertEqual(arm.forward.order, "T1->T2")
            self.assertEqual(arm.reverse.order, "T2->T1")

    def test_published_pair(self):
        report = SequentialRunReport.from_accuracies(0.7351, 0.80, 0.5877)
        self.assertEqual(round(report.delta_T1, 4), -0.1474)

    def test_inconsistent_delta_rejected(self):
        with pytest.raises(ValueError):
            SequentialRunReport(
                acc_T1_after_T1=0.9, acc_T2_after_T2=0.9, acc_T1_after_T2=0.8, delta_T1=0.0
            )
