import os
import tempfile
import textwrap
import unittest

import pytest

from klora import ConfigError
from klora.config import build_layer, build_plan, build_task, load_config, parse_config
from klora.planner import AdapterKind
from klora.tasks import TaskKind

TRAIN_CONFIG = textwrap.dedent("""
    [run]
    seed = 7
    kind = kronlora

    [layer]
    d_in = 32
    d_out = 12

    [adapter]
    r = 2
    target_slice = 4
    dropout = 0.0

    [task]
    kind = teacher_regression
    n_train = 16
    n_val = 8
    n_test = 8

    [train]
    epochs = 2
    lr = 1e-3
    dropout = false
""")

SEQUENTIAL_CONFIG = textwrap.dedent("""
    [run]
    kinds = LORA, KRONLORA
    reverse = yes

    [layer]
    d_in = 8
    d_out = 8

    [adapter]
    r = 2

    [task1]
    kind = cluster_classification
    seed = 3

    [task2]
    kind = cluster_classification
    seed = 3
    n_classes = 3

    [train]
    epochs = 3
    lr = 0.01

    [train2]
    weight_decay = 0.1
""")


class ParseTestCase(unittest.TestCase):

    def test_train_config(self):
        cfg = parse_config(TRAIN_CONFIG)
        self.assertEqual(cfg.run.seed, 7)
        self.assertEqual(cfg.run.kinds, (AdapterKind.KRONLORA,))
        self.assertEqual(cfg.layer.spec.d_in, 32)
        self.assertEqual(cfg.layer.seed, 7)
        self.assertEqual(cfg.adapter.target_slice, 4)
        self.assertEqual(cfg.tasks[0].kind, TaskKind.TEACHER_REGRESSION)
        self.assertEqual(cfg.tasks[0].seed, 8)
        self.assertEqual((cfg.trains[0].epochs, cfg.trains[0].lr), (2, 1e-3))
        self.assertFalse(cfg.trains[0].dropout)

    def test_seed_override(self):
        cfg = parse_config(TRAIN_CONFIG, seed=100)
        self.assertEqual((cfg.run.seed, cfg.run.init_seed, cfg.tasks[0].seed), (100, 100, 101))

    def test_sequential_fallback(self):
        cfg = parse_config(SEQUENTIAL_CONFIG, mode="sequential")
        self.assertEqual(cfg.run.kinds, (AdapterKind.LORA, AdapterKind.KRONLORA))
        self.assertTrue(cfg.run.reverse)
        first, second = cfg.trains
        self.assertEqual((first.epochs, second.epochs), (3, 3))
        self.assertEqual((first.weight_decay, second.weight_decay), (0.01, 0.1))
        self.assertEqual(cfg.tasks[0], cfg.tasks[1])

    def test_as_dict(self):
        echo = parse_config(SEQUENTIAL_CONFIG, mode="sequential").as_dict()
        self.assertEqual(echo["run"]["kinds"], ["LORA", "KRONLORA"])
        self.assertEqual(echo["tasks"][0]["kind"], "CLUSTER_CLASSIFICATION")


class ErrorTestCase(unittest.TestCase):

    def assert_config_error(self, text, fragment, mode="train"):
        with pytest.raises(ConfigError) as exc:
            parse_config(text, source="exp.ini", mode=mode)
        self.assertIn(fragment, str(exc.value))

    def test_unknown_key(self):
        self.assert_config_error(
            TRAIN_CONFIG.replace("d_out = 12", "d_out = 12\nwidth = 3"), "[layer] width"
        )

    def test_unknown_section(self):
        self.assert_config_error(TRAIN_CONFIG + "\n[extra]\n", "[extra]")

    def test_bad_value(self):
        self.assert_config_error(TRAIN_CONFIG.replace("r = 2", "r = two"), "[adapter] r")

    def test_bad_kind(self):
        self.assert_config_error(TRAIN_CONFIG.replace("kind = kronlora", "kind = dora"),
                                 "[run] kind")

    def test_dropout_range(self):
        self.assert_config_error(
            TRAIN_CONFIG.replace("dropout = 0.0", "dropout = 1.0"), "[adapter] dropout"
        )

    def test_missing_dimension(self):
        self.assert_config_error(TRAIN_CONFIG.replace("d_in = 32", ""), "[layer] d_in")

    def test_train_validation(self):
        self.assert_config_error(TRAIN_CONFIG.replace("epochs = 2", "epochs = 0"), "[train]")

    def test_sequential_needs_both_tasks(self):
        self.assert_config_error(
            SEQUENTIAL_CONFIG.split("[task2]")[0], "[task2]", mode="sequential"
        )

    def test_sequential_rejects_regression(self):
        self.assert_config_error(
            SEQUENTIAL_CONFIG.replace("[task1]\nkind = cluster_classification",
                                      "[task1]\nkind = teacher_regression"),
            "[task1] kind",
            mode="sequential",
        )

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config(os.path.join(tempfile.gettempdir(), "no-such-klora.ini"))


class BuildTestCase(unittest.TestCase):

    def test_train_objects(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "exp.ini")
            with open(path, "w") as file:
                file.write(TRAIN_CONFIG)
            cfg = load_config(path)
        layer = build_layer(cfg)
        self.assertEqual(layer.weight.shape, (12, 32))
        self.assertIsNotNone(layer.bias)
        plan = build_plan(cfg, cfg.run.kinds[0])
        self.assertEqual((plan.d_A1, plan.d_A2, plan.r), (2, 3, 2))
        task = build_task(cfg, 0, layer, plan)
        self.assertEqual(len(task.train), 16)
        with pytest.raises(ConfigError):
            build_task(cfg, 0, layer)

    def test_identical_sequential_tasks(self):
        cfg = parse_config(SEQUENTIAL_CONFIG, mode="sequential")
        layer = build_layer(cfg)
        t1, t2 = build_task(cfg, 0, layer), build_task(cfg, 1, layer)
        self.assertEqual(t1.test.inputs, t2.test.inputs)
        self.assertEqual(t1.n_classes, 3)
