import inspect
import io
import os
import struct
import tempfile
import unittest

import pytest

from klora import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    KronLoRAException,
    ShapeError,
)
from klora import adapters, checkpoint, planner
from klora.adapters import init_adapter, randomize_adapter, trainable_parameters
from klora.linalg import Rng
from klora.planner import (
    AdapterKind,
    LayerSpec,
    plan_kron_lora,
    plan_krona,
    plan_lora,
)
from klora.verify import random_plan


def random_adapter(kind, seed):
    rng = Rng(seed)
    plan = random_plan(kind, rng, max_dim=40)
    return randomize_adapter(init_adapter(plan, rng), rng)


class RoundTripTestCase(unittest.TestCase):

    def test_bit_exact(self):
        for kind in AdapterKind:
            for seed in range(10):
                adapter = random_adapter(kind, seed)
                data = checkpoint.dumps(adapter)
                self.assertEqual(len(data), checkpoint.checkpoint_size(adapter.plan))
                loaded = checkpoint.loads(data)
                self.assertIs(loaded.plan.kind, kind)
                self.assertEqual(
                    trainable_parameters(loaded), trainable_parameters(adapter)
                )
                self.assertEqual(checkpoint.dumps(loaded), data)

    def test_plan_survives(self):
        plan = plan_krona(LayerSpec(12, 13), alpha=4.0, dropout_p=0.25)
        loaded = checkpoint.loads(checkpoint.dumps(init_adapter(plan, Rng(0))))
        self.assertEqual(loaded.plan, plan)

    def test_file_objects(self):
        adapter = random_adapter(AdapterKind.KRONLORA, 1)
        buffer = io.BytesIO()
        count = checkpoint.save(adapter, buffer)
        self.assertEqual(count, len(buffer.getvalue()))
        buffer.seek(0)
        self.assertEqual(checkpoint.load(buffer), adapter)

    def test_paths(self):
        adapter = random_adapter(AdapterKind.LORA, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = checkpoint.checkpoint_path(tmp, "final")
            self.assertTrue(path.endswith("final.klora"))
            count = checkpoint.save(adapter, path)
            self.assertEqual(os.path.getsize(path), count)
            self.assertEqual(checkpoint.load(path), adapter)

    def test_unwritable_path(self):
        adapter = random_adapter(AdapterKind.LORA, 2)
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(KronLoRAException) as exc:
                checkpoint.save(adapter, os.path.join(tmp, "missing", "x.klora"))
            self.assertIn("missing", str(exc.value))

    def test_restore_into(self):
        source = random_adapter(AdapterKind.KRONA, 3)
        target = init_adapter(source.plan, Rng(9))
        checkpoint.restore_into(target, checkpoint.dumps(source))
        self.assertEqual(trainable_parameters(target), trainable_parameters(source))

    def test_restore_into_wrong_plan(self):
        source = init_adapter(plan_lora(LayerSpec(8, 8), 2), Rng(0))
        target = init_adapter(plan_lora(LayerSpec(8, 8), 3), Rng(0))
        with pytest.raises(ShapeError):
            checkpoint.restore_into(target, source)


class SizeTestCase(unittest.TestCase):

    def test_small_model_sizes(self):
        layer = LayerSpec(768, 768)
        self.assertEqual(checkpoint.HEADER.size, 57)
        self.assertEqual(checkpoint.checkpoint_size(plan_kron_lora(layer, r=8, d_A2=4)), 37026)
        self.assertEqual(checkpoint.checkpoint_size(plan_lora(layer, 8)), 98391)

    def test_kron_lora_smaller_than_lora(self):
        for d in (768, 1024, 2048, 4096, 5120):
            layer = LayerSpec(d, d)
            kron_size = checkpoint.checkpoint_size(plan_kron_lora(layer, r=8))
            lora_size = checkpoint.checkpoint_size(plan_lora(layer, 8))
            self.assertGreaterEqual(lora_size / kron_size, 2.5, d)

    def test_written_size_matches(self):
        plan = plan_kron_lora(LayerSpec(768, 768), r=8, d_A2=4)
        self.assertEqual(len(checkpoint.dumps(init_adapter(plan, Rng(0)))), 37026)


class CorruptionTestCase(unittest.TestCase):

    def setUp(self):
        self.data = checkpoint.dumps(random_adapter(AdapterKind.KRONLORA, 4))

    def test_bad_magic(self):
        with pytest.raises(CheckpointFormatError):
            checkpoint.loads(b"NOTKLORA" + self.data[8:])

    def test_unknown_kind(self):
        data = self.data[:8] + bytes([9]) + self.data[9:]
        with pytest.raises(CheckpointFormatError):
            checkpoint.loads(data)

    def test_truncated(self):
        with pytest.raises(CheckpointCorruptionError):
            checkpoint.loads(self.data[:-1])
        with pytest.raises(CheckpointCorruptionError):
            checkpoint.loads(self.data[:20])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointCorruptionError):
            checkpoint.loads(self.data + b"\x00")

    def test_inconsistent_header(self):
        # d_in is the sixth u32 after the kind byte
        offset = 9 + 5 * 4
        (d_in,) = struct.unpack_from("<I", self.data, offset)
        data = self.data[:offset] + struct.pack("<I", d_in + 2) + self.data[offset + 4 :]
        with pytest.raises(CheckpointCorruptionError):
            checkpoint.loads(data)

    def test_tensor_count(self):
        offset = checkpoint.HEADER.size - 4
        data = self.data[:offset] + struct.pack("<I", 2) + self.data[offset + 4 :]
        with pytest.raises(CheckpointCorruptionError):
            checkpoint.loads(data)

    def test_corruption_is_value_error(self):
        with pytest.raises(ValueError):
            checkpoint.loads(self.data[:-8])


class AnnotationTestCase(unittest.TestCase):

    def test_public_functions_annotated(self):
        for module in (planner, adapters, checkpoint):
            for name, fn in inspect.getmembers(module, inspect.isfunction):
                if fn.__module__ != module.__name__ or name.startswith("_"):
                    continue
                self.assertIn("return", fn.__annotations__, "%s.%s" % (module.__name__, name))
                params = [p for p in inspect.signature(fn).parameters if p != "self"]
                self.assertEqual(
                    sorted(set(fn.__annotations__) - {"return"}), sorted(params),
                    "%s.%s" % (module.__name__, name),
                )
