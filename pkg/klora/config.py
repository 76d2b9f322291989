"""
INI experiment files for ``klora train`` and ``klora sequential``.

A file is read with ``configparser``; see docs/config_format.md for every
section and key. Problems are reported as ConfigError messages of the form
``"<source> [section] key: problem"``.
"""

import configparser
import dataclasses
import logging

from . import ConfigError, PlanningError
from .adapters import make_frozen_linear
from .linalg import Rng
from .planner import (
    DEFAULT_ALPHA,
    DEFAULT_DROPOUT,
    DEFAULT_TARGET_SLICE,
    AdapterKind,
    LayerSpec,
    plan_for,
)
from .tasks import (
    DEFAULT_TEACHER_SCALE,
    TaskKind,
    make_cluster_classification,
    make_teacher_regression,
)
from .train import TrainConfig

logger = logging.getLogger(__name__)

RUN_KEYS = ("seed", "kind", "kinds", "reverse", "continue_training", "init_seed")
LAYER_KEYS = ("d_in", "d_out", "vocab", "bias", "seed")
ADAPTER_KEYS = ("r", "alpha", "dropout", "target_slice", "d_a2")
TASK_KEYS = (
    "kind", "seed", "n_classes", "n_train", "n_val", "n_test",
    "separation", "noise", "teacher_scale",
)
TRAIN_KEYS = (
    "epochs", "lr", "weight_decay", "batch_size", "seed", "dropout",
    "restore_best", "schedule",
)

SECTION_KEYS = {
    "run": RUN_KEYS,
    "layer": LAYER_KEYS,
    "adapter": ADAPTER_KEYS,
    "task": TASK_KEYS,
    "task1": TASK_KEYS,
    "task2": TASK_KEYS,
    "train": TRAIN_KEYS,
    "train1": TRAIN_KEYS,
    "train2": TRAIN_KEYS,
}


@dataclasses.dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    kinds: tuple = (AdapterKind.KRONLORA,)
    reverse: bool = False
    continue_training: bool = True
    init_seed: int = 0


@dataclasses.dataclass(frozen=True)
class LayerSettings:
    spec: LayerSpec
    bias: bool = True
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class AdapterSettings:
    r: int = 8
    alpha: float = DEFAULT_ALPHA
    dropout_p: float = DEFAULT_DROPOUT
    target_slice: int = DEFAULT_TARGET_SLICE
    d_A2: int = None


@dataclasses.dataclass(frozen=True)
class TaskSettings:
    kind: TaskKind = TaskKind.TEACHER_REGRESSION
    seed: int = 1
    n_classes: int = 3
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    separation: float = 3.0
    noise: float = 1.0
    teacher_scale: float = DEFAULT_TEACHER_SCALE


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """A parsed file. ``tasks`` and ``trains`` hold one entry per phase."""

    source: str
    run: RunSettings
    layer: LayerSettings
    adapter: AdapterSettings
    tasks: tuple
    trains: tuple

    def as_dict(self):
        """JSON-friendly echo for report manifests."""

        def plain(value):
            if isinstance(value, (AdapterKind, TaskKind)):
                return value.name
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [plain(v) for v in value]
            return value

        return plain(dataclasses.asdict(self))


class _Reader:
    """Typed access to one parsed file with section/key error messages."""

    def __init__(self, parser, source):
        self.parser = parser
        self.source = source

    def fail(self, section, key, problem):
        where = "[%s]" % section if key is None else "[%s] %s" % (section, key)
        return ConfigError("%s %s: %s" % (self.source, where, problem))

    def get(self, sections, key, convert, default):
        """The value of ``key`` in the first of ``sections`` that sets it."""
        if isinstance(sections, str):
            sections = (sections,)
        for section in sections:
            if self.parser.has_option(section, key):
                raw = self.parser.get(section, key).strip()
                try:
                    return convert(raw)
                except (ValueError, KeyError) as exc:
                    raise self.fail(section, key, "invalid value %r (%s)" % (raw, exc)) from None
        return default


def _boolean(raw):
    value = configparser.ConfigParser.BOOLEAN_STATES.get(raw.lower())
    if value is None:
        raise ValueError("expected true/false")
    return value


def _kind(raw):
    return AdapterKind[raw.strip().upper().replace("-", "")]


def _kinds(raw):
    kinds = tuple(_kind(part) for part in raw.split(",") if part.strip())
    if not kinds:
        raise ValueError("empty kind list")
    return kinds


def _task_kind(raw):
    return TaskKind[raw.strip().upper()]


def _optional_int(raw):
    return int(raw) if raw else None


def _check_sections(reader, allowed):
    for section in reader.parser.sections():
        if section not in allowed:
            raise reader.fail(section, None, "unknown section")
        for key in reader.parser.options(section):
            if key not in SECTION_KEYS[section]:
                raise reader.fail(section, key, "unknown key")


def _read_run(reader, seed):
    run_seed = reader.get("run", "seed", int, 0) if seed is None else seed
    kinds = reader.get("run", "kinds", _kinds, None)
    kind = reader.get("run", "kind", _kind, None)
    if kinds is None:
        kinds = (kind or AdapterKind.KRONLORA,)
    return RunSettings(
        seed=run_seed,
        kinds=kinds,
        reverse=reader.get("run", "reverse", _boolean, False),
        continue_training=reader.get("run", "continue_training", _boolean, True),
        init_seed=reader.get("run", "init_seed", int, run_seed),
    )


def _read_layer(reader, run):
    d_in = reader.get("layer", "d_in", int, None)
    d_out = reader.get("layer", "d_out", int, None)
    for key, value in (("d_in", d_in), ("d_out", d_out)):
        if value is None:
            raise reader.fail("layer", key, "required")
    try:
        spec = LayerSpec(d_in, d_out, reader.get("layer", "vocab", _boolean, False))
    except PlanningError as exc:
        raise reader.fail("layer", "d_in", str(exc)) from None
    return LayerSettings(
        spec=spec,
        bias=reader.get("layer", "bias", _boolean, True),
        seed=reader.get("layer", "seed", int, run.seed),
    )


def _read_adapter(reader):
    settings = AdapterSettings(
        r=reader.get("adapter", "r", int, 8),
        alpha=reader.get("adapter", "alpha", float, DEFAULT_ALPHA),
        dropout_p=reader.get("adapter", "dropout", float, DEFAULT_DROPOUT),
        target_slice=reader.get("adapter", "target_slice", int, DEFAULT_TARGET_SLICE),
        d_A2=reader.get("adapter", "d_a2", _optional_int, None),
    )
    if not 0.0 <= settings.dropout_p < 1.0:
        raise reader.fail("adapter", "dropout", "must be in [0, 1), got %r" % settings.dropout_p)
    if settings.r < 1:
        raise reader.fail("adapter", "r", "must be >= 1, got %r" % settings.r)
    if not settings.alpha > 0:
        raise reader.fail("adapter", "alpha", "must be positive, got %r" % settings.alpha)
    return settings


def _read_task(reader, section, default_seed):
    return TaskSettings(
        kind=reader.get(section, "kind", _task_kind, TaskKind.TEACHER_REGRESSION),
        seed=reader.get(section, "seed", int, default_seed),
        n_classes=reader.get(section, "n_classes", int, 3),
        n_train=reader.get(section, "n_train", int, 400),
        n_val=reader.get(section, "n_val", int, 100),
        n_test=reader.get(section, "n_test", int, 100),
        separation=reader.get(section, "separation", float, 3.0),
        noise=reader.get(section, "noise", float, 1.0),
        teacher_scale=reader.get(section, "teacher_scale", float, DEFAULT_TEACHER_SCALE),
    )


def _read_train(reader, sections, default_seed):
    section = sections[0]
    values = {}
    for key, convert in (
        ("epochs", int),
        ("lr", float),
        ("weight_decay", float),
        ("batch_size", int),
        ("dropout", _boolean),
        ("restore_best", _boolean),
        ("schedule", str),
    ):
        value = reader.get(sections, key, convert, None)
        if value is not None:
            values[key] = value
    values["seed"] = reader.get(sections, "seed", int, default_seed)
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise reader.fail(section, None, str(exc)) from None


def parse_config(text, source="<config>", mode="train", seed=None):
    """
    Parse an experiment file.

    Args:
        text: INI text
        source: name used in error messages
        mode: "train" reads [task]/[train]; "sequential" reads
            [task1]/[task2] and [train1]/[train2], both falling back to [train]
        seed: overrides [run] seed when not None

    Returns:
        ExperimentConfig
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("%s: %s" % (source, exc)) from None
    reader = _Reader(parser, source)

    if mode == "train":
        allowed = ("run", "layer", "adapter", "task", "train")
    elif mode == "sequential":
        allowed = ("run", "layer", "adapter", "task1", "task2", "train", "train1", "train2")
    else:
        raise ValueError("mode must be 'train' or 'sequential', got %r" % (mode,))
    _check_sections(reader, allowed)

    run = _read_run(reader, seed)
    layer = _read_layer(reader, run)
    adapter = _read_adapter(reader)
    if mode == "train":
        if len(run.kinds) != 1:
            raise reader.fail("run", "kinds", "train runs exactly one adapter kind")
        tasks = (_read_task(reader, "task", run.seed + 1),)
        trains = (_read_train(reader, ("train",), run.seed),)
    else:
        for section in ("task1", "task2"):
            if not parser.has_section(section):
                raise reader.fail(section, None, "required for sequential runs")
        tasks = tuple(
            _read_task(reader, section, run.seed + n)
            for n, section in ((1, "task1"), (2, "task2"))
        )
        for n, task in enumerate(tasks, 1):
            if task.kind is not TaskKind.CLUSTER_CLASSIFICATION:
                raise reader.fail("task%d" % n, "kind", "sequential runs need cluster_classification")
        trains = tuple(
            _read_train(reader, (section, "train"), run.seed)
            for section in ("train1", "train2")
        )
    return ExperimentConfig(source, run, layer, adapter, tasks, trains)


def load_config(path, mode="train", seed=None):
    try:
        with open(path, encoding="utf-8") as file:
            text = file.read()
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc)) from exc
    return parse_config(text, source=str(path), mode=mode, seed=seed)


def build_layer(config):
    """The frozen layer described by [layer], drawn from its seed."""
    spec = config.layer.spec
    return make_frozen_linear(spec.d_out, spec.d_in, Rng(config.layer.seed), config.layer.bias)


def build_plan(config, kind):
    a = config.adapter
    return plan_for(
        kind,
        config.layer.spec,
        r=a.r,
        target_slice=a.target_slice,
        d_A2=a.d_A2,
        alpha=a.alpha,
        dropout_p=a.dropout_p,
    )


def build_task(config, index, layer, plan=None):
    """
    Generate the task of phase ``index``.

    TEACHER_REGRESSION needs ``plan``: the hidden update is a random adapter
    of that plan drawn from the task seed.
    """
    t = config.tasks[index]
    if t.kind is TaskKind.TEACHER_REGRESSION:
        if plan is None:
            raise ConfigError("teacher_regression tasks need an adapter plan")
        return make_teacher_regression(
            layer,
            plan,
            seed=t.seed,
            n_train=t.n_train,
            n_val=t.n_val,
            n_test=t.n_test,
            teacher_scale=t.teacher_scale,
        )
    return make_cluster_classification(
        layer.d_in,
        t.n_classes,
        seed=t.seed,
        n_train=t.n_train,
        n_val=t.n_val,
        n_test=t.n_test,
        separation=t.separation,
        noise=t.noise,
    )
