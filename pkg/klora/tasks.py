"""
Deterministic synthetic tasks for the training harness.

TEACHER_REGRESSION
    Targets are produced by the frozen layer plus a hidden update ΔW* that an
    adapter of the same plan can represent exactly.

CLUSTER_CLASSIFICATION
    Gaussian clusters in input space, one per class, with one-hot targets.
"""

import array
import dataclasses
import enum
import logging
import math

from . import ConfigError
from .adapters import expand_delta, frozen_forward, init_adapter
from .linalg import DenseMatrix, Rng, matmul
from .planner import AdapterKind

logger = logging.getLogger(__name__)

_ZERO_AT_INIT = {
    AdapterKind.KRONLORA: "B1",
    AdapterKind.KRONA: "B",
    AdapterKind.LORA: "up",
}

#: Standard deviation of the teacher factor that init leaves at zero.
DEFAULT_TEACHER_SCALE = 0.5


class TaskKind(enum.Enum):
    TEACHER_REGRESSION = "teacher_regression"
    CLUSTER_CLASSIFICATION = "cluster_classification"


@dataclasses.dataclass(frozen=True)
class Split:
    """``inputs`` is d_in x n and ``targets`` is n_outputs x n."""

    inputs: DenseMatrix
    targets: DenseMatrix

    def __len__(self):
        return self.inputs.cols

    def select(self, indices):
        """The columns ``indices`` of both matrices, in that order."""
        return Split(_take_columns(self.inputs, indices), _take_columns(self.targets, indices))


def _take_columns(m, indices):
    out = DenseMatrix(m.rows, len(indices))
    cols, data, width = m.cols, m.data, len(indices)
    for i in range(m.rows):
        base = i * cols
        out.data[i * width : (i + 1) * width] = array.array(
            "d", [data[base + k] for k in indices]
        )
    return out


@dataclasses.dataclass(frozen=True)
class ToyTask:
    kind: TaskKind
    seed: int
    d_in: int
    n_outputs: int
    train: Split
    val: Split
    test: Split
    teacher_delta: DenseMatrix = None

    def __post_init__(self):
        for name in ("train", "val", "test"):
            split = getattr(self, name)
            if len(split) < 1:
                raise ConfigError("task %s split is empty" % name)
            if split.inputs.rows != self.d_in or split.targets.rows != self.n_outputs:
                raise ConfigError(
                    "task %s split has shapes %s/%s, expected %d inputs and %d outputs"
                    % (name, split.inputs.shape, split.targets.shape,
                       self.d_in, self.n_outputs)
                )

    @property
    def is_classification(self):
        return self.kind is TaskKind.CLUSTER_CLASSIFICATION

    @property
    def n_classes(self):
        return self.n_outputs if self.is_classification else None


def _check_counts(n_train, n_val, n_test):
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ConfigError("%s must be >= 1, got %r" % (name, n))


def _split_columns(m, n_train, n_val):
    ends = (n_train, n_train + n_val, m.cols)
    return [
        _take_columns(m, range(start, end))
        for start, end in zip((0,) + ends[:2], ends)
    ]


def teacher_adapter(plan, seed, teacher_scale=DEFAULT_TEACHER_SCALE):
    """
    The hidden adapter of a TEACHER_REGRESSION task, a random adapter of ``plan``.

    Every factor comes from a child stream of ``seed`` and none from the
    student's initialization. Factors that init draws at random keep their
    init distribution; the factor init leaves at zero (B1, B or up) gets
    N(0, teacher_scale²) entries.
    """
    rng = Rng(seed).split()
    adapter = init_adapter(plan, rng)
    zero_factor = getattr(adapter, _ZERO_AT_INIT[plan.kind])
    zero_factor.assign(
        DenseMatrix.randn(zero_factor.rows, zero_factor.cols, rng, teacher_scale)
    )
    return adapter


def make_teacher_regression(
    layer,
    plan,
    seed,
    n_train=400,
    n_val=100,
    n_test=100,
    teacher_scale=DEFAULT_TEACHER_SCALE,
):
    """
    Regression onto W·x + bias + ΔW*·x with x ~ N(0, I).

    Args:
        layer: FrozenLinear shared by teacher and student
        plan: AdapterPlan of the student; ΔW* is an update of the same plan
        seed: seed for the teacher factors and the inputs

    Returns:
        ToyTask with ``teacher_delta`` set
    """
    _check_counts(n_train, n_val, n_test)
    if not teacher_scale > 0:
        raise ConfigError("teacher_scale must be positive, got %r" % (teacher_scale,))
    delta = expand_delta(teacher_adapter(plan, seed, teacher_scale))
    rng = Rng(seed)
    n = n_train + n_val + n_test
    inputs = DenseMatrix.randn(layer.d_in, n, rng)
    targets = frozen_forward(layer, inputs).add(matmul(delta, inputs))
    logger.debug("teacher regression: |ΔW*|max=%.4g over %d examples", delta.max_abs(), n)
    parts = zip(_split_columns(inputs, n_train, n_val), _split_columns(targets, n_train, n_val))
    train, val, test = [Split(x, y) for x, y in parts]
    return ToyTask(
        kind=TaskKind.TEACHER_REGRESSION,
        seed=seed,
        d_in=layer.d_in,
        n_outputs=layer.d_out,
        train=train,
        val=val,
        test=test,
        teacher_delta=delta,
    )


def make_cluster_classification(
    d_in,
    n_classes,
    seed,
    n_train=240,
    n_val=60,
    n_test=60,
    separation=3.0,
    noise=1.0,
):
    """
    Gaussian clusters: class centers at distance ``separation`` from the origin
    in random directions, examples drawn around them with std ``noise``.
    """
    _check_counts(n_train, n_val, n_test)
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2, got %r" % (n_classes,))
    if d_in < 1:
        raise ConfigError("d_in must be >= 1, got %r" % (d_in,))
    rng = Rng(seed)
    centers = []
    for _ in range(n_classes):
        direction = [rng.normal() for _ in range(d_in)]
        norm = math.sqrt(math.fsum(v * v for v in direction))
        centers.append([separation * v / norm for v in direction])

    n = n_train + n_val + n_test
    labels = [k % n_classes for k in range(n)]
    rng.shuffle(labels)
    inputs = DenseMatrix(d_in, n)
    targets = DenseMatrix(n_classes, n)
    for k, label in enumerate(labels):
        center = centers[label]
        for i in range(d_in):
            inputs[i, k] = center[i] + noise * rng.normal()
        targets[label, k] = 1.0
    parts = zip(_split_columns(inputs, n_train, n_val), _split_columns(targets, n_train, n_val))
    train, val, test = [Split(x, y) for x, y in parts]
    return ToyTask(
        kind=TaskKind.CLUSTER_CLASSIFICATION,
        seed=seed,
        d_in=d_in,
        n_outputs=n_classes,
        train=train,
        val=val,
        test=test,
    )
