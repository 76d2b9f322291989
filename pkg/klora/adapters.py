"""
Adapters attached to a frozen linear layer.

Every adapter computes ``y = W·x + bias + scale · branch(x̃)`` where x is
d_in x batch (the batch is the trailing axis) and x̃ is x after dropout in
training mode. The branch is:

- LoRA: up · (down · x̃)
- KronA: (A ⊗ B) · x̃, computed as vec(B · X · Aᵀ)
- Kron-LoRA: (A ⊗ (B1 · B2)) · x̃, computed as vec(B1 · (B2 · X) · Aᵀ)

where X is the column-major unvec of one column of x̃ into d_B1 x d_A1. The
whole batch goes through each step as one matmul.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing

from . import ConfigError, ShapeError, StateError
from .linalg import (
    DenseMatrix,
    Rng,
    fold_columns,
    kron,
    matmul,
    tall_to_wide,
    unfold_columns,
    wide_to_tall,
)
from .planner import AdapterKind, AdapterPlan

logger = logging.getLogger(__name__)

# Marks "no forward since the last backward" in training mode.
_UNSET = object()


@dataclasses.dataclass
class FrozenLinear:
    """The pre-trained layer W (d_out x d_in) with an optional d_out x 1 bias."""

    weight: DenseMatrix
    bias: DenseMatrix = None

    def __post_init__(self):
        if self.bias is not None and self.bias.shape != (self.weight.rows, 1):
            raise ShapeError(
                "bias %s does not match weight %s" % (self.bias.shape, self.weight.shape)
            )

    @property
    def d_in(self):
        return self.weight.cols

    @property
    def d_out(self):
        return self.weight.rows


def make_frozen_linear(
    d_out: int, d_in: int, rng: Rng, bias: bool = True
) -> FrozenLinear:
    """Random frozen layer with W ~ N(0, 1/d_in) and a small bias."""
    weight = DenseMatrix.randn(d_out, d_in, rng, std=1.0 / math.sqrt(d_in))
    return FrozenLinear(weight, DenseMatrix.randn(d_out, 1, rng, std=0.1) if bias else None)


def affine(weight: DenseMatrix, bias: DenseMatrix | None, x: DenseMatrix) -> DenseMatrix:
    """weight·x plus the column ``bias`` (or nothing) added to every column."""
    out = matmul(weight, x)
    if bias is not None:
        cols, data = out.cols, out.data
        for i, b in enumerate(bias.data):
            for j in range(i * cols, (i + 1) * cols):
                data[j] += b
    return out


def frozen_forward(layer: FrozenLinear, x: DenseMatrix) -> DenseMatrix:
    """W·x + bias."""
    return affine(layer.weight, layer.bias, x)


class _Adapter:
    """Behaviour shared by the three adapter dataclasses."""

    kind = None
    parameter_names = ()

    def _init_state(self, expected):
        if self.plan.kind is not self.kind:
            raise ShapeError(
                "%s needs a %s plan, got %s"
                % (type(self).__name__, self.kind.name, self.plan.kind.name)
            )
        for name, shape in zip(self.parameter_names, expected):
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(
                    "%s: %s has shape %s, plan requires %s"
                    % (type(self).__name__, name, actual, shape)
                )
        self._mask = _UNSET

    def take_mask(self):
        """Pop the dropout mask cached by the last training-mode forward.

        Returns None when the mask is the identity (p == 0).
        """
        if self._mask is _UNSET:
            raise StateError(
                "backward in training mode needs the dropout mask of a preceding "
                "forward; call forward exactly once before each backward"
            )
        mask, self._mask = self._mask, _UNSET
        return mask


@dataclasses.dataclass(eq=True)
class LoRAAdapter(_Adapter):
    plan: object
    down: DenseMatrix
    up: DenseMatrix
    training_mode: bool = False

    kind = AdapterKind.LORA
    parameter_names = ("down", "up")

    def __post_init__(self):
        p = self.plan
        self._init_state([(p.r, p.d_in), (p.d_out, p.r)])


@dataclasses.dataclass(eq=True)
class KronAAdapter(_Adapter):
    plan: object
    A: DenseMatrix
    B: DenseMatrix
    training_mode: bool = False

    kind = AdapterKind.KRONA
    parameter_names = ("A", "B")

    def __post_init__(self):
        p = self.plan
        self._init_state([(p.d_A2, p.d_A1), (p.d_B2, p.d_B1)])


@dataclasses.dataclass(eq=True)
class KronLoRAAdapter(_Adapter):
    """ΔW = scale · A ⊗ (B1 · B2), A stored as d_A2 x d_A1."""

    plan: object
    A: DenseMatrix
    B1: DenseMatrix
    B2: DenseMatrix
    training_mode: bool = False

    kind = AdapterKind.KRONLORA
    parameter_names = ("A", "B1", "B2")

    def __post_init__(self):
        p = self.plan
        self._init_state([(p.d_A2, p.d_A1), (p.d_B2, p.r), (p.r, p.d_B1)])


ADAPTER_CLASSES = {
    AdapterKind.LORA: LoRAAdapter,
    AdapterKind.KRONA: KronAAdapter,
    AdapterKind.KRONLORA: KronLoRAAdapter,
}

Adapter = typing.Union[LoRAAdapter, KronAAdapter, KronLoRAAdapter]


def parameter_shapes(plan: AdapterPlan) -> list[tuple[str, tuple[int, int]]]:
    """Ordered (name, (rows, cols)) pairs of the trainable tensors of ``plan``."""
    if plan.kind is AdapterKind.KRONLORA:
        return [
            ("A", (plan.d_A2, plan.d_A1)),
            ("B1", (plan.d_B2, plan.r)),
            ("B2", (plan.r, plan.d_B1)),
        ]
    if plan.kind is AdapterKind.KRONA:
        return [("A", (plan.d_A2, plan.d_A1)), ("B", (plan.d_B2, plan.d_B1))]
    return [("down", (plan.r, plan.d_in)), ("up", (plan.d_out, plan.r))]


def build_adapter(
    plan: AdapterPlan, tensors: dict, training_mode: bool = False
) -> Adapter:
    """Construct the adapter class for ``plan.kind`` from a name -> matrix map."""
    cls = ADAPTER_CLASSES[plan.kind]
    return cls(plan, training_mode=training_mode, **tensors)


def init_adapter(plan: AdapterPlan, rng: Rng) -> Adapter:
    """
    Initialize an adapter so that its update ΔW is zero.

    Kron-LoRA draws A ~ N(0, 1/(d_A1·d_A2)) then B2 ~ N(0, 1/d_B1) and sets
    B1 = 0. KronA draws A the same way and sets B = 0. LoRA draws
    down ~ N(0, 1/d_in) and sets up = 0.

    Args:
        plan: AdapterPlan
        rng: Rng supplying the random factors

    Returns:
        adapter in eval mode
    """
    if plan.kind is AdapterKind.LORA:
        tensors = {
            "down": DenseMatrix.randn(plan.r, plan.d_in, rng, 1.0 / math.sqrt(plan.d_in)),
            "up": DenseMatrix.zeros(plan.d_out, plan.r),
        }
    else:
        a_std = 1.0 / math.sqrt(plan.d_A1 * plan.d_A2)
        tensors = {"A": DenseMatrix.randn(plan.d_A2, plan.d_A1, rng, a_std)}
        if plan.kind is AdapterKind.KRONA:
            tensors["B"] = DenseMatrix.zeros(plan.d_B2, plan.d_B1)
        else:
            tensors["B2"] = DenseMatrix.randn(
                plan.r, plan.d_B1, rng, 1.0 / math.sqrt(plan.d_B1)
            )
            tensors["B1"] = DenseMatrix.zeros(plan.d_B2, plan.r)
    return build_adapter(plan, tensors)


def randomize_adapter(adapter: Adapter, rng: Rng, std: float = 1.0) -> Adapter:
    """Overwrite every trainable factor in place with N(0, std²) entries."""
    for _name, param in trainable_parameters(adapter):
        param.assign(DenseMatrix.randn(param.rows, param.cols, rng, std))
    return adapter


def set_training(adapter: Adapter, flag: bool) -> Adapter:
    adapter.training_mode = bool(flag)
    if not flag:
        adapter._mask = _UNSET
    return adapter


def trainable_parameters(adapter: Adapter) -> list[tuple[str, DenseMatrix]]:
    """Ordered (name, matrix) pairs; the matrices are the live tensors."""
    return [(name, getattr(adapter, name)) for name in adapter.parameter_names]


def expand_delta(adapter: Adapter) -> DenseMatrix:
    """Dense d_out x d_in update ΔW, scale included, dropout never applied."""
    plan = adapter.plan
    if plan.kind is AdapterKind.KRONLORA:
        dense = kron(adapter.A, matmul(adapter.B1, adapter.B2))
    elif plan.kind is AdapterKind.KRONA:
        dense = kron(adapter.A, adapter.B)
    else:
        dense = matmul(adapter.up, adapter.down)
    return dense.scale(plan.scale)


@dataclasses.dataclass
class ChainTrace:
    """
    Intermediates of a batched Kron-LoRA branch.

    Per example k, with X_k the d_B1 x d_A1 unvec of input column k:
    Y1_k = B2·X_k (r x d_A1), Y2_k = Y1_k·Aᵀ (r x d_A2), Y3_k = B1·Y2_k
    (d_B2 x d_A2). The batch is held side by side ("wide", examples along
    the columns) or stacked ("stack", examples along the rows).
    """

    batch: int
    x_all: DenseMatrix
    y1_stack: DenseMatrix
    y2_wide: DenseMatrix
    y3_all: DenseMatrix

    @property
    def example_shapes(self):
        b = self.batch
        return {
            "Y1": (self.y1_stack.rows // b, self.y1_stack.cols),
            "Y2": (self.y2_wide.rows, self.y2_wide.cols // b),
            "Y3": (self.y3_all.rows, self.y3_all.cols // b),
        }

    def example(self, k):
        """(Y1, Y2, Y3) of batch column k as separate matrices."""
        y1 = _stack_block(self.y1_stack, self.batch, k)
        y2 = _stack_block(wide_to_tall(self.y2_wide, self.batch), self.batch, k)
        y3 = _stack_block(wide_to_tall(self.y3_all, self.batch), self.batch, k)
        return y1, y2, y3


def _stack_block(stack, blocks, k):
    rows = stack.rows // blocks
    n = rows * stack.cols
    return DenseMatrix(rows, stack.cols, stack.data[k * n : (k + 1) * n])


def kron_lora_chain(adapter: KronLoRAAdapter, x: DenseMatrix) -> ChainTrace:
    """Run the unscaled Kron-LoRA branch on x (d_in x batch), keeping intermediates."""
    plan, batch = adapter.plan, x.cols
    x_all = fold_columns(x, plan.d_B1, plan.d_A1)
    y1_stack = wide_to_tall(matmul(adapter.B2, x_all), batch)
    y2_wide = tall_to_wide(matmul(y1_stack, adapter.A.T), batch)
    y3_all = matmul(adapter.B1, y2_wide)
    return ChainTrace(batch, x_all, y1_stack, y2_wide, y3_all)


def krona_chain(adapter: KronAAdapter, x: DenseMatrix) -> tuple:
    """KronA branch intermediates: (X_all, (B·X) stacked, output wide)."""
    plan, batch = adapter.plan, x.cols
    x_all = fold_columns(x, plan.d_B1, plan.d_A1)
    y1_stack = wide_to_tall(matmul(adapter.B, x_all), batch)
    y2_wide = tall_to_wide(matmul(y1_stack, adapter.A.T), batch)
    return x_all, y1_stack, y2_wide


def adapter_branch(adapter: Adapter, x: DenseMatrix) -> DenseMatrix:
    """The unscaled branch output (d_out x batch) for an already dropped-out x."""
    plan = adapter.plan
    if x.rows != plan.d_in:
        raise ShapeError(
            "adapter expects %d input rows, got input of shape %s" % (plan.d_in, x.shape)
        )
    if plan.kind is AdapterKind.KRONLORA:
        return unfold_columns(kron_lora_chain(adapter, x).y3_all, plan.d_A2)
    if plan.kind is AdapterKind.KRONA:
        return unfold_columns(krona_chain(adapter, x)[2], plan.d_A2)
    return matmul(adapter.up, matmul(adapter.down, x))


def check_layer(adapter: Adapter, layer: FrozenLinear, x: DenseMatrix) -> None:
    plan = adapter.plan
    if (layer.d_out, layer.d_in) != (plan.d_out, plan.d_in):
        raise ShapeError(
            "frozen layer %s does not match plan (%d, %d)"
            % (layer.weight.shape, plan.d_out, plan.d_in)
        )
    if x.rows != plan.d_in:
        raise ShapeError("input %s has %d rows, expected d_in=%d"
                         % (x.shape, x.rows, plan.d_in))


def check_dropout(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout_p must be in [0, 1), got %r" % (p,))


def dropout_mask(rows: int, cols: int, p: float, rng: Rng) -> DenseMatrix:
    """Inverted dropout mask: 0 with probability p, else 1/(1-p)."""
    keep = 1.0 / (1.0 - p)
    uniform = rng.uniform
    return DenseMatrix(rows, cols, [0.0 if uniform() < p else keep for _ in range(rows * cols)])


def forward(
    adapter: Adapter, layer: FrozenLinear, x: DenseMatrix, rng: Rng | None = None
) -> DenseMatrix:
    """
    Adapted layer output W·x + bias + scale · branch(x̃), d_out x batch.

    In training mode with dropout_p > 0, ``rng`` draws the dropout mask and the
    mask is cached on the adapter for the following backward.
    """
    plan = adapter.plan
    check_dropout(plan.dropout_p)
    check_layer(adapter, layer, x)

    x_branch = x
    if adapter.training_mode:
        mask = None
        if plan.dropout_p > 0.0:
            if rng is None:
                raise StateError("training-mode forward with dropout needs an rng")
            mask = dropout_mask(x.rows, x.cols, plan.dropout_p, rng)
            x_branch = x.hadamard(mask)
        adapter._mask = mask

    out = frozen_forward(layer, x)
    return out.add(adapter_branch(adapter, x_branch).scale(plan.scale))
