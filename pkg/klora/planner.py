"""
Adapter shape planning and parameter-budget accounting.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math

from . import PlanningError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 32.0
DEFAULT_DROPOUT = 0.1
DEFAULT_TARGET_SLICE = 200


class AdapterKind(enum.Enum):
    """Enumeration of adapter families. Values are the checkpoint kind codes."""

    LORA = 1
    KRONA = 2
    KRONLORA = 3


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    d_in: int
    d_out: int
    is_vocab_projection: bool = False

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1:
            raise PlanningError(
                "layer dimensions must be >= 1, got d_in=%s d_out=%s"
                % (self.d_in, self.d_out)
            )


@dataclasses.dataclass(frozen=True)
class AdapterPlan:
    """Resolved shapes for one adapted layer.

    A is d_A2 x d_A1 and B (or B1·B2) is d_B2 x d_B1, so that
    d_A1 * d_B1 == d_in and d_A2 * d_B2 == d_out. LoRA plans leave the
    Kronecker fields at 0; KronA plans have r == 0.
    """

    kind: AdapterKind
    d_in: int
    d_out: int
    d_A1: int = 0
    d_A2: int = 0
    d_B1: int = 0
    d_B2: int = 0
    r: int = 0
    alpha: float = DEFAULT_ALPHA
    dropout_p: float = DEFAULT_DROPOUT
    prime_fallback: bool = False

    def __post_init__(self):
        validate_plan(self)

    @property
    def scale(self) -> float:
        """Output scaling of the adapter branch: alpha/r, or alpha for KronA."""
        if self.kind is AdapterKind.KRONA:
            return self.alpha
        return self.alpha / self.r

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.name
        return d


def validate_plan(plan: AdapterPlan) -> None:
    """Raise PlanningError unless the plan's shape invariants hold."""
    if plan.d_in < 1 or plan.d_out < 1:
        raise PlanningError("plan dimensions must be >= 1: %r" % (plan,))
    if not plan.alpha > 0:
        raise PlanningError("alpha must be positive, got %r" % plan.alpha)
    if plan.kind is AdapterKind.LORA:
        if plan.r < 1:
            raise PlanningError("LoRA rank must be >= 1, got %d" % plan.r)
        if plan.d_A1 or plan.d_A2 or plan.d_B1 or plan.d_B2:
            raise PlanningError("LoRA plans must leave d_A*/d_B* at 0")
        return
    if min(plan.d_A1, plan.d_A2, plan.d_B1, plan.d_B2) < 1:
        raise PlanningError("Kronecker factor dimensions must be >= 1: %r" % (plan,))
    if plan.d_A1 * plan.d_B1 != plan.d_in:
        raise PlanningError(
            "d_A1 * d_B1 = %d * %d != d_in = %d"
            % (plan.d_A1, plan.d_B1, plan.d_in)
        )
    if plan.d_A2 * plan.d_B2 != plan.d_out:
        raise PlanningError(
            "d_A2 * d_B2 = %d * %d != d_out = %d"
            % (plan.d_A2, plan.d_B2, plan.d_out)
        )
    if plan.kind is AdapterKind.KRONLORA and plan.r < 1:
        raise PlanningError("Kron-LoRA rank must be >= 1, got %d" % plan.r)
    if plan.kind is AdapterKind.KRONA and plan.r != 0:
        raise PlanningError("KronA plans have no rank; got r=%d" % plan.r)


def divisors(n: int) -> list[int]:
    """All positive divisors of n in ascending order."""
    if n < 1:
        raise PlanningError("divisors: %r is not a positive integer" % n)
    small, large = [], []
    for d in range(1, math.isqrt(n) + 1):
        if n % d == 0:
            small.append(d)
            if d != n // d:
                large.append(n // d)
    return small + large[::-1]


# min() keeps the first minimum and divisors() is ascending, so ties go to the
# smaller divisor.
def _nearest_divisor(n, target):
    return min(divisors(n), key=lambda d: abs(d - target))


def _slice_divisor(d_out, target_slice):
    return min(divisors(d_out), key=lambda d: abs(d_out / d - target_slice))


def plan_lora(
    layer: LayerSpec,
    r: int,
    alpha: float = DEFAULT_ALPHA,
    dropout_p: float = DEFAULT_DROPOUT,
) -> AdapterPlan:
    return AdapterPlan(
        kind=AdapterKind.LORA,
        d_in=layer.d_in,
        d_out=layer.d_out,
        r=r,
        alpha=alpha,
        dropout_p=dropout_p,
    )


def plan_kron_lora(
    layer: LayerSpec,
    r: int,
    target_slice: int = DEFAULT_TARGET_SLICE,
    d_A2: int | None = None,
    alpha: float = DEFAULT_ALPHA,
    dropout_p: float = DEFAULT_DROPOUT,
) -> AdapterPlan:
    """
    Plan a Kron-LoRA adapter.

    Non-vocabulary layers use d_A1 = 2 and the divisor d_A2 of d_out whose
    slice d_out/d_A2 is closest to ``target_slice``. The vocabulary projection
    uses d_A1 = 1 and half of that d_A2, rounded to the nearest divisor.

    Args:
        layer: LayerSpec of the frozen layer
        r: rank of the B1·B2 factorization
        target_slice: desired slice size d_B2
        d_A2: explicit non-vocabulary d_A2, overriding ``target_slice``

    Returns:
        AdapterPlan: plan of kind KRONLORA
    """
    if r < 1:
        raise PlanningError("Kron-LoRA rank must be >= 1, got %r" % r)
    if target_slice < 1:
        raise PlanningError("target_slice must be >= 1, got %r" % target_slice)

    if d_A2 is None:
        d_A2 = _slice_divisor(layer.d_out, target_slice)
    elif d_A2 < 1 or layer.d_out % d_A2:
        raise PlanningError("d_A2=%r does not divide d_out=%d" % (d_A2, layer.d_out))

    if layer.is_vocab_projection:
        d_A1 = 1
        half = d_A2 / 2.0
        d_A2 = _nearest_divisor(layer.d_out, half)
        if d_A2 != half:
            logger.warning(
                "vocab d_A2 %.1f is not a divisor of %d; rounded to %d",
                half, layer.d_out, d_A2,
            )
    else:
        d_A1 = 2
        if layer.d_in % 2:
            raise PlanningError(
                "d_in=%d is odd but d_A1=2 is required; set is_vocab_projection "
                "or pad the layer to an even width" % layer.d_in
            )

    return AdapterPlan(
        kind=AdapterKind.KRONLORA,
        d_in=layer.d_in,
        d_out=layer.d_out,
        d_A1=d_A1,
        d_A2=d_A2,
        d_B1=layer.d_in // d_A1,
        d_B2=layer.d_out // d_A2,
        r=r,
        alpha=alpha,
        dropout_p=dropout_p,
    )


def is_trivial_split(dim: int, d_A: int) -> bool:
    """True when d_A splits dim only as 1 x dim (a prime, or a bad choice)."""
    return dim > 1 and d_A in (1, dim)


def _sqrt_divisor(n):
    return _nearest_divisor(n, math.sqrt(n))


def plan_krona(
    layer: LayerSpec,
    alpha: float = DEFAULT_ALPHA,
    dropout_p: float = DEFAULT_DROPOUT,
) -> AdapterPlan:
    """Plan a KronA adapter with factors closest to the square roots of d_in, d_out.

    A prime dimension falls back to a 1 x d split and sets ``prime_fallback``.
    """
    d_A1, d_A2 = _sqrt_divisor(layer.d_in), _sqrt_divisor(layer.d_out)
    prime_fallback = False
    for dim, d_A in ((layer.d_in, d_A1), (layer.d_out, d_A2)):
        if is_trivial_split(dim, d_A):
            logger.warning("dimension %d has no nontrivial factorization", dim)
            prime_fallback = True
    return AdapterPlan(
        kind=AdapterKind.KRONA,
        d_in=layer.d_in,
        d_out=layer.d_out,
        d_A1=d_A1,
        d_A2=d_A2,
        d_B1=layer.d_in // d_A1,
        d_B2=layer.d_out // d_A2,
        r=0,
        alpha=alpha,
        dropout_p=dropout_p,
        prime_fallback=prime_fallback,
    )


def param_count(plan: AdapterPlan) -> int:
    """Number of trainable adapter parameters."""
    if plan.kind is AdapterKind.KRONLORA:
        return plan.d_A1 * plan.d_A2 + plan.r * (plan.d_B2 + plan.d_B1)
    if plan.kind is AdapterKind.KRONA:
        return plan.d_A1 * plan.d_A2 + plan.d_B1 * plan.d_B2
    return plan.r * (plan.d_in + plan.d_out)


def lora_ratio(plan: AdapterPlan, r: int = 8) -> float:
    """Parameter count of a rank-r LoRA on the same layer divided by the plan's."""
    return r * (plan.d_in + plan.d_out) / param_count(plan)


def plan_for(
    kind: AdapterKind | str,
    layer: LayerSpec,
    r: int = 8,
    target_slice: int = DEFAULT_TARGET_SLICE,
    d_A2: int | None = None,
    alpha: float = DEFAULT_ALPHA,
    dropout_p: float = DEFAULT_DROPOUT,
) -> AdapterPlan:
    """Dispatch to the planner for ``kind``."""
    kind = AdapterKind[kind] if isinstance(kind, str) else kind
    if kind is AdapterKind.LORA:
        return plan_lora(layer, r, alpha=alpha, dropout_p=dropout_p)
    if kind is AdapterKind.KRONA:
        return plan_krona(layer, alpha=alpha, dropout_p=dropout_p)
    return plan_kron_lora(layer, r, target_slice=target_slice, d_A2=d_A2,
                          alpha=alpha, dropout_p=dropout_p)
