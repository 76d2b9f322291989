"""
Self-verification suites run by ``klora verify``.

oracle
    Eval-mode forward minus the frozen output against the dense update
    expand_delta(adapter)·x, for random plans of every kind.
rank
    numerical_rank(A ⊗ B) == numerical_rank(A) · numerical_rank(B) for random,
    partly rank-deficient, factors.
gradient
    Analytic backward against central finite differences for every adapter
    kind and loss.

Every case draws from its own seed, which is recorded with a failing case so
it can be replayed with ``replay_case``.
"""

import dataclasses
import logging

from .adapters import (
    expand_delta,
    frozen_forward,
    forward,
    init_adapter,
    make_frozen_linear,
    randomize_adapter,
)
from .autograd import LossKind, LossSpec, gradient_check
from .linalg import (
    DenseMatrix,
    Rng,
    kron,
    matmul,
    numerical_rank,
    row_major_vec,
)
from .planner import AdapterKind, AdapterPlan, divisors
from .reports import SuiteResult

logger = logging.getLogger(__name__)

ORACLE_THRESHOLD = 1e-9
RANK_THRESHOLD = 0.0
GRADIENT_THRESHOLD = 1e-5
FINITE_DIFFERENCE_STEP = 1e-5

#: Kron kinds first so that even one trial exercises the reshape layout.
KIND_ORDER = (AdapterKind.KRONLORA, AdapterKind.KRONA, AdapterKind.LORA)


def _proper_divisor(n, rng):
    """A random divisor of n other than 1 and n, or 1 when n is prime."""
    inner = divisors(n)[1:-1]
    return rng.choice(inner) if inner else 1


def random_plan(kind, rng, min_dim=4, max_dim=256, max_rank=8, alpha=None):
    """A random valid plan; Kron kinds get nontrivial d_A1 and d_A2 when possible."""
    d_in = rng.randint(min_dim, max_dim)
    d_out = rng.randint(min_dim, max_dim)
    r = rng.randint(1, max_rank)
    if kind is AdapterKind.LORA:
        return AdapterPlan(kind, d_in, d_out, r=r, alpha=alpha or 32.0)
    if kind is AdapterKind.KRONLORA:
        d_in += d_in % 2
    d_A1, d_A2 = _proper_divisor(d_in, rng), _proper_divisor(d_out, rng)
    return AdapterPlan(
        kind,
        d_in,
        d_out,
        d_A1=d_A1,
        d_A2=d_A2,
        d_B1=d_in // d_A1,
        d_B2=d_out // d_A2,
        r=r if kind is AdapterKind.KRONLORA else 0,
        alpha=alpha or 32.0,
    )


def oracle_error(adapter, layer, x):
    """
    Largest deviation of the adapter part of the eval-mode forward from
    expand_delta(adapter)·x, relative to the largest entry of the latter.
    """
    delta_x = forward(adapter, layer, x).sub(frozen_forward(layer, x))
    expected = matmul(expand_delta(adapter), x)
    return delta_x.sub(expected).max_abs() / max(expected.max_abs(), 1e-300)


def oracle_case(kind, seed, max_dim=256):
    """Relative error between the factored forward and the dense oracle."""
    rng = Rng(seed)
    plan = random_plan(kind, rng, max_dim=max_dim)
    layer = make_frozen_linear(plan.d_out, plan.d_in, rng)
    adapter = randomize_adapter(init_adapter(plan, rng), rng, std=1.0)
    x = DenseMatrix.randn(plan.d_in, rng.randint(1, 4), rng)
    return plan, oracle_error(adapter, layer, x)


def _random_rank_matrix(rng, max_dim):
    rows, cols = rng.randint(1, max_dim), rng.randint(1, max_dim)
    inner = rng.randint(1, min(rows, cols))
    return matmul(DenseMatrix.randn(rows, inner, rng), DenseMatrix.randn(inner, cols, rng))


def rank_case(seed, max_dim=8):
    """Absolute difference between rank(A ⊗ B) and rank(A)·rank(B)."""
    rng = Rng(seed)
    a = _random_rank_matrix(rng, max_dim)
    b = _random_rank_matrix(rng, max_dim)
    expected = numerical_rank(a) * numerical_rank(b)
    found = numerical_rank(kron(a, b))
    return {"A": a.shape, "B": b.shape, "rank": found, "expected": expected}, abs(
        found - expected
    )


def gradient_case(kind, loss_kind, seed):
    """Largest per-parameter relative error of the analytic gradients."""
    rng = Rng(seed)
    plan = random_plan(kind, rng, min_dim=2, max_dim=12, max_rank=3)
    # scale 1 keeps logits O(1) for the finite differences
    plan = dataclasses.replace(plan, alpha=1.0 if kind is AdapterKind.KRONA else float(plan.r))
    layer = make_frozen_linear(plan.d_out, plan.d_in, rng)
    adapter = randomize_adapter(init_adapter(plan, rng), rng, std=0.5)
    batch = rng.randint(1, 3)
    x = DenseMatrix.randn(plan.d_in, batch, rng)
    if loss_kind is LossKind.MSE:
        targets = DenseMatrix.randn(plan.d_out, batch, rng)
    else:
        targets = DenseMatrix(plan.d_out, batch)
        for j in range(batch):
            targets[rng.randint(0, plan.d_out - 1), j] = 1.0
    errors = gradient_check(
        adapter, layer, x, LossSpec(loss_kind, targets), FINITE_DIFFERENCE_STEP
    )
    return plan, errors


def _suite(name, cases, threshold):
    """Fold (error, failure detail) pairs into a SuiteResult."""
    max_error, failure, count = 0.0, None, 0
    for error, detail in cases:
        count += 1
        if error > max_error:
            max_error = error
        if error > threshold and failure is None:
            failure = dict(detail, error=error)
            logger.warning("%s suite: case failed: %s", name, failure)
    result = SuiteResult(
        name=name,
        cases=count,
        max_error=max_error,
        threshold=threshold,
        passed=failure is None,
        failure=failure,
    )
    logger.info("%s suite: %d cases, max error %.3e", name, count, max_error)
    return result


def oracle_suite(seed, trials, max_dim=256):
    master = Rng(seed)

    def cases():
        for trial in range(trials):
            kind = KIND_ORDER[trial % len(KIND_ORDER)]
            case_seed = master.next_u64()
            plan, error = oracle_case(kind, case_seed, max_dim)
            logger.debug("oracle %s %s: %.3e", kind.name, plan, error)
            yield error, {
                "suite": "oracle",
                "seed": case_seed,
                "max_dim": max_dim,
                "plan": plan.as_dict(),
            }

    return _suite("oracle", cases(), ORACLE_THRESHOLD)


def rank_suite(seed, pairs=100):
    master = Rng(seed).split()

    def cases():
        for _ in range(pairs):
            case_seed = master.next_u64()
            detail, error = rank_case(case_seed)
            yield float(error), dict(detail, suite="rank", seed=case_seed)

    return _suite("rank", cases(), RANK_THRESHOLD)


def gradient_suite(seed, per_kind):
    master = Rng(seed).split().split()

    def cases():
        for kind in KIND_ORDER:
            for loss_kind in LossKind:
                for _ in range(per_kind):
                    case_seed = master.next_u64()
                    plan, errors = gradient_case(kind, loss_kind, case_seed)
                    worst = max(errors, key=errors.get)
                    yield errors[worst], {
                        "suite": "gradient",
                        "seed": case_seed,
                        "loss": loss_kind.name,
                        "parameter": worst,
                        "plan": plan.as_dict(),
                    }

    return _suite("gradient", cases(), GRADIENT_THRESHOLD)


def run_suites(seed, trials, sabotage=False, max_dim=256):
    """
    Run every suite and return their SuiteResults.

    ``sabotage`` runs the oracle suite with row-major vec/unvec, which the
    suite must detect.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1, got %r" % (trials,))
    if sabotage:
        logger.warning("sabotage: vec/unvec switched to row-major for the oracle suite")
        with row_major_vec():
            oracle = oracle_suite(seed, trials, max_dim)
    else:
        oracle = oracle_suite(seed, trials, max_dim)
    return [
        oracle,
        rank_suite(seed),
        gradient_suite(seed, max(1, trials // 4)),
    ]


def replay_case(failure):
    """Recompute the error of a failure record emitted by a suite."""
    suite, seed = failure["suite"], failure["seed"]
    if suite == "rank":
        return float(rank_case(seed)[1])
    kind = AdapterKind[failure["plan"]["kind"]]
    if suite == "oracle":
        return oracle_case(kind, seed, failure["max_dim"])[1]
    return gradient_case(kind, LossKind[failure["loss"]], seed)[1][failure["parameter"]]

