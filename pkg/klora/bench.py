"""
Wall-clock microbenchmarks of the adapter branches.

The frozen product W·x costs the same for every adapter kind, so only the
branch is timed: forward, and forward plus backward. Memory is reported
analytically as the transient floats of the factored chain.
"""

import io
import logging
import statistics
import time

from . import ConfigError
from . import checkpoint
from .adapters import adapter_branch, init_adapter, randomize_adapter
from .autograd import branch_backward
from .linalg import DenseMatrix, Rng
from .planner import AdapterKind
from .reports import BenchReport, Timing

logger = logging.getLogger(__name__)

#: Examples/second on GPU for a 4096-wide model, for side-by-side reporting.
REFERENCE_GPU_THROUGHPUT = {"LORA": 29.28, "KRONLORA": 27.04}


def workspace_floats(plan, batch):
    """Transient floats one batch materializes in the factored chain.

    Kron-LoRA holds Y1 (r x d_A1), Y2 (r x d_A2) and Y3 (d_B2 x d_A2) per
    example, KronA holds B·X (d_B2 x d_A1) and its product with Aᵀ, and LoRA
    holds the r-dimensional bottleneck.
    """
    if plan.kind is AdapterKind.KRONLORA:
        per_example = plan.r * plan.d_A1 + plan.r * plan.d_A2 + plan.d_B2 * plan.d_A2
    elif plan.kind is AdapterKind.KRONA:
        per_example = plan.d_B2 * plan.d_A1 + plan.d_B2 * plan.d_A2
    else:
        per_example = plan.r
    return batch * per_example


def time_call(fn, repeats, warmup):
    """Median, min and max seconds of ``repeats`` calls after ``warmup`` calls."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return Timing(median=statistics.median(samples), min=min(samples), max=max(samples))


def bench_plan(plan, batch=8, repeats=5, warmup=1, seed=0):
    """
    Time one adapter kind.

    Args:
        plan: AdapterPlan to benchmark
        batch: examples per call
        repeats: timed calls, at least 3
        warmup: untimed calls before timing

    Returns:
        BenchReport
    """
    if repeats < 3:
        raise ConfigError("bench needs repeats >= 3, got %r" % (repeats,))
    if warmup < 0 or batch < 1:
        raise ConfigError("bench needs warmup >= 0 and batch >= 1")
    rng = Rng(seed)
    adapter = randomize_adapter(init_adapter(plan, rng), rng, std=0.01)
    x = DenseMatrix.randn(plan.d_in, batch, rng)
    upstream = DenseMatrix.randn(plan.d_out, batch, rng)

    def run_forward():
        return adapter_branch(adapter, x)

    # branch_backward runs the forward chain itself.
    def run_forward_backward():
        return branch_backward(adapter, x, upstream)

    forward_time = time_call(run_forward, repeats, warmup)
    forward_backward_time = time_call(run_forward_backward, repeats, warmup)

    sizes = []

    def run_save():
        buffer = io.BytesIO()
        sizes.append(checkpoint.save(adapter, buffer))

    save_time = time_call(run_save, repeats, 0)
    floats = workspace_floats(plan, batch)
    report = BenchReport(
        kind=plan.kind.name,
        d_in=plan.d_in,
        d_out=plan.d_out,
        r=plan.r,
        batch_size=batch,
        repeats=repeats,
        warmup=warmup,
        forward_throughput=batch / max(forward_time.median, 1e-9),
        forward_backward_throughput=batch / max(forward_backward_time.median, 1e-9),
        forward_seconds=forward_time,
        forward_backward_seconds=forward_backward_time,
        adapter_bytes=sizes[-1],
        workspace_floats=floats,
        workspace_bytes=8 * floats,
        checkpoint_save_seconds=save_time.median,
    )
    logger.info(
        "%s: forward %.1f ex/s, forward+backward %.1f ex/s, %d checkpoint bytes",
        report.kind, report.forward_throughput, report.forward_backward_throughput,
        report.adapter_bytes,
    )
    return report


def bench_plans(plans, batch=8, repeats=5, warmup=1, seed=0):
    """Benchmark several plans and fill in each one's throughput ratio to LoRA."""
    reports = [bench_plan(plan, batch, repeats, warmup, seed) for plan in plans]
    lora = [r for r in reports if r.kind == AdapterKind.LORA.name]
    if lora:
        baseline = lora[0].forward_backward_throughput
        for report in reports:
            report.throughput_ratio_vs_lora = report.forward_backward_throughput / baseline
    return reports
