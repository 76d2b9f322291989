"""
JSON report models emitted by the command-line tool.

Every report carries a RunManifest. The models double as the report schema:
``klora schema`` prints ``model_json_schema()`` for each of them.
"""

import datetime
import typing

from pydantic import BaseModel, Field, model_validator

from . import __version__

#: Wall-clock fields; everything else in a report is a function of the seed.
TIMING_FIELDS = frozenset(
    {
        "timestamp",
        "forward_seconds",
        "forward_backward_seconds",
        "forward_throughput",
        "forward_backward_throughput",
        "checkpoint_save_seconds",
        "throughput_ratio_vs_lora",
    }
)


class RunManifest(BaseModel):
    seed: int
    command: str
    config: dict = Field(default_factory=dict)
    version: str = __version__
    timestamp: str = ""

    @classmethod
    def create(cls, command, seed, config=None):
        now = datetime.datetime.now(datetime.timezone.utc)
        return cls(
            seed=seed,
            command=command,
            config=config or {},
            timestamp=now.isoformat(timespec="seconds"),
        )


class PlanRow(BaseModel):
    kind: str
    rank: typing.Optional[int] = None
    plan: dict
    param_count: int
    checkpoint_bytes: int
    lora_rank: int
    ratio_vs_lora: float
    note: typing.Optional[str] = None


class PlanReport(BaseModel):
    d_in: int
    d_out: int
    is_vocab_projection: bool = False
    rows: typing.List[PlanRow]
    manifest: RunManifest


class Timing(BaseModel):
    median: float
    min: float
    max: float


class BenchReport(BaseModel):
    """One adapter kind's timings.

    Throughputs count examples per second through the adapter branch. The
    workspace figures are an analytic proxy for intermediate memory: the
    transient floats the factored chain materializes for one batch.
    """

    kind: str
    d_in: int
    d_out: int
    r: int
    batch_size: int
    repeats: int
    warmup: int
    forward_throughput: float = Field(gt=0)
    forward_backward_throughput: float = Field(gt=0)
    forward_seconds: Timing
    forward_backward_seconds: Timing
    adapter_bytes: int
    workspace_floats: int
    workspace_bytes: int
    checkpoint_save_seconds: float
    throughput_ratio_vs_lora: typing.Optional[float] = None
    measured: str = "adapter branch"


class BenchSuiteReport(BaseModel):
    results: typing.List[BenchReport]
    reference_gpu_throughput: typing.Dict[str, float]
    manifest: RunManifest


class SuiteResult(BaseModel):
    name: str
    cases: int
    max_error: float
    threshold: float
    passed: bool
    failure: typing.Optional[dict] = None


class VerifyReport(BaseModel):
    passed: bool
    sabotage: bool = False
    suites: typing.List[SuiteResult]
    manifest: RunManifest


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: typing.Optional[float] = None
    learning_rate: float


class TrainReport(BaseModel):
    kind: str
    task: str
    steps: int
    initial_val_loss: float
    epochs: typing.List[EpochRecord]
    best_epoch: int
    best_checkpoint: str
    restored_best: bool
    final_val_loss: float
    final_val_accuracy: typing.Optional[float] = None
    test_loss: float
    test_accuracy: typing.Optional[float] = None
    manifest: typing.Optional[RunManifest] = None


class SequentialRunReport(BaseModel):
    """Two-task schedule result; ``delta_T1`` is acc_T1_after_T2 - acc_T1_after_T1."""

    kind: typing.Optional[str] = None
    order: str = "T1->T2"
    continued: bool = True
    acc_T1_after_T1: float = Field(ge=0.0, le=1.0)
    acc_T2_after_T2: float = Field(ge=0.0, le=1.0)
    acc_T1_after_T2: float = Field(ge=0.0, le=1.0)
    delta_T1: float
    phase1: typing.Optional[TrainReport] = None
    phase2: typing.Optional[TrainReport] = None

    @model_validator(mode="after")
    def _check_delta(self):
        expected = self.acc_T1_after_T2 - self.acc_T1_after_T1
        if self.delta_T1 != expected:
            raise ValueError(
                "delta_T1=%r but acc_T1_after_T2 - acc_T1_after_T1 = %r"
                % (self.delta_T1, expected)
            )
        return self

    @classmethod
    def from_accuracies(cls, acc_T1_after_T1, acc_T2_after_T2, acc_T1_after_T2, **kwargs):
        return cls(
            acc_T1_after_T1=acc_T1_after_T1,
            acc_T2_after_T2=acc_T2_after_T2,
            acc_T1_after_T2=acc_T1_after_T2,
            delta_T1=acc_T1_after_T2 - acc_T1_after_T1,
            **kwargs
        )


class ComparisonArm(BaseModel):
    kind: str
    forward: SequentialRunReport
    reverse: typing.Optional[SequentialRunReport] = None


class ComparisonReport(BaseModel):
    arms: typing.List[ComparisonArm]
    manifest: typing.Optional[RunManifest] = None


class TrainRunReport(BaseModel):
    """``klora train`` output."""

    train: TrainReport
    checkpoint: typing.Optional[str] = None
    checkpoint_bytes: typing.Optional[int] = None
    manifest: RunManifest


REPORT_MODELS = (
    PlanReport,
    BenchSuiteReport,
    VerifyReport,
    TrainRunReport,
    ComparisonReport,
)


def report_schemas():
    """JSON Schema of every top-level report, keyed by model name."""
    return {model.__name__: model.model_json_schema() for model in REPORT_MODELS}


def strip_timing(value):
    """Copy of a report dict with wall-clock fields removed, recursively."""
    if isinstance(value, dict):
        return {
            k: strip_timing(v) for k, v in value.items() if k not in TIMING_FIELDS
        }
    if isinstance(value, list):
        return [strip_timing(v) for v in value]
    return value
