"""
AdamW training of adapters on toy tasks, and the two-task sequential
fine-tuning protocol that measures forgetting on the first task.
"""

import dataclasses
import logging
import math
import os

from . import ConfigError, DivergenceError, ShapeError
from . import checkpoint
from .adapters import affine, forward, init_adapter, set_training, trainable_parameters
from .autograd import LossKind, LossSpec, backward, loss_value_and_grad
from .linalg import DenseMatrix, Rng, matmul
from .reports import (
    ComparisonArm,
    ComparisonReport,
    EpochRecord,
    SequentialRunReport,
    TrainReport,
)

logger = logging.getLogger(__name__)

SCHEDULES = ("linear", "constant")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings for one training phase.

    ``dropout`` switches training mode, and with it the plan's dropout, on for
    the optimization steps. Evaluation always runs in eval mode.
    """

    epochs: int = 1
    lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0
    dropout: bool = True
    restore_best: bool = True
    schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1, got %r" % (self.epochs,))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1, got %r" % (self.batch_size,))
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0, got %r" % (self.lr,))
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0, got %r" % (self.weight_decay,))
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("%s must be in [0, 1), got %r" % (name, getattr(self, name)))
        if not self.eps > 0:
            raise ConfigError("eps must be positive, got %r" % (self.eps,))
        if self.schedule not in SCHEDULES:
            raise ConfigError(
                "schedule must be one of %s, got %r" % (", ".join(SCHEDULES), self.schedule)
            )


@dataclasses.dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name; ``lr`` is the current step's rate."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first: dict = dataclasses.field(default_factory=dict)
    second: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg):
        return cls(
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )


def linear_schedule(step, total_steps, base_lr):
    """Linear decay from ``base_lr`` at step 0 to 0 at ``total_steps``, no warmup."""
    if total_steps <= 0:
        raise ConfigError("linear_schedule needs total_steps >= 1, got %r" % (total_steps,))
    if not 0 <= step <= total_steps:
        raise ValueError("step %r outside [0, %d]" % (step, total_steps))
    return base_lr * (1.0 - step / total_steps)


def adamw_step(params, grads, state):
    """
    One AdamW update of ``params`` in place.

    Weight decay is decoupled: θ ← θ − lr·wd·θ first, then the bias-corrected
    Adam step θ ← θ − lr·m̂/(√v̂ + eps).

    Args:
        params: ordered (name, DenseMatrix) pairs
        grads: GradientSet or mapping with an entry for every name
        state: OptimizerState; ``state.lr`` is used as this step's rate

    Returns:
        (params, state)
    """
    state.step_count += 1
    t = state.step_count
    lr, b1, b2, eps = state.lr, state.beta1, state.beta2, state.eps
    decay = lr * state.weight_decay
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, param in params:
        try:
            grad = grads[name]
        except KeyError:
            raise ShapeError("no gradient for parameter %r" % name) from None
        if grad.shape != param.shape:
            raise ShapeError(
                "gradient for %s has shape %s, parameter has %s"
                % (name, grad.shape, param.shape)
            )
        m = state.first.setdefault(name, DenseMatrix(param.rows, param.cols)).data
        v = state.second.setdefault(name, DenseMatrix(param.rows, param.cols)).data
        p, g = param.data, grad.data
        for i in range(len(p)):
            gi = g[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
            theta = p[i] - decay * p[i]
            p[i] = theta - lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)
    return params, state


@dataclasses.dataclass
class LinearHead:
    """Fully trained classifier on top of the adapted layer."""

    weight: DenseMatrix
    bias: DenseMatrix


def init_head(n_classes, d_features, rng):
    return LinearHead(
        DenseMatrix.randn(n_classes, d_features, rng, 1.0 / math.sqrt(d_features)),
        DenseMatrix(n_classes, 1),
    )


@dataclasses.dataclass
class ToyModel:
    """Frozen layer plus adapter, optionally followed by a linear head."""

    layer: object
    adapter: object
    head: LinearHead = None

    def parameters(self):
        params = trainable_parameters(self.adapter)
        if self.head is not None:
            params += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return params

    def forward(self, x, rng=None):
        features = forward(self.adapter, self.layer, x, rng)
        if self.head is None:
            return features
        return affine(self.head.weight, self.head.bias, features)

    def loss_and_grad(self, x, loss, rng=None):
        features = forward(self.adapter, self.layer, x, rng)
        if self.head is None:
            value, upstream = loss_value_and_grad(features, loss)
            grads = backward(self.adapter, self.layer, x, upstream)
        else:
            logits = affine(self.head.weight, self.head.bias, features)
            value, g_logits = loss_value_and_grad(logits, loss)
            grads = backward(
                self.adapter, self.layer, x, matmul(self.head.weight.T, g_logits)
            )
            grads.grads["head.weight"] = matmul(g_logits, features.T)
            grads.grads["head.bias"] = DenseMatrix(
                g_logits.rows,
                1,
                [math.fsum(g_logits.row(i)) for i in range(g_logits.rows)],
            )
        grads.loss_value = value
        return grads


@dataclasses.dataclass(frozen=True)
class Evaluation:
    loss: float
    accuracy: float = None


def accuracy(logits, targets):
    """Fraction of columns whose argmax matches the target argmax."""
    hits = 0
    for j in range(logits.cols):
        column, target = logits.column(j), targets.column(j)
        hits += column.index(max(column)) == target.index(max(target))
    return hits / logits.cols


def loss_kind_for(task):
    return LossKind.SOFTMAX_CE if task.is_classification else LossKind.MSE


def evaluate(model, split, loss_kind):
    """Eval-mode loss on ``split``, plus accuracy for classification."""
    was_training = model.adapter.training_mode
    set_training(model.adapter, False)
    try:
        output = model.forward(split.inputs)
    finally:
        set_training(model.adapter, was_training)
    value, _ = loss_value_and_grad(output, LossSpec(loss_kind, split.targets))
    if loss_kind is LossKind.SOFTMAX_CE:
        return Evaluation(value, accuracy(output, split.targets))
    return Evaluation(value)


def _streams(seed):
    """Independent (batch order, dropout, head init) streams for one phase."""
    rng = Rng(seed)
    return rng.split(), rng.split(), rng.split()


def _check_task(model, task):
    if task.d_in != model.layer.d_in:
        raise ConfigError(
            "task has d_in=%d but the layer expects %d" % (task.d_in, model.layer.d_in)
        )
    if task.is_classification:
        if model.head is None:
            raise ConfigError("classification tasks need a model head")
        if model.head.weight.rows != task.n_classes:
            raise ConfigError(
                "head predicts %d classes, task has %d"
                % (model.head.weight.rows, task.n_classes)
            )
    elif task.n_outputs != model.layer.d_out or model.head is not None:
        raise ConfigError(
            "regression task with %d outputs needs a headless model with d_out=%d"
            % (task.n_outputs, model.layer.d_out)
        )


def _snapshot(model):
    head = None
    if model.head is not None:
        head = (model.head.weight.copy(), model.head.bias.copy())
    return checkpoint.dumps(model.adapter), head


def _restore(model, snapshot):
    data, head = snapshot
    checkpoint.restore_into(model.adapter, data)
    if head is not None:
        model.head.weight.assign(head[0])
        model.head.bias.assign(head[1])


def _is_better(evaluation, best):
    if best is None:
        return True
    if evaluation.accuracy is not None:
        return evaluation.accuracy > best.accuracy
    return evaluation.loss < best.loss


def train_model(model, task, cfg, checkpoint_dir=None, label=""):
    """
    Train ``model`` on ``task`` in place and report per-epoch progress.

    Every epoch is one shuffled pass in mini-batches of ``cfg.batch_size`` with
    one AdamW step per batch. The best epoch, by validation accuracy for
    classification or validation loss for regression, is kept as an in-memory
    checkpoint and also written to ``checkpoint_dir`` when given; with
    ``cfg.restore_best`` it is restored at the end.

    Raises:
        DivergenceError: a training loss was NaN or infinite
    """
    _check_task(model, task)
    loss_kind = loss_kind_for(task)
    order_rng, dropout_rng, _ = _streams(cfg.seed)
    params = model.parameters()
    state = OptimizerState.from_config(cfg)
    n = len(task.train)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    initial = evaluate(model, task.val, loss_kind)
    logger.info(
        "%straining %s on %s: %d steps, initial val loss %.6g",
        label, model.adapter.plan.kind.name, task.kind.name, total_steps, initial.loss,
    )
    records, best, best_eval, best_epoch, step = [], None, None, 0, 0
    for epoch in range(1, cfg.epochs + 1):
        order = list(range(n))
        order_rng.shuffle(order)
        set_training(model.adapter, cfg.dropout)
        losses = []
        try:
            for start in range(0, n, cfg.batch_size):
                batch = task.train.select(order[start : start + cfg.batch_size])
                if cfg.schedule == "linear":
                    state.lr = linear_schedule(step, total_steps, cfg.lr)
                loss = LossSpec(loss_kind, batch.targets)
                try:
                    grads = model.loss_and_grad(batch.inputs, loss, dropout_rng)
                except OverflowError as exc:
                    raise DivergenceError(
                        "loss overflowed at epoch %d step %d: %s" % (epoch, step, exc)
                    ) from exc
                if not math.isfinite(grads.loss_value):
                    raise DivergenceError(
                        "loss diverged at epoch %d step %d: %r"
                        % (epoch, step, grads.loss_value)
                    )
                adamw_step(params, grads, state)
                losses.append(grads.loss_value)
                logger.debug("step %d lr %.3g loss %.6g", step, state.lr, grads.loss_value)
                step += 1
        finally:
            set_training(model.adapter, False)

        current = evaluate(model, task.val, loss_kind)
        records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=math.fsum(losses) / len(losses),
                val_loss=current.loss,
                val_accuracy=current.accuracy,
                learning_rate=state.lr,
            )
        )
        logger.info(
            "%sepoch %d: train loss %.6g, val loss %.6g%s",
            label, epoch, records[-1].train_loss, current.loss,
            "" if current.accuracy is None else ", val accuracy %.4f" % current.accuracy,
        )
        if _is_better(current, best_eval):
            best, best_eval, best_epoch = _snapshot(model), current, epoch
            if checkpoint_dir is not None:
                path = checkpoint.checkpoint_path(checkpoint_dir, "epoch-%03d" % epoch)
                checkpoint.save(model.adapter, path)

    if cfg.restore_best and best_epoch != cfg.epochs:
        logger.info("%srestoring best epoch %d", label, best_epoch)
        _restore(model, best)

    final = evaluate(model, task.val, loss_kind)
    test = evaluate(model, task.test, loss_kind)
    return TrainReport(
        kind=model.adapter.plan.kind.name,
        task=task.kind.name,
        steps=total_steps,
        initial_val_loss=initial.loss,
        epochs=records,
        best_epoch=best_epoch,
        best_checkpoint="epoch-%03d" % best_epoch,
        restored_best=cfg.restore_best,
        final_val_loss=final.loss,
        final_val_accuracy=final.accuracy,
        test_loss=test.loss,
        test_accuracy=test.accuracy,
    )


def train(adapter, layer, task, cfg, head=None, checkpoint_dir=None):
    """
    Train ``adapter`` on top of the frozen ``layer``.

    Classification tasks get a fresh linear head from ``cfg.seed`` unless one
    is passed in.
    """
    if head is None and task.is_classification:
        head = init_head(task.n_classes, layer.d_out, _streams(cfg.seed)[2])
    return train_model(ToyModel(layer, adapter, head), task, cfg, checkpoint_dir)


def _check_pair(task1, task2):
    if not (task1.is_classification and task2.is_classification):
        raise ConfigError("the sequential protocol needs two classification tasks")
    if (task1.d_in, task1.n_classes) != (task2.d_in, task2.n_classes):
        raise ConfigError(
            "tasks differ in arity: d_in %d vs %d, classes %d vs %d"
            % (task1.d_in, task2.d_in, task1.n_classes, task2.n_classes)
        )


def _phase_dir(checkpoint_dir, name):
    if checkpoint_dir is None:
        return None
    path = os.path.join(checkpoint_dir, name)
    os.makedirs(path, exist_ok=True)
    return path


def run_sequential(
    adapter_factory,
    layer,
    task1,
    task2,
    cfg1,
    cfg2,
    continue_training=True,
    checkpoint_dir=None,
    order="T1->T2",
):
    """
    Train on task1, then keep training the same adapter and head on task2.

    Test accuracy on task1 is taken after each phase; ``delta_T1`` is the
    second minus the first. With ``continue_training=False`` task2 is learned
    by a fresh adapter and head instead, so task1 is never revisited and
    ``delta_T1`` is 0.

    Args:
        adapter_factory: zero-argument callable returning a new adapter
        layer: FrozenLinear shared by every phase
        task1, task2: classification tasks with the same d_in and classes
        cfg1, cfg2: TrainConfig for each phase
    """
    _check_pair(task1, task2)
    ce = LossKind.SOFTMAX_CE
    adapter = adapter_factory()
    model = ToyModel(layer, adapter, init_head(task1.n_classes, layer.d_out, _streams(cfg1.seed)[2]))
    phase1 = train_model(model, task1, cfg1, _phase_dir(checkpoint_dir, "phase1"), "T1 ")
    acc_11 = evaluate(model, task1.test, ce).accuracy

    if continue_training:
        second = model
    else:
        second = ToyModel(
            layer,
            adapter_factory(),
            init_head(task2.n_classes, layer.d_out, _streams(cfg2.seed)[2]),
        )
    phase2 = train_model(second, task2, cfg2, _phase_dir(checkpoint_dir, "phase2"), "T2 ")
    acc_22 = evaluate(second, task2.test, ce).accuracy
    acc_12 = evaluate(model, task1.test, ce).accuracy if continue_training else acc_11

    report = SequentialRunReport.from_accuracies(
        acc_11,
        acc_22,
        acc_12,
        kind=adapter.plan.kind.name,
        order=order,
        continued=continue_training,
        phase1=phase1,
        phase2=phase2,
    )
    logger.info(
        "%s %s: T1->T1 %.4f, T2->T2 %.4f, T2->T1 %.4f, delta_T1 %+.4f",
        report.kind, order, acc_11, acc_22, acc_12, report.delta_T1,
    )
    return report


def run_comparison(
    plans,
    layer,
    task1,
    task2,
    cfg1,
    cfg2,
    init_seed,
    reverse=False,
    continue_training=True,
    checkpoint_dir=None,
):
    """
    Run the sequential protocol for several adapter plans on the same tasks.

    Every arm initializes its adapter from ``init_seed``. With ``reverse`` each
    arm also runs task2 first and task1 second.
    """
    arms = []
    for plan in plans:

        def factory(plan=plan):
            return init_adapter(plan, Rng(init_seed))

        arm_dir = _phase_dir(checkpoint_dir, plan.kind.name.lower())
        forward_report = run_sequential(
            factory, layer, task1, task2, cfg1, cfg2, continue_training,
            _phase_dir(arm_dir, "forward"),
        )
        reverse_report = None
        if reverse:
            reverse_report = run_sequential(
                factory, layer, task2, task1, cfg1, cfg2, continue_training,
                _phase_dir(arm_dir, "reverse"), order="T2->T1",
            )
        arms.append(
            ComparisonArm(kind=plan.kind.name, forward=forward_report, reverse=reverse_report)
        )
    return ComparisonReport(arms=arms)
