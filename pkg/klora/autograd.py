"""
Hand-derived reverse-mode gradients for the adapter branches, losses, and a
central finite-difference oracle to check them against.
"""

import array
import dataclasses
import enum
import logging
import math

from . import ShapeError
from .adapters import (
    check_layer,
    forward,
    kron_lora_chain,
    krona_chain,
    set_training,
    trainable_parameters,
)
from .linalg import (
    DenseMatrix,
    fold_columns,
    matmul,
    tall_to_wide,
    unfold_columns,
    wide_to_tall,
)
from .planner import AdapterKind

logger = logging.getLogger(__name__)


class LossKind(enum.Enum):
    MSE = "mse"
    SOFTMAX_CE = "softmax_ce"


@dataclasses.dataclass(frozen=True)
class LossSpec:
    """A loss and its targets.

    MSE averages over every entry. SOFTMAX_CE treats each output column as
    logits and averages over the batch; targets are class-probability columns,
    normally one-hot.
    """

    kind: LossKind
    targets: DenseMatrix


@dataclasses.dataclass
class GradientSet:
    """Gradients of one backward pass, keyed by trainable parameter name.

    ``input_grad`` is ∂L/∂x and is not a parameter entry.
    """

    grads: dict
    loss_value: float = 0.0
    input_grad: DenseMatrix = None

    def __getitem__(self, name):
        return self.grads[name]

    def __contains__(self, name):
        return name in self.grads

    def names(self):
        return list(self.grads)

    def is_finite(self):
        return math.isfinite(self.loss_value) and all(
            g.is_finite() for g in self.grads.values()
        )


def softmax(logits):
    """Column-wise softmax."""
    cols = logits.cols
    out = DenseMatrix(logits.rows, cols)
    for j in range(cols):
        column = logits.column(j)
        top = max(column)
        exps = [math.exp(v - top) for v in column]
        total = math.fsum(exps)
        out.data[j::cols] = array.array("d", [e / total for e in exps])
    return out


def loss_value_and_grad(output, loss):
    """Return (loss value, ∂L/∂output)."""
    targets = loss.targets
    if targets.shape != output.shape:
        raise ShapeError(
            "loss targets %s do not match output %s" % (targets.shape, output.shape)
        )
    if loss.kind is LossKind.MSE:
        diff = output.sub(targets)
        n = diff.size
        return math.fsum(v * v for v in diff.data) / n, diff.scale(2.0 / n)

    batch, cols = output.cols, output.cols
    probs = softmax(output)
    grad = DenseMatrix(output.rows, cols)
    total = 0.0
    for j in range(cols):
        column = output.column(j)
        top = max(column)
        log_z = top + math.log(math.fsum(math.exp(v - top) for v in column))
        t = targets.column(j)
        mass = math.fsum(t)
        total += math.fsum(tc * (log_z - v) for tc, v in zip(t, column) if tc)
        grad.data[j::cols] = array.array(
            "d", [(p * mass - tc) / batch for p, tc in zip(probs.column(j), t)]
        )
    return total / batch, grad


def loss_value(output, loss):
    return loss_value_and_grad(output, loss)[0]


def backward(adapter, layer, x, upstream):
    """
    Gradients of the adapted layer given ∂L/∂output.

    Contributions are summed over the batch columns. In training mode the
    dropout mask cached by the preceding forward is consumed.

    Args:
        adapter: LoRAAdapter, KronAAdapter or KronLoRAAdapter
        layer: FrozenLinear
        x: d_in x batch input that was passed to forward
        upstream: d_out x batch gradient of the loss with respect to the output

    Returns:
        GradientSet with one entry per trainable parameter and ``input_grad``
    """
    plan = adapter.plan
    check_layer(adapter, layer, x)
    if upstream.shape != (plan.d_out, x.cols):
        raise ShapeError(
            "upstream %s does not match output (%d, %d)"
            % (upstream.shape, plan.d_out, x.cols)
        )

    mask = adapter.take_mask() if adapter.training_mode else None
    x_branch = x if mask is None else x.hadamard(mask)
    grads, dx = branch_backward(adapter, x_branch, upstream.scale(plan.scale))
    if mask is not None:
        dx = dx.hadamard(mask)
    input_grad = matmul(layer.weight.T, upstream).add(dx)
    return GradientSet(grads, input_grad=input_grad)


def branch_backward(adapter, x_branch, g):
    """
    Gradients of the unscaled branch given g = scale · ∂L/∂output.

    Returns:
        (dict of parameter gradients, gradient with respect to ``x_branch``)
    """
    plan = adapter.plan
    batch = x_branch.cols
    if plan.kind is AdapterKind.KRONLORA:
        trace = kron_lora_chain(adapter, x_branch)
        g3_all = fold_columns(g, plan.d_B2, plan.d_A2)
        d_b1 = matmul(g3_all, trace.y2_wide.T)
        g2_stack = wide_to_tall(matmul(adapter.B1.T, g3_all), batch)
        d_a = matmul(g2_stack.T, trace.y1_stack)
        g1_wide = tall_to_wide(matmul(g2_stack, adapter.A), batch)
        d_b2 = matmul(g1_wide, trace.x_all.T)
        dx = unfold_columns(matmul(adapter.B2.T, g1_wide), plan.d_A1)
        grads = {"A": d_a, "B1": d_b1, "B2": d_b2}
    elif plan.kind is AdapterKind.KRONA:
        x_all, y1_stack, _ = krona_chain(adapter, x_branch)
        g2_all = fold_columns(g, plan.d_B2, plan.d_A2)
        g2_stack = wide_to_tall(g2_all, batch)
        d_a = matmul(g2_stack.T, y1_stack)
        g1_wide = tall_to_wide(matmul(g2_stack, adapter.A), batch)
        d_b = matmul(g1_wide, x_all.T)
        dx = unfold_columns(matmul(adapter.B.T, g1_wide), plan.d_A1)
        grads = {"A": d_a, "B": d_b}
    else:
        hidden = matmul(adapter.down, x_branch)
        g_hidden = matmul(adapter.up.T, g)
        grads = {
            "down": matmul(g_hidden, x_branch.T),
            "up": matmul(g, hidden.T),
        }
        dx = matmul(adapter.down.T, g_hidden)
    return grads, dx


def loss_and_grad(adapter, layer, x, loss, rng=None):
    """Forward, loss and backward in one call."""
    output = forward(adapter, layer, x, rng)
    value, upstream = loss_value_and_grad(output, loss)
    grads = backward(adapter, layer, x, upstream)
    grads.loss_value = value
    return grads


def _eval_loss(adapter, layer, x, loss):
    return loss_value(forward(adapter, layer, x), loss)


def finite_difference_grad(adapter, layer, x, loss, param_name, h=1e-5):
    """
    Central finite differences of the loss with respect to one parameter.

    Entry (i, j) is (L(θ + h·e_ij) − L(θ − h·e_ij)) / 2h. The adapter runs in
    eval mode for the duration and every perturbed entry is restored exactly.
    """
    if not h > 0:
        raise ValueError("finite difference step must be positive, got %r" % (h,))
    params = dict(trainable_parameters(adapter))
    if param_name not in params:
        raise KeyError("%s has no parameter %r" % (type(adapter).__name__, param_name))
    param = params[param_name]
    was_training = adapter.training_mode
    set_training(adapter, False)
    out = DenseMatrix(param.rows, param.cols)
    try:
        data = param.data
        for idx in range(len(data)):
            original = data[idx]
            data[idx] = original + h
            plus = _eval_loss(adapter, layer, x, loss)
            data[idx] = original - h
            minus = _eval_loss(adapter, layer, x, loss)
            data[idx] = original
            out.data[idx] = (plus - minus) / (2.0 * h)
    finally:
        set_training(adapter, was_training)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """‖analytic − numeric‖∞ / max(‖analytic‖∞, floor)."""
    return analytic.sub(numeric).max_abs() / max(analytic.max_abs(), floor)


def gradient_check(adapter, layer, x, loss, h=1e-5):
    """Per-parameter relative error of ``backward`` against finite differences."""
    was_training = adapter.training_mode
    set_training(adapter, False)
    try:
        analytic = loss_and_grad(adapter, layer, x, loss)
    finally:
        set_training(adapter, was_training)
    errors = {}
    for name in analytic.names():
        numeric = finite_difference_grad(adapter, layer, x, loss, name, h)
        errors[name] = relative_error(analytic[name], numeric)
        logger.debug("gradient check %s: relative error %.3e", name, errors[name])
    return errors
