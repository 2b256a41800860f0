"""Central finite-difference gradient checking (64-bit)."""

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_grad(fn, arrays, index, step=1e-4):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays to a float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + step
        hi = fn(*base)
        target[i] = orig - step
        lo = fn(*base)
        target[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def analytic_grads(build_loss, arrays):
    """Run ``build_loss(*tensors)`` on a tape and return each input's gradient."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = build_loss(*tensors)
    backward(loss, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]


def max_relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    scale_ = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    # relative to the gradient's own magnitude so tiny entries don't dominate
    return float(np.max(np.abs(a - b) / np.maximum(denom, 1e-3 * scale_), initial=0.0))


def check_gradients(build_loss, arrays, step=1e-4):
    """Return the worst relative error over all inputs of ``build_loss``."""

    def fn(*arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return float(build_loss(*ts).data)

    got = analytic_grads(build_loss, arrays)
    worst = 0.0
    for i in range(len(arrays)):
        num = numerical_grad(fn, arrays, i, step)
        worst = max(worst, max_relative_error(got[i], num))
    return worst
