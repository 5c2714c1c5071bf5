from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from tokenmoe.diffcore.tensor import DTYPE, Tensor, tsum, mul

# elements whose gradient magnitude is below this are compared absolutely
ABS_FLOOR = 1e-4


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps tensors to a tensor of any shape; a fixed random projection
    reduces non-scalar outputs to a scalar. The error per element is
    ``|a - n| / max(|a|, |n|, ABS_FLOOR)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    arrays = [np.array(x, dtype=DTYPE) for x in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*xs: Tensor) -> Tensor:
        return tsum(mul(fn(*xs), proj))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    scalar(*leaves).backward()
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(scalar(*[Tensor(x) for x in arrays]).data)
            flat[j] = orig - eps
            lo = float(scalar(*[Tensor(x) for x in arrays]).data)
            flat[j] = orig
            num[j] = (hi - lo) / (2 * eps)
        an = analytic[i].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(an), np.abs(num)), ABS_FLOOR)
        worst = max(worst, float(np.max(np.abs(an - num) / denom)))
    return worst


def grad_check_params(
    closure: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_elems: int | None = None,
    seed: int = 0,
) -> float:
    """Like :func:`grad_check`, but perturbs ``params`` in place.

    ``closure`` rebuilds the scalar loss from the current parameter values.
    ``max_elems`` limits the number of checked coordinates per parameter
    (chosen at random) to keep large networks cheap.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.zero_grad()
    closure().backward()
    analytic = [np.array(p.grad) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = rng.choice(flat.size, size=max_elems, replace=False)
        an = an.reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(closure().data)
            flat[j] = orig - eps
            lo = float(closure().data)
            flat[j] = orig
            num = (hi - lo) / (2 * eps)
            err = abs(an[j] - num) / max(abs(an[j]), abs(num), ABS_FLOOR)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
