from __future__ import annotations

from typing import Sequence

import numpy as np

from tokenmoe.diffcore import Tensor, as_tensor, log_softmax, mul, square, sub, tsum


def n_step_return(rewards: Sequence[float], gamma: float, bootstrap: float, terminated_within: bool) -> float:
    if len(rewards) < 1:
        raise ValueError("need at least one reward")
    ret = sum(gamma**i * r for i, r in enumerate(rewards))
    if not terminated_within:
        ret += gamma ** len(rewards) * bootstrap
    return ret


def _one_hot(actions, n: int) -> np.ndarray:
    a = np.atleast_1d(np.asarray(actions, dtype=np.intp))
    if a.size and (a.min() < 0 or a.max() >= n):
        raise ValueError(f"action outside [0, {n})")
    out = np.zeros((a.size, n))
    out[np.arange(a.size), a] = 1.0
    return out


def select_action_values(values, actions) -> Tensor:
    """``values[b, actions[b]]`` for ``[B, A]`` values, or ``[B, A, K] -> [B, K]``."""
    v = as_tensor(values)
    hot = _one_hot(actions, v.shape[1])
    if v.ndim == 3:
        hot = hot[:, :, None]
    return tsum(mul(v, hot), axis=1)


def dqn_mse_loss(q_online, action, target_value) -> Tensor:
    """Squared error ``(q[a] - target)**2``; batched inputs give one loss per row."""
    q = as_tensor(q_online)
    single = q.ndim == 1
    if single:
        q = q.reshape(1, -1)
    chosen = select_action_values(q, action)
    loss = square(sub(chosen, np.atleast_1d(np.asarray(target_value, dtype=np.float64))))
    return loss.reshape(()) if single else loss


def c51_project(target_dist, reward, gamma_eff, support, v_min: float, v_max: float) -> np.ndarray:
    """Project ``reward + gamma_eff * z`` onto the fixed support.

    Accepts one distribution ``[atoms]`` or a batch ``[B, atoms]`` with
    per-row ``reward`` and ``gamma_eff``.
    """
    p = np.asarray(target_dist, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    z = np.asarray(support, dtype=np.float64)
    atoms = z.size
    dz = (v_max - v_min) / (atoms - 1)
    r = np.broadcast_to(np.asarray(reward, dtype=np.float64).reshape(-1, 1), p.shape)
    g = np.broadcast_to(np.asarray(gamma_eff, dtype=np.float64).reshape(-1, 1), p.shape)
    tz = np.clip(r + g * z[None, :], v_min, v_max)
    b = (tz - v_min) / dz
    lo = np.floor(b).astype(np.intp)
    hi = np.ceil(b).astype(np.intp)
    lo = np.clip(lo, 0, atoms - 1)
    hi = np.clip(hi, 0, atoms - 1)
    rows = np.repeat(np.arange(p.shape[0])[:, None], atoms, axis=1)
    out = np.zeros_like(p)
    same = lo == hi
    np.add.at(out, (rows, lo), np.where(same, p, p * (hi - b)))
    np.add.at(out, (rows, hi), np.where(same, 0.0, p * (b - lo)))
    return out[0] if single else out


def c51_loss(online_logits, projected_target) -> Tensor:
    """Cross-entropy ``-sum_j target_j * log softmax(logits)_j`` over the last axis."""
    logp = log_softmax(as_tensor(online_logits), axis=-1)
    return mul(tsum(mul(logp, np.asarray(projected_target, dtype=np.float64)), axis=-1), -1.0)
