from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    n_step_reward: float
    discount_to_bootstrap: float  # gamma**n, or 0 when the episode ended inside the window
    next_obs: np.ndarray


class SumTree:
    """Binary sum tree over ``capacity`` leaves stored heap-style in a flat list.

    Node ``i`` has children ``2i+1`` and ``2i+2``. The leaf row is padded to a
    power of two so that leaf ``j`` (at ``base + j``) sits in left-to-right
    order and ``find`` walks prefix sums in index order. Parents are recomputed
    from their children on every update.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        width = 1 << (capacity - 1).bit_length()
        self._base = width - 1
        self.nodes = [0.0] * (2 * width - 1)

    @property
    def total(self) -> float:
        return self.nodes[0]

    def leaf(self, j: int) -> float:
        return self.nodes[self._base + j]

    def leaves(self) -> np.ndarray:
        return np.array(self.nodes[self._base : self._base + self.capacity])

    def update(self, j: int, value: float) -> None:
        if value < 0:
            raise ValueError("priorities must be non-negative")
        if not 0 <= j < self.capacity:
            raise IndexError(f"leaf {j} out of range for capacity {self.capacity}")
        nodes = self.nodes
        i = self._base + j
        nodes[i] = float(value)
        while i > 0:
            i = (i - 1) // 2
            nodes[i] = nodes[2 * i + 1] + nodes[2 * i + 2]

    def find(self, u: float) -> int:
        """Leaf index ``j`` whose cumulative interval contains ``u`` in ``[0, total)``."""
        nodes = self.nodes
        i = 0
        n = len(nodes)
        while 2 * i + 1 < n:
            left, right = 2 * i + 1, 2 * i + 2
            if u < nodes[left] or nodes[right] <= 0.0:
                i = left
            else:
                u -= nodes[left]
                i = right
        return i - self._base


class ReplayBuffer:
    """Ring buffer of n-step transitions, uniform or proportionally prioritized.

    In prioritized mode leaf ``i`` of the sum tree holds ``priority_i ** alpha``.
    """

    def __init__(
        self,
        capacity: int,
        obs_shape: tuple[int, ...],
        prioritized: bool = False,
        alpha: float = 0.5,
        beta: float = 0.5,
        eps_prio: float = 1e-3,
    ) -> None:
        self.capacity = capacity
        self.prioritized = prioritized
        self.alpha = alpha
        self.beta = beta
        self.eps_prio = eps_prio
        self.obs = np.zeros((capacity,) + tuple(obs_shape), dtype=np.float32)
        self.next_obs = np.zeros_like(self.obs)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.discount = np.zeros(capacity)
        self.cursor = 0
        self.size = 0
        self.tree = SumTree(capacity) if prioritized else None
        self.max_priority = 1.0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> int:
        i = self.cursor
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.action[i] = t.action
        self.reward[i] = t.n_step_reward
        self.discount[i] = t.discount_to_bootstrap
        if self.tree is not None:
            self.tree.update(i, self.max_priority**self.alpha)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def batch(self, idx: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "obs": self.obs[idx].astype(np.float64),
            "action": self.action[idx],
            "reward": self.reward[idx],
            "discount": self.discount[idx],
            "next_obs": self.next_obs[idx].astype(np.float64),
        }

    def probabilities(self) -> np.ndarray:
        """Sampling probability of every stored slot."""
        if self.tree is None:
            return np.full(self.size, 1.0 / self.size)
        return self.tree.leaves()[: self.size] / self.tree.total


def per_sample(buffer: ReplayBuffer, batch: int, beta: float | None, rng: np.random.Generator):
    """Draw ``batch`` indices; returns ``(transitions, indices, importance_weights)``.

    Weights are ``(N * P(i)) ** -beta`` divided by the batch maximum.
    """
    if buffer.size < batch:
        raise ValueError(f"buffer holds {buffer.size} transitions, fewer than batch {batch}")
    if buffer.tree is None:
        idx = rng.integers(buffer.size, size=batch)
        return buffer.batch(idx), idx, np.ones(batch)
    beta = buffer.beta if beta is None else beta
    tree = buffer.tree
    total = tree.total
    us = rng.uniform(0.0, total, size=batch)
    idx = np.array([tree.find(u) for u in us], dtype=np.int64)
    probs = np.array([tree.leaf(j) for j in idx]) / total
    w = (buffer.size * probs) ** (-beta)
    return buffer.batch(idx), idx, w / w.max()


def per_update(buffer: ReplayBuffer, indices, td_errors) -> None:
    """Set ``priority_i = |td_i| + eps_prio`` for the given slots."""
    if buffer.tree is None:
        return
    for j, td in zip(np.asarray(indices), np.asarray(td_errors, dtype=np.float64)):
        if not 0 <= j < buffer.size:
            raise IndexError(f"replay index {j} out of range")
        prio = abs(float(td)) + buffer.eps_prio
        buffer.max_priority = max(buffer.max_priority, prio)
        buffer.tree.update(int(j), prio**buffer.alpha)


class NStepAccumulator:
    """Turns a stream of one-step experience into n-step transitions."""

    def __init__(self, n: int, gamma: float) -> None:
        if n < 1:
            raise ValueError("update horizon must be >= 1")
        self.n = n
        self.gamma = gamma
        self.window: deque[tuple[np.ndarray, int, float]] = deque()

    def _emit(self, next_obs: np.ndarray, terminal: bool) -> Transition:
        obs, action, _ = self.window[0]
        ret = 0.0
        for i, (_, _, r) in enumerate(self.window):
            ret += self.gamma**i * r
        disc = 0.0 if terminal else self.gamma ** len(self.window)
        self.window.popleft()
        return Transition(obs, action, ret, disc, next_obs)

    def push(self, obs: np.ndarray, action: int, reward: float, next_obs: np.ndarray, done: bool) -> list[Transition]:
        self.window.append((obs, action, reward))
        out = []
        if done:
            while self.window:
                out.append(self._emit(next_obs, True))
        elif len(self.window) == self.n:
            out.append(self._emit(next_obs, False))
        return out

    def reset(self) -> None:
        self.window.clear()
