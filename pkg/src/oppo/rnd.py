"""Random network distillation bonus on one-hot state observations."""
from __future__ import annotations

import hashlib

import numpy as np

from .nn import Adam, FeedForwardNet

WARMUP = 100
STD_FLOOR = 1e-8


class RndEstimator:
    """Frozen random target, trained predictor; bonus is ``||f_t(x) - f_p(x)||^2``.

    The predictor has one more hidden layer than the target so it cannot
    copy it exactly.
    """

    def __init__(self, num_inputs: int, rng: np.random.Generator, hidden: int = 64,
                 out: int = 32, lr: float = 1e-3, target: FeedForwardNet | None = None,
                 predictor: FeedForwardNet | None = None):
        self.target = target or FeedForwardNet([num_inputs, hidden, out], rng)
        self.predictor = predictor or FeedForwardNet([num_inputs, hidden, hidden, out], rng)
        if self.target.layer_sizes[0] != self.predictor.layer_sizes[0] or \
                self.target.layer_sizes[-1] != self.predictor.layer_sizes[-1]:
            raise ValueError("target and predictor must share input and output widths")
        self.optimizer = Adam(lr=lr)
        # running moments of raw bonuses, merged batch-wise (Chan et al.)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def num_inputs(self) -> int:
        return self.target.layer_sizes[0]

    def raw_bonus(self, x: np.ndarray) -> np.ndarray | float:
        diff = self.target(x) - self.predictor(x)
        return (diff * diff).sum(axis=-1)

    @property
    def running_std(self) -> float:
        if self.count < 2:
            return 0.0
        return float(np.sqrt(self.m2 / self.count))

    def normalized_bonus(self, x: np.ndarray) -> np.ndarray | float:
        raw = self.raw_bonus(x)
        std = self.running_std
        if self.count < WARMUP or std <= STD_FLOOR:
            return raw
        return raw / max(std, STD_FLOOR)

    def _merge_stats(self, values: np.ndarray) -> None:
        n = len(values)
        mean = float(values.mean())
        m2 = float(((values - mean) ** 2).sum())
        tot = self.count + n
        delta = mean - self.mean
        self.mean += delta * n / tot
        self.m2 += m2 + delta * delta * self.count * n / tot
        self.count = tot

    def update_predictor(self, batch: np.ndarray, counts: np.ndarray | None = None) -> float:
        """One Adam step on the mean squared output gap; returns the pre-step loss.

        ``counts`` optionally gives a multiplicity per row, so a batch of
        repeated observations can be passed as its distinct rows.
        """
        x = np.atleast_2d(np.asarray(batch, dtype=float))
        if x.shape[0] == 0 or x.size == 0:
            raise ValueError("empty observation batch")
        counts = np.ones(x.shape[0], dtype=np.int64) if counts is None else np.asarray(counts)
        if counts.shape != (x.shape[0],) or np.any(counts < 0) or counts.sum() == 0:
            raise ValueError("counts must be non-negative, one per row, not all zero")
        w = counts / counts.sum()
        diff = self.target(x) - self.predictor(x)
        raw = (diff * diff).sum(axis=1)
        loss = float(w @ raw)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite RND loss")
        grads = self.predictor.backward(x, -2.0 * diff * w[:, None])
        self.optimizer.step(self.predictor.params, grads)
        self._merge_stats(np.repeat(raw, counts))
        return loss

    def target_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.target.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()
