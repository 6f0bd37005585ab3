"""Policy network over operator choices, updated with a risk-seeking policy gradient.

The controller is a two-layer fully connected net with a constant input, so
its output logits are a pure function of the weights.  The logits split into
one block per tree slot; each block's softmax is the categorical distribution
the slot's operator is sampled from.  The final layer starts at zero, making
the initial policy uniform over all sequences.

Updates keep only the elite samples, those whose reward reaches the
(1 - risk)-quantile of the batch, and ascend

    grad J = (1/N) * sum_j (R_j - R_hat) * 1{R_j >= R_hat}
             * sum_i grad log p_i(e_i_j).
"""

import math
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-300


def reward_of(loss: float) -> float:
    """Reward (1 + L)^-1 mapped to [0, 1]; non-finite loss scores 0."""
    if not np.isfinite(loss):
        return 0.0
    if loss < 0:
        raise ValueError("loss must be nonnegative")
    return 1.0 / (1.0 + loss)


def risk_threshold(rewards, risk: float) -> float:
    """Empirical (1 - risk)-quantile by the nearest-rank rule.

    rank = ceil((1 - risk) * N), 1-indexed on the ascending sort, floored at 1
    so risk = 1 degenerates to the minimum.
    """
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise ValueError("rewards must be non-empty")
    if not 0.0 <= risk <= 1.0:
        raise ValueError("risk must be in [0, 1]")
    rank = math.ceil((1.0 - risk) * rewards.size)
    rank = min(max(rank, 1), rewards.size)
    return float(np.sort(rewards)[rank - 1])


@dataclass
class ControllerState:
    """Serializable weight snapshot."""

    w1: list
    b1: list
    w2: list
    b2: list


class Controller:
    """Per-slot categorical policy with trainable weights.

    ``slot_sizes`` gives the number of operator choices for each tree slot in
    inorder.  ``sample`` and ``update`` must be used in alternation: an update
    assumes the batch was drawn from the current weights.
    """

    def __init__(self, slot_sizes, hidden: int = 64, lr: float = 2e-3,
                 risk: float = 0.05, rng=0):
        if not slot_sizes or any(s < 1 for s in slot_sizes):
            raise ValueError("slot sizes must be positive")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.slot_sizes = tuple(int(s) for s in slot_sizes)
        self.n_slots = len(self.slot_sizes)
        self.n_logits = int(sum(self.slot_sizes))
        self.hidden = hidden
        self.lr = lr
        self.risk = risk
        self.w1 = rng.standard_normal((hidden, 1))
        self.b1 = np.zeros(hidden)
        self.w2 = np.zeros((self.n_logits, hidden))  # zero init: uniform policy
        self.b2 = np.zeros(self.n_logits)
        self._offsets = np.concatenate([[0], np.cumsum(self.slot_sizes)]).astype(int)

    # -- forward ------------------------------------------------------------

    def _hidden_out(self) -> np.ndarray:
        return np.tanh(self.w1[:, 0] + self.b1)

    def logits(self) -> np.ndarray:
        return self.w2 @ self._hidden_out() + self.b2

    def pmfs(self) -> list:
        logits = self.logits()
        out = []
        for s in range(self.n_slots):
            block = logits[self._offsets[s] : self._offsets[s + 1]]
            e = np.exp(block - block.max())
            out.append(e / e.sum())
        return out

    # -- sampling -----------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` operator sequences; returns (sequences, log_probs)."""
        if n < 1:
            raise ValueError("need at least one sample")
        pmfs = self.pmfs()
        seqs = np.empty((n, self.n_slots), dtype=np.int64)
        logps = np.zeros(n)
        for s, p in enumerate(pmfs):
            cdf = np.cumsum(p)
            cdf[-1] = 1.0
            draws = np.searchsorted(cdf, rng.random(n), side="right")
            draws = np.minimum(draws, len(p) - 1)
            seqs[:, s] = draws
            logps += np.log(np.maximum(p[draws], LOG_FLOOR))
        return seqs, logps

    def log_prob(self, sequence) -> float:
        pmfs = self.pmfs()
        return float(
            sum(np.log(max(pmfs[s][op], LOG_FLOOR)) for s, op in enumerate(sequence))
        )

    # -- update -------------------------------------------------------------

    def update(self, sequences, rewards, threshold: float = None) -> float:
        """One gradient-ascent step on the risk-seeking objective.

        ``sequences`` is an (N, n_slots) integer array of the sampled batch and
        ``rewards`` the matching rewards in [0, 1].  The elite threshold is the
        batch quantile unless given explicitly.  Returns the threshold used.
        """
        sequences = np.asarray(sequences, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=float)
        if sequences.ndim != 2 or sequences.shape[1] != self.n_slots:
            raise ValueError("sequence batch shape mismatch")
        if sequences.shape[0] != rewards.size or rewards.size == 0:
            raise ValueError("batch must be non-empty and aligned with rewards")
        if threshold is None:
            threshold = risk_threshold(rewards, self.risk)

        n = rewards.size
        elite = rewards >= threshold
        coeff = (rewards - threshold) * elite / n
        if not np.any(coeff != 0.0):
            return float(threshold)

        pmfs = self.pmfs()
        g_logits = np.zeros(self.n_logits)
        for s in range(self.n_slots):
            block = slice(self._offsets[s], self._offsets[s + 1])
            counts = np.bincount(
                sequences[:, s], weights=coeff, minlength=self.slot_sizes[s]
            )
            g_logits[block] = counts - pmfs[s] * coeff.sum()

        h = self._hidden_out()
        g_w2 = np.outer(g_logits, h)
        g_b2 = g_logits
        g_h = self.w2.T @ g_logits
        g_pre = g_h * (1.0 - h * h)
        self.w2 += self.lr * g_w2
        self.b2 += self.lr * g_b2
        self.w1[:, 0] += self.lr * g_pre
        self.b1 += self.lr * g_pre
        return float(threshold)

    # -- persistence ----------------------------------------------------------

    def get_state(self) -> ControllerState:
        return ControllerState(
            w1=self.w1.tolist(),
            b1=self.b1.tolist(),
            w2=self.w2.tolist(),
            b2=self.b2.tolist(),
        )

    def set_state(self, state: ControllerState):
        self.w1 = np.asarray(state.w1, dtype=float).reshape(self.hidden, 1)
        self.b1 = np.asarray(state.b1, dtype=float)
        self.w2 = np.asarray(state.w2, dtype=float).reshape(self.n_logits, self.hidden)
        self.b2 = np.asarray(state.b2, dtype=float)
