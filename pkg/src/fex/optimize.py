"""Continuous tuning of tree parameters: Adam for coarse progress, dense BFGS
for fast local refinement, and the coarse-tune schedule that chains them.

Objective callables take a flat parameter vector and return ``(value, grad)``.
All minimizers track and return the best parameters seen, not the last
iterate; a non-finite start or step ends the run with the best so far
(``inf`` when nothing finite was ever observed).
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerConfig:
    adam_steps: int = 500  # T1
    adam_lr: float = 1e-2
    bfgs_steps: int = 20  # T2
    finetune_steps: int = 1000  # T3
    finetune_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    restarts: int = 2

    def __post_init__(self):
        if min(self.adam_steps, self.bfgs_steps, self.finetune_steps) < 0:
            raise ValueError("step counts must be >= 0")
        if self.adam_lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def adam_minimize(
    f,
    theta0,
    steps: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Standard Adam with bias correction; returns (best_theta, best_value)."""
    theta = np.array(theta0, dtype=float)
    val, grad = f(theta)
    if not np.isfinite(val):
        return theta, np.inf
    best_theta, best_val = theta.copy(), float(val)
    if steps <= 0:
        return best_theta, best_val

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, steps + 1):
        if not np.all(np.isfinite(grad)):
            break
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
        val, grad = f(theta)
        if not np.isfinite(val):
            break
        if val < best_val:
            best_val, best_theta = float(val), theta.copy()
    return best_theta, best_val


def _bfgs_update(H, s, y):
    rho = 1.0 / float(s @ y)
    Hy = H @ y
    H_new = H - np.outer(s, Hy) * rho - np.outer(Hy, s) * rho
    H_new += np.outer(s, s) * (rho + rho * rho * float(y @ Hy))
    return 0.5 * (H_new + H_new.T)  # keep symmetric against roundoff


def bfgs_minimize(
    f,
    theta0,
    steps: int,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 30,
):
    """Dense BFGS with backtracking Armijo line search.

    Curvature-condition violations skip the inverse-Hessian update; a failed
    line search resets the Hessian approximation once, then gives up and
    returns the best seen.
    """
    theta = np.array(theta0, dtype=float)
    val, grad = f(theta)
    if not np.isfinite(val):
        return theta, np.inf
    best_theta, best_val = theta.copy(), float(val)
    if steps <= 0:
        return best_theta, best_val

    n = theta.size
    H = np.eye(n)
    for _ in range(steps):
        if not np.all(np.isfinite(grad)):
            break
        d = -(H @ grad)
        gd = float(grad @ d)
        if gd >= 0:  # not a descent direction; restart from steepest descent
            H = np.eye(n)
            d = -grad
            gd = float(grad @ d)
            if gd >= 0:
                break
        alpha = 1.0
        accepted = False
        for _ in range(max_backtracks):
            cand = theta + alpha * d
            cval, cgrad = f(cand)
            if np.isfinite(cval) and cval <= val + c1 * alpha * gd:
                accepted = True
                break
            alpha *= shrink
        if not accepted:
            if not np.allclose(H, np.eye(n)):
                H = np.eye(n)  # one reset, then retry from steepest descent
                continue
            break
        s = cand - theta
        y = cgrad - grad
        theta, val, grad = cand, float(cval), cgrad
        if val < best_val:
            best_val, best_theta = val, theta.copy()
        if np.all(np.isfinite(y)):
            sy = float(s @ y)
            if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
                H = _bfgs_update(H, s, y)
    return best_theta, best_val


def coarse_tune(f, starts, cfg: OptimizerConfig):
    """Adam for ``adam_steps`` then BFGS for ``bfgs_steps`` from each start;
    returns the best (theta, value) across the independent starts."""
    starts = [np.array(s, dtype=float) for s in starts]
    if not starts:
        raise ValueError("coarse_tune needs at least one start")
    best_theta, best_val = None, np.inf
    for theta0 in starts:
        theta, val = adam_minimize(
            f,
            theta0,
            cfg.adam_steps,
            cfg.adam_lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )
        theta, val = bfgs_minimize(f, theta, cfg.bfgs_steps)
        if val < best_val:
            best_theta, best_val = theta, val
    if best_theta is None:
        best_theta = starts[0]
    return best_theta, best_val
