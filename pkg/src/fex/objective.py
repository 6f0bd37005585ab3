"""The data-misfit functional that scores candidate governing equations.

For time-indexed data the loss is the one-step forward-Euler residual,
normalized by the step so it estimates the mean squared error of
``du/dt - Tree(features at t)`` over sampled (time, point) pairs.  Tabular
data uses plain regression against the recorded output.

Feature rows are assembled once at construction; candidate tuning then runs
against a fixed matrix.  Coarse tuning evaluates on a seeded row subsample
(``sample_rows``), fine tuning on every row.
"""

from dataclasses import dataclass, field

import numpy as np

from .exprtree import ExpressionInstance, TreeEvaluator
from .seeding import rng_for
from .stencils import CANONICAL_ORDERS, Grid, feature_stack

DEFAULT_SUBSAMPLE = 4096


def spectral_lowpass(field_arr: np.ndarray, cutoff: int) -> np.ndarray:
    """Zero all Fourier modes with |k| > cutoff along either axis (2-D)."""
    fhat = np.fft.fft2(field_arr)
    n0, n1 = field_arr.shape
    k0 = np.abs(np.fft.fftfreq(n0, d=1.0 / n0))
    k1 = np.abs(np.fft.fftfreq(n1, d=1.0 / n1))
    mask = (k0[:, None] <= cutoff) & (k1[None, :] <= cutoff)
    return np.real(np.fft.ifft2(fhat * mask))


@dataclass
class Objective:
    """Fixed feature matrix + target vector with a sampling policy."""

    mode: str  # euler_residual | direct_regression
    feature_names: tuple
    features: np.ndarray  # (n_rows, n_features), physical units
    target: np.ndarray  # (n_rows,)
    target_variable: str
    dt: float = None
    normalize_dt: bool = True
    subsample: int = DEFAULT_SUBSAMPLE
    feature_transform: tuple = None  # (means, scales) for standardized fitting

    def __post_init__(self):
        if self.mode not in ("euler_residual", "direct_regression"):
            raise ValueError(f"unknown objective mode {self.mode!r}")
        if self.features.ndim != 2 or self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature matrix does not match feature names")
        if self.target.shape != (self.features.shape[0],):
            raise ValueError("target length does not match feature rows")
        if self.mode == "euler_residual" and not (self.dt and self.dt > 0):
            raise ValueError("euler_residual needs a positive dt")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def sample_rows(self, seed) -> np.ndarray:
        """Seeded spatial/temporal row subsample used during coarse tuning;
        None when the subsample policy already covers every row."""
        if self.subsample is None or self.subsample >= self.n_rows:
            return None
        rng = rng_for("objective-rows", seed)
        return np.sort(rng.choice(self.n_rows, size=self.subsample, replace=False))

    def _residual_scale(self) -> float:
        if self.mode == "euler_residual" and not self.normalize_dt:
            return self.dt
        return 1.0

    def evaluator_for(self, inst: ExpressionInstance, rows=None) -> TreeEvaluator:
        X = self.features if rows is None else self.features[rows]
        return TreeEvaluator(inst, X)

    def loss(self, inst: ExpressionInstance, theta=None, rows=None) -> float:
        ev = self.evaluator_for(inst, rows)
        y = self.target if rows is None else self.target[rows]
        return self._loss_from(ev.evaluate(theta), y)

    def _loss_from(self, pred, y) -> float:
        r = (pred - y) * self._residual_scale()
        val = float(np.mean(r * r))
        return val if np.isfinite(val) else np.inf

    def make_objective_fn(self, inst: ExpressionInstance, rows=None):
        """Callable theta -> (loss, grad) bound to a fixed row subset."""
        ev = self.evaluator_for(inst, rows)
        y = self.target if rows is None else self.target[rows]
        scale2 = self._residual_scale() ** 2
        n = y.size

        def f(theta):
            out, pullback = ev.evaluate_with_pullback(theta)
            r = out - y
            val = scale2 * float(np.mean(r * r))
            if not np.isfinite(val):
                return np.inf, np.zeros_like(theta)
            grad = pullback((2.0 * scale2 / n) * r)
            if not np.all(np.isfinite(grad)):
                return np.inf, np.zeros_like(theta)
            return val, grad

        return f

    def loss_gradient(self, inst: ExpressionInstance, theta=None, rows=None):
        theta = inst.theta if theta is None else theta
        return self.make_objective_fn(inst, rows)(theta)


def from_dataset(
    ds,
    target_variable: str,
    orders=CANONICAL_ORDERS,
    subsample: int = DEFAULT_SUBSAMPLE,
    normalize_dt: bool = True,
    spectral_cutoff: int = None,
    max_rows: int = None,
    seed: int = 0,
    standardize: bool = False,
) -> Objective:
    """Build the loss for one output variable of a dataset.

    grid2d: derivative features of every variable at each retained snapshot,
    paired with the next snapshot exactly ``ds.dt`` later.  grid1d: coordinate
    channels plus the state and its precomputed derivative channels.
    trajectory: state variables plus per-trajectory scalars.  tabular: the
    recorded input channels, regressed directly onto the output variable.

    ``spectral_cutoff`` low-passes 2-D snapshots (features and targets) before
    feature extraction, for noisy data.  ``max_rows`` subsamples the assembled
    rows once, seeded, to bound memory.  ``standardize`` records a per-feature
    (mean, std) transform that instances fit in; reported expressions stay in
    physical units because canonicalization substitutes the transform back.
    """
    if target_variable not in ds.variables:
        raise ValueError(
            f"unknown target {target_variable!r}; dataset has {sorted(ds.variables)}"
        )
    if ds.kind == "grid2d":
        names, X, y = _grid2d_rows(ds, target_variable, orders, spectral_cutoff)
        mode = "euler_residual"
    elif ds.kind == "grid1d":
        names, X, y = _grid1d_rows(ds, target_variable)
        mode = "euler_residual"
    elif ds.kind == "trajectory":
        names, X, y = _trajectory_rows(ds, target_variable)
        mode = "euler_residual"
    else:
        names, X, y = _tabular_rows(ds, target_variable)
        mode = "direct_regression"

    if max_rows is not None and max_rows < X.shape[0]:
        keep = np.sort(
            rng_for("objective-maxrows", seed).choice(X.shape[0], max_rows, replace=False)
        )
        X, y = X[keep], y[keep]
    return Objective(
        mode=mode,
        feature_names=tuple(names),
        features=np.ascontiguousarray(X),
        target=np.ascontiguousarray(y),
        target_variable=target_variable,
        dt=ds.dt if mode == "euler_residual" else None,
        normalize_dt=normalize_dt,
        subsample=subsample,
    )


def _paired_indices(t: np.ndarray, dt: float):
    """Successive snapshot indices whose spacing matches dt (handles burst
    storage where anchors are farther apart than the pair spacing)."""
    out = []
    for s in range(len(t) - 1):
        if abs((t[s + 1] - t[s]) - dt) <= 1e-9 * max(1.0, abs(dt)):
            out.append(s)
    if not out:
        raise ValueError("no snapshot pairs with the dataset's dt spacing")
    return out


def _grid2d_rows(ds, target_variable, orders, spectral_cutoff):
    nx, ny = ds.variables[target_variable].shape[1:]
    g = Grid(nx=nx, ny=ny, dx=ds.spacings["dx"], dy=ds.spacings["dy"])
    t = ds.coords["t"]
    pairs = _paired_indices(t, ds.dt)

    def prep(arr):
        return spectral_lowpass(arr, spectral_cutoff) if spectral_cutoff else arr

    names = None
    X_parts, y_parts = [], []
    tgt = ds.variables[target_variable]
    for s in pairs:
        fields = {name: prep(arr[s]) for name, arr in sorted(ds.variables.items())}
        fs = feature_stack(fields, g, orders)
        names = fs.names
        X_parts.append(fs.values)
        y_parts.append(((prep(tgt[s + 1]) - fields[target_variable]) / ds.dt).ravel())
    return names, np.vstack(X_parts), np.concatenate(y_parts)


def _grid1d_rows(ds, target_variable):
    t = ds.coords["t"]
    x = ds.coords["x"]
    pairs = _paired_indices(t, ds.dt)
    u = ds.variables[target_variable]
    chan_names = sorted(ds.channels)
    names = ["x", "t", target_variable] + chan_names
    X_parts, y_parts = [], []
    for s in pairs:
        cols = [x, np.full(x.shape, t[s]), u[s]]
        cols += [ds.channels[c][s] for c in chan_names]
        X_parts.append(np.column_stack(cols))
        y_parts.append((u[s + 1] - u[s]) / ds.dt)
    return names, np.vstack(X_parts), np.concatenate(y_parts)


def _trajectory_rows(ds, target_variable):
    var_names = sorted(ds.variables)
    side_names = sorted(ds.side_channels)
    names = var_names + side_names
    tgt = ds.variables[target_variable]
    n_traj, n_t = tgt.shape
    X_parts, y_parts = [], []
    for i in range(n_traj):
        cols = [ds.variables[v][i, : n_t - 1] for v in var_names]
        cols += [np.full(n_t - 1, ds.side_channels[s][i]) for s in side_names]
        X_parts.append(np.column_stack(cols))
        y_parts.append((tgt[i, 1:] - tgt[i, : n_t - 1]) / ds.dt)
    return names, np.vstack(X_parts), np.concatenate(y_parts)


def _tabular_rows(ds, target_variable):
    chan_names = sorted(ds.channels)
    side_names = sorted(ds.side_channels)
    names = chan_names + side_names
    cols = [ds.channels[c] for c in chan_names]
    cols += [ds.side_channels[s] for s in side_names]
    return names, np.column_stack(cols), ds.variables[target_variable].copy()
