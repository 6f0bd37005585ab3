"""Benchmark dataset generators and the on-disk dataset bundle format.

Four families of synthetic observations are produced:

* ``burgers2d``   coupled 2-D Burgers system, periodic box, RK2 in time with
                  sign-adaptive second-order upwinding for advection and
                  central differences for diffusion;
* ``burgers1d_vc`` 1-D Burgers with a time-varying advection coefficient,
                  spectral space derivatives, fixed-step RK4;
* ``hopf``        2-D Hopf normal form trajectories over a sweep of the
                  bifurcation parameter, RK4;
* ``jmak``        tabular phase-transformation kinetics samples.

Datasets are value objects; ``add_noise`` returns a perturbed copy.  A bundle
on disk is a directory holding ``meta.json`` plus one flat binary file per
array ("FEXDATA1" magic, u32 rank, u64 dims, little-endian float64 payload);
round-trips are bit exact.
"""

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exprtree import TermList
from .seeding import rng_for

MAGIC = b"FEXDATA1"
FORMAT_VERSION = 1

DEFAULT_HOPF_MUS = (-0.15, -0.05, 0.05, 0.15, 0.25, 0.35, 0.45, 0.55)
DEFAULT_JMAK_KS = (0.005, 0.01, 0.04, 0.1, 0.5, 0.8)


@dataclass
class FieldDataset:
    """Observations of one dynamical system plus everything needed to rebuild
    features: coordinates, precomputed channels, per-group scalars, spacings,
    the snapshot interval and (when known) the generating equation."""

    kind: str  # grid2d | grid1d | trajectory | tabular
    variables: dict
    coords: dict = field(default_factory=dict)
    channels: dict = field(default_factory=dict)
    side_channels: dict = field(default_factory=dict)
    dt: float = 0.0
    spacings: dict = field(default_factory=dict)
    noise_level: float = 0.0
    seed: int = 0
    ground_truth: dict = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("grid2d", "grid1d", "trajectory", "tabular"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "tabular" and self.dt <= 0:
            raise ValueError("dt must be positive for time-indexed data")
        if self.noise_level < 0:
            raise ValueError("noise level must be nonnegative")
        shapes = {n: a.shape for n, a in self.variables.items()}
        if len(set(shapes.values())) > 1:
            raise ValueError(f"variable shapes differ: {shapes}")

    # -- persistence --------------------------------------------------------

    def _array_items(self):
        for role, group in (
            ("var", self.variables),
            ("coord", self.coords),
            ("chan", self.channels),
            ("side", self.side_channels),
        ):
            for name in sorted(group):
                yield role, name, np.asarray(group[name], dtype=float)

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "dt": self.dt,
            "spacings": self.spacings,
            "noise_level": self.noise_level,
            "seed": self.seed,
            "variables": sorted(self.variables),
            "coords": sorted(self.coords),
            "channels": sorted(self.channels),
            "side_channels": sorted(self.side_channels),
            "shapes": {
                f"{role}_{name}": list(arr.shape)
                for role, name, arr in self._array_items()
            },
            "ground_truth": _truth_to_json(self.ground_truth),
            "meta": self.meta,
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        for role, name, arr in self._array_items():
            _write_array(path / f"{role}_{name}.fexdata", arr)

    @classmethod
    def load(cls, path) -> "FieldDataset":
        path = Path(path)
        meta_file = path / "meta.json"
        if not meta_file.exists():
            raise FileNotFoundError(f"no dataset bundle at {path}")
        meta = json.loads(meta_file.read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError("unsupported bundle format version")

        def read_group(role, names):
            return {n: _read_array(path / f"{role}_{n}.fexdata") for n in names}

        return cls(
            kind=meta["kind"],
            variables=read_group("var", meta["variables"]),
            coords=read_group("coord", meta["coords"]),
            channels=read_group("chan", meta["channels"]),
            side_channels=read_group("side", meta["side_channels"]),
            dt=meta["dt"],
            spacings=meta["spacings"],
            noise_level=meta["noise_level"],
            seed=meta["seed"],
            ground_truth=_truth_from_json(meta["ground_truth"]),
            meta=meta["meta"],
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        payload = {
            "kind": self.kind,
            "dt": self.dt,
            "spacings": self.spacings,
            "noise_level": self.noise_level,
            "seed": self.seed,
            "ground_truth": _truth_to_json(self.ground_truth),
            "meta": self.meta,
        }
        h.update(json.dumps(payload, sort_keys=True).encode())
        for role, name, arr in self._array_items():
            h.update(f"{role}:{name}:{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def _write_array(path: Path, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_array(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a dataset array file")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload does not match header dims {dims}")
    return data.reshape(dims).copy()


def _truth_to_json(truth):
    if truth is None:
        return None
    return {
        var: [[list(key), coef] for key, coef in tl.terms]
        for var, tl in truth.items()
    }


def _truth_from_json(obj):
    if obj is None:
        return None
    return {
        var: TermList(tuple((tuple(key), float(coef)) for key, coef in terms))
        for var, terms in obj.items()
    }


# -- 2-D Burgers system -------------------------------------------------------


def _upwind2(f, vel, axis, h):
    """Second-order one-sided difference, side chosen by the local velocity."""
    fp1 = np.roll(f, -1, axis)
    fp2 = np.roll(f, -2, axis)
    fm1 = np.roll(f, 1, axis)
    fm2 = np.roll(f, 2, axis)
    fwd = (-3.0 * f + 4.0 * fp1 - fp2) / (2.0 * h)
    bwd = (3.0 * f - 4.0 * fm1 + fm2) / (2.0 * h)
    return np.where(vel >= 0, bwd, fwd)


def _laplacian(f, hx, hy):
    return (np.roll(f, -1, 0) - 2.0 * f + np.roll(f, 1, 0)) / (hx * hx) + (
        np.roll(f, -1, 1) - 2.0 * f + np.roll(f, 1, 1)
    ) / (hy * hy)


def _burgers_rhs(u, v, hx, hy, nu):
    adv_u = u * _upwind2(u, u, 0, hx) + v * _upwind2(u, v, 1, hy)
    adv_v = u * _upwind2(v, u, 0, hx) + v * _upwind2(v, v, 1, hy)
    return (-adv_u + nu * _laplacian(u, hx, hy), -adv_v + nu * _laplacian(v, hx, hy))


def _random_trig_field(rng, xx, yy):
    """2 * w0 / max|w0| + c with w0 a random trigonometric polynomial of
    wavenumbers |k|, |l| <= 4 and c ~ U(-2, 2)."""
    w0 = np.zeros_like(xx)
    for k in range(-4, 5):
        for l in range(-4, 5):
            lam = rng.standard_normal()
            gam = rng.standard_normal()
            phase = k * xx + l * yy
            w0 += lam * np.cos(phase) + gam * np.sin(phase)
    c = rng.uniform(-2.0, 2.0)
    return 2.0 * w0 / np.max(np.abs(w0)) + c, float(c)


def burgers2d(
    seed: int,
    nx: int = 256,
    nu: float = 0.05,
    t_end: float = 4.0,
    dt_sim: float = None,
    save_count: int = 64,
    pair_mode: str = "uniform",
    ref_scale: int = 1,
    t_start: float = 0.0,
) -> FieldDataset:
    """Coupled Burgers system on [0, 2*pi]^2 with periodic boundaries.

    ``dt_sim`` defaults to 1/1600 at nx=256 and scales with the grid to keep
    the CFL number fixed.  With ``pair_mode="uniform"`` the ``save_count``
    snapshots sit at a uniform stride of simulation steps.  With ``"bursts"``
    each of the ``save_count`` anchor times additionally stores its immediate
    next-step successor, so one-step residual pairs are separated by
    ``dt_sim`` while the anchors still cover the whole horizon; consumers
    should pair snapshots whose time gap equals ``dt``.

    ``ref_scale > 1`` runs the solver on a ``ref_scale``-times finer grid (and
    correspondingly smaller step) and stores every ``ref_scale``-th point, so
    the saved nx-resolution fields carry the reference solution's accuracy
    rather than the coarse grid's own truncation error.
    """
    if nx < 32:
        raise ValueError("nx must be >= 32")
    if pair_mode not in ("uniform", "bursts"):
        raise ValueError("pair_mode must be 'uniform' or 'bursts'")
    if ref_scale < 1:
        raise ValueError("ref_scale must be >= 1")
    if dt_sim is None:
        dt_sim = (1.0 / 1600.0) * (256.0 / nx)
    nx_sim = nx * ref_scale
    dt_run = dt_sim / ref_scale
    h_sim = 2.0 * np.pi / nx_sim
    h = 2.0 * np.pi / nx
    g_x = h * np.arange(nx)
    sim_x = h_sim * np.arange(nx_sim)
    xx, yy = np.meshgrid(sim_x, sim_x, indexing="ij")
    rng = rng_for(seed, "burgers2d-ic")
    u, c_u = _random_trig_field(rng, xx, yy)
    v, c_v = _random_trig_field(rng, xx, yy)

    if not 0.0 <= t_start < t_end:
        raise ValueError("need 0 <= t_start < t_end")
    first = int(round(t_start / dt_sim))
    steps = int(round(t_end / dt_sim))
    stride = max(1, (steps - first) // save_count)
    n_anchor = min(save_count, (steps - first) // stride + 1)
    if pair_mode == "bursts":
        save_steps = []
        for k in range(n_anchor):
            save_steps.extend((first + k * stride, first + k * stride + 1))
    else:
        save_steps = [first + k * stride for k in range(n_anchor)]
    save_set = sorted(set(save_steps))

    snaps_u = np.empty((len(save_set), nx, nx))
    snaps_v = np.empty((len(save_set), nx, nx))
    times = dt_sim * np.asarray(save_set)
    saved = 0
    for fine_step in range(save_set[-1] * ref_scale + 1):
        if saved < len(save_set) and fine_step == save_set[saved] * ref_scale:
            if not (np.isfinite(u).all() and np.isfinite(v).all()):
                raise RuntimeError(
                    f"solution blew up at step {fine_step} "
                    f"(t={fine_step * dt_run:.4f}); reduce dt_sim"
                )
            snaps_u[saved] = u[::ref_scale, ::ref_scale]
            snaps_v[saved] = v[::ref_scale, ::ref_scale]
            saved += 1
            if saved == len(save_set):
                break
        k1u, k1v = _burgers_rhs(u, v, h_sim, h_sim, nu)
        k2u, k2v = _burgers_rhs(
            u + 0.5 * dt_run * k1u, v + 0.5 * dt_run * k1v, h_sim, h_sim, nu
        )
        u = u + dt_run * k2u
        v = v + dt_run * k2v

    obs_dt = dt_sim if pair_mode == "bursts" else stride * dt_sim
    truth = {
        "u": TermList.from_dict(
            {("u_00", "u_10"): -1.0, ("u_01", "v_00"): -1.0, ("u_20",): nu, ("u_02",): nu}
        ),
        "v": TermList.from_dict(
            {("u_00", "v_10"): -1.0, ("v_00", "v_01"): -1.0, ("v_20",): nu, ("v_02",): nu}
        ),
    }
    return FieldDataset(
        kind="grid2d",
        variables={"u": snaps_u, "v": snaps_v},
        coords={"x": g_x, "y": g_x.copy(), "t": times},
        dt=obs_dt,
        spacings={"dx": h, "dy": h},
        seed=seed,
        ground_truth=truth,
        meta={
            "problem": "burgers2d",
            "nu": nu,
            "dt_sim": dt_sim,
            "t_end": t_end,
            "pair_mode": pair_mode,
            "ref_scale": ref_scale,
            "ic_offsets": [c_u, c_v],
        },
    )


# -- 1-D Burgers with varying coefficient -------------------------------------


def _spectral_ddx(snapshots, dx, order=1):
    ik = 2j * np.pi * np.fft.fftfreq(snapshots.shape[-1], d=dx)
    return np.real(np.fft.ifft(ik**order * np.fft.fft(snapshots, axis=-1), axis=-1))


def varying_coefficient(t):
    """Advection coefficient a(t) = 1 + sin(t)/4 of the varying Burgers case."""
    return 1.0 + 0.25 * np.sin(t)


def burgers1d_vc(
    seed: int = 0,
    nx: int = 256,
    nu: float = 0.1,
    t_end: float = 10.0,
    dt_sim: float = 2e-3,
    save_count: int = 200,
) -> FieldDataset:
    """u_t = -(1 + sin(t)/4) u u_x + nu u_xx on [-8, 8) from a Gaussian bump.

    Space derivatives use the discrete Fourier transform; time stepping is
    classical fixed-step RK4.  The stored bundle carries the state plus the
    a-priori derivative channels u_x and u_xx computed spectrally from the
    clean snapshots, and the coordinate channels x and t.
    """
    dx = 16.0 / nx
    x = -8.0 + dx * np.arange(nx)
    u = np.exp(-((x + 1.0) ** 2))
    ik = 2j * np.pi * np.fft.fftfreq(nx, d=dx)

    def rhs(t, w):
        w_hat = np.fft.fft(w)
        wx = np.real(np.fft.ifft(ik * w_hat))
        wxx = np.real(np.fft.ifft(ik * ik * w_hat))
        return -varying_coefficient(t) * w * wx + nu * wxx

    steps = int(round(t_end / dt_sim))
    stride = max(1, steps // save_count)
    n_save = min(save_count, steps // stride + 1)
    snaps = np.empty((n_save, nx))
    saved = 0
    t = 0.0
    for step in range(steps + 1):
        if step % stride == 0 and saved < n_save:
            if not np.isfinite(u).all():
                raise RuntimeError(f"solution blew up at step {step} (t={t:.4f})")
            snaps[saved] = u
            saved += 1
            if saved == n_save:
                break
        k1 = rhs(t, u)
        k2 = rhs(t + 0.5 * dt_sim, u + 0.5 * dt_sim * k1)
        k3 = rhs(t + 0.5 * dt_sim, u + 0.5 * dt_sim * k2)
        k4 = rhs(t + dt_sim, u + dt_sim * k3)
        u = u + (dt_sim / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += dt_sim

    obs_dt = stride * dt_sim
    return FieldDataset(
        kind="grid1d",
        variables={"u": snaps},
        coords={"x": x, "t": obs_dt * np.arange(n_save)},
        channels={
            "u_x": _spectral_ddx(snaps, dx, 1),
            "u_xx": _spectral_ddx(snaps, dx, 2),
        },
        dt=obs_dt,
        spacings={"dx": dx},
        seed=seed,
        ground_truth=None,
        meta={
            "problem": "burgers1d_vc",
            "nu": nu,
            "dt_sim": dt_sim,
            "t_end": t_end,
            "template": {
                "u": {
                    "expression": "c1*u*u_x + c2*sin(t)*u*u_x + c3*u_xx",
                    "params": {"c1": -1.0, "c2": -0.25, "c3": nu},
                }
            },
        },
    )


# -- 2-D Hopf normal form ------------------------------------------------------


def hopf(
    seed: int = 0,
    mus=DEFAULT_HOPF_MUS,
    t_end: float = 2.0 * np.pi,
    dt: float = 0.01,
    radii=(0.25, 0.5, 0.75, 1.0),
    omega: float = 1.0,
    amplitude: float = 1.0,
) -> FieldDataset:
    """Hopf normal form trajectories, one batch of initial radii per mu value.

    Generates xdot = mu x + omega y - A x (x^2 + y^2) and
    ydot = -omega x + mu y - A y (x^2 + y^2) with RK4 at fixed dt; the
    recorded ground truth follows the generator's sign convention.
    """
    mus = tuple(float(m) for m in mus)
    radii = tuple(float(r) for r in radii)
    mu_vec = np.repeat(mus, len(radii))
    n_traj = mu_vec.size
    state = np.zeros((n_traj, 2))
    state[:, 0] = np.tile(radii, len(mus))  # start on the positive x axis

    def rhs(s):
        x_, y_ = s[:, 0], s[:, 1]
        r2 = x_ * x_ + y_ * y_
        return np.column_stack(
            [
                mu_vec * x_ + omega * y_ - amplitude * x_ * r2,
                -omega * x_ + mu_vec * y_ - amplitude * y_ * r2,
            ]
        )

    n_t = int(round(t_end / dt)) + 1
    xs = np.empty((n_traj, n_t))
    ys = np.empty((n_traj, n_t))
    for it in range(n_t):
        xs[:, it] = state[:, 0]
        ys[:, it] = state[:, 1]
        if it == n_t - 1:
            break
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * dt * k1)
        k3 = rhs(state + 0.5 * dt * k2)
        k4 = rhs(state + dt * k3)
        state = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    truth = {
        "x": TermList.from_dict(
            {
                ("mu", "x"): 1.0,
                ("y",): omega,
                ("x", "x", "x"): -amplitude,
                ("x", "y", "y"): -amplitude,
            }
        ),
        "y": TermList.from_dict(
            {
                ("x",): -omega,
                ("mu", "y"): 1.0,
                ("x", "x", "y"): -amplitude,
                ("y", "y", "y"): -amplitude,
            }
        ),
    }
    return FieldDataset(
        kind="trajectory",
        variables={"x": xs, "y": ys},
        coords={"t": dt * np.arange(n_t)},
        side_channels={"mu": mu_vec.astype(float)},
        dt=dt,
        seed=seed,
        ground_truth=truth,
        meta={
            "problem": "hopf",
            "mus": list(mus),
            "radii": list(radii),
            "omega": omega,
            "amplitude": amplitude,
        },
    )


# -- JMAK kinetics --------------------------------------------------------------


def jmak(
    ks=DEFAULT_JMAK_KS, n: int = 2, samples_per_k: int = 20, seed: int = 0
) -> FieldDataset:
    """Tabular y = 1 - exp(-k t^n) samples, t drawn uniformly from [0, 1]."""
    ks = tuple(float(k) for k in ks)
    rng = rng_for(seed, "jmak-t")
    t_col = np.concatenate([rng.uniform(0.0, 1.0, samples_per_k) for _ in ks])
    k_col = np.repeat(ks, samples_per_k)
    y = 1.0 - np.exp(-k_col * t_col**n)
    return FieldDataset(
        kind="tabular",
        variables={"y": y},
        channels={"t": t_col, "k": k_col},
        seed=seed,
        ground_truth=None,
        meta={
            "problem": "jmak",
            "n": n,
            "ks": list(ks),
            "template": {
                "y": {
                    "expression": f"a - exp(-b*k*t**{n})",
                    "params": {"a": 1.0, "b": 1.0},
                }
            },
        },
    )


# -- noise ------------------------------------------------------------------------


def add_noise(
    ds: FieldDataset, noise_level: float, seed: int = 0, use_abs_max: bool = False
) -> FieldDataset:
    """Perturb each state variable by C * M * W with W iid standard normal.

    M is the maximum of the variable's values over all samples (of the
    absolute values when ``use_abs_max``).  Coordinates, side channels and
    precomputed feature channels are left untouched; the input dataset is
    not modified.
    """
    if noise_level < 0:
        raise ValueError("noise level must be nonnegative")
    out = copy.deepcopy(ds)
    if noise_level == 0:
        return out
    for name in sorted(out.variables):
        arr = out.variables[name]
        scale_ref = np.abs(arr) if use_abs_max else arr
        m = float(np.max(scale_ref))
        w = rng_for(seed, "noise", name).standard_normal(arr.shape)
        out.variables[name] = arr + noise_level * m * w
    out.noise_level = noise_level
    out.meta = dict(out.meta)
    out.meta["noise_seed"] = seed
    out.meta["noise_abs_max"] = bool(use_abs_max)
    return out
