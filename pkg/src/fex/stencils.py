"""Finite-difference convolution kernels that turn state fields into derivative features.

A :class:`Kernel` holds raw integer-like stencil weights together with the
derivative multi-index it targets.  Raw weights are grid independent; the
physical derivative is recovered at application time by dividing out the
leading moment and the grid spacings.

Axis convention used throughout: a 2-D field is stored as ``field[ix, iy]``,
i.e. array axis 0 runs along x (spacing ``dx``) and axis 1 along y (spacing
``dy``).  A kernel with target ``(i, j)`` approximates
``d^(i+j) f / dx^i dy^j``, and the derived feature of a variable ``u`` is
named ``u_ij`` (so ``u_10`` is ``u_x`` and ``u_01`` is ``u_y``).
"""

from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy import ndimage

MOMENT_TOL = 1e-12

# 1-D second-order one-sided (upwind) first-derivative stencil at offsets 0, 1, 2,
# and the central second-derivative stencil at offsets -1, 0, 1.
_UPWIND_D1 = ((0, -3.0), (1, 4.0), (2, -1.0))
_CENTRAL_D2 = ((-1, 1.0), (0, -2.0), (1, 1.0))


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid; ``x0``/``y0`` are the coordinates of index (0, 0)."""

    nx: int
    ny: int
    dx: float
    dy: float
    x0: float = 0.0
    y0: float = 0.0
    boundary: str = "periodic"

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError("grid spacings must be positive")
        if self.boundary != "periodic":
            raise ValueError(f"unsupported boundary {self.boundary!r}")

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.ny)


@dataclass(frozen=True)
class Kernel:
    """An N-by-N stencil targeting the derivative of order ``target=(i, j)``.

    ``moment`` is the (i, j) entry of the moment matrix of the raw weights and
    ``normalizer`` equals ``moment * i! * j!`` (the raw discrete moment).
    Applying the raw weights to a smooth field yields
    ``moment * dx**i * dy**j * d^(i+j)f`` plus higher-order terms, so
    :func:`convolve` divides by ``moment * dx**i * dy**j``.
    """

    size: int
    weights: np.ndarray
    target: tuple[int, int]
    moment: float = field(default=0.0)
    normalizer: float = field(default=0.0)

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError("kernel size must be odd and >= 3")
        if self.weights.shape != (self.size, self.size):
            raise ValueError("weights shape does not match size")
        i, j = self.target
        if i < 0 or j < 0:
            raise ValueError("target orders must be nonnegative")

    @property
    def name(self) -> str:
        return f"q{self.target[0]}{self.target[1]}"


def make_kernel(weights, target: tuple[int, int]) -> Kernel:
    """Build a validated kernel from raw weights.

    All moments of total order below ``i + j`` must vanish and the target
    moment must be nonzero, i.e. the weights must actually approximate the
    requested derivative (at first order or better).
    """
    weights = np.asarray(weights, dtype=float)
    size = weights.shape[0]
    kern = Kernel(size=size, weights=weights, target=tuple(target))
    m = moment_matrix(kern)
    i, j = kern.target
    if abs(m[i, j]) <= MOMENT_TOL:
        raise ValueError("kernel does not approximate target derivative")
    for a in range(size):
        for b in range(size):
            if a + b < i + j and abs(m[a, b]) > MOMENT_TOL:
                raise ValueError(
                    f"moment ({a},{b}) = {m[a, b]:g} must vanish below target order"
                )
    moment = float(m[i, j])
    return Kernel(
        size=size,
        weights=weights,
        target=kern.target,
        moment=moment,
        normalizer=moment * factorial(i) * factorial(j),
    )


def _embed_1d(size: int, taps, axis: int) -> np.ndarray:
    w = np.zeros((size, size))
    c = size // 2
    for off, val in taps:
        if axis == 0:
            w[c + off, c] = val
        else:
            w[c, c + off] = val
    return w


def builtin_kernels(size: int = 5) -> dict[tuple[int, int], Kernel]:
    """The fixed kernel set for derivative orders 0 <= i + j <= 2.

    q00 is the identity, the first derivatives use the second-order one-sided
    scheme (forward biased, middle row ``-3 4 -1``), the pure second
    derivatives the central scheme, and the mixed q11 is the outer product of
    the two one-sided first-derivative stencils.
    """
    if size % 2 == 0 or size < 5:
        raise ValueError("kernel size must be odd and >= 5")
    c = size // 2
    out = {}

    delta = np.zeros((size, size))
    delta[c, c] = 1.0
    out[(0, 0)] = make_kernel(delta, (0, 0))

    out[(1, 0)] = make_kernel(_embed_1d(size, _UPWIND_D1, axis=0), (1, 0))
    out[(0, 1)] = make_kernel(_embed_1d(size, _UPWIND_D1, axis=1), (0, 1))
    out[(2, 0)] = make_kernel(_embed_1d(size, _CENTRAL_D2, axis=0), (2, 0))
    out[(0, 2)] = make_kernel(_embed_1d(size, _CENTRAL_D2, axis=1), (0, 2))

    cross = np.zeros((size, size))
    for o1, v1 in _UPWIND_D1:
        for o2, v2 in _UPWIND_D1:
            cross[c + o1, c + o2] = v1 * v2
    out[(1, 1)] = make_kernel(cross, (1, 1))
    return out


def moment_matrix(k: Kernel) -> np.ndarray:
    """Moment matrix m[i, j] = (1/i!j!) * sum_{k1,k2} k1^i k2^j q[k1, k2]."""
    size = k.size
    offs = np.arange(size) - size // 2
    m = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            m[i, j] = (offs**i) @ k.weights @ (offs**j) / (
                factorial(i) * factorial(j)
            )
    return m


def check_order(k: Kernel) -> int:
    """Approximation order of ``k`` for its declared target derivative.

    Returns the largest p such that every moment entry (a, b) != target with
    a + b < i + j + p vanishes (|m| <= 1e-12).  The moment matrix only covers
    total orders up to 2*(size-1), which caps the checkable p.
    """
    m = moment_matrix(k)
    i, j = k.target
    if abs(m[i, j]) <= MOMENT_TOL:
        raise ValueError("kernel does not approximate target derivative")
    size = k.size
    p = 0
    max_p = 2 * (size - 1) - (i + j)
    for cand in range(1, max_p + 1):
        ok = True
        for a in range(size):
            for b in range(size):
                if (a, b) == (i, j) or a + b >= i + j + cand:
                    continue
                if abs(m[a, b]) > MOMENT_TOL:
                    ok = False
        if not ok:
            break
        p = cand
    return p


def convolve(field_arr: np.ndarray, k: Kernel, g: Grid) -> np.ndarray:
    """Apply ``k`` with periodic wrap-around and normalize to a derivative.

    Follows the correlation convention ``out[l1, l2] = sum q[k1, k2] *
    f[l1 + k1, l2 + k2]`` (kernels are never flipped), then divides by
    ``moment * dx**i * dy**j``.  The (0, 0) kernel returns the field itself.
    """
    field_arr = np.asarray(field_arr, dtype=float)
    if field_arr.shape != (g.nx, g.ny):
        raise ValueError(
            f"field shape {field_arr.shape} does not match grid ({g.nx}, {g.ny})"
        )
    i, j = k.target
    if (i, j) == (0, 0):
        return field_arr.copy()
    raw = ndimage.correlate(field_arr, k.weights, mode="wrap")
    return raw / (k.moment * g.dx**i * g.dy**j)


CANONICAL_ORDERS = ((0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0))


@dataclass(frozen=True)
class FeatureSet:
    """Named per-grid-point feature vectors, one row per point."""

    names: tuple[str, ...]
    values: np.ndarray  # (n_points, n_features)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


def feature_order(orders) -> list[tuple[int, int]]:
    """Canonical feature ordering: ascending total order, then i, then j."""
    return sorted(orders, key=lambda o: (o[0] + o[1], o[0], o[1]))


def feature_stack(fields, g: Grid, orders, scalars=None, size: int = 5) -> FeatureSet:
    """Derivative features for every grid point of a 2-D snapshot.

    The feature vector holds the coordinate channels (x, y, then any scalar
    side inputs such as t, broadcast to all points) followed by the
    derivative features ``<var>_ij`` for each variable in sorted name order
    and each requested order in canonical order.
    """
    kernels = builtin_kernels(size)
    orders = feature_order(orders)
    for o in orders:
        if o not in kernels:
            raise ValueError(f"unknown derivative order {o}")

    xx, yy = np.meshgrid(g.x, g.y, indexing="ij")
    names = ["x", "y"]
    cols = [xx.ravel(), yy.ravel()]
    npts = g.nx * g.ny
    if scalars:
        for sname in scalars:
            names.append(sname)
            cols.append(np.full(npts, float(scalars[sname])))
    for vname in sorted(fields):
        for i, j in orders:
            names.append(f"{vname}_{i}{j}")
            cols.append(convolve(fields[vname], kernels[(i, j)], g).ravel())
    return FeatureSet(names=tuple(names), values=np.column_stack(cols))
