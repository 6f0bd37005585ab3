"""Binary expression trees whose leaves take trainable linear combinations of features.

A tree is described by a :class:`TreeSkeleton` (shape only), an operator
sequence (one dictionary index per slot, inorder) and a flat parameter vector
theta.  Each leaf applies its unary operator entrywise to the feature vector
and combines the results with a per-leaf weight vector gamma.  Internal nodes
apply binary operators; when the skeleton's ``non_leaf_unary`` layer is
enabled, every binary node's output additionally passes through a unary
operator with trainable scale/shift (alpha, beta).  The root output always
passes through a final affine pair (alpha_out, beta_out).

Theta layout: ``[gamma blocks, one per leaf left-to-right | (alpha, beta) per
non-leaf unary in slot order | alpha_out, beta_out]``.
"""

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

EXP_CLAMP = 40.0
DIV_FLOOR = 1e-8


def _u_id(x):
    return x


def _u_id_d(x):
    return np.ones_like(x)


def _u_square(x):
    return x * x


def _u_square_d(x):
    return 2.0 * x


def _u_cube(x):
    return x * x * x


def _u_cube_d(x):
    return 3.0 * x * x


def _u_exp(x):
    return np.exp(np.minimum(x, EXP_CLAMP))


def _u_exp_d(x):
    e = np.exp(np.minimum(x, EXP_CLAMP))
    return np.where(x <= EXP_CLAMP, e, 0.0)


def _u_sin(x):
    return np.sin(x)


def _u_sin_d(x):
    return np.cos(x)


def _u_cos(x):
    return np.cos(x)


def _u_cos_d(x):
    return -np.sin(x)


def _u_const(x):
    return np.ones_like(x)


def _u_const_d(x):
    return np.zeros_like(x)


def _b_add(a, b):
    return a + b


def _b_add_d(a, b):
    return 1.0, 1.0


def _b_sub(a, b):
    return a - b


def _b_sub_d(a, b):
    return 1.0, -1.0


def _b_mul(a, b):
    return a * b


def _b_mul_d(a, b):
    return b, a


def _safe_den(b):
    return np.where(np.abs(b) < DIV_FLOOR, np.where(b >= 0, DIV_FLOOR, -DIV_FLOOR), b)


def _b_div(a, b):
    return a / _safe_den(b)


def _b_div_d(a, b):
    d = _safe_den(b)
    return 1.0 / d, -a / (d * d)


def _b_min(a, b):
    return np.minimum(a, b)


def _b_min_d(a, b):
    m = (a <= b).astype(float)
    return m, 1.0 - m


@dataclass(frozen=True)
class UnaryOp:
    name: str
    fn: callable
    deriv: callable


@dataclass(frozen=True)
class BinaryOp:
    name: str
    fn: callable
    deriv: callable  # returns (d/da, d/db)


UNARY_CATALOG = {
    "id": UnaryOp("id", _u_id, _u_id_d),
    "square": UnaryOp("square", _u_square, _u_square_d),
    "cube": UnaryOp("cube", _u_cube, _u_cube_d),
    "exp": UnaryOp("exp", _u_exp, _u_exp_d),
    "sin": UnaryOp("sin", _u_sin, _u_sin_d),
    "cos": UnaryOp("cos", _u_cos, _u_cos_d),
    "const": UnaryOp("const", _u_const, _u_const_d),
}

BINARY_CATALOG = {
    "add": BinaryOp("add", _b_add, _b_add_d),
    "sub": BinaryOp("sub", _b_sub, _b_sub_d),
    "mul": BinaryOp("mul", _b_mul, _b_mul_d),
    "div": BinaryOp("div", _b_div, _b_div_d),
    "min": BinaryOp("min", _b_min, _b_min_d),
}

DEFAULT_UNARY = ("id", "square", "cube", "exp", "sin", "cos")
DEFAULT_BINARY = ("add", "sub", "mul")

_BINARY_SYMBOL = {"add": "+", "sub": "-", "mul": "*"}


@dataclass(frozen=True)
class OperatorDictionary:
    unary: tuple
    binary: tuple

    def __post_init__(self):
        if not self.unary or not self.binary:
            raise ValueError("operator lists must be non-empty")
        if len({op.name for op in self.unary}) != len(self.unary):
            raise ValueError("duplicate unary operator names")
        if len({op.name for op in self.binary}) != len(self.binary):
            raise ValueError("duplicate binary operator names")

    @classmethod
    def default(cls) -> "OperatorDictionary":
        return cls.from_names(DEFAULT_UNARY, DEFAULT_BINARY)

    @classmethod
    def from_names(cls, unary_names, binary_names) -> "OperatorDictionary":
        try:
            unary = tuple(UNARY_CATALOG[n] for n in unary_names)
            binary = tuple(BINARY_CATALOG[n] for n in binary_names)
        except KeyError as exc:
            raise ValueError(f"unknown operator {exc.args[0]!r}") from exc
        return cls(unary=unary, binary=binary)

    @property
    def n_unary(self) -> int:
        return len(self.unary)

    @property
    def n_binary(self) -> int:
        return len(self.binary)


@dataclass(frozen=True)
class Slot:
    index: int
    arity: str  # 'unary' | 'binary'
    role: str  # 'leaf' | 'binary' | 'wrapper'


@dataclass(frozen=True)
class _Leaf:
    slot: int
    leaf_index: int


@dataclass(frozen=True)
class _Binary:
    slot: int
    wrapper_slot: int  # -1 when absent
    wrapper_index: int
    left: object
    right: object


@dataclass(frozen=True)
class TreeSkeleton:
    """Balanced binary tree shape with ``leaf_count`` leaves (a power of two)."""

    leaf_count: int
    non_leaf_unary: bool = False

    def __post_init__(self):
        n = self.leaf_count
        if n < 1 or (n & (n - 1)) != 0:
            raise ValueError("leaf_count must be a power of two >= 1")

    @property
    def slots(self) -> tuple:
        return _structure(self)[0]

    @property
    def root(self):
        return _structure(self)[1]

    @property
    def n_wrappers(self) -> int:
        return (self.leaf_count - 1) if self.non_leaf_unary else 0

    def slot_sizes(self, opdict: OperatorDictionary) -> tuple[int, ...]:
        return tuple(
            opdict.n_unary if s.arity == "unary" else opdict.n_binary
            for s in self.slots
        )


@lru_cache(maxsize=None)
def _structure(skeleton: TreeSkeleton):
    """Inorder slot list and node tree.  A binary node's wrapper slot (when the
    non-leaf unary layer is on) immediately follows the node's own slot."""
    slots = []
    counters = {"leaf": 0, "wrapper": 0}

    def add(arity, role):
        slots.append(Slot(index=len(slots), arity=arity, role=role))
        return len(slots) - 1

    def build(n):
        if n == 1:
            idx = add("unary", "leaf")
            leaf_index = counters["leaf"]
            counters["leaf"] += 1
            return _Leaf(slot=idx, leaf_index=leaf_index)
        left = build(n // 2)
        idx = add("binary", "binary")
        wslot, windex = -1, -1
        if skeleton.non_leaf_unary:
            wslot = add("unary", "wrapper")
            windex = counters["wrapper"]
            counters["wrapper"] += 1
        right = build(n // 2)
        return _Binary(
            slot=idx, wrapper_slot=wslot, wrapper_index=windex, left=left, right=right
        )

    root = build(skeleton.leaf_count)
    return tuple(slots), root


def validate_sequence(skeleton: TreeSkeleton, sequence, opdict: OperatorDictionary):
    sequence = tuple(int(i) for i in sequence)
    slots = skeleton.slots
    if len(sequence) != len(slots):
        raise ValueError(
            f"sequence length {len(sequence)} does not match {len(slots)} slots"
        )
    for slot, idx in zip(slots, sequence):
        size = opdict.n_unary if slot.arity == "unary" else opdict.n_binary
        if not 0 <= idx < size:
            raise ValueError(
                f"operator index {idx} out of range for {slot.arity} slot {slot.index}"
            )
    return sequence


def theta_size(skeleton: TreeSkeleton, n_features: int) -> int:
    return skeleton.leaf_count * n_features + 2 * skeleton.n_wrappers + 2


@dataclass
class ExpressionInstance:
    """A tree shape plus its discrete operator choices and continuous parameters.

    ``feature_transform``, when set to (means, scales), makes the tree consume
    standardized features internally: every leaf sees (x - m) / s.  Evaluation
    and canonicalization both account for it, so instances always describe a
    function of the physical features.
    """

    skeleton: TreeSkeleton
    sequence: tuple
    opdict: OperatorDictionary
    feature_names: tuple
    theta: np.ndarray
    feature_transform: tuple = None

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def copy(self) -> "ExpressionInstance":
        return replace(self, theta=self.theta.copy())

    def with_theta(self, theta) -> "ExpressionInstance":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError("theta size mismatch")
        return replace(self, theta=theta.copy())


def init_theta(
    skeleton: TreeSkeleton, n_features: int, rng, wrapper_mode: str = "identity"
) -> np.ndarray:
    """Parameter initialization: gamma ~ U(-1, 1), output affine (1, 0).

    Non-leaf unary (alpha, beta) pairs start at (1, 0) in ``identity`` mode
    and at (-1, 1) in ``complement`` mode.  Restarts alternate the two:
    saturating targets of the form c - U(.) sit in a basin that plain
    gradient descent never reaches from the identity configuration.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if wrapper_mode not in ("identity", "complement"):
        raise ValueError(f"unknown wrapper init mode {wrapper_mode!r}")
    theta = np.zeros(theta_size(skeleton, n_features))
    ng = skeleton.leaf_count * n_features
    theta[:ng] = rng.uniform(-1.0, 1.0, size=ng)
    alpha, beta = (1.0, 0.0) if wrapper_mode == "identity" else (-1.0, 1.0)
    theta[ng : ng + 2 * skeleton.n_wrappers : 2] = alpha
    theta[ng + 1 : ng + 2 * skeleton.n_wrappers : 2] = beta
    theta[-2] = 1.0  # alpha_out
    return theta


def instantiate(
    skeleton: TreeSkeleton,
    sequence,
    opdict: OperatorDictionary,
    feature_names,
    rng=0,
    feature_transform=None,
) -> ExpressionInstance:
    sequence = validate_sequence(skeleton, sequence, opdict)
    feature_names = tuple(feature_names)
    theta = init_theta(skeleton, len(feature_names), rng)
    return ExpressionInstance(
        skeleton=skeleton,
        sequence=sequence,
        opdict=opdict,
        feature_names=feature_names,
        theta=theta,
        feature_transform=feature_transform,
    )


class TreeEvaluator:
    """Evaluates one instance repeatedly at different theta over a fixed batch.

    The per-leaf unary transforms of the feature matrix are precomputed once,
    so each evaluation costs one mat-vec per leaf plus the internal node ops.
    """

    def __init__(self, inst: ExpressionInstance, features: np.ndarray):
        X = np.asarray(features, dtype=float)
        if X.ndim != 2 or X.shape[1] != inst.n_features:
            raise ValueError(
                f"feature batch shape {X.shape} does not match "
                f"{inst.n_features} feature names"
            )
        if inst.feature_transform is not None:
            means, scales = inst.feature_transform
            X = (X - np.asarray(means)) / np.asarray(scales)
        self.inst = inst
        self.n_rows, self.n_features = X.shape
        sk = inst.skeleton
        slots, self.root = _structure(sk)
        self.leaf_count = sk.leaf_count
        leaf_ops = [
            inst.sequence[s.index] for s in slots if s.role == "leaf"
        ]
        transforms = {}
        for op_idx in set(leaf_ops):
            transforms[op_idx] = inst.opdict.unary[op_idx].fn(X)
        # (n_leaves, rows, features): one batched matmul serves all leaves
        self.leaf_feats = np.ascontiguousarray(
            np.stack([transforms[i] for i in leaf_ops])
        )
        self._gamma_len = self.leaf_count * self.n_features

    def _split(self, theta):
        gammas = theta[: self._gamma_len].reshape(self.leaf_count, self.n_features)
        nw = self.inst.skeleton.n_wrappers
        wrap = theta[self._gamma_len : self._gamma_len + 2 * nw].reshape(nw, 2)
        return gammas, wrap, theta[-2], theta[-1]

    def _forward(self, theta, cache=None):
        gammas, wrap, a_out, b_out = self._split(theta)
        seq = self.inst.sequence
        opdict = self.inst.opdict
        louts = np.matmul(self.leaf_feats, gammas[:, :, None])[:, :, 0]

        def ev(node):
            if isinstance(node, _Leaf):
                return louts[node.leaf_index]
            a = ev(node.left)
            b = ev(node.right)
            val = opdict.binary[seq[node.slot]].fn(a, b)
            rec = [a, b, val, None, None]
            if node.wrapper_slot >= 0:
                u = opdict.unary[seq[node.wrapper_slot]]
                uval = u.fn(val)
                alpha, beta = wrap[node.wrapper_index]
                rec[3], rec[4] = val, uval
                val = alpha * uval + beta
            if cache is not None:
                cache[id(node)] = rec
            return val

        pre = ev(self.root)
        return a_out * pre + b_out, pre

    def evaluate(self, theta=None) -> np.ndarray:
        theta = self.inst.theta if theta is None else theta
        out, _ = self._forward(theta)
        return out

    def evaluate_with_pullback(self, theta=None):
        """Returns (output, pullback) where pullback(upstream) gives the
        gradient of sum(upstream * output) with respect to theta."""
        theta = self.inst.theta if theta is None else theta
        cache = {}
        out, pre = self._forward(theta, cache)
        gammas, wrap, a_out, _ = self._split(theta)
        seq = self.inst.sequence
        opdict = self.inst.opdict

        def pullback(upstream):
            grads = np.zeros_like(theta)
            grads[-2] = float(upstream @ pre)
            grads[-1] = float(np.sum(upstream))
            nw = self.inst.skeleton.n_wrappers
            wrap_grads = np.zeros((nw, 2))
            leaf_g = np.zeros((self.leaf_count, self.n_rows))

            def back(node, g):
                if isinstance(node, _Leaf):
                    leaf_g[node.leaf_index] += g
                    return
                a, b, raw, z, uval = cache[id(node)]
                if node.wrapper_slot >= 0:
                    u = opdict.unary[seq[node.wrapper_slot]]
                    alpha = wrap[node.wrapper_index, 0]
                    wrap_grads[node.wrapper_index, 0] += float(g @ uval)
                    wrap_grads[node.wrapper_index, 1] += float(np.sum(g))
                    g = g * (alpha * u.deriv(z))
                da, db = opdict.binary[seq[node.slot]].deriv(a, b)
                back(node.left, g * da)
                back(node.right, g * db)

            back(self.root, np.asarray(upstream, dtype=float) * a_out)
            grads[: self._gamma_len] = np.matmul(
                leaf_g[:, None, :], self.leaf_feats
            )[:, 0, :].ravel()
            if nw:
                grads[self._gamma_len : self._gamma_len + 2 * nw] = wrap_grads.ravel()
            return grads

        return out, pullback


def evaluate(inst: ExpressionInstance, features: np.ndarray) -> np.ndarray:
    """Evaluate the tree on a feature batch, one output per row.

    Evaluation is total (exp is clamped); a non-finite output signals a failed
    candidate and is left to the caller to detect.
    """
    return TreeEvaluator(inst, features).evaluate()


def gradient(inst: ExpressionInstance, features: np.ndarray, upstream) -> np.ndarray:
    """Gradient of sum(upstream * output) with respect to theta, reverse mode."""
    ev = TreeEvaluator(inst, features)
    _, pullback = ev.evaluate_with_pullback()
    return pullback(np.asarray(upstream, dtype=float))


# --- canonical forms -------------------------------------------------------

_POLY_UNARY = {"id", "square", "cube", "const"}
_POLY_BINARY = {"add", "sub", "mul"}


@dataclass(frozen=True)
class TermList:
    """Expanded polynomial form: ((feature names...), coefficient) pairs sorted
    by descending coefficient magnitude.  The empty key is the constant term."""

    terms: tuple

    @classmethod
    def from_dict(cls, d, threshold=0.0) -> "TermList":
        kept = [
            (tuple(k), float(c))
            for k, c in d.items()
            if c != 0.0 and abs(c) >= threshold
        ]
        kept.sort(key=lambda t: (-abs(t[1]), t[0]))
        return cls(terms=tuple(kept))

    def coefficient(self, key) -> float:
        key = tuple(sorted(key))
        for k, c in self.terms:
            if k == key:
                return c
        return 0.0

    def evaluate(self, features: np.ndarray, names) -> np.ndarray:
        X = np.asarray(features, dtype=float)
        idx = {n: i for i, n in enumerate(names)}
        out = np.zeros(X.shape[0])
        for key, coef in self.terms:
            val = np.full(X.shape[0], coef)
            for name in key:
                val = val * X[:, idx[name]]
            out += val
        return out

    def __str__(self) -> str:
        return format_terms(dict(self.terms))


@dataclass(frozen=True)
class SymbolicExpr:
    """Human-readable form for trees that do not expand to a polynomial."""

    text: str
    theta: np.ndarray

    def __str__(self) -> str:
        return self.text


def format_monomial(key) -> str:
    if not key:
        return "1"
    parts = []
    seen = []
    for name in key:
        if name in seen:
            continue
        seen.append(name)
        power = sum(1 for n in key if n == name)
        parts.append(name if power == 1 else f"{name}**{power}")
    return "*".join(parts)


def format_terms(poly: dict, digits: int = 4, threshold: float = 0.0) -> str:
    items = [(k, c) for k, c in poly.items() if c != 0.0 and abs(c) >= threshold]
    items.sort(key=lambda t: (-abs(t[1]), t[0]))
    if not items:
        return "0"
    pieces = []
    for n, (key, coef) in enumerate(items):
        mag = float(f"%.{digits}g" % abs(coef))
        body = format_monomial(key)
        if body == "1":
            text = f"%.{digits}g" % mag
        elif mag == 1.0:
            text = body
        else:
            text = (f"%.{digits}g" % mag) + "*" + body
        if n == 0:
            pieces.append(text if coef >= 0 else "-" + text)
        else:
            pieces.append(("+ " if coef >= 0 else "- ") + text)
    return " ".join(pieces)


def _poly_mul(p1, p2):
    out = {}
    for k1, c1 in p1.items():
        for k2, c2 in p2.items():
            key = tuple(sorted(k1 + k2))
            out[key] = out.get(key, 0.0) + c1 * c2
    return out


def _poly_add(p1, p2, sign=1.0):
    out = dict(p1)
    for k, c in p2.items():
        out[k] = out.get(k, 0.0) + sign * c
    return out


def _poly_affine(p, alpha, beta):
    out = {k: alpha * c for k, c in p.items()}
    out[()] = out.get((), 0.0) + beta
    return out


def _feature_base(idx, name, transform):
    """The feature as a polynomial: x itself, or (x - m) / s when standardized."""
    if transform is None:
        return {(name,): 1.0}
    m = float(np.asarray(transform[0])[idx])
    s = float(np.asarray(transform[1])[idx])
    base = {(name,): 1.0 / s}
    if m != 0.0:
        base[()] = -m / s
    return base


def _poly_scale(p, c):
    return {k: c * v for k, v in p.items()}


def _leaf_poly(op_name, gamma, names, transform):
    out = {}
    for idx, (g, name) in enumerate(zip(gamma, names)):
        if g == 0.0:
            continue
        base = _feature_base(idx, name, transform)
        if op_name == "id":
            p = base
        elif op_name == "square":
            p = _poly_mul(base, base)
        elif op_name == "cube":
            p = _poly_mul(_poly_mul(base, base), base)
        else:  # const
            p = {(): 1.0}
        out = _poly_add(out, _poly_scale(p, float(g)))
    return out


def _apply_poly_unary(op_name, p):
    if op_name in ("id", None):
        return p
    if op_name == "square":
        return _poly_mul(p, p)
    if op_name == "cube":
        return _poly_mul(_poly_mul(p, p), p)
    if op_name == "const":
        return {(): 1.0}
    raise ValueError(op_name)


def _expand(inst: ExpressionInstance, symbolic: bool, digits: int = 4):
    """Polynomial expansion over feature names.  In symbolic mode, non-expandable
    unary/binary applications become opaque rendered tokens so the result is
    always a poly; in strict mode they make the expansion fail (None)."""
    gammas = inst.theta[: inst.skeleton.leaf_count * inst.n_features].reshape(
        inst.skeleton.leaf_count, inst.n_features
    )
    nw = inst.skeleton.n_wrappers
    base = inst.skeleton.leaf_count * inst.n_features
    wrap = inst.theta[base : base + 2 * nw].reshape(nw, 2) if nw else None
    seq = inst.sequence
    opdict = inst.opdict

    transform = inst.feature_transform

    def walk(node):
        if isinstance(node, _Leaf):
            op = opdict.unary[seq[node.slot]]
            if op.name in _POLY_UNARY:
                return _leaf_poly(
                    op.name, gammas[node.leaf_index], inst.feature_names, transform
                )
            if not symbolic:
                return None
            out = {}
            for idx, (g, name) in enumerate(
                zip(gammas[node.leaf_index], inst.feature_names)
            ):
                if g == 0.0:
                    continue
                base = _feature_base(idx, name, transform)
                key = (f"{op.name}({format_terms(base, digits)})",)
                out[key] = out.get(key, 0.0) + float(g)
            return out
        left = walk(node.left)
        right = walk(node.right)
        if left is None or right is None:
            return None
        bop = opdict.binary[seq[node.slot]]
        if bop.name == "add":
            val = _poly_add(left, right)
        elif bop.name == "sub":
            val = _poly_add(left, right, sign=-1.0)
        elif bop.name == "mul":
            val = _poly_mul(left, right)
        elif symbolic:
            token = (
                f"{bop.name}({format_terms(left, digits)}, "
                f"{format_terms(right, digits)})"
            )
            val = {(token,): 1.0}
        else:
            return None
        if node.wrapper_slot >= 0:
            wop = opdict.unary[seq[node.wrapper_slot]]
            alpha, beta = wrap[node.wrapper_index]
            if wop.name in _POLY_UNARY:
                val = _apply_poly_unary(wop.name, val)
            elif symbolic:
                val = {(f"{wop.name}({format_terms(val, digits)})",): 1.0}
            else:
                return None
            val = _poly_affine(val, float(alpha), float(beta))
        return val

    poly = walk(inst.skeleton.root)
    if poly is None:
        return None
    return _poly_affine(poly, float(inst.theta[-2]), float(inst.theta[-1]))


def canonicalize(inst: ExpressionInstance, threshold: float = 0.0):
    """Expanded term list for polynomial trees, or a readable expression string
    (with 4-significant-digit coefficients plus the raw theta) otherwise."""
    poly = _expand(inst, symbolic=False)
    if poly is not None:
        return TermList.from_dict(poly, threshold=threshold)
    sym = _expand(inst, symbolic=True)
    return SymbolicExpr(
        text=format_terms(sym, digits=4, threshold=threshold),
        theta=inst.theta.copy(),
    )


def expression_text(inst: ExpressionInstance, threshold: float = 0.0) -> str:
    form = canonicalize(inst, threshold=threshold)
    if isinstance(form, TermList):
        return format_terms(dict(form.terms), digits=4)
    return form.text
