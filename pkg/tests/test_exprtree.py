import numpy as np
import pytest

from fex.exprtree import (
    BINARY_CATALOG,
    UNARY_CATALOG,
    ExpressionInstance,
    OperatorDictionary,
    SymbolicExpr,
    TermList,
    TreeEvaluator,
    TreeSkeleton,
    canonicalize,
    evaluate,
    gradient,
    instantiate,
    theta_size,
)

DICT = OperatorDictionary.default()
FULL_DICT = OperatorDictionary.from_names(
    ("id", "square", "cube", "exp", "sin", "cos", "const"),
    ("add", "sub", "mul", "div", "min"),
)

U = {op.name: i for i, op in enumerate(DICT.unary)}
B = {op.name: i for i, op in enumerate(DICT.binary)}


def make_instance(skeleton, seq, names, theta=None, opdict=DICT):
    inst = instantiate(skeleton, seq, opdict, names, rng=0)
    if theta is not None:
        inst = inst.with_theta(np.asarray(theta, dtype=float))
    return inst


def fd_gradient(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (2 * h)
    return g


def test_theta_size_two_leaves_five_features():
    sk = TreeSkeleton(leaf_count=2)
    assert theta_size(sk, 5) == 12


def test_theta_size_burgers_four_leaves():
    sk = TreeSkeleton(leaf_count=4)
    assert theta_size(sk, 14) == 58


def test_theta_size_with_wrapper_layer():
    sk = TreeSkeleton(leaf_count=4, non_leaf_unary=True)
    # 3 binary nodes each gain an (alpha, beta) pair
    assert theta_size(sk, 5) == 4 * 5 + 2 * 3 + 2


def test_skeleton_slot_count():
    assert len(TreeSkeleton(leaf_count=4).slots) == 7
    assert len(TreeSkeleton(leaf_count=4, non_leaf_unary=True).slots) == 10
    assert len(TreeSkeleton(leaf_count=1).slots) == 1


def test_skeleton_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        TreeSkeleton(leaf_count=3)
    with pytest.raises(ValueError):
        TreeSkeleton(leaf_count=0)


def test_instantiate_is_deterministic():
    sk = TreeSkeleton(leaf_count=2)
    names = ("a", "b", "c")
    i1 = instantiate(sk, (0, 0, 0), DICT, names, rng=42)
    i2 = instantiate(sk, (0, 0, 0), DICT, names, rng=42)
    np.testing.assert_array_equal(i1.theta, i2.theta)
    assert i1.theta[-2] == 1.0 and i1.theta[-1] == 0.0


def test_instantiate_rejects_bad_sequences():
    sk = TreeSkeleton(leaf_count=2)
    with pytest.raises(ValueError, match="length"):
        instantiate(sk, (0, 0), DICT, ("a",))
    with pytest.raises(ValueError, match="out of range"):
        instantiate(sk, (0, 99, 0), DICT, ("a",))
    with pytest.raises(ValueError, match="out of range"):
        instantiate(sk, (9, 0, 0), DICT, ("a",))


def test_evaluate_sum_of_picked_features():
    sk = TreeSkeleton(leaf_count=2)
    names = ("u_00", "u_01", "u_10")
    theta = np.zeros(theta_size(sk, 3))
    theta[0] = 1.0  # leaf 1 picks u_00
    theta[4] = 1.0  # leaf 2 picks u_01
    theta[-2] = 1.0
    inst = make_instance(sk, (U["id"], B["add"], U["id"]), names, theta)
    out = evaluate(inst, np.array([[2.0, 3.0, -7.0]]))
    assert out[0] == pytest.approx(5.0)


def test_evaluate_product_of_picked_features():
    sk = TreeSkeleton(leaf_count=2)
    names = ("u_00", "u_01")
    theta = np.zeros(theta_size(sk, 2))
    theta[0] = 1.0
    theta[3] = 1.0
    theta[-2] = 1.0
    inst = make_instance(sk, (U["id"], B["mul"], U["id"]), names, theta)
    out = evaluate(inst, np.array([[2.0, -0.5]]))
    assert out[0] == pytest.approx(-1.0)


def test_evaluate_single_sin_leaf():
    sk = TreeSkeleton(leaf_count=1)
    theta = np.zeros(theta_size(sk, 2))
    theta[0] = 1.0
    theta[-2] = 1.0
    inst = make_instance(sk, (U["sin"],), ("x", "y"), theta)
    out = evaluate(inst, np.array([[np.pi / 2, 0.3]]))
    assert out[0] == pytest.approx(1.0)


def test_evaluate_is_deterministic():
    sk = TreeSkeleton(leaf_count=4)
    rng = np.random.default_rng(3)
    names = tuple("f%d" % i for i in range(6))
    seq = [U["square"], B["mul"], U["id"], B["add"], U["sin"], B["sub"], U["cos"]]
    inst = instantiate(sk, seq, DICT, names, rng=7)
    X = rng.standard_normal((50, 6))
    np.testing.assert_array_equal(evaluate(inst, X), evaluate(inst, X))


def test_exp_is_clamped():
    sk = TreeSkeleton(leaf_count=1)
    theta = np.zeros(theta_size(sk, 1))
    theta[0] = 1.0
    theta[-2] = 1.0
    inst = make_instance(sk, (U["exp"],), ("x",), theta)
    out = evaluate(inst, np.array([[1000.0]]))
    assert np.isfinite(out[0])
    assert out[0] == pytest.approx(np.exp(40.0))


def test_instances_are_value_types():
    sk = TreeSkeleton(leaf_count=2)
    inst = instantiate(sk, (0, 0, 0), DICT, ("a", "b"), rng=5)
    clone = inst.copy()
    clone.theta[0] = 123.0
    assert inst.theta[0] != 123.0


def test_gradient_of_linear_tree_sums_features():
    sk = TreeSkeleton(leaf_count=1)
    names = ("a", "b", "c")
    theta = np.zeros(theta_size(sk, 3))
    theta[-2] = 1.0
    inst = make_instance(sk, (U["id"],), names, theta)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((13, 3))
    g = gradient(inst, X, np.ones(13))
    np.testing.assert_allclose(g[:3], X.sum(axis=0), rtol=1e-12)
    assert g[-1] == pytest.approx(13.0)  # beta_out picks up the batch size


@pytest.mark.parametrize("uname", list(UNARY_CATALOG))
def test_gradient_matches_fd_per_unary_op(uname):
    opdict = FULL_DICT
    un = {op.name: i for i, op in enumerate(opdict.unary)}
    bn = {op.name: i for i, op in enumerate(opdict.binary)}
    sk = TreeSkeleton(leaf_count=2)
    rng = np.random.default_rng(hash(uname) % 2**32)
    names = ("p", "q", "r")
    inst = instantiate(sk, (un[uname], bn["mul"], un["id"]), opdict, names, rng=rng)
    X = 0.5 * rng.standard_normal((17, 3))
    upstream = rng.standard_normal(17)

    ev = TreeEvaluator(inst, X)
    out, pullback = ev.evaluate_with_pullback()
    g = pullback(upstream)
    g_fd = fd_gradient(lambda th: float(upstream @ ev.evaluate(th)), inst.theta)
    assert np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-12) <= 1e-5


@pytest.mark.parametrize("bname", list(BINARY_CATALOG))
def test_gradient_matches_fd_per_binary_op(bname):
    opdict = FULL_DICT
    un = {op.name: i for i, op in enumerate(opdict.unary)}
    bn = {op.name: i for i, op in enumerate(opdict.binary)}
    sk = TreeSkeleton(leaf_count=2)
    rng = np.random.default_rng(abs(hash(bname)) % 2**32)
    inst = instantiate(sk, (un["id"], bn[bname], un["square"]), opdict, ("p", "q"), rng=rng)
    X = 0.5 * rng.standard_normal((11, 2)) + 0.7  # keep div away from the guard
    upstream = rng.standard_normal(11)

    ev = TreeEvaluator(inst, X)
    _, pullback = ev.evaluate_with_pullback()
    g = pullback(upstream)
    g_fd = fd_gradient(lambda th: float(upstream @ ev.evaluate(th)), inst.theta)
    assert np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-12) <= 1e-5


def test_gradient_matches_fd_with_wrapper_layer():
    opdict = FULL_DICT
    un = {op.name: i for i, op in enumerate(opdict.unary)}
    bn = {op.name: i for i, op in enumerate(opdict.binary)}
    sk = TreeSkeleton(leaf_count=2, non_leaf_unary=True)
    rng = np.random.default_rng(11)
    seq = (un["square"], bn["mul"], un["exp"], un["id"])
    inst = instantiate(sk, seq, opdict, ("t", "k"), rng=rng)
    X = rng.uniform(0, 1, size=(20, 2))
    upstream = rng.standard_normal(20)

    ev = TreeEvaluator(inst, X)
    _, pullback = ev.evaluate_with_pullback()
    g = pullback(upstream)
    g_fd = fd_gradient(lambda th: float(upstream @ ev.evaluate(th)), inst.theta)
    assert np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-12) <= 1e-5


def test_gradient_matches_fd_random_trees():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        leaf_count = int(rng.choice([1, 2, 4]))
        sk = TreeSkeleton(leaf_count=leaf_count, non_leaf_unary=bool(rng.integers(2)))
        sizes = sk.slot_sizes(DICT)
        seq = tuple(int(rng.integers(s)) for s in sizes)
        names = tuple("f%d" % i for i in range(4))
        inst = instantiate(sk, seq, DICT, names, rng=rng)
        inst.theta[:] = 0.5 * rng.standard_normal(inst.theta.size)
        X = 0.5 * rng.standard_normal((9, 4))
        upstream = rng.standard_normal(9)
        ev = TreeEvaluator(inst, X)
        _, pullback = ev.evaluate_with_pullback()
        g = pullback(upstream)
        g_fd = fd_gradient(lambda th: float(upstream @ ev.evaluate(th)), inst.theta)
        err = np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-8)
        assert err <= 1e-5, f"sequence {seq} leaf_count {leaf_count}"


def test_canonicalize_two_factor_product():
    sk = TreeSkeleton(leaf_count=2)
    names = ("u_00", "u_01")
    theta = np.zeros(theta_size(sk, 2))
    theta[0] = -1.0  # leaf 1: -u_00
    theta[3] = 1.0  # leaf 2: u_01
    theta[-2] = 1.0
    inst = make_instance(sk, (U["id"], B["mul"], U["id"]), names, theta)
    terms = canonicalize(inst, threshold=0.0)
    assert isinstance(terms, TermList)
    assert terms.terms == ((("u_00", "u_01"), -1.0),)


def test_canonicalize_matches_evaluate_on_random_polynomial_trees():
    rng = np.random.default_rng(7)
    poly_unary = [U[n] for n in ("id", "square", "cube")]
    for _ in range(10):
        sk = TreeSkeleton(leaf_count=4)
        sizes = sk.slot_sizes(DICT)
        seq = [
            int(rng.choice(poly_unary)) if s == len(DICT.unary) else int(rng.integers(s))
            for s in sizes
        ]
        names = ("a", "b", "c")
        inst = instantiate(sk, seq, DICT, names, rng=rng)
        inst.theta[:] = rng.standard_normal(inst.theta.size)
        terms = canonicalize(inst, threshold=0.0)
        assert isinstance(terms, TermList)
        X = rng.standard_normal((100, 3))
        direct = evaluate(inst, X)
        expanded = terms.evaluate(X, names)
        scale = np.max(np.abs(direct)) + 1e-30
        assert np.max(np.abs(direct - expanded)) / scale <= 1e-10


def test_canonicalize_threshold_drops_small_terms():
    sk = TreeSkeleton(leaf_count=2)
    theta = np.zeros(theta_size(sk, 2))
    theta[0] = 1.0
    theta[1] = 1e-6
    theta[2] = 0.5
    theta[-2] = 1.0
    inst = make_instance(sk, (U["id"], B["add"], U["id"]), ("a", "b"), theta)
    terms = canonicalize(inst, threshold=1e-3)
    keys = [k for k, _ in terms.terms]
    assert ("a",) in keys and ("b",) not in keys


def test_canonicalize_exp_tree_renders_text():
    sk = TreeSkeleton(leaf_count=2, non_leaf_unary=True)
    theta = np.zeros(theta_size(sk, 2))
    theta[0] = 1.0  # square leaf: t**2
    theta[3] = -1.0  # id leaf: -k
    theta[4], theta[5] = -1.0, 1.0  # wrapper: -exp(.) + 1
    theta[-2], theta[-1] = 1.0, 0.0
    inst = make_instance(
        sk, (U["square"], B["mul"], U["exp"], U["id"]), ("t", "k"), theta
    )
    form = canonicalize(inst)
    assert isinstance(form, SymbolicExpr)
    assert form.text == "1 - exp(-k*t**2)"


def test_termlist_sorted_by_magnitude():
    tl = TermList.from_dict({("a",): 0.1, ("b",): -2.0, (): 0.5})
    assert [k for k, _ in tl.terms] == [("b",), (), ("a",)]
    assert tl.coefficient(("b",)) == -2.0
    assert tl.coefficient(("zz",)) == 0.0


def test_termlist_str():
    tl = TermList.from_dict({("u_00", "u_10"): -1.0, ("u_20",): 0.05})
    assert str(tl) == "-u_00*u_10 + 0.05*u_20"
