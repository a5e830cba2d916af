import numpy as np
import pytest

from pamm.basis import (
    KnotVector,
    PenaltyMatrix,
    bspline_basis,
    difference_penalty,
    fre_term,
    indicator_basis,
    smooth_term,
    tensor_product_rows,
)


# ------------------------------------------------------------------ b-splines


def test_degree0_is_interval_indicator():
    kv = KnotVector(degree=0, interior=(0.5,), boundary=(0.0, 1.0))
    row = bspline_basis([0.25], kv)
    assert row.shape == (1, 2)
    assert np.array_equal(row, [[1.0, 0.0]])


def test_cubic_left_boundary_row():
    kv = KnotVector(degree=3, interior=(), boundary=(0.0, 1.0))
    row = bspline_basis([0.0], kv)
    assert np.array_equal(row, [[1.0, 0.0, 0.0, 0.0]])


def test_right_boundary_closed():
    kv = KnotVector(degree=3, interior=(0.3, 0.6), boundary=(0.0, 1.0))
    row = bspline_basis([1.0], kv)
    assert row[0, -1] == pytest.approx(1.0, abs=1e-12)
    assert np.all(row[0, :-1] == pytest.approx(0.0, abs=1e-12))


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_partition_of_unity(degree):
    rng = np.random.default_rng(degree)
    kv = KnotVector(degree=degree, interior=(0.2, 0.45, 0.7), boundary=(0.0, 1.0))
    x = np.r_[0.0, rng.uniform(0, 1, 200), 1.0]
    B = bspline_basis(x, kv)
    assert B.shape == (202, kv.dim)
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(B >= -1e-14)


def test_outside_boundary_rejected():
    kv = KnotVector(degree=3, interior=(), boundary=(0.0, 1.0))
    with pytest.raises(ValueError):
        bspline_basis([1.5], kv)
    with pytest.raises(ValueError):
        bspline_basis([-0.1], kv)


def test_knot_vector_dim_and_validation():
    kv = KnotVector(degree=3, interior=(0.2, 0.4, 0.6), boundary=(0.0, 1.0))
    assert kv.dim == 7
    assert len(kv.full()) == kv.dim + kv.degree + 1
    with pytest.raises(ValueError):
        KnotVector(degree=3, interior=(0.4, 0.4), boundary=(0.0, 1.0))
    with pytest.raises(ValueError):
        KnotVector(degree=3, interior=(1.2,), boundary=(0.0, 1.0))
    with pytest.raises(ValueError):
        KnotVector(degree=3, interior=(), boundary=(1.0, 1.0))


def test_knot_placement():
    x = np.linspace(0, 1, 101) ** 2
    kv_e = KnotVector.make(x, 4, degree=3, placement="equidistant", boundary=(0.0, 1.0))
    assert np.allclose(kv_e.interior, [0.2, 0.4, 0.6, 0.8])
    kv_q = KnotVector.make(x, 4, degree=3, placement="quantile", boundary=(0.0, 1.0))
    # squared uniforms concentrate low, so quantile knots sit left of equidistant
    assert np.all(np.asarray(kv_q.interior) < np.asarray(kv_e.interior))
    with pytest.raises(ValueError):
        KnotVector.make(np.array([0.5, 0.5, 0.5]), 3, boundary=(0.0, 1.0))


# ------------------------------------------------------------------ penalties


def test_first_order_penalty_matrix():
    pen = difference_penalty(3, 1)
    assert np.array_equal(pen.matrix, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert pen.rank == 2 and pen.null_dim == 1


def test_penalty_null_spaces():
    p1 = difference_penalty(8, 1)
    const = np.ones(8)
    assert const @ p1.matrix @ const == pytest.approx(0.0, abs=1e-12)
    p2 = difference_penalty(8, 2)
    lin = np.arange(8.0)
    for v in (np.ones(8), lin):
        assert v @ p2.matrix @ v == pytest.approx(0.0, abs=1e-12)
    assert p2.null_dim == 2


@pytest.mark.parametrize("order", [1, 2, 3])
def test_penalty_equals_sum_of_squared_differences(order):
    rng = np.random.default_rng(order)
    for _ in range(10):
        g = rng.normal(size=9)
        direct = np.sum(np.diff(g, n=order) ** 2)
        pen = difference_penalty(9, order)
        assert g @ pen.matrix @ g == pytest.approx(direct, rel=1e-12)


def test_penalty_matrix_validation():
    with pytest.raises(ValueError):
        PenaltyMatrix(matrix=np.array([[1.0, 2.0], [0.0, 1.0]]), rank=2, null_dim=0, root=np.eye(2))
    with pytest.raises(ValueError):
        PenaltyMatrix(matrix=np.eye(2), rank=1, null_dim=1, root=np.eye(2))
    with pytest.raises(ValueError):
        PenaltyMatrix(matrix=-np.eye(2), rank=2, null_dim=0, root=np.eye(2))


# ----------------------------------------------------------------- indicators


def test_one_hot_rows():
    M = indicator_basis(["a", "b", "a"], ["a", "b"])
    assert np.array_equal(M, [[1, 0], [0, 1], [1, 0]])


def test_unknown_level_rejected():
    with pytest.raises(ValueError):
        indicator_basis(["a", "c"], ["a", "b"])


# -------------------------------------------------------------- tensor product


def test_rowwise_kronecker():
    b1 = np.array([[1.0, 2.0]])
    b2 = np.array([[3.0, 4.0]])
    assert np.array_equal(tensor_product_rows(b1, b2), [[3.0, 4.0, 6.0, 8.0]])


def test_rowwise_kronecker_matches_kron_per_row():
    rng = np.random.default_rng(3)
    b1 = rng.normal(size=(6, 3))
    b2 = rng.normal(size=(6, 4))
    M = tensor_product_rows(b1, b2)
    for r in range(6):
        assert np.allclose(M[r], np.kron(b1[r], b2[r]))


# -------------------------------------------------------------- smooth term


def test_centered_smooth_columns_sum_to_zero():
    rng = np.random.default_rng(4)
    t = rng.uniform(0, 2, 150)
    kv = KnotVector.make(t, 5, boundary=(0.0, 2.0), placement="equidistant")
    term = smooth_term(t, kv, diff_order=1, centered=True)
    n = term.design.shape[0]
    assert np.all(np.abs(term.design.sum(axis=0)) <= 1e-8 * n)
    assert term.design.shape[1] == kv.dim - 1
    # centering removes the constant from the penalty null space
    _, pen = term.penalties[0]
    assert pen.null_dim == 0
    assert np.linalg.eigvalsh(pen.matrix)[0] > 0


def test_uncentered_smooth_constant_unpenalized():
    rng = np.random.default_rng(5)
    t = rng.uniform(0, 1, 60)
    kv = KnotVector.make(t, 4, boundary=(0.0, 1.0), placement="equidistant")
    term = smooth_term(t, kv, diff_order=1, centered=False)
    _, pen = term.penalties[0]
    const = np.ones(kv.dim)
    assert const @ pen.matrix @ const == pytest.approx(0.0, abs=1e-12)
    assert term.design.shape[1] == kv.dim


def test_centered_smooth_second_order_null():
    rng = np.random.default_rng(6)
    t = rng.uniform(0, 1, 80)
    kv = KnotVector.make(t, 6, boundary=(0.0, 1.0), placement="equidistant")
    term = smooth_term(t, kv, diff_order=2, centered=True)
    _, pen = term.penalties[0]
    assert pen.null_dim == 1
    assert pen.rank + pen.null_dim == pen.dim


# ------------------------------------------------------------------- fre term


def _small_fre(n=40, G=3, seed=0, diff_order=1):
    rng = np.random.default_rng(seed)
    levels = [f"g{i}" for i in range(G)]
    groups = rng.choice(levels, size=n)
    t = rng.uniform(0, 1, n)
    x = rng.uniform(-1, 1, n)
    kv = KnotVector.make(t, 3, boundary=(0.0, 1.0), placement="equidistant")
    return fre_term(groups, levels, t, x, kv, diff_order=diff_order), groups, t, x, kv, levels


def test_fre_zero_covariate_gives_zero_row():
    term, groups, t, x, kv, levels = _small_fre()
    x2 = x.copy()
    x2[5] = 0.0
    term2 = fre_term(groups, levels, t, x2, kv)
    assert np.all(term2.design[5] == 0.0)


def test_fre_single_group_is_scaled_spline():
    rng = np.random.default_rng(7)
    t = rng.uniform(0, 1, 30)
    x = rng.uniform(0.5, 2, 30)
    kv = KnotVector.make(t, 3, boundary=(0.0, 1.0), placement="equidistant")
    term = fre_term(["g"] * 30, ["g"], t, x, kv)
    assert np.allclose(term.design, bspline_basis(t, kv) * x[:, None])


def test_fre_block_structure_and_row_values():
    term, groups, t, x, kv, levels = _small_fre()
    B = bspline_basis(t, kv)
    D = kv.dim
    for r in range(len(t)):
        g = list(levels).index(groups[r])
        expect = np.zeros(len(levels) * D)
        expect[g * D : (g + 1) * D] = B[r] * x[r]
        assert np.allclose(term.design[r], expect)


def test_fre_smooth_penalty_is_per_group_differences():
    term, *_ , kv, levels = _small_fre(G=3)
    (lbl_s, smooth), (lbl_r, shrink) = term.penalties
    assert (lbl_s, lbl_r) == ("smooth", "shrink")
    D = kv.dim
    rng = np.random.default_rng(8)
    gamma = rng.normal(size=3 * D)
    direct = sum(
        np.sum(np.diff(gamma[g * D : (g + 1) * D]) ** 2) for g in range(3)
    )
    assert gamma @ smooth.matrix @ gamma == pytest.approx(direct, rel=1e-12)
    assert np.array_equal(shrink.matrix, np.eye(3 * D))


def test_fre_combined_penalty_positive_definite():
    term, *_ = _small_fre(G=4)
    (_, smooth), (_, shrink) = term.penalties
    for lam1, lam2 in [(1.0, 1.0), (100.0, 0.01), (0.0, 0.5)]:
        S = lam1 * smooth.matrix + lam2 * shrink.matrix
        if lam2 > 0:
            assert np.linalg.eigvalsh(S)[0] >= lam2 - 1e-10
    # joint null space is trivial: only the zero vector is unpenalized by both
    stacked = np.vstack([smooth.root, shrink.root])
    assert np.linalg.matrix_rank(stacked) == smooth.dim


def test_fre_penalty_rank_accounting():
    term, *_ , kv, levels = _small_fre(G=3, diff_order=2)
    (_, smooth), (_, shrink) = term.penalties
    D = kv.dim
    assert smooth.rank == 3 * (D - 2)
    assert smooth.null_dim == 3 * 2
    assert shrink.rank == 3 * D
