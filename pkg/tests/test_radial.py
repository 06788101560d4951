import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drda import numerics as nx
from drda.errors import ContractError, DegenerateError
from drda.radial import (RadialStructure, egocentric, ema_update, global_anchor, global_loss, gw_fixed_plan,
                         intra_distance, local_anchors, local_loss_phi, phi_between, squared_distances)


def random_orthogonal(d, r):
    Q, R = np.linalg.qr(r.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def test_global_anchor():
    assert np.array_equal(global_anchor([[0, 0], [2, 2]]), [1, 1])
    assert np.array_equal(global_anchor([[3.5, -1.0]]), [3.5, -1.0])
    with pytest.raises(DegenerateError):
        global_anchor(np.zeros((0, 2)))


def test_global_anchor_matches_resummation(rng):
    Z = rng.standard_normal((100, 4))
    oracle = np.array([sum(Z[i, j] for i in range(100)) / 100 for j in range(4)])
    assert np.allclose(global_anchor(Z), oracle, atol=1e-12)


def test_local_anchors_example():
    A, counts = local_anchors([[0, 0], [2, 0], [5, 5]], [0, 0, 1], 2)
    assert np.array_equal(A.data, [[1, 0], [5, 5]])
    assert np.array_equal(counts, [2, 1])


def test_local_anchors_missing_classes_are_flagged():
    A, counts = local_anchors([[1, 2], [3, 4]], [1, 1], 3)
    assert list(np.ma.getmaskarray(A)[:, 0]) == [True, False, True]
    s = RadialStructure.from_features([[1, 2], [3, 4]], [1, 1], 3)
    assert list(s.missing) == [True, False, True]


def test_local_anchors_brute_force(rng):
    Z = rng.standard_normal((50, 3))
    y = rng.integers(0, 4, 50)
    A, counts = local_anchors(Z, y, 4)
    for c in range(4):
        rows = [Z[i] for i in range(50) if y[i] == c]
        assert counts[c] == len(rows)
        assert np.allclose(A.data[c], np.mean(rows, axis=0), atol=1e-12)


def test_local_anchors_label_range():
    with pytest.raises(ContractError):
        local_anchors([[0.0, 0.0]], [2], 2)
    with pytest.raises(ContractError):
        local_anchors([[0.0, 0.0]], [-1], 2)


def structure(glob, local, counts=None):
    local = np.asarray(local, float)
    counts = np.ones(len(local)) if counts is None else np.asarray(counts, float)
    return RadialStructure(np.asarray(glob, float), local, counts)


def test_ema_update_extremes():
    prev = structure([0, 0], [[0, 0], [1, 1]])
    batch = np.array([[2.0, 2.0], [3.0, 3.0]])
    full = ema_update(prev, batch, [1, 1], 1.0, batch_global=[5.0, 5.0])
    assert np.array_equal(full.local_anchors, batch)
    assert np.array_equal(full.global_anchor, [5.0, 5.0])
    same = ema_update(prev, batch, [1, 1], 0.0, batch_global=[5.0, 5.0])
    assert np.array_equal(same.local_anchors, prev.local_anchors)
    assert np.array_equal(same.global_anchor, prev.global_anchor)


def test_ema_update_formula_and_absent_class():
    prev = structure([0, 0], [[0, 0], [4, 4]])
    out = ema_update(prev, np.array([[2.0, 2.0], [9.0, 9.0]]), [3, 0], 0.5)
    assert np.array_equal(out.local_anchors[0], [1.0, 1.0])
    assert np.array_equal(out.local_anchors[1], [4.0, 4.0])


def test_ema_update_fills_missing_class_outright():
    prev = RadialStructure(np.zeros(2), np.zeros((2, 2)), np.array([1.0, 0.0]))
    out = ema_update(prev, np.array([[1.0, 1.0], [6.0, -2.0]]), [1, 2], 0.3)
    assert np.array_equal(out.local_anchors[1], [6.0, -2.0])
    assert not out.missing.any()


def test_ema_update_rejects_bad_eta():
    prev = structure([0, 0], [[0, 0]])
    for eta in (-0.1, 1.1):
        with pytest.raises(ContractError):
            ema_update(prev, np.zeros((1, 2)), [1], eta)


def test_ema_full_batch_reproduces_local_anchors(rng):
    Z = rng.standard_normal((40, 3))
    y = np.arange(40) % 4
    prev = RadialStructure.from_features(rng.standard_normal((8, 3)), np.arange(8) % 4, 4)
    A, counts = local_anchors(Z, y, 4)
    out = ema_update(prev, A, counts, 1.0)
    assert np.array_equal(out.local_anchors, A.data)


def test_egocentric():
    s = structure([1, 1], [[1, 1], [3, 2]])
    assert np.array_equal(egocentric(s), [[0, 0], [2, 1]])
    s0 = structure([0, 0], [[1, 2], [3, 4]])
    assert np.array_equal(egocentric(s0), s0.local_anchors)
    t = np.array([10.0, -7.0])
    moved = structure(s0.global_anchor + t, s0.local_anchors + t)
    assert np.allclose(egocentric(moved), egocentric(s0), atol=1e-12)
    partial = RadialStructure(np.zeros(2), np.ones((2, 2)), np.array([1.0, 0.0]))
    with pytest.raises(DegenerateError):
        egocentric(partial)
    assert egocentric(partial, [0]).shape == (1, 2)


def test_intra_distance_examples():
    assert intra_distance([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert intra_distance([1.0, 0.0], [0.0, 1.0], 1.0) == pytest.approx(2.0)
    assert intra_distance([1.0, 0.0], [-1.0, 0.0], 0.0) == pytest.approx(2.0)
    with pytest.raises(DegenerateError):
        intra_distance([0.0, 0.0], [1.0, 0.0])
    assert intra_distance([0.0, 0.0], [1.0, 0.0], guard=1e-8) > 0


def test_global_loss_examples(rng):
    assert global_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert global_loss([0.0, 0.0], [3.0, 4.0]) == pytest.approx(5.0)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    assert global_loss(a, b) == pytest.approx(np.sqrt(np.sum((a - b) ** 2)), abs=1e-12)
    with pytest.raises(ContractError):
        global_loss([0.0, 0.0], [0.0, 0.0, 0.0])


def test_phi_examples(rng):
    V = rng.standard_normal((5, 3))
    assert local_loss_phi(V, V) == pytest.approx(0.0, abs=1e-15)
    assert local_loss_phi([[1.0, 0.0]], [[0.0, 1.0]], 1.0) == pytest.approx(2.0)
    with pytest.raises(DegenerateError):
        local_loss_phi(V, V, classes=[])


def test_phi_between_skips_missing():
    s = RadialStructure(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 1.0]))
    t = RadialStructure(np.zeros(2), np.array([[0.0, 1.0], [9.0, 9.0]]), np.array([1.0, 0.0]))
    assert phi_between(s, t) == pytest.approx(2.0)
    empty = RadialStructure(np.zeros(2), np.ones((2, 2)), np.array([0.0, 0.0]))
    with pytest.raises(DegenerateError):
        phi_between(s, empty)


def test_gw_examples(rng):
    V = rng.standard_normal((4, 3))
    assert gw_fixed_plan(V, V) == 0.0
    assert gw_fixed_plan([[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 2.0]], 0.0) == pytest.approx(0.0, abs=1e-15)
    assert gw_fixed_plan([[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 2.0]], 1.0) > 0


def test_gw_direct_double_sum(rng):
    Vs, Vt = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    total = 0.0
    for i in range(4):
        for j in range(4):
            if i != j:
                total += (intra_distance(Vs[i], Vs[j], 0.7) - intra_distance(Vt[i], Vt[j], 0.7)) ** 2
    assert gw_fixed_plan(Vs, Vt, 0.7) == pytest.approx(total, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 6))
def test_phi_joint_rotation_invariance(seed, d):
    r = np.random.default_rng(seed)
    Vs, Vt = r.standard_normal((5, d)), r.standard_normal((5, d))
    R = random_orthogonal(d, r)
    assert abs(local_loss_phi(Vs @ R, Vt @ R, 0.8) - local_loss_phi(Vs, Vt, 0.8)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 6))
def test_gw_independent_isometry_invariance(seed, d):
    r = np.random.default_rng(seed)
    Z_s, Z_t = r.standard_normal((60, d)), r.standard_normal((60, d))
    y = np.arange(60) % 4
    s = RadialStructure.from_features(Z_s, y, 4)
    t = RadialStructure.from_features(Z_t, y, 4)
    base = gw_fixed_plan(egocentric(s), egocentric(t))
    Rs, Rt = random_orthogonal(d, r), random_orthogonal(d, r)
    s2 = RadialStructure.from_features(Z_s @ Rs + r.standard_normal(d) * 5, y, 4)
    t2 = RadialStructure.from_features(Z_t @ Rt + r.standard_normal(d) * 5, y, 4)
    assert abs(gw_fixed_plan(egocentric(s2), egocentric(t2)) - base) < 1e-10


def test_translation_of_one_domain(rng):
    Z_s, Z_t = rng.standard_normal((80, 3)), rng.standard_normal((80, 3))
    y = np.arange(80) % 5
    s = RadialStructure.from_features(Z_s, y, 5)
    t = RadialStructure.from_features(Z_t, y, 5)
    t2 = RadialStructure.from_features(Z_t + np.array([4.0, -1.0, 2.0]), y, 5)
    assert np.allclose(egocentric(t), egocentric(t2), atol=1e-10)
    assert abs(phi_between(s, t) - phi_between(s, t2)) < 1e-10
    assert abs(gw_fixed_plan(egocentric(s), egocentric(t)) - gw_fixed_plan(egocentric(s), egocentric(t2))) < 1e-10
    assert global_loss(s.global_anchor, t.global_anchor) != pytest.approx(
        global_loss(s.global_anchor, t2.global_anchor))


@pytest.mark.parametrize("angular", [True, False])
def test_phi_and_global_gradients(rng, angular):
    Vs = nx.parameter(rng.standard_normal((4, 3)))
    Vt = nx.parameter(rng.standard_normal((4, 3)))
    a, b = nx.parameter(rng.standard_normal(3)), nx.parameter(rng.standard_normal(3))
    assert nx.finite_difference_check(lambda: local_loss_phi(Vs, Vt, 1.0, angular, 1e-8), Vs) < 1e-4
    assert nx.finite_difference_check(lambda: local_loss_phi(Vs, Vt, 1.0, angular, 1e-8), Vt) < 1e-4
    assert nx.finite_difference_check(lambda: global_loss(a, b), a) < 1e-4


def test_squared_distances(rng):
    Z, A = rng.standard_normal((6, 3)), rng.standard_normal((4, 3))
    D = squared_distances(Z, A).data
    assert np.allclose(D, ((Z[:, None] - A[None]) ** 2).sum(-1), atol=1e-12)


def test_structure_csv():
    s = RadialStructure(np.array([0.5, 1.0]), np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([3.0, 0.0]), "target")
    lines = s.to_csv().strip().split("\n")
    assert lines[0] == "domain,class_id,missing,a_0,a_1"
    assert lines[1] == "target,-1,0,0.5,1.0"
    assert lines[3].startswith("target,1,1")
