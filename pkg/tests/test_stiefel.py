import numpy as np
import pytest

from drda import numerics as nx
from drda.errors import ContractError, NumericError
from drda.radial import local_loss_phi
from drda.stiefel import (StiefelParam, apply, init_identity, orthonormality_error, qr_retract, riemannian_step,
                          tangent_projection)


def random_orthogonal(d, r):
    return qr_retract(r.standard_normal((d, d)))


def test_init_identity():
    p = init_identity(3)
    assert np.array_equal(p.matrix, np.eye(3))
    assert orthonormality_error(p.matrix) == 0.0
    z = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(apply(p, z), z)
    with pytest.raises(ContractError):
        init_identity(0)


def test_apply_rotation_90():
    R = StiefelParam(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert np.allclose(apply(R, np.array([1.0, 0.0])), [0.0, 1.0])


def test_apply_preserves_geometry(rng):
    P = StiefelParam(random_orthogonal(6, rng))
    X, Y = rng.standard_normal((20, 6)), rng.standard_normal((20, 6))
    assert np.allclose(np.linalg.norm(apply(P, X), axis=1), np.linalg.norm(X, axis=1), atol=1e-10)
    assert np.allclose(np.sum(apply(P, X) * apply(P, Y), axis=1), np.sum(X * Y, axis=1), atol=1e-10)


def test_apply_width_check():
    with pytest.raises(ContractError):
        apply(init_identity(3), np.ones((2, 4)))
    with pytest.raises(ContractError):
        apply(init_identity(3), nx.constant(np.ones((2, 4))))


def test_zero_gradient_is_fixed_point(rng):
    P = StiefelParam(random_orthogonal(4, rng))
    out = riemannian_step(P, np.zeros((4, 4)), 0.1)
    assert np.allclose(out.matrix, P.matrix, atol=1e-14)


def test_step_stays_orthonormal(rng):
    P = StiefelParam(random_orthogonal(5, rng))
    for _ in range(50):
        P = riemannian_step(P, rng.standard_normal((5, 5)) * 10, float(rng.uniform(1e-3, 1.0)))
        assert orthonormality_error(P.matrix) < 1e-10


def test_step_errors():
    P = init_identity(2)
    with pytest.raises(NumericError):
        riemannian_step(P, np.array([[np.nan, 0.0], [0.0, 0.0]]), 0.1)
    with pytest.raises(ContractError):
        riemannian_step(P, np.zeros((2, 2)), 0.0)
    with pytest.raises(ContractError):
        riemannian_step(P, np.zeros((3, 3)), 0.1)


def test_tangent_projection_is_tangent(rng):
    D = random_orthogonal(4, rng)
    T = tangent_projection(D, rng.standard_normal((4, 4)))
    S = D.T @ T
    assert np.allclose(S + S.T, 0.0, atol=1e-12)


def test_retraction_is_second_order(rng):
    D = random_orthogonal(4, rng)
    T = tangent_projection(D, rng.standard_normal((4, 4)))
    errs = []
    for lr in (1e-2, 5e-3, 2.5e-3):
        moved = D - lr * T
        errs.append(np.linalg.norm(qr_retract(moved) - moved))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(3.5 < r < 4.5 for r in ratios)


def test_qr_sign_convention(rng):
    Q = qr_retract(rng.standard_normal((3, 3)))
    _, R = np.linalg.qr(Q)
    assert np.allclose(Q.T @ Q, np.eye(3), atol=1e-12)
    D = random_orthogonal(3, rng)
    assert np.allclose(qr_retract(D), D, atol=1e-12)


def test_descent_on_phi():
    r = np.random.default_rng(7)
    violations = 0
    for _ in range(100):
        Vs = r.standard_normal((4, 3))
        Vt = r.standard_normal((4, 3))
        P = StiefelParam(random_orthogonal(3, r))
        D = nx.parameter(P.matrix)
        loss = local_loss_phi(nx.constant(Vs), nx.constant(Vt) @ D, 1.0)
        g = nx.evaluate_with_gradients(loss, [D])[D]
        after = riemannian_step(P, g, 1e-3)
        new = local_loss_phi(Vs, Vt @ after.matrix, 1.0)
        violations += new > loss.item() + 1e-15
    assert violations <= 1
