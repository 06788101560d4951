"""Square orthogonal layer trained with Riemannian SGD and a QR retraction."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nx
from .errors import ContractError, NumericError
from .numerics import Tensor

ORTHO_DRIFT_LIMIT = 1e-8


@dataclass(frozen=True)
class StiefelParam:
    matrix: np.ndarray
    learning_rate_scale: float = 10.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def orthonormality_error(delta: np.ndarray) -> float:
    d = delta.shape[1]
    return float(np.max(np.abs(delta.T @ delta - np.eye(d))))


def init_identity(d: int, learning_rate_scale: float = 10.0) -> StiefelParam:
    if d < 1:
        raise ContractError(f"Stiefel dimension must be >= 1, got {d}")
    return StiefelParam(np.eye(d), learning_rate_scale)


def apply(param: StiefelParam, z):
    """Row-vector convention: z -> z @ Delta.  Accepts a vector, a batch, or a Tensor batch."""
    d = param.dim
    if isinstance(z, Tensor):
        if z.ndim != 2 or z.shape[1] != d:
            raise ContractError(f"Stiefel layer expects width {d}, got {z.shape}")
        return z @ nx.constant(param.matrix)
    arr = np.asarray(z, dtype=np.float64)
    if arr.shape[-1] != d or arr.ndim > 2:
        raise ContractError(f"Stiefel layer expects width {d}, got {arr.shape}")
    return arr @ param.matrix


def qr_retract(Y: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(Y)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs[None, :]


def tangent_projection(delta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    A = delta.T @ grad
    return grad - delta @ (0.5 * (A + A.T))


def riemannian_step(param: StiefelParam, euclidean_grad, lr: float) -> StiefelParam:
    if not lr > 0:
        raise ContractError("Riemannian step needs lr > 0")
    G = np.asarray(euclidean_grad, dtype=np.float64)
    if G.shape != param.matrix.shape:
        raise ContractError(f"gradient shape {G.shape} != parameter shape {param.matrix.shape}")
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite Stiefel gradient")
    delta = param.matrix
    new = qr_retract(delta - lr * tangent_projection(delta, G))
    if orthonormality_error(new) > ORTHO_DRIFT_LIMIT:
        new = qr_retract(new)
    return replace(param, matrix=new)
