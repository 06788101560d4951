"""Radial structures (domain centroid + class centroids) and the losses that align them.

Loss functions accept either numpy arrays or :class:`~drda.numerics.Tensor`
inputs.  Array inputs give plain floats back; tensor inputs give scalar
tensors that can be differentiated.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import ContractError, DegenerateError
from .numerics import Tensor

# norm guard used inside the cosine while training
TRAIN_NORM_GUARD = 1e-8


@dataclass(frozen=True)
class RadialStructure:
    global_anchor: np.ndarray
    local_anchors: np.ndarray
    counts: np.ndarray
    domain_tag: str = "source"
    missing: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        k, d = self.local_anchors.shape
        if k < 1:
            raise ContractError("a radial structure needs at least one local anchor")
        if self.global_anchor.shape != (d,):
            raise ContractError("global anchor dimension does not match local anchors")
        if self.missing is None:
            object.__setattr__(self, "missing", np.asarray(self.counts) <= 0)
        if not np.all(np.isfinite(self.global_anchor)) or not np.all(np.isfinite(self.local_anchors[~self.missing])):
            raise ContractError("anchors must be finite")

    @property
    def k(self) -> int:
        return self.local_anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.local_anchors.shape[1]

    @property
    def present(self) -> np.ndarray:
        return ~self.missing

    @classmethod
    def from_features(cls, features, labels, k: int, domain_tag: str = "source") -> "RadialStructure":
        z = np.asarray(features, dtype=np.float64)
        means, counts = _class_means(z, labels, k)
        return cls(global_anchor(z), means, counts.astype(np.float64), domain_tag)

    def to_csv(self) -> str:
        """One row per anchor: domain, class id (-1 for the global anchor), coordinates."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "class_id", "missing"] + [f"a_{j}" for j in range(self.dim)])
        w.writerow([self.domain_tag, -1, 0] + [repr(float(v)) for v in self.global_anchor])
        for c in range(self.k):
            w.writerow([self.domain_tag, c, int(self.missing[c])] + [repr(float(v)) for v in self.local_anchors[c]])
        return buf.getvalue()


def _lift(*xs):
    return any(isinstance(x, Tensor) for x in xs), [nx.as_tensor(x) for x in xs]


def _out(value: Tensor, tensor_in: bool):
    return value if tensor_in else value.item()


def global_anchor(features) -> np.ndarray:
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DegenerateError("global anchor of an empty domain")
    return z.mean(axis=0)


def _check_labels(labels, k: int, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return y.astype(np.int64)


def one_hot(labels, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.size, k))
    out[np.arange(y.size), y] = 1.0
    return out


def _class_means(z: np.ndarray, labels, k: int) -> tuple[np.ndarray, np.ndarray]:
    y = _check_labels(labels, k, z.shape[0])
    counts = np.bincount(y, minlength=k).astype(np.float64)
    sums = one_hot(y, k).T @ z
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return means, counts


def local_anchors(features, labels, k: int) -> tuple[np.ma.MaskedArray, np.ndarray]:
    """Per-class means.  Classes with no samples are masked rows, not zeros."""
    z = np.asarray(features, dtype=np.float64)
    means, counts = _class_means(z, labels, k)
    mask = np.repeat((counts == 0)[:, None], z.shape[1], axis=1)
    return np.ma.MaskedArray(means, mask=mask), counts


def ema_update(prev: RadialStructure, batch_anchors, batch_counts, eta: float, batch_global=None) -> RadialStructure:
    """a_k <- eta * batch_anchor_k + (1 - eta) * a_k' for every class seen in the batch.

    Classes absent from the batch keep their anchor.  A class that was still
    missing takes the batch anchor outright.  The global anchor follows the
    same rule when ``batch_global`` is given.
    """
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    A = np.ma.getdata(batch_anchors).astype(np.float64)
    counts = np.asarray(batch_counts, dtype=np.float64)
    if A.shape != prev.local_anchors.shape or counts.shape != (prev.k,):
        raise ContractError("batch anchors do not match the structure's shape")
    seen = counts > 0
    rate = np.where(prev.missing, 1.0, eta) * seen
    local = rate[:, None] * A + (1.0 - rate[:, None]) * prev.local_anchors
    local[~seen] = prev.local_anchors[~seen]
    glob = prev.global_anchor
    if batch_global is not None:
        glob = eta * np.asarray(batch_global, dtype=np.float64) + (1.0 - eta) * prev.global_anchor
    return replace(prev, global_anchor=glob, local_anchors=local, counts=prev.counts + counts,
                   missing=prev.missing & ~seen)


def egocentric(structure: RadialStructure, classes=None) -> np.ndarray:
    idx = np.arange(structure.k) if classes is None else np.asarray(classes)
    if np.any(structure.missing[idx]):
        miss = [int(c) for c in idx if structure.missing[c]]
        raise DegenerateError(f"structure incomplete: classes {miss} have no anchor")
    return structure.local_anchors[idx] - structure.global_anchor[None, :]


def _cosine_rows(A: Tensor, B: Tensor, guard: float) -> Tensor:
    na = nx.norm(A, axis=1)
    nb = nx.norm(B, axis=1)
    if guard == 0.0 and (np.any(na.data == 0) or np.any(nb.data == 0)):
        raise DegenerateError("cosine undefined for a zero-norm vector")
    return (A * B).sum(axis=1) / ((na + guard) * (nb + guard))


def _intra_rows(A: Tensor, B: Tensor, lambda_dist: float, angular: bool, guard: float) -> Tensor:
    """Row-wise c(a_i, b_i) as an (m,) tensor."""
    diff = A - B
    c = (diff * diff).sum(axis=1) * (0.5 * lambda_dist)
    if angular:
        c = (1.0 - _cosine_rows(A, B, guard)) + c
    return c


def intra_distance(v_i, v_j, lambda_dist: float = 1.0, angular: bool = True, guard: float = 0.0):
    """c(v_i, v_j) = [1 - cos(v_i, v_j)] + lambda_dist * 0.5 * |v_i - v_j|^2."""
    if lambda_dist < 0:
        raise ContractError("lambda_dist must be nonnegative")
    tensor_in, (a, b) = _lift(v_i, v_j)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("intra_distance expects two vectors of equal dimension")
    c = _intra_rows(nx.reshape(a, (1, -1)), nx.reshape(b, (1, -1)), lambda_dist, angular, guard)
    return _out(c.sum(), tensor_in)


def global_loss(a_s, a_t):
    """Euclidean distance between the two global anchors."""
    tensor_in, (a, b) = _lift(a_s, a_t)
    if a.shape != b.shape:
        raise ContractError(f"global anchors differ in dimension: {a.shape} vs {b.shape}")
    return _out(nx.norm(a - b), tensor_in)


def local_loss_phi(V_s, V_t, lambda_dist: float = 1.0, angular: bool = True, guard: float = 0.0, classes=None):
    """Mean over corresponding classes of c(v_s_k, v_t_k).

    ``classes`` restricts the mean to the classes present in both structures;
    by default every row is used.
    """
    tensor_in, (A, B) = _lift(V_s, V_t)
    if A.shape != B.shape or A.ndim != 2:
        raise ContractError(f"egocentric sets differ in shape: {A.shape} vs {B.shape}")
    if classes is not None:
        idx = np.asarray(classes, dtype=np.int64)
        if idx.size == 0:
            raise DegenerateError("no classes common to both structures")
        A, B = A[idx], B[idx]
    if A.shape[0] == 0:
        raise DegenerateError("no classes common to both structures")
    return _out(_intra_rows(A, B, lambda_dist, angular, guard).mean(), tensor_in)


def phi_between(s: RadialStructure, t: RadialStructure, lambda_dist: float = 1.0, angular: bool = True,
                guard: float = 0.0) -> float:
    """phi for two stored structures, skipping classes missing on either side."""
    common = np.flatnonzero(s.present & t.present)
    if common.size == 0:
        raise DegenerateError("no classes common to both structures")
    return local_loss_phi(egocentric(s, common), egocentric(t, common), lambda_dist, angular, guard)


def _pairwise_c(V: np.ndarray, lambda_dist: float, angular: bool) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0):
        raise DegenerateError("cosine undefined for a zero-norm vector")
    cos = (V @ V.T) / np.outer(norms, norms)
    sq = np.sum((V[:, None, :] - V[None, :, :]) ** 2, axis=-1)
    c = 0.5 * lambda_dist * sq
    if angular:
        c = c + (1.0 - cos)
    np.fill_diagonal(c, 0.0)
    return c


def gw_fixed_plan(V_s, V_t, lambda_dist: float = 1.0, angular: bool = True) -> float:
    """sum_ij |c(v_s_i, v_s_j) - c(v_t_i, v_t_j)|^2 with the identity correspondence."""
    A = np.asarray(V_s, dtype=np.float64)
    B = np.asarray(V_t, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ContractError(f"structures must have the same number of anchors: {A.shape} vs {B.shape}")
    diff = _pairwise_c(A, lambda_dist, angular) - _pairwise_c(B, lambda_dist, angular)
    return float(np.sum(diff * diff))


def squared_distances(Z, A) -> Tensor:
    """n x k matrix of |z_i - a_j|^2, built from matmuls only."""
    Z, A = nx.as_tensor(Z), nx.as_tensor(A)
    n, k = Z.shape[0], A.shape[0]
    zz = nx.reshape((Z * Z).sum(axis=1), (n, 1)) @ nx.constant(np.ones((1, k)))
    aa = nx.constant(np.ones((n, 1))) @ nx.reshape((A * A).sum(axis=1), (1, k))
    return zz + aa - 2.0 * (Z @ A.T)
