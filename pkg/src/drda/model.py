"""Feature extractor G, linear classifier F and the classification-side losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor
from .stiefel import StiefelParam

PROB_FLOOR = 1e-12


@dataclass
class ModelParams:
    """Weights use the row-vector convention: ``h = x @ W + b`` with W of shape (in, out)."""

    extractor: list[tuple[np.ndarray, np.ndarray]]
    classifier: tuple[np.ndarray, np.ndarray]
    temperature: float = 1.0

    @property
    def input_dim(self) -> int:
        return self.extractor[0][0].shape[0]

    @property
    def bottleneck_dim(self) -> int:
        return self.extractor[-1][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = [a for layer in self.extractor for a in layer]
        return out + list(self.classifier)

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.extractor],
                           (self.classifier[0].copy(), self.classifier[1].copy()), self.temperature)


def init_params(input_dim: int, hidden: tuple[int, ...], bottleneck: int, num_classes: int,
                seed: int = 0, temperature: float = 1.0) -> ModelParams:
    """He-uniform weights (fan-in), zero biases."""
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, bottleneck]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)))
    bound = np.sqrt(1.0 / bottleneck)
    clf = (rng.uniform(-bound, bound, (bottleneck, num_classes)), np.zeros(num_classes))
    return ModelParams(layers, clf, temperature)


@dataclass
class Leaves:
    """Trainable tensors for one step, mirroring a :class:`ModelParams`."""

    extractor: list[tuple[Tensor, Tensor]]
    classifier: tuple[Tensor, Tensor]
    temperature: float = 1.0
    stiefel: Tensor | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def of(cls, params: ModelParams, stiefel: StiefelParam | None = None) -> "Leaves":
        ext = [(nx.parameter(w, f"W{i}"), nx.parameter(b, f"b{i}")) for i, (w, b) in enumerate(params.extractor)]
        clf = (nx.parameter(params.classifier[0], "Wc"), nx.parameter(params.classifier[1], "bc"))
        delta = nx.parameter(stiefel.matrix, "Delta") if stiefel is not None else None
        return cls(ext, clf, params.temperature, delta)

    def theta(self) -> list[Tensor]:
        return [t for layer in self.extractor for t in layer]

    def phi(self) -> list[Tensor]:
        return list(self.classifier)


def _check_input(x, params_or_leaves) -> None:
    first = params_or_leaves.extractor[0][0]
    width = first.shape[0]
    if x.ndim != 2 or x.shape[1] != width:
        raise ContractError(f"input width {x.shape} does not match first layer ({width})")


def extract(leaves: Leaves, x) -> Tensor:
    x = nx.as_tensor(x)
    _check_input(x, leaves)
    h = x
    last = len(leaves.extractor) - 1
    for i, (W, b) in enumerate(leaves.extractor):
        h = h @ W + b
        if i < last:
            h = nx.relu(h)
    return h


def logits_of(leaves: Leaves, z: Tensor) -> Tensor:
    W, b = leaves.classifier
    return z @ W + b


def _numpy_features(params: ModelParams, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    _check_input(h, params)
    last = len(params.extractor) - 1
    for i, (W, b) in enumerate(params.extractor):
        h = h @ W + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def posteriors(params: ModelParams, z: np.ndarray) -> np.ndarray:
    W, b = params.classifier
    logits = (z @ W + b) / params.temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def forward_source(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    z = _numpy_features(params, x)
    return z, posteriors(params, z)


def forward_target(params: ModelParams, stiefel: StiefelParam, x) -> tuple[np.ndarray, np.ndarray]:
    z = _numpy_features(params, x)
    if stiefel.dim != z.shape[1]:
        raise ContractError("Stiefel dimension does not match the bottleneck width")
    zr = z @ stiefel.matrix
    return zr, posteriors(params, zr)


def tempered_cross_entropy(logits, labels, t: float):
    """Mean over the batch of -log softmax(logits / t)[label]."""
    if not t > 0:
        raise ContractError(f"temperature must be positive, got {t}")
    tensor_in = isinstance(logits, Tensor)
    L = nx.as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    n, k = L.shape
    if y.shape != (n,) or (n and (y.min() < 0 or y.max() >= k)):
        raise ContractError("labels out of range or wrong length")
    logp = nx.log_softmax(L / t)
    picked = logp[np.arange(n), y]
    out = -picked.mean()
    return out if tensor_in else out.item()


class ClampCounter:
    """Counts posterior entries floored at PROB_FLOOR."""

    def __init__(self):
        self.count = 0


CLAMPS = ClampCounter()


def consensus_reg(Q, P, entropy_sign: float = 1.0) -> float:
    """KL(Q || P) + entropy_sign * H(P), each averaged over the batch (array inputs)."""
    Q = np.asarray(Q, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if Q.shape != P.shape:
        raise ContractError("Q and P must have the same shape")
    if not np.allclose(Q.sum(axis=1), 1.0, atol=1e-8):
        raise ContractError("Q rows must sum to 1")
    low = P < PROB_FLOOR
    if np.any(low):
        CLAMPS.count += int(low.sum())
        P = np.maximum(P, PROB_FLOOR)
    logP = np.log(P)
    pos = Q > 0
    kl = np.sum(np.where(pos, Q * (np.log(np.where(pos, Q, 1.0)) - logP), 0.0)) / Q.shape[0]
    ent = -np.sum(P * logP) / P.shape[0]
    return float(kl + entropy_sign * ent)


def consensus_from_logits(Q: np.ndarray, logits: Tensor, t: float, entropy_sign: float = 1.0) -> Tensor:
    """Tensor form of :func:`consensus_reg`, with P = softmax(logits / t) and Q held constant."""
    n = Q.shape[0]
    logp = nx.log_softmax(logits / t)
    P = nx.exp(logp)
    low = P.data < PROB_FLOOR
    if np.any(low):
        CLAMPS.count += int(low.sum())
    pos = Q > 0
    q_log_q = float(np.sum(Q[pos] * np.log(Q[pos])))
    cross = (nx.constant(Q) * logp).sum()
    kl = (cross * -1.0 + q_log_q) / n
    ent = (P * logp).sum() * (-1.0 / n)
    return kl + ent * entropy_sign


def validate_posteriors(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or not np.allclose(P.sum(axis=1), 1.0, atol=1e-10) or np.any(P < 0):
        raise ContractError("posteriors must be row-stochastic")
    return P
