"""The adaptation loop: sampling, pseudo-labels, anchor EMA, loss assembly and updates.

Gradient routing per step:

* Delta   <- grad_Delta of lambda_phi * phi
* classifier <- grad of L_ce + lambda_R * L_R
* extractor  <- grad of L_ce + lambda_ot * L_ot + lambda_T * L_global + lambda_phi * phi

The consensus term sees detached features and a constant Q; OT sees constant
anchors and a constant plan; the global and OT terms see Delta as a constant.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import model as M
from . import numerics as nx
from .config import TrainConfig
from .data import DomainDataset
from .errors import ContractError, DegenerateError, NumericError
from .numerics import Tensor
from .radial import (TRAIN_NORM_GUARD, RadialStructure, egocentric, ema_update, gw_fixed_plan, local_loss_phi,
                     one_hot, phi_between, squared_distances)
from .sinkhorn import TransportPlan, entropic_cost, sinkhorn_plan, soft_assignments, transport_cost
from .stiefel import StiefelParam, init_identity, orthonormality_error, riemannian_step

log = logging.getLogger(__name__)


def lr_schedule(p: float, eta0: float = 0.01, gamma: float = 10.0, beta: float = 0.75) -> float:
    return eta0 * (1.0 + gamma * p) ** (-beta)


def transfer_weight(p: float, alpha: float = 10.0) -> float:
    return 2.0 / (1.0 + math.exp(-alpha * p)) - 1.0


def pseudo_labels(P: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return np.argmax(np.asarray(P), axis=1).astype(np.int64)


@dataclass
class MetricsRow:
    iteration: int
    p: float
    lr: float
    transfer_weight: float
    L_ce: float
    L_global: float
    phi: float
    L_ot: float
    L_R: float
    align_grad_norm: float
    delta_grad_norm: float
    source_accuracy: float = float("nan")
    target_accuracy: float = float("nan")
    phi_s_sgt: float = float("nan")
    phi_t_tgt: float = float("nan")
    phi_sgt_tgt: float = float("nan")
    gw_fixed: float = float("nan")
    wasserstein_t: float = float("nan")
    kl_qp_t: float = float("nan")
    ema_anchor_gap: float = float("nan")
    delta_orth_error: float = float("nan")
    sinkhorn_iters: int = 0
    sinkhorn_converged: int = 1

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def values(self) -> list:
        return [getattr(self, name) for name in self.header()]


@dataclass
class TrainState:
    config: TrainConfig
    params: M.ModelParams
    stiefel: StiefelParam
    source: RadialStructure
    target: RadialStructure
    velocity: list[np.ndarray]
    iteration: int = 0
    warnings: dict = field(default_factory=lambda: {"sinkhorn_nonconverged": 0, "skipped_classes": 0})
    # last anchor-side Sinkhorn potentials per domain, keyed by the present-class set
    ot_warm: dict = field(default_factory=dict)


@dataclass
class StepOutput:
    """Everything a step computed, kept for tests and diagnostics."""

    row: MetricsRow
    grads_main: dict
    grads_align: dict
    terms: dict
    plan_t: TransportPlan | None = None
    Q_t: np.ndarray | None = None
    P_t: np.ndarray | None = None


def init_state(config: TrainConfig, source: DomainDataset, target: DomainDataset) -> TrainState:
    if source.dim != target.dim or source.num_classes != target.num_classes:
        raise ContractError("source and target must share feature width and class count")
    if source.labels is None:
        raise ContractError("the source domain must be labeled")
    k = source.num_classes
    params = M.init_params(source.dim, config.hidden, config.bottleneck, k, config.seed, config.temperature)
    stiefel = init_identity(config.bottleneck, config.task_lr_mult)
    zs, _ = M.forward_source(params, source.features)
    zt, Pt = M.forward_target(params, stiefel, target.features)
    s_struct = RadialStructure.from_features(zs, source.labels, k, "source")
    t_struct = RadialStructure.from_features(zt, pseudo_labels(Pt), k, "target")
    velocity = [np.zeros_like(a) for a in params.arrays()]
    return TrainState(config, params, stiefel, s_struct, t_struct, velocity)


def _broadcast_rows(v: Tensor, k: int) -> Tensor:
    d = v.shape[0]
    return nx.constant(np.ones((k, 1))) @ nx.reshape(v, (1, d))


def _ema_anchor_tensors(z: Tensor, labels: np.ndarray, prev: RadialStructure, eta: float):
    """In-step anchors eta * batch_mean + (1 - eta) * previous, with gradients through the batch part."""
    k, d = prev.k, prev.dim
    n = z.shape[0]
    onehot = one_hot(labels, k)
    counts = onehot.sum(axis=0)
    seen = counts > 0
    avg = np.divide(onehot, counts[None, :], out=np.zeros_like(onehot), where=seen[None, :]).T
    batch_means = nx.constant(avg) @ z
    rate = np.where(prev.missing, 1.0, eta) * seen
    rate_m = np.repeat(rate[:, None], d, axis=1)
    carried = (1.0 - rate_m) * np.where(prev.missing[:, None], 0.0, prev.local_anchors)
    local = batch_means * nx.constant(rate_m) + nx.constant(carried)
    glob = z.mean(axis=0) * eta + nx.constant((1.0 - eta) * prev.global_anchor)
    batch_global = z.data.mean(axis=0)
    new_struct = ema_update(prev, batch_means.data, counts, eta, batch_global) if n else prev
    return local, glob, new_struct, counts


def _ot_term(z: Tensor, struct: RadialStructure, cfg: TrainConfig, warm=None):
    present = np.flatnonzero(struct.present)
    anchors = struct.local_anchors[present]
    cost = squared_distances(z, nx.constant(anchors))
    n, m = cost.shape
    scale = float(np.max(cost.data))
    if not scale > 0:
        scale = 1.0
    init = None
    if warm is not None and warm[0] == tuple(present):
        init = warm[1]
    plan = sinkhorn_plan(cost.data, np.full(n, 1.0 / n), np.full(m, 1.0 / m), cfg.epsilon_ot * scale,
                         cfg.sinkhorn_max_iter, cfg.sinkhorn_tol, init_col_potential=init)
    value = entropic_cost(plan, cost)
    Q = np.zeros((n, struct.k))
    Q[:, present] = soft_assignments(plan)
    return value, plan, Q, cost.data, (tuple(present), plan.col_potential)


def _finite(name: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"loss term {name} is not finite")
    return t


def _grad_norm(grads: dict, leaves) -> float:
    return float(math.sqrt(sum(float(np.sum(grads[l] ** 2)) for l in leaves if l in grads)))


def compute_step(state: TrainState, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray, p: float | None = None,
                 need_metrics: bool = True) -> StepOutput:
    """Forward, losses and gradients for one step, without touching ``state``.

    With ``need_metrics=False`` the transport problems are skipped on steps
    where neither the OT nor the consensus term carries weight.
    """
    cfg = state.config
    k = state.source.k
    if len(xs) == 0 or len(xt) == 0:
        raise ContractError("train_step needs non-empty source and target batches")
    if p is None:
        p = state.iteration / cfg.max_iters if cfg.max_iters else 0.0
    stiefel = None if cfg.no_stiefel else state.stiefel
    leaves = M.Leaves.of(state.params, stiefel)
    delta_const = nx.constant(state.stiefel.matrix)
    t = cfg.temperature

    try:
        z_s = M.extract(leaves, xs)
        z_t = M.extract(leaves, xt)
    except NumericError as exc:
        raise NumericError(f"forward pass: {exc}") from exc
    logits_s = M.logits_of(leaves, z_s)
    zt_rot_c = z_t @ delta_const
    zt_rot = z_t @ leaves.stiefel if leaves.stiefel is not None else zt_rot_c

    # posteriors on detached features: only the classifier sees the consensus gradient
    logits_s_det = M.logits_of(leaves, nx.constant(z_s.data))
    logits_t_det = M.logits_of(leaves, nx.constant(zt_rot_c.data))
    P_t = np.exp(nx.log_softmax(nx.constant(logits_t_det.data / t)).data)
    yt_hat = pseudo_labels(P_t)

    A_s, g_s, new_s, counts_s = _ema_anchor_tensors(z_s, ys, state.source, cfg.eta_ema)
    A_t, g_t, new_t, counts_t = _ema_anchor_tensors(zt_rot, yt_hat, state.target, cfg.eta_ema)
    _, g_t_c, _, _ = _ema_anchor_tensors(zt_rot_c, yt_hat, state.target, cfg.eta_ema)

    L_ce = _finite("L_ce", M.tempered_cross_entropy(logits_s, ys, t))
    L_global = _finite("L_global", nx.norm(g_s - g_t_c))

    common = np.flatnonzero(new_s.present & new_t.present)
    skipped = k - common.size
    V_s = A_s - _broadcast_rows(g_s, k)
    V_t = A_t - _broadcast_rows(g_t, k)
    if common.size:
        phi = _finite("phi", local_loss_phi(V_s, V_t, cfg.lambda_dist, not cfg.no_angular, TRAIN_NORM_GUARD, common))
    else:
        phi = nx.constant(0.0)

    w = transfer_weight(p, cfg.alpha) if p >= cfg.burn_in else 0.0
    w_T = w * cfg.lambda_T
    w_phi = w * cfg.lambda_phi if common.size else 0.0
    w_ot = 0.0 if cfg.no_ot else w * cfg.lambda_ot
    w_R = 0.0 if cfg.no_consensus else w * cfg.lambda_R

    if need_metrics or w_ot != 0.0 or w_R != 0.0:
        L_ot_s, plan_s, Q_s, _, warm_s = _ot_term(z_s, new_s, cfg, state.ot_warm.get("source"))
        L_ot_t, plan_t, Q_t, cost_t, warm_t = _ot_term(zt_rot_c, new_t, cfg, state.ot_warm.get("target"))
        L_ot = _finite("L_ot", L_ot_s + L_ot_t)
        R_s = M.consensus_from_logits(Q_s, logits_s_det, t, cfg.entropy_sign)
        R_t = M.consensus_from_logits(Q_t, logits_t_det, t, cfg.entropy_sign)
        L_R = _finite("L_R", R_s + R_t)
        pos = Q_t > 0
        logP = np.log(np.maximum(P_t, M.PROB_FLOOR))
        kl_t = float(np.sum(np.where(pos, Q_t * (np.log(np.where(pos, Q_t, 1.0)) - logP), 0.0)) / len(xt))
        ot_extra = dict(wasserstein_t=transport_cost(plan_t, cost_t), kl_qp_t=kl_t,
                        sinkhorn_iters=plan_s.iterations_used + plan_t.iterations_used,
                        sinkhorn_converged=int(plan_s.converged and plan_t.converged))
    else:
        L_ot = L_R = None
        plan_t = Q_t = None
        warm_s, warm_t = state.ot_warm.get("source"), state.ot_warm.get("target")
        ot_extra = {}

    theta, clf = leaves.theta(), leaves.phi()
    main = L_ce if w_R == 0.0 else L_ce + L_R * w_R
    grads_main = nx.evaluate_with_gradients(main, theta + clf)

    align_leaves = theta + ([leaves.stiefel] if leaves.stiefel is not None else [])
    align_terms = [(w_T, L_global), (w_phi, phi), (w_ot, L_ot)]
    align_terms = [(wt, term) for wt, term in align_terms if wt != 0.0]
    if align_terms:
        align = align_terms[0][1] * align_terms[0][0]
        for wt, term in align_terms[1:]:
            align = align + term * wt
        grads_align = nx.evaluate_with_gradients(align, align_leaves)
    else:
        grads_align = {leaf: np.zeros_like(leaf.data) for leaf in align_leaves}

    lr = lr_schedule(p, cfg.eta0, cfg.gamma, cfg.beta)
    row = MetricsRow(
        iteration=state.iteration,
        p=p,
        lr=lr,
        transfer_weight=transfer_weight(p, cfg.alpha),
        L_ce=L_ce.item(),
        L_global=L_global.item(),
        phi=phi.item(),
        L_ot=L_ot.item() if L_ot is not None else float("nan"),
        L_R=L_R.item() if L_R is not None else float("nan"),
        align_grad_norm=_grad_norm(grads_align, align_leaves),
        delta_grad_norm=_grad_norm(grads_align, [leaves.stiefel]) if leaves.stiefel is not None else 0.0,
        **ot_extra,
    )
    terms = {"L_ce": L_ce, "L_global": L_global, "phi": phi, "L_ot": L_ot, "L_R": L_R,
             "weights": {"T": w_T, "phi": w_phi, "ot": w_ot, "R": w_R}, "lr": lr,
             "new_source": new_s, "new_target": new_t, "skipped": skipped, "leaves": leaves,
             "ot_warm": {"source": warm_s, "target": warm_t}}
    return StepOutput(row, grads_main, grads_align, terms, plan_t, Q_t, P_t)


def apply_update(state: TrainState, out: StepOutput) -> TrainState:
    cfg = state.config
    leaves = out.terms["leaves"]
    lr = out.terms["lr"]
    new_s, new_t = out.terms["new_source"], out.terms["new_target"]
    if not (out.plan_t is None or out.row.sinkhorn_converged):
        state.warnings["sinkhorn_nonconverged"] += 1
    state.warnings["skipped_classes"] += out.terms["skipped"]
    params, stiefel, velocity = state.params, state.stiefel, state.velocity
    if lr > 0:
        theta, clf = leaves.theta(), leaves.phi()
        all_leaves = theta + clf
        lrs = [lr] * len(theta) + [lr * cfg.task_lr_mult] * len(clf)
        new_arrays, new_velocity = [], []
        for leaf, v, step_lr in zip(all_leaves, velocity, lrs):
            g = out.grads_main[leaf]
            if leaf in out.grads_align:
                g = g + out.grads_align[leaf]
            v = cfg.momentum * v + g
            new_velocity.append(v)
            new_arrays.append(leaf.data - step_lr * v)
        params = _params_from_arrays(state.params, new_arrays)
        velocity = new_velocity
        if leaves.stiefel is not None:
            g_delta = out.grads_align[leaves.stiefel]
            if np.any(g_delta != 0.0):
                stiefel = riemannian_step(state.stiefel, g_delta, lr * cfg.task_lr_mult)
    return TrainState(cfg, params, stiefel, new_s, new_t, velocity, state.iteration + 1, state.warnings,
                      out.terms["ot_warm"])


def _params_from_arrays(template: M.ModelParams, arrays: list[np.ndarray]) -> M.ModelParams:
    it = iter(arrays)
    ext = [(next(it), next(it)) for _ in template.extractor]
    clf = (next(it), next(it))
    return M.ModelParams(ext, clf, template.temperature)


def train_step(state: TrainState, source_batch, target_batch) -> tuple[TrainState, MetricsRow]:
    xs, ys = source_batch
    xt = target_batch[0] if isinstance(target_batch, tuple) else target_batch
    out = compute_step(state, np.asarray(xs, float), np.asarray(ys, np.int64), np.asarray(xt, float))
    return apply_update(state, out), out.row


# ------------------------------------------------------------------ sampling


class BatchSampler:
    """Class-balanced source batches and uniform target batches from one seeded stream."""

    def __init__(self, source: DomainDataset, target: DomainDataset, batch_size: int, seed: int):
        self.rng = np.random.default_rng([seed, 7])
        self.source, self.target = source, target
        self.batch_size = batch_size
        k = source.num_classes
        self.by_class = [np.flatnonzero(source.labels == c) for c in range(k)]
        self.present = [c for c in range(k) if self.by_class[c].size]

    def source_batch(self) -> tuple[np.ndarray, np.ndarray]:
        m = len(self.present)
        base, extra = divmod(self.batch_size, m)
        bonus = set(self.rng.choice(m, extra, replace=False).tolist()) if extra else set()
        idx = []
        for j, c in enumerate(self.present):
            want = base + (1 if j in bonus else 0)
            pool = self.by_class[c]
            idx.append(self.rng.choice(pool, want, replace=pool.size < want))
        idx = np.concatenate(idx)
        return self.source.features[idx], self.source.labels[idx]

    def target_batch(self) -> np.ndarray:
        n = len(self.target)
        idx = self.rng.choice(n, min(self.batch_size, n), replace=False)
        return self.target.features[idx]


# ------------------------------------------------------------------ evaluation


def evaluate_state(state: TrainState, source: DomainDataset, target: DomainDataset, row: MetricsRow) -> MetricsRow:
    """Fill the full-data accuracy and ground-truth structure columns of ``row``."""
    cfg = state.config
    k = source.num_classes
    zs, Ps = M.forward_source(state.params, source.features)
    zt, Pt = M.forward_target(state.params, state.stiefel, target.features)
    row.source_accuracy = float(np.mean(pseudo_labels(Ps) == source.labels))
    s_gt = RadialStructure.from_features(zs, source.labels, k, "source")
    row.phi_s_sgt = _safe_phi(state.source, s_gt, cfg.lambda_dist)
    row.ema_anchor_gap = float(np.max(np.abs(state.source.local_anchors[s_gt.present] - s_gt.local_anchors[s_gt.present])))
    if target.labels is not None:
        row.target_accuracy = float(np.mean(pseudo_labels(Pt) == target.labels))
        t_gt = RadialStructure.from_features(zt, target.labels, k, "target")
        row.phi_t_tgt = _safe_phi(state.target, t_gt, cfg.lambda_dist)
        row.phi_sgt_tgt = _safe_phi(s_gt, t_gt, cfg.lambda_dist)
    common = np.flatnonzero(state.source.present & state.target.present)
    try:
        row.gw_fixed = gw_fixed_plan(egocentric(state.source, common), egocentric(state.target, common),
                                     cfg.lambda_dist)
    except DegenerateError:
        row.gw_fixed = float("nan")
    row.delta_orth_error = orthonormality_error(state.stiefel.matrix)
    return row


def _safe_phi(a: RadialStructure, b: RadialStructure, lambda_dist: float) -> float:
    try:
        return phi_between(a, b, lambda_dist, True, TRAIN_NORM_GUARD)
    except DegenerateError:
        return float("nan")


def accuracy(state: TrainState, dataset: DomainDataset, domain: str = "target") -> tuple[float, np.ndarray]:
    if dataset.labels is None:
        raise ContractError("accuracy needs a labeled dataset")
    if domain == "target":
        _, P = M.forward_target(state.params, state.stiefel, dataset.features)
    else:
        _, P = M.forward_source(state.params, dataset.features)
    pred = pseudo_labels(P)
    k = dataset.num_classes
    per_class = np.array([np.mean(pred[dataset.labels == c] == c) if np.any(dataset.labels == c) else np.nan
                          for c in range(k)])
    return float(np.mean(pred == dataset.labels)), per_class


# ------------------------------------------------------------------ fit


def fit(config: TrainConfig, source: DomainDataset, target: DomainDataset, log_interval: int = 50,
        callback=None) -> tuple[TrainState, list[MetricsRow]]:
    """Run ``config.max_iters`` steps; one metrics row every ``log_interval`` steps.

    Target labels, when present, are used for logged diagnostics only.
    """
    state = init_state(config, source, target)
    sampler = BatchSampler(source, target, config.batch_size, config.seed)
    rows: list[MetricsRow] = []
    for it in range(config.max_iters):
        xs, ys = sampler.source_batch()
        xt = sampler.target_batch()
        logging_step = (it + 1) % log_interval == 0
        out = compute_step(state, xs, ys, xt, need_metrics=logging_step)
        state = apply_update(state, out)
        if logging_step:
            row = evaluate_state(state, source, target, out.row)
            rows.append(row)
            if callback is not None:
                callback(row)
    if state.warnings["sinkhorn_nonconverged"]:
        log.info("sinkhorn did not converge on %d steps", state.warnings["sinkhorn_nonconverged"])
    if state.warnings["skipped_classes"]:
        log.info("%d class-steps skipped in phi (class missing from a structure)", state.warnings["skipped_classes"])
    return state, rows
