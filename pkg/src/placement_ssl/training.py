"""Supervised, similarity and domain losses, the joint training step, and the
train-then-correct outer loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSplit, PairRecord, binarize, init_pseudo_labels, threshold_labels
from .model import (
    ModelStack,
    encode_groups,
    load_checkpoint,
    predict_domain,
    predict_rationality,
    predict_record_scores,
    predict_similarity,
    save_checkpoint,
)
from .streams import rng_stream

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, dump: dict | None = None):
        self.dump = dump or {}
        super().__init__(message)


class StalePassError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class TrainState:
    stack: ModelStack
    optimizer: torch.optim.Optimizer
    lr: float = 5e-4
    alpha: float = 0.4
    gamma: float = 0.5
    correction_period: int = 5
    lr_halve_every: int = 2
    seed: int = 0
    epoch: int = 0
    step: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.correction_period < 1:
            raise ValueError("correction_period must be >= 1")

    def set_lr(self, lr: float) -> None:
        for g in self.optimizer.param_groups:
            g["lr"] = lr


def make_state(stack: ModelStack, lr=5e-4, **kw) -> TrainState:
    return TrainState(stack, torch.optim.Adam(stack.parameters(), lr=lr), lr=lr, **kw)


def bce(target, p):
    """Binary cross-entropy with ``p`` clamped to ``[eps, 1 - eps]``; soft targets allowed."""
    p = torch.as_tensor(p)
    t = torch.as_tensor(target, dtype=p.dtype if p.is_floating_point() else torch.float64)
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(t * torch.log(p) + (1 - t) * torch.log1p(-p))


@dataclass
class BatchForward:
    """Features of every placement in a batch of records, in record order."""
    features: torch.Tensor
    labels: np.ndarray
    offsets: np.ndarray
    token: int
    domain: str

    @property
    def n_records(self) -> int:
        return len(self.offsets) - 1


@dataclass
class SimOutput:
    features: torch.Tensor
    scores: torch.Tensor
    targets: np.ndarray
    token: int


def encode_batch(stack: ModelStack, records: list[PairRecord], token: int | None = None) -> BatchForward:
    if token is None:
        token = stack.new_pass()
    feats = encode_groups(stack, [(r.scene, r.placements) for r in records])
    labels = np.concatenate([np.asarray(r.labels, dtype=np.float64) for r in records]) if records else np.zeros(0)
    offsets = np.cumsum([0] + [r.K for r in records])
    domain = records[0].domain if records else "S"
    return BatchForward(feats, labels, offsets, token, domain)


def loss_sup(stack: ModelStack, batch_S: BatchForward, batch_T: BatchForward | None = None) -> torch.Tensor:
    """Mean BCE over all labeled and pseudo-labeled placements of the batch."""
    parts_p, parts_y = [], []
    for fwd in (batch_S, batch_T):
        if fwd is None or len(fwd.labels) == 0:
            continue
        if np.isnan(fwd.labels).any():
            raise ValueError("pseudo-labels are not initialized")
        parts_p.append(predict_rationality(stack, fwd.features))
        parts_y.append(fwd.labels)
    if not parts_p:
        raise ValueError("empty batch")
    p = torch.cat(parts_p)
    y = torch.as_tensor(np.concatenate(parts_y), dtype=p.dtype)
    return bce(y, p).mean()


def sample_pairs(labels, rng: np.random.Generator, max_pairs: int = 12) -> np.ndarray:
    """Ordered pairs ``(i, j)``, ``i != j``, balanced between same and different labels.

    Draws ``min(K(K-1), max_pairs)`` pairs without replacement; half come from
    same-label pairs and half from different-label pairs when both exist, the
    shortfall of either group being filled from the other.
    """
    hard = binarize(labels)
    k = len(hard)
    if k < 2:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = np.nonzero(~np.eye(k, dtype=bool))
    all_pairs = np.stack([i, j], axis=1)
    n = min(len(all_pairs), max_pairs)
    same = hard[i] == hard[j]
    groups = [all_pairs[same], all_pairs[~same]]
    want = [n // 2, n - n // 2]
    if len(groups[0]) < want[0]:
        want = [len(groups[0]), n - len(groups[0])]
    elif len(groups[1]) < want[1]:
        want = [n - len(groups[1]), len(groups[1])]
    picked = [g[rng.choice(len(g), size=m, replace=False)] for g, m in zip(groups, want) if m > 0]
    return np.concatenate(picked, axis=0) if picked else np.zeros((0, 2), dtype=np.int64)


def batch_pairs(fwd: BatchForward, rng: np.random.Generator, max_pairs: int = 12) -> np.ndarray:
    """Pair indices into ``fwd.features``; pairs never cross records."""
    out = []
    for a, b in zip(fwd.offsets[:-1], fwd.offsets[1:]):
        pairs = sample_pairs(fwd.labels[a:b], rng, max_pairs)
        out.append(pairs + a)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2), dtype=np.int64)


def _similarity(stack, fwd: BatchForward, pairs: np.ndarray) -> SimOutput:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValueError("similarity pairs need two distinct placements")
    idx = torch.as_tensor(pairs)
    feat, p = predict_similarity(stack, fwd.features[idx[:, 0]], fwd.features[idx[:, 1]])
    hard = binarize(fwd.labels)
    targets = (hard[pairs[:, 0]] == hard[pairs[:, 1]]).astype(np.float64)
    return SimOutput(feat, p, targets, fwd.token)


def loss_sim(stack: ModelStack, batch_S: BatchForward, batch_T: BatchForward | None,
             pairs_S: np.ndarray, pairs_T: np.ndarray | None = None):
    """Mean BCE of the similarity head over the sampled ordered pairs of both pools.

    Returns ``(loss, sim_S, sim_T)``; the similarity features feed the domain loss.
    """
    sim_S = _similarity(stack, batch_S, pairs_S)
    sim_T = _similarity(stack, batch_T, pairs_T) if batch_T is not None and pairs_T is not None else None
    outs = [s for s in (sim_S, sim_T) if s is not None and len(s.targets)]
    if not outs:
        return batch_S.features.sum() * 0.0, sim_S, sim_T
    p = torch.cat([s.scores for s in outs])
    y = torch.as_tensor(np.concatenate([s.targets for s in outs]), dtype=p.dtype)
    return bce(y, p).mean(), sim_S, sim_T


def loss_dom(stack: ModelStack, sim_S: SimOutput, sim_T: SimOutput, coeff: float) -> torch.Tensor:
    """Mean BCE of the domain head (labeled = 1, unlabeled = 0) behind a gradient reversal.

    The head descends this loss; everything below the reversal receives the
    gradient scaled by ``-coeff``.
    """
    for s in (sim_S, sim_T):
        if s.token != stack.pass_token:
            raise StalePassError("similarity features come from an earlier forward pass")
    p = torch.cat([predict_domain(stack, sim_S.features, coeff), predict_domain(stack, sim_T.features, coeff)])
    y = torch.cat([torch.ones(len(sim_S.targets), dtype=p.dtype), torch.zeros(len(sim_T.targets), dtype=p.dtype)])
    return bce(y, p).mean()


def joint_losses(stack: ModelStack, records_S, records_T, weights: LossWeights, rng: np.random.Generator,
                 max_pairs: int = 12) -> dict:
    """Forward pass of the joint objective; returns tensors for each term and the backward objective.

    ``backward`` = sup + lambda1 * sim + dom, where the domain term sits behind a
    reversal of strength lambda2, so one backward pass lets the domain head
    minimize it while the rest of the model maximizes ``lambda2 * dom``.
    """
    token = stack.new_pass()
    fS = encode_batch(stack, records_S, token)
    fT = encode_batch(stack, records_T, token) if records_T else None
    out = {"sup": loss_sup(stack, fS, fT), "sim": None, "dom": None}
    backward = out["sup"]
    need_dom = weights.lambda2 > 0 and fT is not None
    if weights.lambda1 > 0 or need_dom:
        pS = batch_pairs(fS, rng, max_pairs)
        pT = batch_pairs(fT, rng, max_pairs) if fT is not None else None
        out["sim"], sim_S, sim_T = loss_sim(stack, fS, fT, pS, pT)
        if weights.lambda1 > 0:
            backward = backward + weights.lambda1 * out["sim"]
        if need_dom and len(sim_S.targets) and len(sim_T.targets):
            out["dom"] = loss_dom(stack, sim_S, sim_T, weights.lambda2)
            backward = backward + out["dom"]
    out["backward"] = backward
    return out


def _float(t) -> float | None:
    return None if t is None else float(t.detach())


def train_step(state: TrainState, records_S, records_T, weights: LossWeights, rng: np.random.Generator,
               max_pairs: int = 12) -> dict:
    """One optimizer step on the joint objective; returns the loss breakdown."""
    stack = state.stack
    stack.train()
    losses = joint_losses(stack, records_S, records_T, weights, rng, max_pairs)
    sup, sim, dom = (_float(losses[k]) for k in ("sup", "sim", "dom"))
    total = sup + weights.lambda1 * (sim or 0.0) - weights.lambda2 * (dom or 0.0)
    breakdown = {"sup": sup, "sim": sim, "dom": dom, "total": total}
    if not all(math.isfinite(v) for v in breakdown.values() if v is not None):
        dump = {"losses": breakdown, "step": state.step, "epoch": state.epoch,
                "param_norms": {n: float(p.detach().norm()) for n, p in stack.named_parameters()}}
        raise DivergenceError(f"non-finite loss at step {state.step}: {breakdown}", dump)
    state.optimizer.zero_grad(set_to_none=True)
    losses["backward"].backward()
    state.optimizer.step()
    state.step += 1
    return breakdown


def mix_labels(old, new_hard, alpha: float) -> np.ndarray:
    """Convex blend ``(1 - alpha) * new + alpha * old``."""
    return (1.0 - alpha) * np.asarray(new_hard, dtype=np.float64) + alpha * np.asarray(old, dtype=np.float64)


def correct_labels(state: TrainState, T: list[PairRecord]) -> list[PairRecord]:
    """Re-threshold the latest scores and blend them with the current pseudo-labels."""
    scores = predict_record_scores(state.stack, T)
    return [r.with_labels(mix_labels(r.labels, threshold_labels(s, state.gamma), state.alpha))
            for r, s in zip(T, scores)]


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    stack: ModelStack
    history: list = field(default_factory=list)
    train_T: list = field(default_factory=list)


def build_stack(config, seed: int | None = None) -> ModelStack:
    spec = config.scene_spec()
    return ModelStack(style=config.style, feature_dim=config.feature_dim, n_kinds=len(spec.region_palette),
                      resolution=config.resolution, sampling_range=spec.sampling_range,
                      seed=config.seed if seed is None else seed)


def _phase_lr(config, epoch_in_phase: int) -> float:
    return config.lr * 0.5 ** (epoch_in_phase // config.lr_halve_every)


def run_phase(state: TrainState, config, S: list, T: list, phase: int, epochs: int,
              weights: LossWeights) -> dict:
    """``epochs`` passes over the labeled pool; each step also draws as many unlabeled pairs."""
    batch_rng = rng_stream(config.seed, "batch", phase)
    pair_rng = rng_stream(config.seed, "pairs", phase)
    b = config.pairs_per_batch
    t_order = batch_rng.permutation(len(T)) if T else np.zeros(0, dtype=np.int64)
    t_cursor = 0
    sums = {"sup": [], "sim": [], "dom": []}
    for e in range(epochs):
        state.set_lr(_phase_lr(config, e))
        s_order = batch_rng.permutation(len(S))
        for start in range(0, len(S), b):
            rs = [S[i] for i in s_order[start:start + b]]
            rt = []
            if T:
                if t_cursor + len(rs) > len(t_order):
                    t_order = batch_rng.permutation(len(T))
                    t_cursor = 0
                rt = [T[i] for i in t_order[t_cursor:t_cursor + len(rs)]]
                t_cursor += len(rs)
            out = train_step(state, rs, rt, weights, pair_rng, config.max_sim_pairs)
            for k in sums:
                if out[k] is not None:
                    sums[k].append(out[k])
        state.epoch += 1
    return {k: (float(np.mean(v)) if v else None) for k, v in sums.items()}


def _evaluate(stack, split: DatasetSplit, gamma: float) -> dict:
    from .evaluation import evaluate_splits

    return evaluate_splits(stack, split, gamma)


def _checkpoint_meta(config, phase: int, history: list, state: TrainState) -> dict:
    return {"phase": phase, "epoch": state.epoch, "step": state.step, "seed": config.seed,
            "config_hash": config.config_hash(), "config": config.settings(), "history": history}


def _pack_labels(T: list) -> np.ndarray:
    return np.concatenate([r.labels for r in T]) if T else np.zeros(0)


def _unpack_labels(T: list, flat: np.ndarray) -> list:
    offsets = np.cumsum([0] + [r.K for r in T])
    return [r.with_labels(flat[a:b]) for r, a, b in zip(T, offsets[:-1], offsets[1:])]


HISTORY_KEYS = ("phase", "epoch", "f1_seen", "bal_seen", "f1_novel", "bal_novel",
                "loss_sup", "loss_sim", "loss_dom", "config_hash", "seed")


def _ordered(entry: dict) -> dict:
    # checkpoint headers are stored key-sorted; restore the order records are written in
    return {k: entry[k] for k in HISTORY_KEYS if k in entry} | {k: v for k, v in entry.items() if k not in HISTORY_KEYS}


def _restore(path, config):
    stack, header, extra, optim_state = load_checkpoint(path)
    state = make_state(stack, lr=config.lr, alpha=config.alpha, gamma=config.gamma,
                       correction_period=config.correction_period, lr_halve_every=config.lr_halve_every,
                       seed=config.seed)
    if optim_state is not None:
        state.optimizer.load_state_dict(optim_state)
    meta = header["meta"]
    state.epoch, state.step = meta.get("epoch", 0), meta.get("step", 0)
    return state, meta, extra


def run_ssl(config, split: DatasetSplit, checkpoint_dir=None, resume: bool = False,
            pretrain_cache=None, stop_after_phase: int | None = None) -> RunResult:
    """Supervised warm-up, pseudo-label initialization, then ``rounds`` phases of
    joint training each followed by label correction.

    With ``config.use_unlabeled`` off the unlabeled pool is ignored and every
    phase trains the supervised loss on the labeled pool only. Checkpoints are
    written after every phase when ``checkpoint_dir`` is given; ``resume``
    continues from the latest one written under the same config hash.
    """
    if not split.train_S:
        raise ValueError("the labeled pool is empty")
    torch.set_num_threads(1)
    chash = config.config_hash()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    S = list(split.train_S)
    T = list(split.train_T) if config.use_unlabeled else []
    weights = LossWeights(config.effective_lambda1, config.effective_lambda2)
    history: list = []
    start_phase = 0
    state = None

    if resume and ckdir is not None:
        done = sorted(ckdir.glob("phase_*.npz"))
        for path in reversed(done):
            state_, meta, extra = _restore(path, config)
            if meta.get("config_hash") == chash:
                state, history = state_, [_ordered(h) for h in meta["history"]]
                start_phase = meta["phase"] + 1
                if T and "train_T_labels" in extra:
                    T = _unpack_labels(T, extra["train_T_labels"])
                log.info("resuming after phase %d from %s", meta["phase"], path)
                break

    def record(phase, losses):
        metrics = _evaluate(state.stack, split, config.gamma)
        entry = {"phase": phase, "epoch": state.epoch, **metrics,
                 "loss_sup": losses.get("sup"), "loss_sim": losses.get("sim"), "loss_dom": losses.get("dom"),
                 "config_hash": chash, "seed": config.seed}
        history.append(entry)
        log.info("phase %d epoch %d: %s", phase, state.epoch, metrics)

    def save(phase):
        if ckdir is None:
            return
        arrays = {"train_T_labels": _pack_labels(T)} if T else {}
        save_checkpoint(ckdir / f"phase_{phase:03d}.npz", state.stack, state.optimizer,
                        _checkpoint_meta(config, phase, history, state), arrays)

    if start_phase == 0:
        cache = Path(pretrain_cache) if pretrain_cache is not None else None
        if cache is not None and cache.exists():
            state, meta, _ = _restore(cache, config)
            history.append(_ordered({**meta["history"][0], "config_hash": chash, "seed": config.seed}))
        else:
            stack = build_stack(config)
            state = make_state(stack, lr=config.lr, alpha=config.alpha, gamma=config.gamma,
                               correction_period=config.correction_period,
                               lr_halve_every=config.lr_halve_every, seed=config.seed)
            losses = run_phase(state, config, S, [], 0, config.pretrain_epochs, LossWeights(0.0, 0.0))
            stack.pretrained = True
            record(0, losses)
            if cache is not None:
                cache.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(cache, state.stack, state.optimizer,
                                _checkpoint_meta(config, 0, history, state))
        if T:
            T = init_pseudo_labels(state.stack, T, config.gamma)
        save(0)
        start_phase = 1
        if stop_after_phase == 0:
            return RunResult(state.stack, history, T)

    for phase in range(start_phase, config.rounds + 1):
        losses = run_phase(state, config, S, T, phase, config.correction_period, weights)
        record(phase, losses)
        if T and config.label_correction:
            T = correct_labels(state, T)
        save(phase)
        if stop_after_phase is not None and phase >= stop_after_phase:
            break
    return RunResult(state.stack, history, T)
