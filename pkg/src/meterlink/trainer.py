"""Triplet-loss training of embedders on the auxiliary dataset, and grid search.

Triplets come from sliding week windows: for a random day ``d`` the anchor is
the 7-day window starting at ``d`` and the two positives start at ``d - lag``
and ``d + lag`` (indices wrap around the training days). The negative for an
anchor is the closest embedding of another user in the same batch.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attack
from .data import Dataset, ScalingStats, fit_scaling, split_weeks, unit_scale_array
from .embedders import (DAYS, LAYER_RANGES, EmbedderConfig, EmbedderParams, EmbeddingModel, forward,
                        init_params, to_daily_sequence)
from .numkit import tensor as T
from .numkit.layers import euclidean
from .numkit.optim import AdamW, OptimizerConfig
from .numkit.tensor import Tape, Tensor

log = logging.getLogger(__name__)

DIST_EPS = 1e-12


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    margin: float = 1.0
    lag: int = 7
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    train_weeks: tuple = (1, 2)  # inclusive 1-based range
    validation_weeks: tuple = (3, 4)  # (reference, target)
    allow_overlap: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lag < 1:
            raise ValueError("lag must be at least 1")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        a, b = self.train_weeks
        if not 1 <= a <= b:
            raise ValueError(f"invalid train week range {self.train_weeks}")
        if len(self.validation_weeks) != 2:
            raise ValueError("validation_weeks must be a (reference, target) pair")
        if not self.allow_overlap and any(a <= w <= b for w in self.validation_weeks):
            raise ValueError("validation weeks overlap the triplet-sampling weeks")

    @property
    def train_week_indices(self) -> list[int]:
        return list(range(self.train_weeks[0] - 1, self.train_weeks[1]))


# --------------------------------------------------------------------------
# Loss and mining


def triplet_loss(a, p, n, margin: float = 1.0) -> float:
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    if not a.shape == p.shape == n.shape:
        raise ValueError("triplet vectors must share one dimension")
    return max(0.0, float(np.linalg.norm(a - p) - np.linalg.norm(a - n) + margin))


def hinge(z: Tensor) -> Tensor:
    """``max(0, z)`` with subgradient 0 at the hinge point."""
    return z * (z.data > 0).astype(np.float64)


def batch_triplet_loss(anchor: Tensor, positives: Sequence[Tensor], negative: Tensor, margin: float) -> Tensor:
    """Mean hinge over all (anchor, positive, negative) rows."""
    dn = euclidean(anchor, negative, DIST_EPS)
    terms = [hinge(euclidean(anchor, p, DIST_EPS) - dn + margin) for p in positives]
    return T.concat(terms, axis=0).mean()


def hard_negative(batch_embeddings, anchor) -> np.ndarray:
    """Closest embedding to ``anchor`` among entries of other users (first index on ties).

    ``batch_embeddings`` is a sequence of ``(user_id, vector)``; ``anchor`` is
    ``(user_id, vector)``.
    """
    uid, vec = anchor
    idx = hard_negative_index([u for u, _ in batch_embeddings], np.array([v for _, v in batch_embeddings]),
                              uid, np.asarray(vec, dtype=np.float64))
    return batch_embeddings[idx][1]


def hard_negative_index(users: Sequence, pool: np.ndarray, anchor_user, anchor_vec: np.ndarray) -> int:
    mask = np.array([u != anchor_user for u in users])
    if not mask.any():
        raise ValueError("batch holds no other user to draw a negative from")
    d = np.sqrt(((pool - anchor_vec[None, :]) ** 2).sum(axis=1))
    d = np.where(mask, d, np.inf)
    return int(np.argmin(d))


def mine_negatives(anchors: np.ndarray, pool: np.ndarray, anchor_user: np.ndarray,
                   pool_user: np.ndarray) -> np.ndarray:
    """Vectorized :func:`hard_negative_index` for every anchor row."""
    diff = anchors[:, None, :] - pool[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    same = anchor_user[:, None] == pool_user[None, :]
    if same.all(axis=1).any():
        raise ValueError("batch holds no other user to draw a negative from")
    d[same] = np.inf
    return d.argmin(axis=1)


# --------------------------------------------------------------------------
# Sampling


@dataclass
class TripletBatch:
    users: np.ndarray  # row indices into the training users
    day: int
    anchors: np.ndarray  # (B, 7, 24F) daily sequences
    positives_minus: np.ndarray
    positives_plus: np.ndarray
    windows: tuple = ()  # day indices of (anchor, minus, plus) windows


def window_days(start: int, n_days: int) -> np.ndarray:
    return (start + np.arange(DAYS)) % n_days


def sample_triplet_batch(days: np.ndarray, users: np.ndarray, rng: np.random.Generator, lag: int) -> TripletBatch:
    """Draw one day and cut anchor/positive week windows for ``users``.

    ``days`` holds the scaled daily rows of every training user, shape
    ``(N, n_days, 24F)``.
    """
    users = np.asarray(users)
    N, n_days, _ = days.shape
    if len(users) > N:
        raise ValueError("batch larger than the user set")
    if n_days < 2 * DAYS:
        raise ValueError("triplet sampling needs at least two weeks of days")
    d = int(rng.integers(n_days))
    wa, wm, wp = (window_days(s, n_days) for s in (d, d - lag, d + lag))
    sel = days[users]
    return TripletBatch(users, d, sel[:, wa], sel[:, wm], sel[:, wp], (wa, wm, wp))


def daily_rows(ds: Dataset, stats: ScalingStats) -> np.ndarray:
    """Scaled daily rows ``(N, n_days, 24F)`` of a multi-week dataset."""
    weeks = split_weeks(ds)
    seqs = [to_daily_sequence(unit_scale_array(w.values, stats)) for w in weeks]
    return np.concatenate(seqs, axis=1)


# --------------------------------------------------------------------------
# Training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_rank1: float
    learning_rate: float


@dataclass
class TrainResult:
    model: EmbeddingModel
    history: list[EpochLog]
    best_epoch: int

    @property
    def best_val(self) -> float:
        return max(h.val_rank1 for h in self.history)


def validate_rank1(model, week_a: Dataset, week_b: Dataset) -> float:
    """Rank-1 accuracy with ``week_a`` as reference and ``week_b`` as targets (same pseudonyms)."""
    if set(week_a.pseudonyms) != set(week_b.pseudonyms):
        raise ValueError("validation weeks cover different users")
    idx = attack.build_index(model, week_a)
    ranks = attack.truth_ranks(idx, model.embed(week_b), week_b.pseudonyms)
    return float(np.mean(ranks == 1))


def _user_batches(N: int, B: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(N)
    batches = [perm[i:i + B] for i in range(0, N, B)]
    # a lone trailing user cannot be given a negative; fold it into the previous batch
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def train_step(params: EmbedderParams, P: dict, opt: AdamW, batch: TripletBatch, margin: float) -> float:
    B = len(batch.users)
    x = np.concatenate([batch.anchors, batch.positives_minus, batch.positives_plus], axis=0)
    for t in P.values():
        t.grad = None
    with Tape() as tape:
        E = forward(params, x, train=True, P=P)
        a, pm, pp = E[0:B], E[B:2 * B], E[2 * B:3 * B]
        pool_user = np.tile(batch.users, 3)
        neg = mine_negatives(a.data, E.data, batch.users, pool_user)
        loss = batch_triplet_loss(a, [pm, pp], E[neg], margin)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite training loss ({value}) at day {batch.day}")
    tape.backward(loss)
    with np.errstate(over="ignore", invalid="ignore"):
        opt.step()
    if not all(np.isfinite(t.data).all() for t in P.values()):
        raise TrainingDiverged(f"non-finite parameters after the update at day {batch.day}")
    return value


def train(model_cfg: EmbedderConfig, aux: Dataset, cfg: TrainConfig, max_epochs: int | None = None,
          init_seed: int | None = None, on_epoch=None) -> TrainResult:
    """Train on the triplet weeks of ``aux`` with early stopping on validation rank-1.

    ``aux`` spans the auxiliary weeks with one consistent pseudonym per user.
    ``on_epoch(log, model)`` is called after every epoch with the current
    (not the best) model.
    """
    weeks = split_weeks(aux)
    need = max(cfg.train_weeks[1], *cfg.validation_weeks)
    if need > len(weeks):
        raise ValueError(f"configuration needs {need} weeks, auxiliary data has {len(weeks)}")
    if aux.F != model_cfg.F:
        raise ValueError(f"model expects F={model_cfg.F}, data has F={aux.F}")
    train_ds = [weeks[i] for i in cfg.train_week_indices]
    stats = fit_scaling(train_ds)
    days = np.concatenate([to_daily_sequence(unit_scale_array(w.values, stats)) for w in train_ds], axis=1)
    va, vb = (weeks[w - 1] for w in cfg.validation_weeks)

    rng = np.random.default_rng(cfg.seed)
    params = init_params(model_cfg, cfg.seed if init_seed is None else init_seed)
    P = params.tensors(requires_grad=True)
    opt = AdamW(list(P.values()), cfg.optimizer)
    model = EmbeddingModel(params, stats)

    oc = cfg.optimizer
    limit = oc.max_epochs if max_epochs is None else min(max_epochs, oc.max_epochs)
    history: list[EpochLog] = []
    best, best_params, best_epoch, wait = -1.0, params.copy(), 0, 0
    for epoch in range(1, limit + 1):
        losses, weights = [], []
        for users in _user_batches(aux.N, cfg.batch_size, rng):
            batch = sample_triplet_batch(days, users, rng, cfg.lag)
            losses.append(train_step(params, P, opt, batch, cfg.margin))
            weights.append(len(users))
        val = validate_rank1(model, va, vb)
        history.append(EpochLog(epoch, float(np.average(losses, weights=weights)), val, opt.lr))
        if on_epoch is not None:
            on_epoch(history[-1], model)
        if val > best:
            best, best_params, best_epoch, wait = val, params.copy(), epoch, 0
        else:
            wait += 1
            if wait >= oc.patience:
                opt.lr *= oc.lr_decay_factor
                wait = 0
                if opt.lr < oc.lr_floor:
                    break
    return TrainResult(EmbeddingModel(best_params, stats), history, best_epoch)


def write_history(path, history: Sequence[EpochLog]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_rank1", "learning_rate"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_rank1), repr(h.learning_rate)])


# --------------------------------------------------------------------------
# Grid search


@dataclass(frozen=True)
class GridSpec:
    learning_rates: tuple = (0.001, 0.005)
    weight_decays: tuple = (0.01, 0.005)
    layers: tuple | None = None  # None: the kind's full range
    lags: tuple = (4, 5, 6, 7)

    def __post_init__(self):
        for name in ("learning_rates", "weight_decays", "lags"):
            if not getattr(self, name):
                raise ValueError(f"grid axis {name} is empty")
        if self.layers is not None and not self.layers:
            raise ValueError("grid axis layers is empty")

    def points(self, kind: str) -> list[tuple[float, float, int, int]]:
        layers = self.layers if self.layers is not None else LAYER_RANGES[kind]
        return list(itertools.product(self.learning_rates, self.weight_decays, layers, self.lags))


@dataclass
class GridPointLog:
    point: tuple
    history: list[EpochLog]
    score: float


@dataclass
class GridResult:
    best_point: tuple
    config: TrainConfig
    model_cfg: EmbedderConfig
    final: TrainResult
    stage1: list[GridPointLog]


def stage_configs(M: int, base: TrainConfig) -> tuple[TrainConfig | None, tuple | None, TrainConfig]:
    """Stage-1 config, stage-1 scoring weeks and stage-2 config for ``M`` auxiliary weeks."""
    if M == 4:
        final = replace(base, train_weeks=(1, 3), validation_weeks=(3, 4), allow_overlap=True)
        return None, None, final
    if M < 6:
        raise ValueError(f"grid search needs M >= 6 auxiliary weeks (or exactly 4), got {M}")
    s1 = replace(base, train_weeks=(1, M - 4), validation_weeks=(M - 3, M - 2), allow_overlap=False)
    s2 = replace(base, train_weeks=(1, M - 2), validation_weeks=(M - 1, M), allow_overlap=False)
    return s1, (M - 1, M), s2


def _point_configs(kind: str, F: int, point, cfg: TrainConfig) -> tuple[EmbedderConfig, TrainConfig]:
    lr, wd, L, lag = point
    opt = replace(cfg.optimizer, learning_rate=lr, weight_decay=wd, lr_floor=min(cfg.optimizer.lr_floor, lr / 2))
    return EmbedderConfig(kind, L, F=F), replace(cfg, lag=lag, optimizer=opt)


def _run_point(args):
    kind, F, point, cfg, aux, score_weeks, max_epochs = args
    mcfg, tcfg = _point_configs(kind, F, point, cfg)
    res = train(mcfg, aux, tcfg, max_epochs=max_epochs)
    if score_weeks is None:
        score = res.best_val
    else:
        weeks = split_weeks(aux)
        score = validate_rank1(res.model, weeks[score_weeks[0] - 1], weeks[score_weeks[1] - 1])
    return GridPointLog(point, res.history, score)


def select_point(logs: Sequence[GridPointLog]) -> int:
    """Index of the highest score; the earliest grid point wins ties."""
    scores = [g.score for g in logs]
    return int(np.argmax(scores))


def grid_search(kind: str, grid: GridSpec, aux: Dataset, M: int, base: TrainConfig | None = None,
                workers: int = 1, max_epochs: int | None = None) -> GridResult:
    base = base or TrainConfig()
    s1, score_weeks, s2 = stage_configs(M, base)
    if len(split_weeks(aux)) < M:
        raise ValueError(f"auxiliary data spans fewer than M={M} weeks")
    points = grid.points(kind)
    stage_cfg = s1 if s1 is not None else s2
    jobs = [(kind, aux.F, p, stage_cfg, aux, score_weeks, max_epochs) for p in points]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            logs = list(ex.map(_run_point, jobs))
    else:
        logs = [_run_point(j) for j in jobs]
    best = select_point(logs)
    mcfg, tcfg = _point_configs(kind, aux.F, points[best], s2)
    final = train(mcfg, aux, tcfg, max_epochs=max_epochs)
    return GridResult(points[best], tcfg, mcfg, final, logs)
