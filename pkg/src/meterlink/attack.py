"""Profiling attack: link re-pseudonymized weekly records by nearest-neighbour search.

The attacker embeds every reference record of period T1, embeds each target
record of a later period T2, and ranks the reference pseudonyms by Euclidean
distance. Evaluation code holds the ground-truth linkage and turns the ranked
lists into rank-R identification curves, gap-statistic ROC curves and
population-scaling tables.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import Dataset, RoundingSpec, ScalingStats, concat_periods, repseudonymize, round_significant
from .data import standardize_array

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("run", "scenario", "population", "rank", "probability", "method", "variant",
                  "config_hash", "seed", "checkpoint_id")
ROC_GRID = np.round(np.arange(1001) / 1000, 3)


class Embedder(Protocol):
    def embed(self, ds: Dataset) -> np.ndarray: ...


@dataclass
class IdentityEmbedder:
    """Standardized raw features used directly as the embedding."""

    stats: ScalingStats

    def embed(self, ds: Dataset | np.ndarray) -> np.ndarray:
        v = ds.values if isinstance(ds, Dataset) else np.asarray(ds)
        z = standardize_array(v, self.stats)
        return z.reshape(z.shape[0], -1)


# --------------------------------------------------------------------------
# Index and matching


@dataclass(frozen=True, eq=False)
class ReferenceIndex:
    pseudonyms: tuple
    embeddings: np.ndarray
    week: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "pseudonyms", tuple(self.pseudonyms))
        E = np.asarray(self.embeddings, dtype=np.float64)
        if E.ndim != 2 or E.shape[0] != len(self.pseudonyms):
            raise ValueError("one embedding row per pseudonym required")
        if len(set(self.pseudonyms)) != len(self.pseudonyms):
            raise ValueError("reference pseudonyms must be unique")
        if not np.all(np.isfinite(E)):
            raise ValueError("reference embeddings must be finite")
        object.__setattr__(self, "embeddings", E)
        # position of each entry in lexicographic pseudonym order, for tie breaks
        order = sorted(range(len(self.pseudonyms)), key=self.pseudonyms.__getitem__)
        lex = np.empty(len(order), dtype=np.int64)
        lex[order] = np.arange(len(order))
        object.__setattr__(self, "lex_rank", lex)

    @property
    def N(self) -> int:
        return len(self.pseudonyms)

    def subset(self, rows) -> "ReferenceIndex":
        rows = np.asarray(rows, dtype=np.int64)
        return ReferenceIndex(tuple(self.pseudonyms[i] for i in rows), self.embeddings[rows], self.week)


@dataclass(frozen=True, eq=False)
class MatchResult:
    target: str
    candidates: tuple
    distances: np.ndarray
    truth: str | None = None

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        if len(d) != len(self.candidates):
            raise ValueError("one distance per candidate required")
        if np.any(np.diff(d) < 0):
            raise ValueError("candidate distances must be non-decreasing")
        object.__setattr__(self, "distances", d)

    @property
    def truth_rank(self) -> int:
        if self.truth is None:
            raise ValueError(f"target {self.target!r} carries no ground truth")
        try:
            return self.candidates.index(self.truth) + 1
        except ValueError:
            raise ValueError(f"truth {self.truth!r} not among the candidates") from None


@dataclass(frozen=True)
class RankCurve:
    """``values[R-1]`` is the fraction of targets identified within rank ``R``."""

    values: np.ndarray

    @property
    def N(self) -> int:
        return len(self.values)

    def at(self, R: int) -> float:
        return float(self.values[R - 1])


def build_index(model: Embedder, week: Dataset, week_id: int | None = None) -> ReferenceIndex:
    if week.N == 0:
        raise ValueError("cannot index an empty week")
    return ReferenceIndex(week.pseudonyms, model.embed(week), week_id)


def distances_to(index: ReferenceIndex, target: np.ndarray) -> np.ndarray:
    diff = index.embeddings - np.asarray(target, dtype=np.float64)[None, :]
    return np.sqrt((diff * diff).sum(axis=1))


def rank_candidates(pseudonyms: Sequence[str], dissimilarity: np.ndarray, lex_rank=None) -> np.ndarray:
    """Row order sorting by ascending dissimilarity, ties by lexicographic pseudonym."""
    if lex_rank is None:
        order = sorted(range(len(pseudonyms)), key=list(pseudonyms).__getitem__)
        lex_rank = np.empty(len(order), dtype=np.int64)
        lex_rank[order] = np.arange(len(order))
    return np.lexsort((lex_rank, np.asarray(dissimilarity, dtype=np.float64)))


def match_target(index: ReferenceIndex, target_embedding, target: str = "", truth: str | None = None) -> MatchResult:
    if index.N == 0:
        raise ValueError("empty reference index")
    d = distances_to(index, target_embedding)
    order = rank_candidates(index.pseudonyms, d, index.lex_rank)
    return MatchResult(target, tuple(index.pseudonyms[i] for i in order), d[order], truth)


def match_all(index: ReferenceIndex, targets: np.ndarray, target_ids: Sequence[str],
              truths: Sequence[str] | None = None) -> list[MatchResult]:
    truths = truths if truths is not None else [None] * len(target_ids)
    return [match_target(index, targets[i], target_ids[i], truths[i]) for i in range(len(target_ids))]


def pairwise_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean distances ``(len(A), len(B))``, computed row by row like :func:`distances_to`."""
    out = np.empty((len(A), len(B)))
    for i in range(len(A)):
        diff = B - A[i][None, :]
        out[i] = np.sqrt((diff * diff).sum(axis=1))
    return out


def truth_ranks_from_distances(D: np.ndarray, truth_rows: np.ndarray, lex_rank: np.ndarray) -> np.ndarray:
    """Rank of each target's truth given target-by-reference distances ``D``.

    Equivalent to locating the truth in the sorted candidate list of
    :func:`match_target` without materializing it.
    """
    truth_rows = np.asarray(truth_rows, dtype=np.int64)
    rows = np.arange(len(truth_rows))
    dt = D[rows, truth_rows][:, None]
    lt = lex_rank[truth_rows][:, None]
    ahead = (D < dt) | ((D == dt) & (lex_rank[None, :] < lt))
    return 1 + ahead.sum(axis=1)


def truth_ranks(index: ReferenceIndex, targets: np.ndarray, truths: Sequence[str]) -> np.ndarray:
    pos = {p: i for i, p in enumerate(index.pseudonyms)}
    rows = np.array([pos[t] for t in truths], dtype=np.int64)
    D = pairwise_distances(np.asarray(targets, dtype=np.float64), index.embeddings)
    return truth_ranks_from_distances(D, rows, index.lex_rank)


def identification_within_rank(results: Sequence[MatchResult], R: int) -> float:
    if not results:
        raise ValueError("no match results")
    N = len(results[0].candidates)
    if R < 1 or R > N:
        raise ValueError(f"rank {R} outside 1..{N}")
    return float(np.mean([r.truth_rank <= R for r in results]))


def rank_curve(ranks: np.ndarray, N: int) -> RankCurve:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no targets")
    counts = np.bincount(ranks, minlength=N + 1)[1:N + 1]
    return RankCurve(np.cumsum(counts) / ranks.size)


def curve_from_results(results: Sequence[MatchResult]) -> RankCurve:
    return rank_curve(np.array([r.truth_rank for r in results]), len(results[0].candidates))


# --------------------------------------------------------------------------
# Experiment setup


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "I"
    M: int = 10
    G: int = 1
    population_sizes: tuple = ()
    period_weeks: int = 1
    utilities: int | None = None  # None keeps every utility
    rounding: RoundingSpec | None = None
    runs: int = 10
    seed: int = 0
    offset: int = 0  # weeks between the end of the auxiliary data and T1

    def __post_init__(self):
        if self.offset < 0:
            raise ValueError("offset must be nonnegative")
        if self.scenario not in ("I", "II"):
            raise ValueError("scenario must be 'I' or 'II'")
        if self.M < 1 or self.G < 1 or self.runs < 1:
            raise ValueError("M, G and runs must be positive")
        if self.period_weeks not in (1, 2, 4):
            raise ValueError("period_weeks must be 1, 2 or 4")
        if self.utilities not in (None, 1, 2):
            raise ValueError("utilities must be 1 or 2")

    def test_weeks(self) -> tuple[list[int], list[int]]:
        """0-based week indices of the reference period T1 and target period T2."""
        k = self.period_weeks
        t1 = self.M + self.offset
        t2 = t1 + self.G * k
        return list(range(t1, t1 + k)), list(range(t2, t2 + k))


@dataclass
class AttackData:
    """Ground-truth weekly datasets keyed by user id, plus the user split.

    ``weeks[i]`` is week ``i + 1``; weeks ``1..M`` of the auxiliary users form
    the attacker's training data.
    """

    weeks: list[Dataset]
    aux_users: tuple
    holdout_users: tuple = ()

    def __post_init__(self):
        self.aux_users = tuple(self.aux_users)
        self.holdout_users = tuple(self.holdout_users)
        if set(self.aux_users) & set(self.holdout_users):
            raise ValueError("auxiliary and holdout users overlap")

    def aux(self, M: int) -> Dataset:
        return concat_periods([w.subset(self.aux_users) for w in self.weeks[:M]])

    def reference_users(self, scenario: str) -> tuple:
        return self.aux_users if scenario == "I" else self.holdout_users


@dataclass
class Release:
    """One re-pseudonymized (T1, T2) pair with the hidden linkage."""

    reference_weeks: list[Dataset]
    target_weeks: list[Dataset]
    truth: dict  # target pseudonym -> reference pseudonym


def make_release(data: AttackData, users: Sequence[str], weeks1: Sequence[int], weeks2: Sequence[int],
                 scheme_seed: int, rounding: RoundingSpec | None = None, utilities: int | None = None) -> Release:
    def period(ix):
        ds = concat_periods([data.weeks[i].subset(users) for i in ix])
        if utilities is not None and utilities < ds.F:
            ds = ds.with_values(ds.values[:, :, :utilities])
        if rounding is not None:
            ds = round_significant(ds, rounding)
        return ds

    if max(list(weeks1) + list(weeks2)) >= len(data.weeks):
        raise ValueError("test weeks beyond the available data")
    (p1, p2), scheme = repseudonymize([period(weeks1), period(weeks2)], scheme_seed)
    truth = {scheme.pseudonym_of(u, 1): scheme.pseudonym_of(u, 0) for u in users}
    k1, k2 = len(weeks1), len(weeks2)
    return Release(_split(p1, k1), _split(p2, k2), truth)


def _split(ds: Dataset, k: int) -> list[Dataset]:
    if k == 1:
        return [ds]
    n = ds.T // k
    return [Dataset(ds.pseudonyms, ds.values[:, i * n:(i + 1) * n], ds.start + i * n * ds.delta_t, ds.delta_t)
            for i in range(k)]


def multi_week_embedding(model: Embedder, weeks: Sequence[Dataset]) -> np.ndarray:
    """Mean of per-week embeddings (no re-normalization); rows follow ``weeks[0].pseudonyms``."""
    if not weeks:
        raise ValueError("no weeks to embed")
    ids = weeks[0].pseudonyms
    acc = None
    for w in weeks:
        w = w if w.pseudonyms == ids else w.subset(ids)
        e = model.embed(w)
        acc = e if acc is None else acc + e
    return acc / len(weeks)


@dataclass
class AttackOutcome:
    results: list[MatchResult]
    curve: RankCurve

    @property
    def rank1(self) -> float:
        return self.curve.at(1)


def attack_release(model: Embedder, rel: Release) -> AttackOutcome:
    ref = ReferenceIndex(rel.reference_weeks[0].pseudonyms, multi_week_embedding(model, rel.reference_weeks))
    tgt_ids = rel.target_weeks[0].pseudonyms
    tgt = multi_week_embedding(model, rel.target_weeks)
    results = match_all(ref, tgt, tgt_ids, [rel.truth[t] for t in tgt_ids])
    return AttackOutcome(results, curve_from_results(results))


@dataclass
class ScenarioResult:
    curves: list[RankCurve]
    outcomes: list[AttackOutcome] = field(default_factory=list)

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([c.values for c in self.curves])

    @property
    def mean(self) -> np.ndarray:
        return self.matrix.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.matrix.std(axis=0)

    @property
    def rank1(self) -> float:
        return float(self.mean[0])


def run_scenario(cfg: ExperimentConfig, models, data: AttackData) -> ScenarioResult:
    """Attack (T1, T2) once per run with that run's model and a fresh pseudonym scheme.

    ``models`` is one embedder per run, or a single embedder reused by every
    run.
    """
    models = list(models) if isinstance(models, (list, tuple)) else [models] * cfg.runs
    if len(models) != cfg.runs:
        raise ValueError(f"expected {cfg.runs} models, got {len(models)}")
    users = data.reference_users(cfg.scenario)
    if cfg.scenario == "II" and set(users) & set(data.aux_users):
        raise ValueError("scenario II reference users must be unseen during training")
    if not users:
        raise ValueError(f"no reference users for scenario {cfg.scenario}")
    w1, w2 = cfg.test_weeks()
    out = ScenarioResult([])
    for r, model in enumerate(models):
        rel = make_release(data, users, w1, w2, cfg.seed * 1000 + r, cfg.rounding, cfg.utilities)
        oc = attack_release(model, rel)
        out.curves.append(oc.curve)
        out.outcomes.append(oc)
    return out


# --------------------------------------------------------------------------
# Confidence scoring


def gap_statistic(result: MatchResult) -> float:
    if len(result.distances) < 2:
        raise ValueError("gap statistic needs at least two candidates")
    return float(result.distances[1] - result.distances[0])


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _roc_vertices(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # one vertex per distinct threshold so tied scores move together
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    P, N = y.sum(), (~y).sum()
    return np.r_[0.0, fp / N], np.r_[0.0, tp / P]


def roc_curve(scores) -> RocCurve:
    """ROC of the rule "score above threshold means a correct top-1 match".

    ``scores`` is a sequence of ``(gap, is_correct)`` pairs. TPR is read off
    the FPR grid 0, 0.001, ..., 1 (linear interpolation between vertices,
    upper value on vertical segments); AUC is the trapezoid area on that grid.
    """
    arr = list(scores)
    s = np.array([float(a) for a, _ in arr])
    y = np.array([bool(b) for _, b in arr])
    if y.all() or not y.any():
        raise ValueError("ROC needs both correct and incorrect matches")
    fx, ty = _roc_vertices(s, y)
    tpr = np.empty(len(ROC_GRID))
    for j, f in enumerate(ROC_GRID):
        at = np.nonzero(np.isclose(fx, f, rtol=0, atol=1e-12))[0]
        if at.size:
            tpr[j] = ty[at].max()
            continue
        k = np.searchsorted(fx, f)  # fx[k-1] < f < fx[k]
        x0, x1, y0, y1 = fx[k - 1], fx[k], ty[k - 1], ty[k]
        tpr[j] = y0 + (y1 - y0) * (f - x0) / (x1 - x0)
    auc = float(np.trapezoid(tpr, ROC_GRID)) if hasattr(np, "trapezoid") else float(np.trapz(tpr, ROC_GRID))
    return RocCurve(ROC_GRID.copy(), tpr, auc)


def gap_scores(results: Sequence[MatchResult]) -> list[tuple[float, bool]]:
    return [(gap_statistic(r), r.candidates[0] == r.truth) for r in results]


# --------------------------------------------------------------------------
# Population scaling and extrapolation


def population_scaling(model: Embedder, rel: Release, sizes: Sequence[int], repeats: int = 5,
                       seed: int = 0) -> dict[int, float]:
    """Mean rank-1 accuracy when the reference set is a random subsample of each size.

    Every user in the subsample is a target, so each target's truth is
    always among the candidates.
    """
    ref_ids = rel.reference_weeks[0].pseudonyms
    pool = len(ref_ids)
    for n in sizes:
        if n < 1 or n > pool:
            raise ValueError(f"population size {n} outside 1..{pool}")
    ref = multi_week_embedding(model, rel.reference_weeks)
    tgt_ids = rel.target_weeks[0].pseudonyms
    tgt = multi_week_embedding(model, rel.target_weeks)
    ref_row = {p: i for i, p in enumerate(ref_ids)}
    # align targets to reference rows: target j belongs to reference row pair[j]
    tgt_for_ref = np.empty(len(ref_ids), dtype=np.int64)
    for j, t in enumerate(tgt_ids):
        tgt_for_ref[ref_row[rel.truth[t]]] = j
    rng = np.random.default_rng(seed)
    out = {}
    for n in sizes:
        accs = []
        for _ in range(repeats):
            rows = np.sort(rng.choice(pool, size=n, replace=False))
            sub = ReferenceIndex(tuple(ref_ids[i] for i in rows), ref[rows])
            D = pairwise_distances(tgt[tgt_for_ref[rows]], sub.embeddings)
            ranks = truth_ranks_from_distances(D, np.arange(n), sub.lex_rank)
            accs.append(np.mean(ranks == 1))
        out[int(n)] = float(np.mean(accs))
    return out


def linkage_extrapolation(p_week: float, k: int) -> float:
    """Chance of linking ``k`` consecutive week pairs when each succeeds independently with ``p_week``."""
    if not 0.0 <= p_week <= 1.0:
        raise ValueError("p_week must be a probability")
    if k < 1:
        raise ValueError("k must be at least 1")
    return float(p_week) ** int(k)


# --------------------------------------------------------------------------
# Result files


def curve_rows(curve: RankCurve, run: int, scenario: str, population: int | None = None, ranks=None,
               **attrs) -> list[dict]:
    population = curve.N if population is None else population
    ranks = range(1, curve.N + 1) if ranks is None else ranks
    rows = []
    for R in ranks:
        row = {"run": run, "scenario": scenario, "population": population, "rank": R,
               "probability": repr(float(curve.at(R)))}
        row.update(attrs)
        rows.append(row)
    return rows


def write_results(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in RESULT_COLUMNS})


def write_roc(path, curves: Sequence[RocCurve]) -> None:
    tpr = np.stack([c.tpr for c in curves])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr_mean", "tpr_std"])
        for f, m, s in zip(ROC_GRID, tpr.mean(axis=0), tpr.std(axis=0)):
            w.writerow([f"{f:.3f}", repr(float(m)), repr(float(s))])
