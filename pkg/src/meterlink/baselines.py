"""Comparison methods for the profiling attack.

Feature-matching baselines (L2 on raw readings, Buchmann, Tudor) rank the
reference pseudonyms of T1 for every target of T2. Classifier baselines
(Jawurek, Faisal) are trained on the auxiliary users' labelled weeks and rank
those users for every target record.

Weekly records are hourly grids of 168 slots whose first five days are
weekdays and last two days the weekend.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attack import IdentityEmbedder, MatchResult, RankCurve, build_index, match_all
from .attack import pairwise_distances, rank_candidates
from .data import Dataset, MeterRecord, ScalingStats

HOURS_PER_WEEK = 168
OVERNIGHT = slice(0, 6)
MIDDAY = slice(12, 14)
EVENING = slice(18, 22)
WAKE_FROM, WAKE_DEFAULT = 5, 7.0
BED_FROM, BED_DEFAULT = 20, 23.0
WAKE_FACTOR = 1.25
RATIO_CAP = 1e3  # weekday/weekend ratio when the weekend is empty but weekdays are not

BUCHMANN_FEATURES = (
    "weekly_total", "daily_mean", "daily_std", "daily_max", "daily_min",
    "overnight_mean", "midday_mean", "evening_mean",
    "wakeup_hour", "bedtime_hour", "peak_hour", "weekday_weekend_ratio",
)
TUDOR_FEATURES = ("weekly_total", "daily_max_mean", "wakeup_hour", "overnight_mean", "weekday_weekend_ratio")


def random_guess_curve(N: int) -> RankCurve:
    if N < 1:
        raise ValueError("N must be at least 1")
    return RankCurve(np.arange(1, N + 1) / N)


def _grid(x) -> np.ndarray:
    """``(n, 168, F)`` view of a dataset, record or raw array."""
    if isinstance(x, Dataset):
        v = x.values
    elif isinstance(x, MeterRecord):
        v = x.values[None]
    else:
        v = np.asarray(x, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
    if v.ndim != 3 or v.shape[1] != HOURS_PER_WEEK:
        raise ValueError(f"weekly hourly records required, got shape {v.shape}")
    return v


def _daily(v: np.ndarray) -> np.ndarray:
    """(n, 168, F) -> (n, F, 7, 24)."""
    n, _, F = v.shape
    return v.reshape(n, 7, 24, F).transpose(0, 3, 1, 2)


def _ranked(ref_ids: Sequence[str], dissim: np.ndarray, target_ids: Sequence[str],
            truths: Sequence[str] | None) -> list[MatchResult]:
    ref_ids = tuple(ref_ids)
    order = sorted(range(len(ref_ids)), key=ref_ids.__getitem__)
    lex = np.empty(len(order), dtype=np.int64)
    lex[order] = np.arange(len(order))
    truths = truths if truths is not None else [None] * len(target_ids)
    out = []
    for i, t in enumerate(target_ids):
        o = rank_candidates(ref_ids, dissim[i], lex)
        out.append(MatchResult(t, tuple(ref_ids[j] for j in o), dissim[i][o], truths[i]))
    return out


# --------------------------------------------------------------------------
# L2 on raw standardized readings


def l2_raw_match(reference: Dataset, target: Dataset, stats: ScalingStats,
                 truths: Sequence[str] | None = None) -> list[MatchResult]:
    if reference.N == 0:
        raise ValueError("empty reference week")
    model = IdentityEmbedder(stats)
    index = build_index(model, reference)
    return match_all(index, model.embed(target), target.pseudonyms, truths)


# --------------------------------------------------------------------------
# Hand-engineered features


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.ones_like(num)
    pos = den > 0
    out[pos] = num[pos] / den[pos]
    out[~pos & (num > 0)] = RATIO_CAP
    return out


def _hour_features(d: np.ndarray, overnight: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean wake-up, mean bedtime and modal peak hour; ``d`` is (n, F, 7, 24)."""
    above = d > WAKE_FACTOR * overnight[..., None, None]
    hours = np.arange(24)
    wake_ok = above & (hours >= WAKE_FROM)
    wake = np.where(wake_ok.any(-1), wake_ok.argmax(-1), WAKE_DEFAULT)
    bed_ok = above & (hours >= BED_FROM)
    bed = np.where(bed_ok.any(-1), 23 - bed_ok[..., ::-1].argmax(-1), BED_DEFAULT)
    peaks = d.argmax(-1)  # first maximum of each day
    counts = (peaks[..., None] == hours).sum(-2)
    modal = counts.argmax(-1)  # smallest hour among the most frequent
    return wake.mean(-1), bed.mean(-1), modal.astype(np.float64)


def _feature_table(x) -> dict[str, np.ndarray]:
    d = _daily(_grid(x))
    totals = d.sum(-1)  # (n, F, 7)
    overnight = d[..., OVERNIGHT].mean((-1, -2))
    wake, bed, peak = _hour_features(d, overnight)
    return {
        "weekly_total": totals.sum(-1),
        "daily_mean": totals.mean(-1),
        "daily_std": totals.std(-1),
        "daily_max": totals.max(-1),
        "daily_min": totals.min(-1),
        "overnight_mean": overnight,
        "midday_mean": d[..., MIDDAY].mean((-1, -2)),
        "evening_mean": d[..., EVENING].mean((-1, -2)),
        "wakeup_hour": wake,
        "bedtime_hour": bed,
        "peak_hour": peak,
        "weekday_weekend_ratio": _safe_ratio(totals[..., :5].mean(-1), totals[..., 5:].mean(-1)),
        "daily_max_mean": d.max(-1).mean(-1),
    }


def _features(x, names: Sequence[str]) -> np.ndarray:
    table = _feature_table(x)
    # (n, F, k) -> (n, F * k), utility-major
    f = np.stack([table[k] for k in names], axis=-1)
    return f.reshape(f.shape[0], -1)


def buchmann_features(x) -> np.ndarray:
    """12 features per utility; a single record gives a 1-D vector."""
    f = _features(x, BUCHMANN_FEATURES)
    return f[0] if isinstance(x, MeterRecord) or np.ndim(x) == 2 else f


def tudor_features(x) -> np.ndarray:
    f = _features(x, TUDOR_FEATURES)
    return f[0] if isinstance(x, MeterRecord) or np.ndim(x) == 2 else f


def absolute_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b)


def relative_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|2(a-b)/(a+b)| with 0/0 taken as 0."""
    s = a + b
    out = np.zeros(np.broadcast(a, b).shape)
    nz = np.broadcast_to(s != 0, out.shape)
    num = np.broadcast_to(2 * (a - b), out.shape)
    out[nz] = np.abs(num[nz] / np.broadcast_to(s, out.shape)[nz])
    return out


@dataclass(frozen=True)
class DifferenceCalibration:
    q_abs: np.ndarray
    sigma_abs: np.ndarray
    q_rel: np.ndarray
    sigma_rel: np.ndarray
    n_pairs: int = 0


def _quantile_and_sigma(diffs: np.ndarray, level: float) -> tuple[np.ndarray, np.ndarray]:
    q = np.quantile(diffs, level, axis=0)
    sigma = np.array([diffs[diffs[:, j] <= q[j], j].std() for j in range(diffs.shape[1])])
    return q, sigma


def buchmann_calibrate(aux: Sequence[Dataset] | Dataset, M: int | None = None, level: float = 0.9) -> DifferenceCalibration:
    """Fit thresholds on same-user differences between consecutive auxiliary weeks.

    ``aux`` is a list of weekly datasets over the same users, or one dataset
    spanning whole weeks which is split.
    """
    if isinstance(aux, Dataset):
        n_weeks = aux.T // HOURS_PER_WEEK
        if n_weeks * HOURS_PER_WEEK != aux.T:
            raise ValueError("auxiliary data must cover whole weeks")
        weeks = [aux.values[:, i * HOURS_PER_WEEK:(i + 1) * HOURS_PER_WEEK] for i in range(n_weeks)]
    else:
        ids = aux[0].pseudonyms if aux else ()
        weeks = [w.values if w.pseudonyms == ids else w.subset(ids).values for w in aux]
    if M is not None:
        weeks = weeks[:M]
    if len(weeks) < 2:
        raise ValueError("calibration needs at least 2 weeks")
    feats = [buchmann_features(w) for w in weeks]
    da = np.concatenate([absolute_difference(a, b) for a, b in zip(feats, feats[1:])])
    dr = np.concatenate([relative_difference(a, b) for a, b in zip(feats, feats[1:])])
    qa, sa = _quantile_and_sigma(da, level)
    qr, sr = _quantile_and_sigma(dr, level)
    return DifferenceCalibration(qa, sa, qr, sr, len(da))


def thresholded(diff: np.ndarray, q: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Zero below ``q``; ``(diff - q) / sigma`` above, or 1 when ``sigma`` is 0."""
    excess = diff - q
    safe = np.where(sigma > 0, sigma, 1.0)
    scaled = np.where(sigma > 0, excess / safe, (excess > 0).astype(np.float64))
    return np.where(diff < q, 0.0, scaled)


def buchmann_dissimilarity(target_features: np.ndarray, reference_features: np.ndarray,
                           cal: DifferenceCalibration) -> np.ndarray:
    """(n_targets, n_references) sums of thresholded absolute and relative differences."""
    a = np.atleast_2d(target_features)[:, None, :]
    b = np.atleast_2d(reference_features)[None, :, :]
    za = thresholded(absolute_difference(a, b), cal.q_abs, cal.sigma_abs)
    zr = thresholded(relative_difference(a, b), cal.q_rel, cal.sigma_rel)
    return za.sum(-1) + zr.sum(-1)


def _period_features(fn, weeks: Dataset | Sequence[Dataset]) -> tuple[tuple, np.ndarray]:
    """Features averaged over the weeks of a period, rows in the first week's order."""
    weeks = [weeks] if isinstance(weeks, Dataset) else list(weeks)
    ids = weeks[0].pseudonyms
    f = np.mean([fn(w if w.pseudonyms == ids else w.subset(ids)) for w in weeks], axis=0)
    return ids, f


def buchmann_match(reference, target, cal: DifferenceCalibration,
                   truths: Sequence[str] | None = None) -> list[MatchResult]:
    ref_ids, fr = _period_features(buchmann_features, reference)
    tgt_ids, ft = _period_features(buchmann_features, target)
    return _ranked(ref_ids, buchmann_dissimilarity(ft, fr, cal), tgt_ids, truths)


def tudor_match(reference, target, truths: Sequence[str] | None = None) -> list[MatchResult]:
    ref_ids, fr = _period_features(tudor_features, reference)
    tgt_ids, ft = _period_features(tudor_features, target)
    return _ranked(ref_ids, pairwise_distances(ft, fr), tgt_ids, truths)


# --------------------------------------------------------------------------
# Jawurek: binned hour-of-day histograms and one-vs-rest linear SVMs


@dataclass
class JawurekConfig:
    bins: int = 100
    edges: np.ndarray | None = None  # (F, bins - 1) inner edges

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("at least 2 bins required")

    @property
    def fitted(self) -> bool:
        return self.edges is not None

    def fit(self, train) -> "JawurekConfig":
        """Equal-mass bin edges from the pooled training readings of each utility."""
        v = _grid(train)
        levels = np.arange(1, self.bins) / self.bins
        edges = np.quantile(v.reshape(-1, v.shape[2]), levels, axis=0).T.copy()
        # repeated quantiles (many equal readings) are nudged apart
        for f in range(edges.shape[0]):
            for i in range(1, edges.shape[1]):
                if edges[f, i] <= edges[f, i - 1]:
                    edges[f, i] = np.nextafter(edges[f, i - 1], np.inf)
        self.edges = edges
        return self


def jawurek_features(x, cfg: JawurekConfig) -> np.ndarray:
    """Weekly counts per (utility, hour-of-day, bin); a single record gives a 1-D vector."""
    if not cfg.fitted:
        raise ValueError("bin edges are not fitted")
    v = _grid(x)
    n, _, F = v.shape
    if cfg.edges.shape[0] != F:
        raise ValueError(f"edges fitted for {cfg.edges.shape[0]} utilities, record has {F}")
    d = _daily(v)  # (n, F, 7, 24)
    b = np.stack([np.searchsorted(cfg.edges[f], d[:, f], side="right") for f in range(F)], axis=1)
    cell = (np.arange(F)[:, None, None] * 24 + np.arange(24)) * cfg.bins + b  # (n, F, 7, 24)
    out = np.zeros((n, F * 24 * cfg.bins))
    np.add.at(out, (np.arange(n)[:, None], cell.reshape(n, -1)), 1.0)
    return out[0] if isinstance(x, MeterRecord) or np.ndim(x) == 2 else out


@dataclass
class SVMConfig:
    reg: float = 1e-3
    epochs: int = 200
    scale: float = 1 / 7  # counts to [0, 1]


@dataclass
class LinearOvR:
    classes: tuple
    W: np.ndarray  # (D, N)
    b: np.ndarray  # (N,)
    scale: float = 1.0
    loss_history: tuple = ()

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(X) * self.scale) @ self.W + self.b


def _ovr_targets(labels: Sequence[str]) -> tuple[tuple, np.ndarray]:
    classes = tuple(sorted(set(labels)))
    pos = {c: i for i, c in enumerate(classes)}
    Y = -np.ones((len(labels), len(classes)))
    Y[np.arange(len(labels)), [pos[l] for l in labels]] = 1.0
    return classes, Y


def hinge_objective(clf: LinearOvR, X: np.ndarray, Y: np.ndarray, C: np.ndarray, reg: float) -> float:
    m = Y * clf.decision_function(X)
    return float((C * np.maximum(0.0, 1 - m)).sum() / Y.shape[1] + 0.5 * reg * (clf.W ** 2).sum() / Y.shape[1])


def jawurek_train(X: np.ndarray, labels: Sequence[str], cfg: SVMConfig | None = None) -> LinearOvR:
    """One linear max-margin classifier per label, by full-batch subgradient descent.

    Each classifier minimizes ``reg/2 |w|^2 + sum_i c_i hinge(y_i (w x_i + b))``
    where positives and negatives each carry half of the sample weight.
    """
    cfg = cfg or SVMConfig()
    X = np.asarray(X, dtype=np.float64) * cfg.scale
    labels = [str(l) for l in labels]
    if len(X) != len(labels):
        raise ValueError("one label per sample required")
    classes, Y = _ovr_targets(labels)
    if len(classes) < 2:
        raise ValueError("at least 2 users required")
    n_pos = (Y > 0).sum(0)
    if np.any(n_pos < 2):
        warnings.warn("some users have a single training sample", stacklevel=2)
    C = np.where(Y > 0, 0.5 / n_pos, 0.5 / (len(X) - n_pos))
    W = np.zeros((X.shape[1], len(classes)))
    b = np.zeros(len(classes))
    clf = LinearOvR(classes, W, b, 1.0)
    # curvature bound of the hinge terms (bias included) keeps early steps from overshooting
    R2 = float((X ** 2).sum(1).max()) + 1.0
    history = []
    for t in range(1, cfg.epochs + 1):
        m = Y * (X @ W + b)
        active = C * Y * (m < 1)
        history.append(float((C * np.maximum(0.0, 1 - m)).sum() / len(classes)
                             + 0.5 * cfg.reg * (W ** 2).sum() / len(classes)))
        lr = 1.0 / (cfg.reg * t + R2)
        W -= lr * (cfg.reg * W - X.T @ active)
        b += lr * active.sum(0)
    return LinearOvR(classes, W, b, cfg.scale, tuple(history))


def _score_results(classes: tuple, scores: np.ndarray, target_ids: Sequence[str],
                   truths: Sequence[str] | None) -> list[MatchResult]:
    if truths is not None:
        missing = set(truths) - set(classes)
        if missing:
            raise ValueError(f"labels absent from the training set: {sorted(missing)[:3]}")
    return _ranked(classes, -scores, target_ids, truths)


def jawurek_match(clf: LinearOvR, target_features: np.ndarray, target_ids: Sequence[str],
                  truths: Sequence[str] | None = None) -> list[MatchResult]:
    return _score_results(clf.classes, clf.decision_function(target_features), target_ids, truths)


# --------------------------------------------------------------------------
# Faisal: random forest on daily records


@dataclass
class ForestConfig:
    trees: int = 100
    min_split_fraction: float = 0.005
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1:
            raise ValueError("at least one tree required")
        if not 0 < self.min_split_fraction <= 0.5:
            raise ValueError("min split fraction must lie in (0, 0.5]")


def daily_samples(x) -> np.ndarray:
    """(n, 168, F) -> (n, 7, 24F); each day is the concatenation of its utilities."""
    d = _daily(_grid(x))  # (n, F, 7, 24)
    return d.transpose(0, 2, 1, 3).reshape(d.shape[0], 7, -1)


@dataclass
class ForestModel:
    classes: tuple
    forest: object = None  # fitted RandomForestClassifier, absent for a single class

    def day_scores(self, days: np.ndarray) -> np.ndarray:
        if self.forest is None:
            return np.ones((len(days), 1))
        return self.forest.predict_proba(days)

    def week_scores(self, x) -> np.ndarray:
        """Class probabilities of each record averaged over its 7 days."""
        d = daily_samples(x)
        n = d.shape[0]
        return self.day_scores(d.reshape(n * 7, -1)).reshape(n, 7, -1).mean(1)


def faisal_train(days: np.ndarray, labels: Sequence[str], cfg: ForestConfig | None = None) -> ForestModel:
    """Fit on daily samples ``(n, 24F)`` labelled by user."""
    from sklearn.ensemble import RandomForestClassifier

    cfg = cfg or ForestConfig()
    labels = np.array([str(l) for l in labels])
    classes = tuple(sorted(set(labels)))
    if len(classes) == 1:
        return ForestModel(classes)
    forest = RandomForestClassifier(
        n_estimators=cfg.trees, criterion="gini", max_features="sqrt", bootstrap=cfg.bootstrap,
        min_samples_split=cfg.min_split_fraction, max_depth=cfg.max_depth, random_state=cfg.seed, n_jobs=1)
    forest.fit(np.asarray(days, dtype=np.float64), labels)
    assert tuple(forest.classes_) == classes
    return ForestModel(classes, forest)


def faisal_match(model: ForestModel, target, target_ids: Sequence[str] | None = None,
                 truths: Sequence[str] | None = None) -> list[MatchResult]:
    if target_ids is None:
        target_ids = target.pseudonyms
    return _score_results(model.classes, model.week_scores(target), target_ids, truths)


def weekly_training_set(weeks: Sequence[Dataset]) -> tuple[np.ndarray, list[str]]:
    """Stack labelled weekly grids ``(n_weeks * N, 168, F)`` with their user labels."""
    grids = np.concatenate([w.values for w in weeks])
    labels = [p for w in weeks for p in w.pseudonyms]
    return grids, labels
