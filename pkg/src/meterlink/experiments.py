"""Desk-scale synthetic studies shared by the command line and the acceptance suite.

A study generates one synthetic population, splits its users into an
auxiliary set and a reference set of equal size, trains embedders with fixed
hyperparameters and reports rank-1 accuracy averaged over every trained model
and every test-week pair that fits in the generated horizon.

With ``folds=2`` the second fold swaps the roles of the two user sets, so
scenario I and scenario II are each measured on both populations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import attack
from .attack import AttackData, ExperimentConfig
from .data import Dataset, RoundingSpec, fit_scaling, split_weeks
from .embedders import EmbedderConfig, EmbeddingModel
from .numkit import OptimizerConfig
from .synth import SynthConfig, generate
from .trainer import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class StudyConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(n_households=600, n_weeks=19, utilities=2))
    n_aux: int = 200
    M: int = 10
    kind: str = "cnn_lstm"
    L: int | None = None
    learning_rate: float = 0.005
    weight_decay: float = 0.01
    lag: int = 4
    max_epochs: int = 80
    seeds: tuple = (0,)
    folds: int = 1

    def __post_init__(self):
        if self.folds not in (1, 2):
            raise ValueError("folds must be 1 or 2")
        if self.M < 4:
            raise ValueError("studies need M >= 4 auxiliary weeks")
        if self.synth.n_weeks < self.M + 2:
            raise ValueError("the horizon must hold M auxiliary weeks and one test pair")
        if 2 * self.n_aux > self.synth.n_households:
            raise ValueError("need n_aux auxiliary and n_aux reference households")

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lag=self.lag, seed=seed, train_weeks=(1, self.M - 2), validation_weeks=(self.M - 1, self.M),
            optimizer=OptimizerConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay),
        )


def user_split(users: Sequence[str], n_aux: int, fold: int = 0) -> tuple[tuple, tuple, tuple]:
    """(auxiliary, reference, unseen pool) users; fold 1 swaps the first two blocks.

    The pool holds every user outside the auxiliary set, reference users first.
    """
    users = tuple(users)
    a, b, rest = users[:n_aux], users[n_aux:2 * n_aux], users[2 * n_aux:]
    if fold == 1:
        a, b = b, a
    return a, b, b + rest


def attack_data(weeks: list[Dataset], users: Sequence[str], n_aux: int, fold: int = 0) -> AttackData:
    aux, ref, _ = user_split(users, n_aux, fold)
    return AttackData(weeks, aux, ref)


def fit_embedder(data: AttackData, study: StudyConfig, seed: int, utilities: int | None = None) -> TrainResult:
    aux = data.aux(study.M)
    if utilities is not None and utilities < aux.F:
        aux = aux.with_values(aux.values[:, :, :utilities])
    model_cfg = EmbedderConfig(study.kind, L=study.L, F=aux.F)
    return train(model_cfg, aux, study.train_config(seed), max_epochs=study.max_epochs)


@dataclass
class TrainedModel:
    fold: int
    seed: int
    data: AttackData
    model: EmbeddingModel | attack.IdentityEmbedder
    result: TrainResult | None = None


@dataclass
class Study:
    config: StudyConfig
    weeks: list[Dataset]
    users: tuple
    models: list[TrainedModel] = field(default_factory=list)

    @property
    def n_weeks(self) -> int:
        return len(self.weeks)

    def data(self, fold: int) -> AttackData:
        return attack_data(self.weeks, self.users, self.config.n_aux, fold)

    def pool(self, fold: int) -> tuple:
        return user_split(self.users, self.config.n_aux, fold)[2]


def prepare(study: StudyConfig) -> Study:
    ds, users = generate(study.synth)
    return Study(study, split_weeks(ds), tuple(users))


def train_models(st: Study, utilities: int | None = None) -> list[TrainedModel]:
    out = []
    for fold in range(st.config.folds):
        data = st.data(fold)
        for seed in st.config.seeds:
            res = fit_embedder(data, st.config, seed, utilities)
            out.append(TrainedModel(fold, seed, data, res.model, res))
    return out


def l2_models(st: Study, utilities: int | None = None) -> list[TrainedModel]:
    """Identity embedders with scaling fitted on each fold's auxiliary weeks."""
    out = []
    for fold in range(st.config.folds):
        data = st.data(fold)
        aux = data.aux(st.config.M)
        if utilities is not None and utilities < aux.F:
            aux = aux.with_values(aux.values[:, :, :utilities])
        out.append(TrainedModel(fold, -1, data, attack.IdentityEmbedder(fit_scaling(split_weeks(aux)))))
    return out


def offsets(n_weeks: int, M: int, period_weeks: int = 1, G: int = 1) -> range:
    """Offsets whose (T1, T2) periods end inside the horizon."""
    span = (G + 1) * period_weeks
    return range(max(0, n_weeks - M - span + 1))


def experiment_configs(n_weeks: int, M: int, scenario: str, period_weeks: int = 1, G: int = 1,
                       **kw) -> list[ExperimentConfig]:
    return [ExperimentConfig(scenario=scenario, M=M, G=G, period_weeks=period_weeks, runs=1, offset=o, **kw)
            for o in offsets(n_weeks, M, period_weeks, G)]


def outcomes(models: Sequence[TrainedModel], scenario: str, n_weeks: int, M: int, **kw) -> list[attack.AttackOutcome]:
    """One attack outcome per (model, test pair); the scheme seed is the pair offset."""
    out = []
    for tm in models:
        for cfg in experiment_configs(n_weeks, M, scenario, **kw):
            cfg = replace(cfg, seed=cfg.offset)
            out.extend(attack.run_scenario(cfg, tm.model, tm.data).outcomes)
    if not out:
        raise ValueError("no test pair fits in the horizon")
    return out


def mean_rank1(models: Sequence[TrainedModel], scenario: str, n_weeks: int, M: int, **kw) -> float:
    return float(np.mean([o.rank1 for o in outcomes(models, scenario, n_weeks, M, **kw)]))


def rounding_accuracies(models, n_weeks: int, M: int, digits=(None, 3, 2, 1), scenario: str = "I",
                        **kw) -> dict:
    return {n: mean_rank1(models, scenario, n_weeks, M, rounding=RoundingSpec(n) if n else None, **kw)
            for n in digits}


def population_accuracies(models: Sequence[TrainedModel], st: Study, sizes: Sequence[int],
                          repeats: int = 5, utilities: int | None = None) -> dict[int, float]:
    """Scenario II rank-1 with reference sets subsampled from each fold's unseen pool."""
    acc: dict[int, list[float]] = {int(n): [] for n in sizes}
    M = st.config.M
    for tm in models:
        pool = st.pool(tm.fold)
        for o in offsets(st.n_weeks, M):
            w1, w2 = [M + o], [M + o + 1]
            rel = attack.make_release(tm.data, pool, w1, w2, scheme_seed=o, utilities=utilities)
            res = attack.population_scaling(tm.model, rel, sizes, repeats=repeats, seed=o)
            for n, v in res.items():
                acc[n].append(v)
    return {n: float(np.mean(v)) for n, v in acc.items()}


def gap_roc(outs: Sequence[attack.AttackOutcome]) -> attack.RocCurve:
    scores = [s for o in outs for s in attack.gap_scores(o.results)]
    return attack.roc_curve(scores)
