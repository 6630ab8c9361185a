"""Seeded synthetic household consumption.

Each household gets a fixed weekly profile derived from one of five
archetypes (a 168-hour template) plus a smooth household-specific shape
jitter, timing shift and consumption level. Weekly records are the profile multiplied by a
seasonal scalar and mean-one lognormal AR(1) noise, with whole-week
vacations, per-day routine shifts and a per-week consumption level on top.
All week-to-week variability scales with ``week_noise``.

Household ``i`` draws from its own RNG streams seeded by ``(seed, i, k)``,
so its data does not depend on how many households are generated or in
which order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .data import HOUR, Dataset

ARCHETYPES = ("morning-peaker", "evening-peaker", "night-owl", "flat", "workday-away")
VACATION_FLOOR = 0.15
HOURS = np.arange(24)


def _bumps(base: float, bumps) -> np.ndarray:
    day = np.full(24, base)
    for centre, width, height in bumps:
        d = np.abs(HOURS - centre)
        d = np.minimum(d, 24 - d)
        day += height * np.exp(-0.5 * (d / width) ** 2)
    return day


def _smooth_basis(k: int) -> np.ndarray:
    """(24, k) circular bumps scaled so a standard normal mix has unit variance per hour."""
    centres = np.arange(k) * 24 / k
    d = np.abs(HOURS[:, None] - centres[None, :])
    d = np.minimum(d, 24 - d)
    phi = np.exp(-0.5 * (d / (16 / k)) ** 2)
    return phi / np.sqrt((phi**2).sum(axis=1).mean())


# household shape jitter is a smooth mix of a few daily bumps, so identity
# lives in a low-dimensional space shared by all households
JITTER_BASIS = _smooth_basis(8)


def _week(weekday: np.ndarray, weekend: np.ndarray) -> np.ndarray:
    return np.concatenate([weekday] * 5 + [weekend] * 2)


@dataclass(frozen=True)
class HouseholdArchetype:
    name: str
    base_profile: np.ndarray
    gas_coupling: float
    heating_profile: np.ndarray

    def __post_init__(self):
        for prof in (self.base_profile, self.heating_profile):
            if prof.shape != (168,) or not np.all(np.isfinite(prof)) or np.any(prof < 0):
                raise ValueError(f"{self.name}: profiles must be 168 finite nonnegative values")
        if self.gas_coupling < 0:
            raise ValueError("gas_coupling must be nonnegative")


def _heating(morning: float, evening: float, weekend_shift: float = 1.5) -> np.ndarray:
    wd = _bumps(0.15, [(7, 1.2, morning), (18.5, 2.5, evening)])
    we = _bumps(0.15, [(7 + weekend_shift, 1.5, morning), (18, 3.0, evening)])
    return _week(wd, we)


ARCHETYPE_LIBRARY = {
    "morning-peaker": HouseholdArchetype(
        "morning-peaker",
        _week(_bumps(0.22, [(7, 1.2, 1.1), (19, 2.0, 0.5)]), _bumps(0.25, [(9, 1.5, 0.9), (19, 2.0, 0.6)])),
        1.2,
        _heating(1.6, 1.0),
    ),
    "evening-peaker": HouseholdArchetype(
        "evening-peaker",
        _week(_bumps(0.2, [(7, 1.0, 0.3), (19.5, 1.8, 1.3)]), _bumps(0.22, [(11, 2.0, 0.5), (19, 2.0, 1.2)])),
        1.0,
        _heating(0.8, 1.8),
    ),
    "night-owl": HouseholdArchetype(
        "night-owl",
        _week(_bumps(0.25, [(23, 2.0, 1.0), (13, 2.0, 0.3)]), _bumps(0.25, [(1, 2.5, 0.9), (15, 2.0, 0.5)])),
        0.9,
        _heating(0.5, 1.6, weekend_shift=3.0),
    ),
    "flat": HouseholdArchetype(
        "flat",
        _week(_bumps(0.45, [(8, 3.0, 0.15), (19, 3.0, 0.2)]), _bumps(0.45, [(10, 3.0, 0.2), (19, 3.0, 0.2)])),
        0.8,
        _heating(1.0, 1.0),
    ),
    "workday-away": HouseholdArchetype(
        "workday-away",
        _week(_bumps(0.15, [(7, 1.0, 0.7), (18.5, 1.5, 1.2)]), _bumps(0.3, [(10, 3.0, 0.8), (18, 2.0, 0.9)])),
        1.4,
        _heating(1.4, 1.6, weekend_shift=2.0),
    ),
}


@dataclass(frozen=True)
class SynthConfig:
    n_households: int = 200
    n_weeks: int = 12
    archetype_mix: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    profile_jitter: float = 0.3
    week_noise: float = 0.3
    ar1_rho: float = 0.5
    vacation_prob: float = 0.02
    seasonal_amplitude: float = 0.1
    utilities: int = 1
    seed: int = 0
    # per-week level sigma and per-day shift probability, as multiples of week_noise
    level_ratio: float = 0.5
    shift_ratio: float = 1.0
    start: int = 0

    def __post_init__(self):
        object.__setattr__(self, "archetype_mix", tuple(float(x) for x in self.archetype_mix))
        if self.n_households < 1 or self.n_weeks < 1:
            raise ValueError("n_households and n_weeks must be positive")
        mix = np.asarray(self.archetype_mix)
        if mix.shape != (len(ARCHETYPES),) or np.any(mix < 0) or abs(mix.sum() - 1) > 1e-9:
            raise ValueError(f"archetype_mix must be {len(ARCHETYPES)} probabilities summing to 1")
        if min(self.profile_jitter, self.week_noise, self.seasonal_amplitude, self.level_ratio, self.shift_ratio) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if not 0 <= self.ar1_rho < 1:
            raise ValueError("ar1_rho must lie in [0, 1)")
        if not 0 <= self.vacation_prob <= 1:
            raise ValueError("vacation_prob must lie in [0, 1]")
        if self.utilities not in (1, 2):
            raise ValueError("utilities must be 1 or 2")


@dataclass(frozen=True)
class HouseholdProfile:
    user_id: str
    archetype: str
    electricity: np.ndarray
    heating: np.ndarray = field(repr=False)
    gas_coupling: float = 0.0


def _stream(cfg: SynthConfig, i: int, k: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, i, k])


def _lognormal_unit(rng, sigma, size=None):
    """Mean-one lognormal factor."""
    return np.exp(sigma * rng.standard_normal(size) - 0.5 * sigma**2)


def _shift_days(week: np.ndarray, hours: int) -> np.ndarray:
    return np.roll(week.reshape(7, 24), hours, axis=1).reshape(168)


def user_id(i: int) -> str:
    return f"u{i:05d}"


def sample_household(cfg: SynthConfig, i: int) -> HouseholdProfile:
    rng = _stream(cfg, i, 0)
    a_idx = int(rng.choice(len(ARCHETYPES), p=np.asarray(cfg.archetype_mix)))
    arch = ARCHETYPE_LIBRARY[ARCHETYPES[a_idx]]
    s = cfg.profile_jitter
    # draws happen unconditionally so that streams line up across jitter levels
    z_shape = rng.standard_normal((2, JITTER_BASIS.shape[1]))
    z_shift = rng.standard_normal(2)
    z_level = rng.standard_normal(2)
    z_heat = rng.standard_normal(24)

    shape = np.exp(s * z_shape @ JITTER_BASIS.T - 0.5 * s**2)
    jitter = _week(shape[0], shape[1])
    shift = int(np.clip(np.rint(4 * s * z_shift[0]), -3, 3))
    level = np.exp(s * z_level[0] - 0.5 * s**2)
    elec = _shift_days(arch.base_profile, shift) * jitter * level

    heat_shift = int(np.clip(np.rint(4 * s * z_shift[1]), -3, 3))
    heat = _shift_days(arch.heating_profile, heat_shift) * _week(*[np.exp(s * z_heat - 0.5 * s**2)] * 2)
    coupling = arch.gas_coupling * float(np.exp(s * z_level[1] - 0.5 * s**2))
    return HouseholdProfile(user_id(i), arch.name, elec, heat, coupling)


def sample_population(cfg: SynthConfig) -> list[HouseholdProfile]:
    return [sample_household(cfg, i) for i in range(cfg.n_households)]


def seasonal_factor(week_index: np.ndarray, amplitude: float) -> np.ndarray:
    """Scalar per week; peaks at week 0 (winter) with a 52-week period."""
    return 1.0 + amplitude * np.cos(2 * np.pi * np.asarray(week_index) / 52.0)


def _ar1(rng, rho: float, n: int) -> np.ndarray:
    eps = rng.standard_normal(n)
    if rho == 0:
        return eps
    eps[0] /= np.sqrt(1 - rho**2)
    return lfilter([np.sqrt(1 - rho**2)], [1.0, -rho], eps)


def household_series(cfg: SynthConfig, prof: HouseholdProfile, i: int) -> np.ndarray:
    """``(n_weeks * 168, utilities)`` hourly consumption of one household."""
    W = cfg.n_weeks
    sig = cfg.week_noise
    rng_e = _stream(cfg, i, 1)
    rng_g = _stream(cfg, i, 2)
    rng_w = _stream(cfg, i, 3)

    z = _ar1(rng_e, cfg.ar1_rho, W * 168)
    vac = rng_w.random(W) < cfg.vacation_prob
    level = np.exp(cfg.level_ratio * sig * rng_w.standard_normal(W) - 0.5 * (cfg.level_ratio * sig) ** 2)
    p_shift = min(1.0, cfg.shift_ratio * sig)
    shift_draw = rng_w.random((W, 7))
    shift_dir = np.where(rng_w.random((W, 7)) < 0.5, -1, 1)
    shifts = np.where(shift_draw < p_shift, shift_dir, 0)

    season = seasonal_factor(np.arange(W), cfg.seasonal_amplitude)
    weeks = np.empty((W, 168))
    for w in range(W):
        base = prof.electricity.reshape(7, 24)
        days = np.stack([np.roll(base[d], shifts[w, d]) for d in range(7)]).reshape(168)
        weeks[w] = days * season[w] * level[w] * (VACATION_FLOOR if vac[w] else 1.0)
    noise = np.exp(sig * z - 0.5 * sig**2)
    elec = weeks.reshape(-1) * noise
    if cfg.utilities == 1:
        return elec[:, None]

    # gas shares part of the electricity noise and follows a stronger season
    zg = 0.5 * z + np.sqrt(0.75) * _ar1(rng_g, cfg.ar1_rho, W * 168)
    gas_season = seasonal_factor(np.arange(W), min(1.0, 3 * cfg.seasonal_amplitude))
    gweeks = np.empty((W, 168))
    for w in range(W):
        gweeks[w] = prof.heating * gas_season[w] * level[w] * (VACATION_FLOOR if vac[w] else 1.0)
    gas = prof.gas_coupling * gweeks.reshape(-1) * np.exp(sig * zg - 0.5 * sig**2)
    return np.stack([elec, gas], axis=1)


def generate(cfg: SynthConfig) -> tuple[Dataset, list[str]]:
    """Dataset of all households over ``n_weeks`` keyed by user id."""
    pop = sample_population(cfg)
    values = np.stack([household_series(cfg, p, i) for i, p in enumerate(pop)])
    users = [p.user_id for p in pop]
    return Dataset(tuple(users), values, cfg.start, HOUR), users


def template_mean(cfg: SynthConfig, utility: int = 0) -> float:
    """Expected hourly consumption ignoring seasonality and vacations."""
    mix = np.asarray(cfg.archetype_mix)
    if utility == 0:
        means = [ARCHETYPE_LIBRARY[a].base_profile.mean() for a in ARCHETYPES]
    else:
        means = [ARCHETYPE_LIBRARY[a].heating_profile.mean() * ARCHETYPE_LIBRARY[a].gas_coupling for a in ARCHETYPES]
    return float(mix @ np.asarray(means))
