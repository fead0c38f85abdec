"""Synthetic degradation studies.

Each system has a rate ``c > 0`` and a degradation path ``-c / ln(t)`` on
``0 < t < 1``. Its failure time satisfies ``ln(ttf) = -c / D + eps`` and it is
observed on a grid of step ``0.0015`` up to failure, with additive Gaussian
noise. All systems of a study share one grid long enough for the longest
signal; shorter signals are failure-truncated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .signals import GridSpec, LocalDataset, ObservedSignal, apply_missingness


class ResampleError(ValueError):
    """A draw yields no usable signal; the caller should draw again."""


@dataclass(frozen=True)
class SimConfig:
    """Generator settings.

    ``obs_noise`` is read as a variance when ``noise_is_variance`` is true and
    as a standard deviation otherwise. ``permutation`` reshuffles which
    systems go to which user (and to the test set) without redrawing them.
    """

    user_split: tuple = (54, 27, 9)
    n_test: int = 30
    n_systems: int | None = None
    c_mean: float = 1.0
    c_sd: float = 0.5
    ttf_noise_sd: float = 0.025
    obs_noise: float = 0.2
    noise_is_variance: bool = True
    step: float = 15e-4
    threshold_D: float = 2.0
    missing_fraction: float = 0.3
    seed: int = 0
    permutation: int | None = None

    def __post_init__(self):
        split = tuple(int(j) for j in self.user_split)
        object.__setattr__(self, "user_split", split)
        total = sum(split) + int(self.n_test)
        if self.n_systems is None:
            object.__setattr__(self, "n_systems", total)
        elif self.n_systems != total:
            raise ValueError(f"user split {split} plus {self.n_test} test systems != n_systems={self.n_systems}")
        if any(j < 0 for j in split) or self.n_test < 0:
            raise ValueError("split sizes must be nonnegative")
        if not self.step > 0 or not self.threshold_D > 0:
            raise ValueError("step and threshold_D must be positive")
        if self.c_sd < 0 or self.ttf_noise_sd < 0 or self.obs_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must be in [0, 1)")

    @property
    def obs_noise_sd(self) -> float:
        return math.sqrt(self.obs_noise) if self.noise_is_variance else float(self.obs_noise)


def path_value(c, tau):
    return -c / np.log(tau)


def generate_system(c: float, cfg: SimConfig, rng=None, ttf_noise: float | None = None,
                    N: int | None = None, system_id=None) -> tuple[ObservedSignal, float]:
    """One system's noisy, failure-truncated signal and its failure time.

    Parameters
    ----------
    c : float
        Degradation rate, must be positive.
    rng : numpy Generator or seed, optional
        Source of the failure-time and observation noise.
    ttf_noise : float, optional
        Fix the log-failure-time noise instead of drawing it.
    N : int, optional
        Grid length; defaults to one more than the number of samples.
    """
    if not c > 0:
        raise ResampleError(f"degradation rate must be positive, got {c}")
    rng = np.random.default_rng(rng)
    eps = rng.normal(0.0, cfg.ttf_noise_sd) if ttf_noise is None else float(ttf_noise)
    ttf = math.exp(-c / cfg.threshold_D + eps)
    if not ttf < 1.0:
        raise ResampleError(f"failure time {ttf:.4g} is outside the path's domain (0, 1)")
    L = int(math.floor(ttf / cfg.step))
    if L < 1:
        raise ResampleError(f"failure time {ttf:.4g} precedes the first sample")
    N = L + 1 if N is None else int(N)
    if N < L + 1:
        raise ValueError(f"grid of length {N} cannot hold {L} samples")
    k = np.arange(1, L + 1)
    vals = np.full(N, np.nan)
    vals[k] = path_value(c, k * cfg.step) + rng.normal(0.0, cfg.obs_noise_sd, size=L)
    return ObservedSignal(vals, k, system_id), ttf


@dataclass(frozen=True, eq=False)
class Study:
    participants: list
    test: LocalDataset
    rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def grid(self) -> GridSpec:
        return self.test.grid


def _draw_systems(cfg: SimConfig):
    """Rates, failure-time noise and per-system noise seeds, redrawing unusable systems."""
    ss = np.random.SeedSequence(cfg.seed)
    draw_rng = np.random.default_rng(ss.spawn(1)[0])
    rates, epss, lengths = [], [], []
    while len(rates) < cfg.n_systems:
        c = draw_rng.normal(cfg.c_mean, cfg.c_sd)
        eps = draw_rng.normal(0.0, cfg.ttf_noise_sd)
        if c <= 0:
            continue
        ttf = math.exp(-c / cfg.threshold_D + eps)
        if ttf >= 1.0 or ttf < cfg.step:
            continue
        rates.append(c)
        epss.append(eps)
        lengths.append(int(math.floor(ttf / cfg.step)))
    return np.array(rates), np.array(epss), lengths


def generate_study(cfg: SimConfig) -> Study:
    """All users' training sets plus the test set for one configuration."""
    rates, epss, lengths = _draw_systems(cfg)
    N = max(lengths) + 1
    grid = GridSpec((N,))
    root = np.random.SeedSequence([cfg.seed, 1])
    noise_seeds = root.spawn(cfg.n_systems)
    miss_seeds = np.random.SeedSequence([cfg.seed, 2, int(round(cfg.missing_fraction * 1e6))]).spawn(cfg.n_systems)
    signals, ttfs = [], []
    for i in range(cfg.n_systems):
        s, t = generate_system(rates[i], cfg, np.random.default_rng(noise_seeds[i]), ttf_noise=epss[i],
                               N=N, system_id=f"s{i:04d}")
        if cfg.missing_fraction > 0:
            s = apply_missingness(s, cfg.missing_fraction, np.random.default_rng(miss_seeds[i]))
        signals.append(s)
        ttfs.append(t)
    order = np.arange(cfg.n_systems)
    if cfg.permutation is not None:
        order = np.random.default_rng([cfg.seed, 3, int(cfg.permutation)]).permutation(cfg.n_systems)
    parts, lo = [], 0
    for u, J in enumerate(cfg.user_split, start=1):
        idx = order[lo: lo + J]
        parts.append(LocalDataset(f"user{u}", tuple(signals[i] for i in idx), np.array([ttfs[i] for i in idx]), grid))
        lo += J
    idx = order[lo:]
    test = LocalDataset("test", tuple(signals[i] for i in idx), np.array([ttfs[i] for i in idx]), grid)
    return Study(parts, test, rates[order])


def preset(name: str, **overrides) -> SimConfig:
    """Named study layouts: ``sim1``, ``stragglers`` and ``scale``.

    For ``scale`` the 150 user sizes are drawn uniformly from 1..20 using
    ``overrides["seed"]`` (default 0), so one seed fixes the whole layout.
    """
    if name == "sim1":
        base = SimConfig(user_split=(54, 27, 9), n_test=30)
    elif name == "stragglers":
        base = SimConfig(user_split=(33, 70, 55, 56, 67), n_test=30)
    elif name == "scale":
        seed = int(overrides.get("seed", 0))
        n_users = int(overrides.pop("n_users", 150))
        sizes = np.random.default_rng([seed, 4]).integers(1, 21, size=n_users)
        base = SimConfig(user_split=tuple(sizes.tolist()), n_test=30)
    else:
        raise ValueError(f"unknown study {name!r}; choose sim1, stragglers or scale")
    if "user_split" in overrides or "n_test" in overrides:
        overrides.setdefault("n_systems", None)
    return replace(base, **overrides) if overrides else base
