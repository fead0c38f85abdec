"""(Log-)location-scale regression of time-to-failure on MFPC scores.

``y = beta0 + beta^T z + sigma * eps`` with ``eps`` drawn from a standard
normal, smallest-extreme-value or logistic law; the log families model
``y = log(ttf)``. Fitting maximizes the log-likelihood by preconditioned
gradient ascent with a backtracking line search. Participants only ever
report per-component sums of per-sample terms; those sums travel as exact
floating-point expansions (Shewchuk partials) and are combined with
:func:`math.fsum`, so the aggregated value is the correctly rounded exact
sum regardless of how the samples are split across participants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import stats

LOG_2PI = math.log(2.0 * math.pi)


class FitError(RuntimeError):
    """Optimizer did not converge; carries the last iterate for diagnosis."""

    def __init__(self, msg, params=None, grad_norm=float("nan"), iterations=0):
        super().__init__(msg)
        self.params = params
        self.grad_norm = grad_norm
        self.iterations = iterations


class DataError(ValueError):
    pass


# -- families -------------------------------------------------------------------


@dataclass(frozen=True)
class LLSFamily:
    """A standard error law plus whether the response is log-transformed.

    ``info_loc`` and ``info_scale`` are the per-sample Fisher informations of
    the location and of ``log sigma`` for a unit-scale model; they only set the
    optimizer's diagonal preconditioner.
    """

    tag: str
    base: str
    log: bool
    info_loc: float
    info_scale: float

    def logpdf(self, e):
        if self.base == "normal":
            return -0.5 * e * e - 0.5 * LOG_2PI
        if self.base == "sev":
            return e - np.exp(e)
        a = np.abs(e)
        return -a - 2.0 * np.log1p(np.exp(-a))

    def dlogpdf(self, e):
        if self.base == "normal":
            return -e
        if self.base == "sev":
            return 1.0 - np.exp(e)
        return -np.tanh(0.5 * e)

    def ppf(self, q):
        q = np.asarray(q, dtype=np.float64)
        if self.base == "normal":
            return stats.norm.ppf(q)
        if self.base == "sev":
            return np.log(-np.log1p(-q))
        return stats.logistic.ppf(q)

    def cdf(self, e):
        e = np.asarray(e, dtype=np.float64)
        if self.base == "normal":
            return stats.norm.cdf(e)
        if self.base == "sev":
            return -np.expm1(-np.exp(e))
        return stats.logistic.cdf(e)

    def transform(self, ttf):
        ttf = np.asarray(ttf, dtype=np.float64)
        if self.log:
            if np.any(ttf <= 0):
                raise DataError(f"{self.tag} family needs positive failure times")
            return np.log(ttf)
        return ttf

    def untransform(self, y):
        return np.exp(y) if self.log else y


_EULER = 0.5772156649015329
_SEV_SCALE_INFO = math.pi ** 2 / 6.0 + (1.0 - _EULER) ** 2
FAMILIES = {
    "normal": LLSFamily("normal", "normal", False, 1.0, 2.0),
    "lognormal": LLSFamily("lognormal", "normal", True, 1.0, 2.0),
    "sev": LLSFamily("sev", "sev", False, 1.0, _SEV_SCALE_INFO),
    "weibull": LLSFamily("weibull", "sev", True, 1.0, _SEV_SCALE_INFO),
    "logistic": LLSFamily("logistic", "logistic", False, 1.0 / 3.0, (math.pi ** 2 + 3.0) / 9.0),
    "loglogistic": LLSFamily("loglogistic", "logistic", True, 1.0 / 3.0, (math.pi ** 2 + 3.0) / 9.0),
}


def get_family(tag) -> LLSFamily:
    if isinstance(tag, LLSFamily):
        return tag
    try:
        return FAMILIES[str(tag).lower()]
    except KeyError:
        raise ValueError(f"unknown family {tag!r}; choose from {sorted(FAMILIES)}") from None


# -- model ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LLSModel:
    family: LLSFamily
    beta0: float
    beta: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=np.float64)).reshape(-1))
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "sigma", float(self.sigma))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def K(self) -> int:
        return self.beta.size

    @property
    def params(self) -> np.ndarray:
        """``(beta0, beta..., log sigma)``."""
        return np.concatenate([[self.beta0], self.beta, [math.log(self.sigma)]])

    @classmethod
    def from_params(cls, family, theta) -> "LLSModel":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(family, theta[0], theta[1:-1], math.exp(theta[-1]))

    def location(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        z = z.reshape(self.K, -1) if self.K else np.zeros((0, max(1, z.shape[-1] if z.ndim == 2 else 1)))
        return linear_predictor(self.params, z)

    def to_text(self) -> str:
        return "\n".join([
            f"family={self.family.tag}",
            f"beta0={self.beta0!r}",
            "beta=[" + ", ".join(repr(float(b)) for b in self.beta) + "]",
            f"sigma={self.sigma!r}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LLSModel":
        kv = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"model file line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        missing = {"family", "beta0", "beta", "sigma"} - kv.keys()
        if missing:
            raise ValueError(f"model file lacks {sorted(missing)}")
        inner = kv["beta"].strip()
        if not (inner.startswith("[") and inner.endswith("]")):
            raise ValueError("beta must be written as [b1, b2, ...]")
        inner = inner[1:-1].strip()
        beta = [float(b) for b in inner.split(",")] if inner else []
        return cls(kv["family"], float(kv["beta0"]), np.array(beta), float(kv["sigma"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "LLSModel":
        with open(path) as fh:
            return cls.from_text(fh.read())


def linear_predictor(theta, z: np.ndarray) -> np.ndarray:
    # explicit loop over components: each sample's value never depends on the batch it sits in
    mu = np.full(z.shape[1], float(theta[0]))
    for k in range(z.shape[0]):
        mu = mu + theta[1 + k] * z[k]
    return mu


# -- exact summation ------------------------------------------------------------


def exact_partials(values) -> list[float]:
    """Non-overlapping partials whose exact sum equals the exact sum of ``values``."""
    partials: list[float] = []
    for x in values:
        i = 0
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]
    return partials


def _partials_rows(terms: np.ndarray) -> tuple:
    return tuple(tuple(exact_partials(row.tolist())) for row in terms)


def _combine(parts_per_source) -> np.ndarray:
    """Correctly rounded total of each component over all sources."""
    ncomp = len(parts_per_source[0])
    out = np.empty(ncomp)
    for c in range(ncomp):
        out[c] = math.fsum(p for src in parts_per_source for p in src[c])
    return out


def sample_terms(family: LLSFamily, theta, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample log-likelihood and gradient terms, shape ``(K + 3, n)``.

    Row 0 is the log-likelihood, then d/d beta0, d/d beta_k, d/d log sigma.
    """
    K = z.shape[0]
    sigma = math.exp(theta[-1])
    with np.errstate(over="ignore", invalid="ignore"):
        e = (y - linear_predictor(theta, z)) / sigma
        g = family.dlogpdf(e)
        out = np.empty((K + 3, y.size))
        out[0] = family.logpdf(e) - theta[-1]
        out[1] = -g / sigma
        for k in range(K):
            out[2 + k] = out[1] * z[k]
        out[K + 2] = -1.0 - g * e
    return out


# -- participant side -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GradientPacket:
    """One participant's log-likelihood and gradient at a broadcast parameter vector.

    The float fields are the participant's own rounded sums; ``partials``
    carries one exact expansion per component (loglik, beta0, beta..., log
    sigma) for the server's exact aggregation.
    """

    participant_id: str
    grad_beta0: float
    grad_beta: np.ndarray
    grad_log_sigma: float
    local_n: int
    local_loglik: float
    partials: tuple = ()

    @classmethod
    def from_partials(cls, participant_id, n, partials) -> "GradientPacket":
        tot = [math.fsum(p) for p in partials]
        return cls(str(participant_id), tot[1], np.array(tot[2:-1]), tot[-1], int(n), tot[0], partials)

    @property
    def K(self) -> int:
        return len(self.partials) - 3


@dataclass(frozen=True, eq=False)
class MomentReport:
    """Sums used to initialize the optimizer: n, y, y^2 and each z_k^2 as exact partials."""

    participant_id: str
    local_n: int
    partials: tuple


class LLSClient(Protocol):
    participant_id: str

    def moments(self) -> MomentReport: ...

    def evaluate(self, theta) -> GradientPacket: ...


class LocalLLSClient:
    """Holds one participant's scores and failure times and answers server rounds."""

    def __init__(self, participant_id, z, ttfs, family):
        self.participant_id = str(participant_id)
        self.family = get_family(family)
        self.z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        self.y = self.family.transform(ttfs).reshape(-1)
        if self.z.shape[1] != self.y.size:
            raise ValueError(f"{self.z.shape[1]} score columns but {self.y.size} failure times")

    def moments(self) -> MomentReport:
        rows = np.vstack([self.y, self.y * self.y, self.z * self.z])
        return MomentReport(self.participant_id, self.y.size, _partials_rows(rows))

    def evaluate(self, theta) -> GradientPacket:
        terms = sample_terms(self.family, np.asarray(theta, dtype=np.float64), self.z, self.y)
        return GradientPacket.from_partials(self.participant_id, self.y.size, _partials_rows(terms))


def local_loglik_grad(model: LLSModel, z, ttfs, participant_id="local") -> GradientPacket:
    """Log-likelihood and its gradient in ``(beta0, beta, log sigma)`` on local data."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] < 1:
        raise ValueError("need at least one sample")
    if z.shape[0] != model.K:
        raise ValueError(f"scores have {z.shape[0]} rows, model has K={model.K}")
    return LocalLLSClient(participant_id, z, ttfs, model.family).evaluate(model.params)


# -- server side ----------------------------------------------------------------


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 5000
    step_tol: float = 1e-8
    armijo: float = 1e-4
    max_halvings: int = 60
    init: str = "moment"
    seed: int = 0


@dataclass
class FitTrace:
    logliks: list = field(default_factory=list)
    iterations: int = 0
    evaluations: int = 0


def _initial_params(family, K, n, mom: np.ndarray, opts: FitOptions) -> np.ndarray:
    mean = mom[0] / n
    var = mom[1] / n - mean * mean
    sd = math.sqrt(var) if var > 0 else 1.0
    if sd < 1e-8 * max(1.0, abs(mean)):
        sd = max(1e-3 * abs(mean), 1e-3)
    theta = np.zeros(K + 2)
    theta[0] = mean
    theta[-1] = math.log(sd)
    if opts.init == "random":
        rng = np.random.default_rng(opts.seed)
        theta[0] += sd * rng.standard_normal()
        zsd = np.sqrt(np.maximum(mom[2:] / n, 1e-300))
        theta[1:-1] = 0.1 * sd * rng.standard_normal(K) / zsd
        theta[-1] += 0.1 * rng.standard_normal()
    elif opts.init != "moment":
        raise ValueError(f"unknown init {opts.init!r}")
    return theta


def _optimize(family: LLSFamily, n: int, mom: np.ndarray, evaluate_total, opts: FitOptions,
              trace: FitTrace | None = None) -> LLSModel:
    K = mom.size - 2
    if n < K + 2:
        raise ValueError(f"need at least K + 2 = {K + 2} samples, got {n}")
    theta = _initial_params(family, K, n, mom, opts)
    zsq = np.maximum(mom[2:], 1e-300)
    tot = evaluate_total(theta)
    if trace is not None:
        trace.evaluations += 1
    if not np.all(np.isfinite(tot)):
        raise FitError("log-likelihood is not finite at the initial point", theta)
    for it in range(1, opts.max_iters + 1):
        sigma2 = math.exp(2.0 * theta[-1])
        D = np.concatenate([[sigma2 / (n * family.info_loc)], sigma2 / (zsq * family.info_loc),
                            [1.0 / (n * family.info_scale)]])
        grad = tot[1:]
        step = D * grad
        if np.max(np.abs(step)) < opts.step_tol:
            if trace is not None:
                trace.iterations = it - 1
                trace.logliks.append(tot[0])
            return LLSModel.from_params(family, theta)
        slope = float(grad @ step)
        t = 1.0
        for _ in range(opts.max_halvings):
            trial = theta + t * step
            new = evaluate_total(trial)
            if trace is not None:
                trace.evaluations += 1
            if np.all(np.isfinite(new)) and new[0] >= tot[0] + opts.armijo * t * slope:
                break
            t *= 0.5
        else:
            # no ascent possible along the scaled gradient: we are at the rounding floor
            if np.max(np.abs(step)) < 1e3 * opts.step_tol:
                return LLSModel.from_params(family, theta)
            raise FitError("line search failed", theta, float(np.max(np.abs(grad))), it)
        if trace is not None:
            trace.logliks.append(tot[0])
        delta = np.max(np.abs(trial - theta))
        theta, tot = trial, new
        if delta < opts.step_tol:
            if trace is not None:
                trace.iterations = it
                trace.logliks.append(tot[0])
            return LLSModel.from_params(family, theta)
    raise FitError(f"no convergence in {opts.max_iters} iterations", theta,
                   float(np.max(np.abs(tot[1:]))), opts.max_iters)


def federated_fit(clients: Sequence[LLSClient], family, opts: FitOptions = FitOptions(),
                  trace: FitTrace | None = None) -> LLSModel:
    """Fit by rounds of parameter broadcast and gradient collection.

    ``clients`` answer ``moments()`` and ``evaluate(theta)``; they may be local
    objects or transport proxies. Replies are ordered by participant id before
    aggregation.
    """
    family = get_family(family)
    clients = sorted(clients, key=lambda c: c.participant_id)
    if not clients:
        raise ValueError("no participants")

    reps = [c.moments() for c in clients]
    if len({len(r.partials) for r in reps}) != 1:
        raise ValueError("participants disagree on the number of scores")

    def evaluate_total(theta):
        packets = [c.evaluate(theta) for c in clients]
        return _combine([p.partials for p in packets])

    n = sum(r.local_n for r in reps)
    return _optimize(family, n, _combine([r.partials for r in reps]), evaluate_total, opts, trace)


def fit_pooled(z, ttfs, family, opts: FitOptions = FitOptions(), trace: FitTrace | None = None) -> LLSModel:
    """Maximum-likelihood fit on one pooled data set (the centralized reference)."""
    family = get_family(family)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = family.transform(ttfs).reshape(-1)
    if z.shape[1] != y.size:
        raise ValueError(f"{z.shape[1]} score columns but {y.size} failure times")
    mom = np.array([math.fsum(r.tolist()) for r in np.vstack([y, y * y, z * z])])

    def evaluate_total(theta):
        return np.array([math.fsum(r.tolist()) for r in sample_terms(family, theta, z, y)])

    return _optimize(family, y.size, mom, evaluate_total, opts, trace)


# -- prediction -----------------------------------------------------------------


@dataclass(frozen=True)
class TTFDistribution:
    family: LLSFamily
    mu: float
    sigma: float

    def quantile(self, q):
        return self.family.untransform(self.mu + self.sigma * self.family.ppf(q))

    def cdf(self, t):
        y = self.family.transform(t) if self.family.log else np.asarray(t, dtype=np.float64)
        return self.family.cdf((y - self.mu) / self.sigma)

    @property
    def median(self) -> float:
        return float(self.quantile(0.5))


def predict_ttf(model: LLSModel, z) -> tuple[float, TTFDistribution]:
    """Median failure time and the full predictive law for one score vector."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != model.K:
        raise ValueError(f"score vector has {z.size} entries, model has K={model.K}")
    mu = float(model.location(z)[0])
    dist = TTFDistribution(model.family, mu, model.sigma)
    return dist.median, dist


def prediction_error(predicted, real):
    """Relative absolute error ``|predicted - real| / real`` (0.1 means 10%)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if np.any(real <= 0):
        raise DataError("real failure time must be positive")
    out = np.abs(predicted - real) / real
    return float(out) if out.ndim == 0 else out
