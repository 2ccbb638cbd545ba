"""Heavy-tailed fits (power law, truncated power law, log-normal) and binned KL divergence.

All fits are continuous maximum-likelihood fits on the tail ``x >= x_min``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import mpmath
import numpy as np
from scipy import optimize, special, stats

from .errors import ConvergenceError, DegenerateFitError, FitError

POWER_LAW = "power_law"
TRUNCATED_POWER_LAW = "truncated_power_law"
LOGNORMAL = "lognormal_positive"
MODELS = (POWER_LAW, TRUNCATED_POWER_LAW, LOGNORMAL)

MIN_TAIL = 10
SMALL_SAMPLE = 50
KLD_SMOOTHING = 1e-9
BINS_PER_DECADE = 25


@dataclass
class FitResult:
    model: str
    params: dict[str, float]
    x_min: float
    ks: float
    loglik: float
    n: int
    degenerate: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"model": self.model, "params": self.params, "x_min": self.x_min,
                "ks": self.ks, "loglik": self.loglik, "n": self.n,
                "degenerate": self.degenerate, "warnings": self.warnings}


def _tail(samples, x_min) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise FitError("samples contain non-finite values")
    tail = np.sort(x[x >= x_min])
    if len(tail) < MIN_TAIL:
        raise FitError(f"only {len(tail)} samples >= x_min={x_min}; need {MIN_TAIL}")
    if tail[0] <= 0:
        raise FitError("tail samples must be positive")
    return tail


def _ks(sorted_x: np.ndarray, cdf: np.ndarray) -> float:
    n = len(sorted_x)
    hi = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return float(max(np.max(hi - cdf), np.max(cdf - lo)))


def _small_n(n: int) -> list[str]:
    return [f"only {n} tail samples; parameter variance is large"] if n < SMALL_SAMPLE else []


# -- power law -------------------------------------------------------------

def _pl_from_tail(tail: np.ndarray, x_min: float) -> FitResult:
    n = len(tail)
    logs = np.log(tail / x_min)
    s = float(logs.sum())
    if s <= 0:
        raise DegenerateFitError(f"all {n} tail samples equal x_min; no log-spread to fit")
    alpha = 1.0 + n / s
    cdf = 1.0 - (tail / x_min) ** (1.0 - alpha)
    ll = n * math.log(alpha - 1.0) - n * math.log(x_min) - alpha * s
    return FitResult(POWER_LAW, {"alpha": alpha}, float(x_min), _ks(tail, cdf), ll, n,
                     warnings=_small_n(n))


def _xmin_candidates(x: np.ndarray, limit: int = 100) -> np.ndarray:
    uniq = np.unique(x[x > 0])
    if len(uniq) > MIN_TAIL:
        uniq = uniq[:-MIN_TAIL + 1] if MIN_TAIL > 1 else uniq
    if len(uniq) > limit:
        uniq = np.unique(np.quantile(uniq, np.linspace(0, 1, limit), method="lower"))
    return uniq


def fit_power_law(samples, x_min: float | str = "auto") -> FitResult:
    """Continuous power law, ``alpha = 1 + n / sum(ln(x / x_min))``.

    With ``x_min="auto"`` the threshold minimising the KS distance is chosen
    among (up to 100) observed values that leave at least 10 tail samples.
    """
    if x_min != "auto":
        return _pl_from_tail(_tail(samples, float(x_min)), float(x_min))
    x = np.asarray(samples, dtype=float).ravel()
    best = None
    for cand in _xmin_candidates(x):
        try:
            fit = _pl_from_tail(_tail(x, cand), float(cand))
        except FitError:
            continue
        if best is None or fit.ks < best.ks:
            best = fit
    if best is None:
        raise FitError("no x_min candidate leaves a fittable tail")
    return best


# -- truncated power law -----------------------------------------------------

def _upper_gamma(a: float, z: np.ndarray) -> np.ndarray:
    """Upper incomplete gamma for any real ``a`` (vectorised over ``z > 0``)."""
    z = np.asarray(z, dtype=float)
    if a > 0:
        return special.gammaincc(a, z) * special.gamma(a)
    m = math.ceil(-a)
    b = a + m  # in [0, 1)
    g = special.exp1(z) if abs(b) < 1e-12 else special.gammaincc(b, z) * special.gamma(b)
    for k in range(1, m + 1):
        c = b - k
        g = (g - z ** c * np.exp(-z)) / c
    return g


def _tpl_log_norm(alpha: float, lam: float, x_min: float) -> float:
    """ln of the integral of x**-alpha * exp(-lam*x) over [x_min, inf)."""
    g = mpmath.gammainc(1.0 - alpha, lam * x_min)
    if g <= 0:
        return math.inf
    return float((alpha - 1.0) * mpmath.log(lam) + mpmath.log(g))


def fit_truncated_power_law(samples, x_min: float, max_iter: int = 4000) -> FitResult:
    """MLE of the density ``x**-alpha * exp(-lam * x)`` on ``[x_min, inf)``.

    Nelder-Mead over (alpha, ln lam), started from the pure power-law alpha
    and ``lam = 1 / mean``. The truncation scale is ``1 / lam``.
    """
    x_min = float(x_min)
    tail = _tail(samples, x_min)
    n = len(tail)
    s_log, s_x = float(np.log(tail).sum()), float(tail.sum())
    if tail[0] == tail[-1]:
        raise DegenerateFitError("all tail samples are equal")
    try:
        a0 = _pl_from_tail(tail, x_min).params["alpha"]
    except DegenerateFitError:
        a0 = 1.5
    theta0 = np.array([a0, math.log(1.0 / tail.mean())])

    def nll(theta):
        alpha, lam = theta[0], math.exp(theta[1])
        lz = _tpl_log_norm(alpha, lam, x_min)
        v = alpha * s_log + lam * s_x + n * lz
        return v if math.isfinite(v) else 1e300

    res = optimize.minimize(nll, theta0, method="Nelder-Mead",
                            options={"maxiter": max_iter, "xatol": 1e-9, "fatol": 1e-9,
                                     "initial_simplex": [theta0, theta0 + [0.1, 0.0], theta0 + [0.0, 0.5]]})
    if not res.success or not np.all(np.isfinite(res.x)):
        raise ConvergenceError(
            f"truncated power-law fit did not converge after {res.nit} iterations "
            f"({res.message}); last alpha={res.x[0]:.6g}, lambda={math.exp(res.x[1]):.6g}")
    alpha, lam = float(res.x[0]), math.exp(float(res.x[1]))
    g = _upper_gamma(1.0 - alpha, lam * tail)
    g0 = _upper_gamma(1.0 - alpha, np.array([lam * x_min]))[0]
    cdf = 1.0 - g / g0
    return FitResult(TRUNCATED_POWER_LAW, {"alpha": alpha, "lambda": lam, "beta": 1.0 / lam},
                     x_min, _ks(tail, cdf), -float(res.fun), n, warnings=_small_n(n))


# -- log-normal --------------------------------------------------------------

def _ln_trunc_logsf(mu, sigma, x_min):
    if x_min <= 0:
        return 0.0
    return float(stats.norm.logsf((math.log(x_min) - mu) / sigma))


def fit_lognormal_positive(samples, x_min: float) -> FitResult:
    """Log-normal conditioned on ``x >= x_min``.

    Starts from the moments of ``ln x`` and maximises the truncated
    likelihood, so the parameters describe the untruncated distribution.
    Constant samples give ``sigma = 0`` and a degenerate flag.
    """
    x_min = float(x_min)
    x = np.asarray(samples, dtype=float).ravel()
    tail = np.sort(x[x >= x_min])
    if np.any(tail <= 0):
        raise FitError("log-normal fit needs strictly positive tail samples")
    if len(tail) < MIN_TAIL:
        raise FitError(f"only {len(tail)} samples >= x_min={x_min}; need {MIN_TAIL}")
    n = len(tail)
    logs = np.log(tail)
    mu0, sd0 = float(logs.mean()), float(logs.std())
    warns = _small_n(n)
    if tail[0] == tail[-1]:
        return FitResult(LOGNORMAL, {"mu": float(math.log(tail[0])), "sigma": 0.0}, x_min, 0.0, math.inf, n,
                         degenerate=True, warnings=warns + ["zero spread in ln(x)"])
    s1, s2 = float(logs.sum()), float((logs ** 2).sum())
    half_log_2pi = 0.5 * math.log(2 * math.pi)

    def nll(theta):
        mu, sigma = theta[0], math.exp(theta[1])
        sq = s2 - 2 * mu * s1 + n * mu * mu
        return (s1 + n * (math.log(sigma) + half_log_2pi) + sq / (2 * sigma * sigma)
                + n * _ln_trunc_logsf(mu, sigma, x_min))

    res = optimize.minimize(nll, np.array([mu0, math.log(sd0)]), method="L-BFGS-B")
    if not np.all(np.isfinite(res.x)):
        raise ConvergenceError(f"log-normal fit failed: {res.message}")
    mu, sigma = float(res.x[0]), math.exp(float(res.x[1]))
    a = (math.log(x_min) - mu) / sigma if x_min > 0 else -math.inf
    cdf = (stats.norm.cdf((logs - mu) / sigma) - stats.norm.cdf(a)) / stats.norm.sf(a)
    return FitResult(LOGNORMAL, {"mu": mu, "sigma": sigma}, x_min, _ks(tail, cdf),
                     -float(res.fun), n, warnings=warns)


# -- comparison --------------------------------------------------------------

def logpdf(fit: FitResult, x) -> np.ndarray:
    """Pointwise log-density of a fitted model (x assumed >= x_min)."""
    x = np.asarray(x, dtype=float)
    p, xm = fit.params, fit.x_min
    if fit.model == POWER_LAW:
        a = p["alpha"]
        return math.log(a - 1) - math.log(xm) - a * np.log(x / xm)
    if fit.model == TRUNCATED_POWER_LAW:
        a, lam = p["alpha"], p["lambda"]
        return -a * np.log(x) - lam * x - _tpl_log_norm(a, lam, xm)
    if fit.model == LOGNORMAL:
        mu, sigma = p["mu"], p["sigma"]
        lx = np.log(x)
        return (-lx - math.log(sigma) - 0.5 * math.log(2 * math.pi)
                - (lx - mu) ** 2 / (2 * sigma ** 2) - _ln_trunc_logsf(mu, sigma, xm))
    raise ValueError(f"unknown model {fit.model!r}")


_FITTERS = {
    POWER_LAW: fit_power_law,
    TRUNCATED_POWER_LAW: fit_truncated_power_law,
    LOGNORMAL: fit_lognormal_positive,
}


def select_best_fit(samples, candidates: Sequence[str] = MODELS,
                    x_min: float | str = 2.3) -> tuple[FitResult, list[dict]]:
    """Fit every candidate on the same tail and compare by log-likelihood ratio.

    Each table row holds the summed ratio ``R`` (positive favours ``a``),
    its normalised form ``z = R / (sd * sqrt(n))`` and the two-sided p-value.
    The winner is the highest total likelihood; ties go to the earlier model.
    """
    candidates = list(dict.fromkeys(candidates))
    if not candidates:
        raise ValueError("no candidate models")
    unknown = [c for c in candidates if c not in _FITTERS]
    if unknown:
        raise ValueError(f"unknown models {unknown}")
    if x_min == "auto":
        x_min = fit_power_law(samples, "auto").x_min
    fits = {c: _FITTERS[c](samples, x_min) for c in candidates}
    tail = _tail(samples, float(x_min))
    table = []
    for i, a in enumerate(candidates):
        for b in candidates[i + 1:]:
            if fits[a].degenerate or fits[b].degenerate:
                continue
            d = logpdf(fits[a], tail) - logpdf(fits[b], tail)
            r = float(d.sum())
            sd = float(d.std())
            z = r / (sd * math.sqrt(len(d))) if sd > 0 else 0.0
            table.append({"a": a, "b": b, "R": r, "z": z,
                          "p": float(special.erfc(abs(z) / math.sqrt(2))),
                          "favours": a if r > 0 else b if r < 0 else "tie"})
    usable = [c for c in candidates if not fits[c].degenerate] or candidates
    best = max(usable, key=lambda c: (fits[c].loglik, -candidates.index(c)))
    return fits[best], table


# -- histograms and KL divergence --------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    masses: np.ndarray

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(),
                "masses": self.masses.tolist()}


def log_edges(lo: float, hi: float, per_decade: int = BINS_PER_DECADE) -> np.ndarray:
    if not 0 < lo < hi:
        raise ValueError("log bins need 0 < lo < hi")
    nbins = max(1, math.ceil(per_decade * math.log10(hi / lo)))
    return np.logspace(math.log10(lo), math.log10(hi), nbins + 1)


def log_histogram(samples, x_min: float | None = None, edges=None,
                  per_decade: int = BINS_PER_DECADE) -> Histogram:
    """Histogram of ``samples >= x_min`` on log-spaced bins (last bin closed)."""
    x = np.asarray(samples, dtype=float).ravel()
    lo = x_min if x_min is not None else (x[x > 0].min() if np.any(x > 0) else None)
    x = x[x >= lo] if lo is not None else x[:0]
    if edges is None:
        if len(x) == 0:
            raise ValueError("no samples to bin")
        hi = float(x.max())
        edges = log_edges(float(lo), hi if hi > lo else lo * 10 ** (1 / per_decade), per_decade)
    edges = np.asarray(edges, dtype=float)
    counts, _ = np.histogram(x, bins=edges)
    total = counts.sum()
    if total == 0:
        raise ValueError("no samples fall inside the bin range")
    return Histogram(edges, counts, counts / total)


def histogram_from_masses(edges, masses) -> Histogram:
    edges = np.asarray(edges, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if len(edges) != len(masses) + 1 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing with len(masses) + 1 entries")
    if np.any(masses < 0) or masses.sum() <= 0:
        raise ValueError("masses must be non-negative with a positive total")
    return Histogram(edges, masses.copy(), masses / masses.sum())


def kl_divergence(p: Histogram, q: Histogram, eps: float = KLD_SMOOTHING) -> float:
    """KL(p || q) in nats after adding ``eps`` to every bin and renormalising."""
    if p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
        raise ValueError("histograms have different bin edges")
    pm = p.masses + eps
    qm = q.masses + eps
    pm, qm = pm / pm.sum(), qm / qm.sum()
    return max(0.0, float(np.sum(pm * np.log(pm / qm))))


# -- samplers (for recovery checks and synthetic data) ----------------------

def sample_power_law(alpha: float, x_min: float, n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(n)
    return x_min * (1.0 - u) ** (-1.0 / (alpha - 1.0))


def sample_truncated_power_law(alpha: float, lam: float, x_min: float, n: int,
                               rng: np.random.Generator, batch: int = 1 << 20) -> np.ndarray:
    """Rejection sampling; the proposal depends on the exponent.

    For ``alpha > 1.5`` the proposal is the pure power law and a draw is
    kept with probability ``exp(-lam * (x - x_min))``. Otherwise the
    proposal is the shifted exponential and a draw is kept with probability
    ``(x / x_min) ** -alpha``.
    """
    if alpha < 0 or lam <= 0:
        raise ValueError("need alpha >= 0 and lam > 0")
    out: list[np.ndarray] = []
    have = 0
    while have < n:
        if alpha > 1.5:
            x = sample_power_law(alpha, x_min, batch, rng)
            keep = rng.random(batch) < np.exp(-lam * (x - x_min))
        else:
            x = x_min + rng.exponential(1.0 / lam, batch)
            keep = rng.random(batch) < (x / x_min) ** (-alpha)
        out.append(x[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


def sample_lognormal(mu: float, sigma: float, n: int, rng: np.random.Generator,
                     x_min: float | None = None) -> np.ndarray:
    """Log-normal draws, conditioned on ``x >= x_min`` by inverse CDF when given."""
    if x_min is None or x_min <= 0:
        return np.exp(mu + sigma * rng.standard_normal(n))
    lo = stats.norm.cdf((math.log(x_min) - mu) / sigma)
    u = lo + (1.0 - lo) * rng.random(n)
    return np.exp(mu + sigma * stats.norm.ppf(u))
