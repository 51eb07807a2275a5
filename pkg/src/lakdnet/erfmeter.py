"""Generalized-normal curve fitting of ERF scanlines and the ERFM score.

The fitted model is a symmetric generalized normal density with a free
amplitude ``c1`` and offset ``c2``::

    f(x) = c1 * beta / (2 sigma Gamma(1/beta)) * exp(-|(x - mu) / sigma|**beta) + c2

Fitting is Levenberg-Marquardt over ``(log sigma, log beta, mu, c1, c2)`` so
that scale and shape stay positive.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def gamma_fn(z: float) -> float:
    """Gamma function for real ``z > 0``."""
    z = float(z)
    if not z > 0.0:
        raise ValueError(f"gamma_fn needs z > 0, got {z}")
    if z < 0.5:
        # reflection keeps the series in its accurate range
        return math.pi / (math.sin(math.pi * z) * gamma_fn(1.0 - z))
    z -= 1.0
    series = _LANCZOS_COEF[0]
    for i in range(1, len(_LANCZOS_COEF)):
        series += _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _SQRT_2PI * t ** (z + 0.5) * math.exp(-t) * series


@dataclass
class GndParams:
    sigma: float
    beta: float
    mu: float = 0.0
    c1: float = 1.0
    c2: float = 0.0
    r_squared: float = float("nan")
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        if not (self.sigma > 0 and self.beta > 0):
            raise ValueError(f"sigma and beta must be positive, got sigma={self.sigma}, beta={self.beta}")
        for name in ("sigma", "beta", "mu", "c1", "c2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def as_vector(self) -> np.ndarray:
        return np.array([self.sigma, self.beta, self.mu, self.c1, self.c2])


def _gnd(x: np.ndarray, sigma: float, beta: float, mu: float, c1: float, c2: float) -> np.ndarray:
    a = np.abs((x - mu) / sigma)
    return c1 * beta / (2.0 * sigma * gamma_fn(1.0 / beta)) * np.exp(-(a ** beta)) + c2


def gnd_pdf(params: GndParams, x):
    """Evaluate the fitted model at ``x`` (scalar or array)."""
    if not (params.sigma > 0 and params.beta > 0):
        raise ValueError("gnd_pdf needs positive sigma and beta")
    out = _gnd(np.asarray(x, dtype=np.float64), params.sigma, params.beta, params.mu, params.c1, params.c2)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Levenberg-Marquardt fit
# ---------------------------------------------------------------------------

LM_LAMBDA0 = 1e-3
LM_MAX_ITER = 200
LM_RTOL = 1e-12
_LM_LAMBDA_MAX = 1e12
_BETA_STEP = 1e-6


def _unpack(theta):
    return math.exp(theta[0]), math.exp(theta[1]), theta[2], theta[3], theta[4]


def _jacobian(x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    sigma, beta, mu, c1, c2 = _unpack(theta)
    u = (x - mu) / sigma
    a = np.abs(u)
    norm = beta / (2.0 * sigma * gamma_fn(1.0 / beta))
    e = np.exp(-(a ** beta))
    peak = c1 * norm * e
    J = np.empty((x.size, 5))
    J[:, 0] = peak * (beta * a ** beta - 1.0)  # d/d log sigma
    # d/d log beta: Gamma(1/beta) has no cheap closed-form derivative here
    lo = _gnd(x, sigma, beta * math.exp(-_BETA_STEP), mu, c1, c2)
    hi = _gnd(x, sigma, beta * math.exp(_BETA_STEP), mu, c1, c2)
    J[:, 1] = (hi - lo) / (2.0 * _BETA_STEP)
    with np.errstate(divide="ignore", invalid="ignore"):
        dmu = peak * beta * a ** (beta - 1.0) * np.sign(u) / sigma
    J[:, 2] = np.where(a > 0, dmu, 0.0)
    J[:, 3] = norm * e
    J[:, 4] = 1.0
    return J


def _initial_theta(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    i_peak = int(np.argmax(y))
    mu0 = x[i_peak]
    c2_0 = float(y.min())
    height = float(y[i_peak]) - c2_0
    half = c2_0 + 0.5 * height
    widths = []
    for step in (1, -1):
        i = i_peak
        while 0 <= i + step < y.size and y[i + step] >= half:
            i += step
        j = i + step
        if 0 <= j < y.size and y[i] != y[j]:
            frac = (y[i] - half) / (y[i] - y[j])
            widths.append(abs(x[i] + frac * (x[j] - x[i]) - mu0))
        else:
            widths.append(abs(x[i] - mu0))
    sigma0 = float(np.mean(widths))
    if not sigma0 > 0:
        sigma0 = (x.max() - x.min()) / 10.0
    beta0 = 1.5
    c1_0 = height * 2.0 * sigma0 * gamma_fn(1.0 / beta0) / beta0
    return np.array([math.log(sigma0), math.log(beta0), mu0, c1_0, c2_0])


def fit_gnd_xy(xs: Sequence[float], ys: Sequence[float]) -> GndParams:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if x.size < 16:
        raise ValueError(f"need at least 16 samples to fit, got {x.size}")
    if not np.all(np.isfinite(y)):
        raise ValueError("ys contain non-finite values")
    if np.ptp(y) == 0:
        raise ValueError("ys are constant; nothing to fit")

    theta = _initial_theta(x, y)
    r = _gnd(x, *_unpack(theta)) - y
    ss = float(r @ r)
    lam = LM_LAMBDA0
    converged = False
    it = 0
    while it < LM_MAX_ITER:
        it += 1
        J = _jacobian(x, theta)
        A = J.T @ J
        grad = J.T @ r
        diag = np.maximum(np.diag(A), 1e-300)
        while True:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                cand = theta + delta
                with np.errstate(over="ignore", invalid="ignore"):
                    ok = np.all(np.isfinite(cand)) and abs(cand[0]) < 700 and abs(cand[1]) < 50
                    r_new = _gnd(x, *_unpack(cand)) - y if ok else None
                if r_new is not None and np.all(np.isfinite(r_new)):
                    ss_new = float(r_new @ r_new)
                    if ss_new < ss:
                        break
            lam *= 10.0
            if lam > _LM_LAMBDA_MAX:
                break
        if lam > _LM_LAMBDA_MAX:
            # no damped step lowers the residual: stationary to working precision
            converged = True
            break
        rel = (ss - ss_new) / ss if ss > 0 else 0.0
        theta, r, ss = cand, r_new, ss_new
        lam = max(lam / 10.0, 1e-15)
        if rel < LM_RTOL or ss == 0.0:
            converged = True
            break
    if not converged:
        logger.warning("GND fit did not converge after %d iterations (SS_res=%.3e)", it, ss)

    sigma, beta, mu, c1, c2 = _unpack(theta)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return GndParams(
        sigma=sigma, beta=beta, mu=mu, c1=c1, c2=c2,
        r_squared=1.0 - ss / ss_tot, converged=converged, iterations=it,
    )


def fit_gnd(profile) -> GndParams:
    """Fit an :class:`~lakdnet.erf.ErfProfile` (anything with ``xs`` and ``ys``)."""
    return fit_gnd_xy(profile.xs, profile.ys)


# ---------------------------------------------------------------------------
# ERFM score and correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErfmScore:
    value: float
    sigma: float
    beta: float
    log_magnitude: float

    def recompute(self) -> float:
        return self.sigma / (math.sqrt(2.0) * self.beta) * self.log_magnitude


def erfm(params: GndParams, max_x: float) -> ErfmScore:
    """Breadth over concentration, weighted by the natural log of ``max_x + 1``."""
    if not (params.sigma > 0 and params.beta > 0):
        raise ValueError("erfm needs positive sigma and beta")
    if max_x < 0:
        raise ValueError(f"max_x must be non-negative, got {max_x}")
    log_mag = math.log1p(max_x)
    value = params.sigma / (math.sqrt(2.0) * params.beta) * log_mag
    return ErfmScore(value=value, sigma=params.sigma, beta=params.beta, log_magnitude=log_mag)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> CorrelationResult:
    x = [float(v) for v in xs]
    y = [float(v) for v in ys]
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise ValueError("pearson_r needs at least two samples")
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(v * v for v in dx)
    syy = math.fsum(v * v for v in dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson_r is undefined for zero-variance input")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    return CorrelationResult(r=max(-1.0, min(1.0, r)), n=n)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("sigma", "beta", "mu", "c1", "c2", "r_squared", "erfm", "max_value", "layer")


def fit_report(params: GndParams, max_value: float, layer: str) -> dict:
    return {
        "sigma": params.sigma,
        "beta": params.beta,
        "mu": params.mu,
        "c1": params.c1,
        "c2": params.c2,
        "r_squared": params.r_squared,
        "erfm": erfm(params, max_value).value,
        "max_value": float(max_value),
        "layer": layer,
    }


def write_fit_report(path, params: GndParams, max_value: float, layer: str) -> dict:
    report = fit_report(params, max_value, layer)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def read_fit_report(path) -> dict:
    with open(path) as fh:
        report = json.load(fh)
    missing = [k for k in REPORT_FIELDS if k not in report]
    if missing:
        raise ValueError(f"fit report {path} lacks fields {missing}")
    return report


def params_from_report(report: dict) -> GndParams:
    return GndParams(
        sigma=report["sigma"], beta=report["beta"], mu=report["mu"],
        c1=report["c1"], c2=report["c2"], r_squared=report["r_squared"],
    )


def write_curve_csv(path, xs, ys, params: GndParams) -> None:
    """(x, y, f(x)) triples for external plotting."""
    fx = gnd_pdf(params, np.asarray(xs, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "f"])
        for a, b, c in zip(xs, ys, fx):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])
