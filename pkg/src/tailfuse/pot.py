"""Peaks-over-threshold baseline: mean excess diagnostics and GPD tail fits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .drm import TailInterval, z_upper

__all__ = [
    "GpdFit",
    "GpdFitError",
    "MrlPoint",
    "fit_gpd",
    "gpd_survival",
    "mean_excess_curve",
    "pot_tail",
    "write_mrl_csv",
]

MIN_EXCEEDANCES = 10
XI_BOX = (-0.5, 1.0)
# Below this |xi| the fit is reported as the exponential limit.
EXP_BRANCH = 1e-6
# Below this |xi| the xi-derivatives switch to their series expansions.
_SERIES = 1e-5


class GpdFitError(RuntimeError):
    def __init__(self, message: str, last=None):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class MrlPoint:
    u: float
    mean_excess: float
    n_above: int


@dataclass(frozen=True)
class GpdFit:
    """GPD maximum likelihood fit; ``vcov`` is ordered ``(xi, sigma)``."""

    xi: float
    sigma: float
    u: float
    n_exceed: int
    loglik: float
    vcov: np.ndarray


def mean_excess_curve(sample, grid) -> list[MrlPoint]:
    """Mean of ``x - u`` over ``x > u`` at each threshold with an exceedance."""
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("sample is empty")
    tail_sum = np.concatenate([np.cumsum(x[::-1])[::-1], [0.0]])
    out = []
    for u in np.asarray(grid, dtype=float).ravel():
        i = int(np.searchsorted(x, u, side="right"))
        k = x.size - i
        if k:
            out.append(MrlPoint(float(u), float(tail_sum[i] / k - u), k))
    return out


def write_mrl_csv(points: list[MrlPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "mean_excess", "n_above"])
        for pt in points:
            w.writerow([format(pt.u, ".17g"), format(pt.mean_excess, ".17g"), pt.n_above])


def _loglik(y, sigma, xi) -> float:
    if sigma <= 0:
        return -math.inf
    u = y / sigma
    s = 1.0 + xi * u
    if np.any(s <= 0):
        return -math.inf
    if xi == 0.0:
        return -y.size * math.log(sigma) - float(u.sum())
    return -y.size * math.log(sigma) - (1.0 + 1.0 / xi) * float(np.log1p(xi * u).sum())


def _derivatives(y, sigma, xi):
    """Gradient and Hessian of the log-likelihood in ``(sigma, xi)``."""
    k = y.size
    u = y / sigma
    s = 1.0 + xi * u
    a = float((u / s).sum())
    b = float((u * u / (s * s)).sum())
    g_sigma = (-k + (xi + 1.0) * a) / sigma
    h_ss = (k - 2.0 * (xi + 1.0) * a + (xi + 1.0) * xi * b) / sigma**2
    h_sx = (a - (xi + 1.0) * b) / sigma
    if abs(xi) < _SERIES:
        u2, u3 = float((u * u).sum()), float((u**3).sum())
        g_xi = 0.5 * u2 - float(u.sum()) + xi * (u2 - 2.0 * u3 / 3.0)
        h_xx = u2 - 2.0 * u3 / 3.0
    else:
        log_s = float(np.log1p(xi * u).sum())
        g_xi = log_s / xi**2 - (1.0 + 1.0 / xi) * a
        h_xx = -2.0 * log_s / xi**3 + 2.0 * a / xi**2 + (1.0 + 1.0 / xi) * b
    return np.array([g_sigma, g_xi]), np.array([[h_ss, h_sx], [h_sx, h_xx]])


def _pwm_start(y: np.ndarray) -> tuple[float, float]:
    """Probability-weighted-moment estimates, clipped inside the box."""
    ys = np.sort(y)
    n = ys.size
    a0 = ys.mean()
    a1 = float(np.mean((1.0 - (np.arange(1, n + 1) - 0.35) / n) * ys))
    denom = a0 - 2.0 * a1
    if denom <= 0:
        return a0, 0.0
    xi = float(np.clip(2.0 - a0 / denom, XI_BOX[0] + 0.05, XI_BOX[1] - 0.05))
    sigma = 2.0 * a0 * a1 / denom
    if not sigma > 0 or np.any(1.0 + xi * ys / sigma <= 0):
        return a0, 0.0
    return sigma, xi


def fit_gpd(excesses, u: float = 0.0, tol: float = 1e-10, max_iter: int = 50) -> GpdFit:
    """Maximum likelihood GPD fit to positive excesses over ``u``.

    The excesses are divided by their mean before fitting so the result is
    exactly scale equivariant. A quasi-Newton search over ``(log sigma, xi)``
    with ``xi`` boxed to ``(-0.5, 1)`` is polished by Newton steps on the
    analytic Hessian.

    Raises
    ------
    GpdFitError
        Too few or degenerate excesses, or no convergence.
    """
    y = np.asarray(excesses, dtype=float).ravel()
    if y.size < MIN_EXCEEDANCES:
        raise GpdFitError(f"need at least {MIN_EXCEEDANCES} exceedances, got {y.size}")
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise GpdFitError("excesses must be finite and positive")
    if np.ptp(y) == 0:
        raise GpdFitError("all excesses are equal; the GPD fit is degenerate")
    scale = y.mean()
    z = y / scale

    def nll(v):
        ll = _loglik(z, math.exp(v[0]), v[1])
        return 1e100 if not np.isfinite(ll) else -ll

    def nll_grad(v):
        sigma = math.exp(v[0])
        if not np.isfinite(_loglik(z, sigma, v[1])):
            return np.zeros(2)
        g, _ = _derivatives(z, sigma, v[1])
        return -np.array([g[0] * sigma, g[1]])

    sigma0, xi0 = _pwm_start(z)
    res = minimize(
        nll,
        x0=[math.log(sigma0), xi0],
        jac=nll_grad,
        method="L-BFGS-B",
        bounds=[(None, None), (XI_BOX[0] + 1e-9, XI_BOX[1] - 1e-9)],
        options={"maxiter": 500, "gtol": 1e-12, "ftol": 1e-15},
    )
    sigma, xi = math.exp(res.x[0]), float(res.x[1])
    best = _loglik(z, sigma, xi)
    # The line search above can stall where 1 + xi y / sigma approaches 0;
    # damped Newton steps (gradient steps where H is not negative definite)
    # finish the climb from wherever it stopped.
    for _ in range(max_iter):
        g, H = _derivatives(z, sigma, xi)
        if np.max(np.abs(g)) < tol:
            break
        if np.all(np.linalg.eigvalsh(H) < 0):
            step = np.linalg.solve(H, -g)
        else:
            step = g / np.maximum(np.abs(np.diag(H)), 1.0)
        moved = False
        for _ in range(60):
            cand = (sigma + step[0], xi + step[1])
            inside = cand[0] > 0 and XI_BOX[0] < cand[1] < XI_BOX[1]
            ll = _loglik(z, *cand) if inside else -math.inf
            if ll >= best:
                sigma, xi, best, moved = cand[0], cand[1], ll, True
                break
            step = 0.5 * step
        if not moved:
            break
    g, H = _derivatives(z, sigma, xi)
    boundary = min(xi - XI_BOX[0], XI_BOX[1] - xi) < 1e-6
    if not np.isfinite(best) or (np.max(np.abs(g)) > 1e-6 * z.size and not boundary):
        raise GpdFitError(
            f"GPD fit did not converge (gradient {np.max(np.abs(g)):.3g})",
            last=(xi, sigma * scale),
        )
    if abs(xi) < EXP_BRANCH:
        xi, sigma = 0.0, float(z.mean())
        best = _loglik(z, sigma, 0.0)
        _, H = _derivatives(z, sigma, 0.0)
    info = -H[::-1, ::-1]  # reorder to (xi, sigma)
    try:
        vcov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise GpdFitError("observed information is singular", last=(xi, sigma * scale)) from exc
    D = np.array([1.0, scale])
    vcov = vcov * np.outer(D, D)
    vcov.flags.writeable = False
    return GpdFit(
        xi=float(xi),
        sigma=float(sigma * scale),
        u=float(u),
        n_exceed=int(y.size),
        loglik=float(best - y.size * math.log(scale)),
        vcov=vcov,
    )


def gpd_survival(x, sigma: float, xi: float):
    """``(1 + xi x / sigma)_+^(-1/xi)``, or ``exp(-x / sigma)`` in the limit."""
    x = np.asarray(x, dtype=float)
    if abs(xi) < EXP_BRANCH:
        return np.exp(-x / sigma)
    s = np.maximum(1.0 + xi * x / sigma, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(s > 0, s ** (-1.0 / xi), 0.0)


def _log_survival_grad(x: float, sigma: float, xi: float) -> np.ndarray:
    """d log S / d(xi, sigma) at excess ``x``."""
    a = x / sigma
    if abs(xi) < EXP_BRANCH:
        return np.array([0.5 * a * a, a / sigma])
    s = 1.0 + xi * a
    if s <= 0:
        return np.zeros(2)
    return np.array([math.log1p(xi * a) / xi**2 - a / (xi * s), a / (sigma * s)])


def pot_tail(sample, T: float, u_quantile: float = 0.8, level: float = 0.95) -> tuple[TailInterval, GpdFit]:
    """Tail probability ``P(X > T)`` from a GPD fit above the ``u_quantile`` point.

    ``p = zeta * S(T - u)`` with ``zeta`` the exceedance fraction. The interval
    is the delta method on ``(zeta, xi, sigma)`` with binomial variance for
    ``zeta``, clamped to ``[0, 1]``.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if not 0 < u_quantile < 1:
        raise ValueError("u_quantile must lie in (0, 1)")
    u = float(np.quantile(x, u_quantile))
    if T < u:
        raise ValueError(f"threshold T={T} lies below the POT threshold u={u}")
    exc = x[x > u] - u
    fit = fit_gpd(exc, u=u)
    n, k = x.size, exc.size
    zeta = k / n
    excess = T - u
    surv = float(gpd_survival(excess, fit.sigma, fit.xi))
    p_hat = zeta * surv
    g = _log_survival_grad(excess, fit.sigma, fit.xi)
    rel_var = (1.0 - zeta) / (n * zeta) + float(g @ fit.vcov @ g)
    var = p_hat**2 * rel_var
    half = z_upper(level) * math.sqrt(var)
    interval = TailInterval(
        point=p_hat,
        lower=max(0.0, p_hat - half),
        upper=min(1.0, p_hat + half),
        level=level,
        variance=var,
    )
    return interval, fit
