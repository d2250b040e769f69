"""Semiparametric density ratio model fitted by empirical likelihood.

A reference sample with unknown density ``g`` is pooled with ``m`` further
samples whose densities satisfy ``g_j(x) / g(x) = exp(alpha_j + beta_j' h(x))``.
Profiling the empirical likelihood over the point masses leaves a concave
function of ``(alpha, beta)`` that has the same form as a multinomial logistic
log-likelihood with offsets ``log rho_j``, which is what the Newton solver below
maximizes.

Everything is written against a batch axis so that many fused samples sharing
the same reference can be fitted in one vectorized pass. Reductions only ever
run along the observation axis of a single row, so the numbers produced for a
row do not depend on which other rows happen to share its batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "GAMMA_TILT",
    "CovarianceError",
    "DomainError",
    "DrmError",
    "DrmFit",
    "FusedSample",
    "SingularHessianError",
    "TailInterval",
    "TiltSpec",
    "covariance_components",
    "covariance_ghat",
    "estimate_cdf",
    "fit_drm",
    "fit_tail_bounds",
    "profile_loglik",
    "tail_ci",
    "tilt_eval",
    "z_upper",
]


class DrmError(Exception):
    """Base class for density ratio model failures."""


class DomainError(DrmError, ValueError):
    """An observation lies outside the domain of the tilt function."""


class SingularHessianError(DrmError):
    """The profile likelihood has no unique maximizer for these data."""


class CovarianceError(DrmError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


@dataclass(frozen=True)
class TiltSpec:
    """Known tilt function ``h`` of the density ratio model.

    Only the gamma tilt ``h(x) = (x, log x)`` is implemented; ``kind`` is the
    extension point for others.
    """

    kind: str = "gamma"

    def __post_init__(self):
        if self.kind != "gamma":
            raise ValueError(f"unsupported tilt kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return 2

    def check_domain(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        bad = ~(x > 0)
        if bad.any():
            first = x[bad].ravel()[0]
            raise DomainError(
                f"gamma tilt needs positive observations; got {first!r} "
                f"({int(bad.sum())} offending value(s))"
            )

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self.check_domain(x)
        return np.stack([x, np.log(x)], axis=-1)


GAMMA_TILT = TiltSpec()


def tilt_eval(spec: TiltSpec, x: float) -> np.ndarray:
    """Evaluate ``h(x)``; raises :class:`DomainError` for ``x <= 0``."""
    return spec(x)


@dataclass(frozen=True)
class FusedSample:
    """A reference sample plus ``m`` fusion samples.

    The augmented vector ``t`` concatenates the samples in order; ``labels``
    records the sample of origin (0 for the reference).
    """

    reference: np.ndarray
    fusion_samples: tuple[np.ndarray, ...]

    def __init__(self, reference, fusion_samples: Sequence | np.ndarray):
        if isinstance(fusion_samples, np.ndarray) and fusion_samples.ndim == 1:
            fusion_samples = [fusion_samples]
        elif len(fusion_samples) and all(np.ndim(f) == 0 for f in fusion_samples):
            # a flat list of numbers is one sample, not many singletons
            fusion_samples = [fusion_samples]
        ref = np.ascontiguousarray(reference, dtype=float).ravel()
        fus = tuple(np.ascontiguousarray(f, dtype=float).ravel() for f in fusion_samples)
        if ref.size == 0 or not fus or any(f.size == 0 for f in fus):
            raise ValueError("every sample in a fused sample needs at least one observation")
        for arr in (ref, *fus):
            if not np.all(np.isfinite(arr)):
                raise ValueError("fused samples must be finite")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "fusion_samples", fus)

    @property
    def m(self) -> int:
        return len(self.fusion_samples)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([self.reference.size] + [f.size for f in self.fusion_samples])

    @property
    def n0(self) -> int:
        return int(self.reference.size)

    @property
    def n(self) -> int:
        return int(self.sizes.sum())

    @property
    def rho(self) -> np.ndarray:
        return self.sizes[1:] / self.n0

    @property
    def t(self) -> np.ndarray:
        return np.concatenate((self.reference, *self.fusion_samples))

    @property
    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.m + 1), self.sizes)


@dataclass
class DrmFit:
    """Fitted tilt parameters and the implied point masses on the pooled data.

    ``alpha`` has shape ``(m,)`` and ``beta`` shape ``(m, r)``, both on the
    scale of the original observations. ``masses`` are ``dG(t_i)``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    masses: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    grad_norm: float
    spec: TiltSpec = GAMMA_TILT
    # affine standardization of h used by the solver; the covariance is
    # evaluated in these coordinates for conditioning.
    center: np.ndarray = field(default=None, repr=False)
    scale: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_params(cls, sample: FusedSample, alpha, beta, spec: TiltSpec = GAMMA_TILT) -> "DrmFit":
        """Build a fit object at arbitrary parameters (e.g. forced to zero)."""
        alpha = np.asarray(alpha, dtype=float).reshape(sample.m)
        beta = np.asarray(beta, dtype=float).reshape(sample.m, spec.dim)
        h = spec(sample.t)
        center, scale = _standardization(h[None])
        return cls(
            alpha=alpha,
            beta=beta,
            masses=_masses(sample, alpha, beta, h),
            loglik=profile_loglik(sample, alpha, beta, spec),
            converged=True,
            iterations=0,
            grad_norm=float("nan"),
            spec=spec,
            center=center[0],
            scale=scale[0],
        )


@dataclass(frozen=True)
class TailInterval:
    point: float
    lower: float
    upper: float
    level: float
    variance: float


def z_upper(level: float) -> float:
    """Upper ``(1 - level)/2`` standard normal point."""
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return float(ndtri(0.5 + 0.5 * level))


# ---------------------------------------------------------------------------
# batched solver


def _standardization(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    center = h.mean(axis=1)
    scale = h.std(axis=1)
    return center, scale


def _design(h: np.ndarray, center: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Standardized design ``(1, (h - c)/s)`` with shape ``(R, n, 1 + r)``."""
    z = (h - center[:, None, :]) / scale[:, None, :]
    ones = np.ones(z.shape[:-1] + (1,))
    return np.concatenate((ones, z), axis=-1)


def _eta_logd(theta: np.ndarray, X: np.ndarray, log_rho: np.ndarray):
    """Linear predictors ``(R, m, n)`` and ``log D`` ``(R, n)``."""
    eta = np.einsum("rnq,rmq->rmn", X, theta)
    terms = eta + log_rho[None, :, None]
    if terms.shape[1] == 1:
        logd = np.logaddexp(0.0, terms[:, 0, :])
    else:
        top = np.maximum(terms.max(axis=1), 0.0)
        logd = top + np.log(np.exp(-top) + np.exp(terms - top[:, None, :]).sum(axis=1))
    return eta, logd


def _objective(theta, X, log_rho, suff):
    _, logd = _eta_logd(theta, X, log_rho)
    return np.einsum("rmq,rmq->r", theta, suff) - logd.sum(axis=1)


def _grad_hess(theta, X, log_rho, suff):
    eta, logd = _eta_logd(theta, X, log_rho)
    q = np.exp(eta + log_rho[None, :, None] - logd[:, None, :])  # (R, m, n)
    R, m, _ = q.shape
    k = X.shape[-1]
    grad = suff - np.einsum("rmn,rnq->rmq", q, X)
    # -H_{jk} = sum_i (delta_jk q_ij - q_ij q_ik) x_i x_i'
    xx = np.einsum("rna,rnb->rnab", X, X)
    hess = np.zeros((R, m, k, m, k))
    for j in range(m):
        for l in range(m):
            wgt = q[:, j, :] * ((1.0 if j == l else 0.0) - q[:, l, :])
            hess[:, j, :, l, :] = -np.einsum("rn,rnab->rab", wgt, xx)
    return grad, hess.reshape(R, m * k, m * k), q, logd


@dataclass
class _BatchResult:
    theta: np.ndarray  # standardized coordinates, (R, m, 1 + r)
    converged: np.ndarray
    iterations: np.ndarray
    grad_norm: np.ndarray
    objective: np.ndarray
    failed: np.ndarray  # numerical breakdown (singular Newton system)


_QUADRATIC_REGION = 1e-10


def _newton(X, labels, log_rho, tol, max_iter) -> _BatchResult:
    R, n, k = X.shape
    m = log_rho.size
    suff = np.stack([X[:, labels == j + 1, :].sum(axis=1) for j in range(m)], axis=1)
    theta = np.zeros((R, m, k))
    iterations = np.zeros(R, dtype=int)
    failed = np.zeros(R, dtype=bool)
    active = np.ones(R, dtype=bool)
    grad, hess, _, logd = _grad_hess(theta, X, log_rho, suff)
    obj = np.einsum("rmq,rmq->r", theta, suff) - logd.sum(axis=1)
    gnorm = np.abs(grad).reshape(R, -1).max(axis=1)
    for _ in range(max_iter):
        active &= (gnorm >= tol) & ~failed
        if not active.any():
            break
        idx = np.flatnonzero(active)
        g = grad[idx].reshape(idx.size, -1)
        try:
            step = np.linalg.solve(-hess[idx], g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.zeros_like(g)
            for pos, r in enumerate(idx):
                try:
                    step[pos] = np.linalg.solve(-hess[r], g[pos])
                except np.linalg.LinAlgError:
                    failed[r] = True
        ok = ~failed[idx]
        idx, g, step = idx[ok], g[ok], step[ok]
        if idx.size == 0:
            continue
        step = step.reshape(idx.size, m, k)
        # Newton decrement; below this the objective change is under the
        # resolution of its own rounding, so the full step is taken.
        slope = np.einsum("rq,rq->r", g, step.reshape(idx.size, -1))
        t = np.ones(idx.size)
        base = obj[idx]
        Xa, sa = X[idx], suff[idx]
        new_theta = theta[idx] + step
        new_obj = _objective(new_theta, Xa, log_rho, sa)
        quadratic = slope < _QUADRATIC_REGION
        for _ in range(60):
            bad = ~(new_obj >= base + 1e-4 * t * slope) & ~quadratic
            if not bad.any():
                break
            t[bad] *= 0.5
            new_theta[bad] = theta[idx[bad]] + t[bad, None, None] * step[bad]
            new_obj[bad] = _objective(new_theta[bad], Xa[bad], log_rho, sa[bad])
        # a step that cannot improve the objective means we are at the
        # floating point floor; keep the iterate and report the gradient.
        stalled = ~(new_obj >= base) & ~quadratic
        moved = idx[~stalled]
        theta[moved] = new_theta[~stalled]
        iterations[idx] += 1
        if moved.size:
            gr, hs, _, ld = _grad_hess(theta[moved], X[moved], log_rho, suff[moved])
            grad[moved], hess[moved] = gr, hs
            obj[moved] = np.einsum("rmq,rmq->r", theta[moved], suff[moved]) - ld.sum(axis=1)
            gnorm[moved] = np.abs(gr).reshape(moved.size, -1).max(axis=1)
        if stalled.any():
            active[idx[stalled]] = False
    return _BatchResult(
        theta=theta,
        converged=(gnorm < tol) & ~failed,
        iterations=iterations,
        grad_norm=gnorm,
        objective=obj,
        failed=failed,
    )


def _to_original(theta, center, scale):
    """Map standardized ``(alpha~, beta~)`` back to the scale of ``h``."""
    beta = theta[..., 1:] / scale[:, None, :]
    alpha = theta[..., 0] - np.einsum("rmk,rk->rm", beta, center)
    return alpha, beta


def _masses(sample: FusedSample, alpha, beta, h) -> np.ndarray:
    eta = alpha[:, None] + beta @ h.T  # (m, n)
    terms = eta + np.log(sample.rho)[:, None]
    top = np.maximum(terms.max(axis=0), 0.0)
    logd = top + np.log(np.exp(-top) + np.exp(terms - top).sum(axis=0))
    return np.exp(-np.log(sample.n0) - logd)


def profile_loglik(sample: FusedSample, alpha, beta, spec: TiltSpec = GAMMA_TILT) -> float:
    """Empirical log-likelihood with the masses profiled out.

    Equals ``sum log p_i + sum_j sum_{x in X_j} (alpha_j + beta_j' h(x))`` with
    ``p_i = 1 / (n0 (1 + sum_j rho_j w_j(t_i)))``.
    """
    alpha = np.asarray(alpha, dtype=float).reshape(sample.m)
    beta = np.asarray(beta, dtype=float).reshape(sample.m, spec.dim)
    h = spec(sample.t)
    p = _masses(sample, alpha, beta, h)
    labels = sample.labels
    tilt = sum(
        float(np.sum(alpha[j] + h[labels == j + 1] @ beta[j])) for j in range(sample.m)
    )
    return float(np.sum(np.log(p)) + tilt)


def fit_drm(
    sample: FusedSample,
    spec: TiltSpec = GAMMA_TILT,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> DrmFit:
    """Maximize the profile empirical likelihood of the density ratio model.

    Newton's method with backtracking, started at ``alpha = beta = 0``. The
    gradient norm (max-abs, in standardized tilt coordinates) decides
    convergence. A non-converged fit is returned with ``converged=False`` and
    the last iterate rather than raised.

    Raises
    ------
    DomainError
        If an observation lies outside the tilt's domain.
    SingularHessianError
        If the pooled data are degenerate (e.g. all observations identical).
    """
    h = spec(sample.t)[None]
    center, scale = _standardization(h)
    if not np.all(scale > 0):
        raise SingularHessianError("pooled observations are all identical; Hessian is singular")
    X = _design(h, center, scale)
    res = _newton(X, sample.labels, np.log(sample.rho), tol, max_iter)
    if res.failed[0]:
        raise SingularHessianError("Newton system became singular")
    alpha, beta = _to_original(res.theta, center, scale)
    alpha, beta = alpha[0], beta[0]
    return DrmFit(
        alpha=alpha,
        beta=beta,
        masses=_masses(sample, alpha, beta, h[0]),
        loglik=float(res.objective[0] - sample.n * np.log(sample.n0)),
        converged=bool(res.converged[0]),
        iterations=int(res.iterations[0]),
        grad_norm=float(res.grad_norm[0]),
        spec=spec,
        center=center[0],
        scale=scale[0],
    )


def estimate_cdf(fit: DrmFit, sample: FusedSample, t: float) -> float:
    """Reference CDF estimate: total mass of pooled points ``<= t``."""
    return float(np.sum(fit.masses[sample.t <= t]))


# ---------------------------------------------------------------------------
# asymptotic covariance of G-hat


@dataclass(frozen=True)
class CovarianceComponents:
    A_bar: np.ndarray  # (m,)
    B_bar: np.ndarray  # (m * r,), original h scale
    S: np.ndarray  # (m (1 + r), m (1 + r)), standardized coordinates
    rho_diag: np.ndarray  # (m, m)


def _q_matrix(fit: DrmFit, sample: FusedSample, h: np.ndarray) -> np.ndarray:
    """``q_ij = rho_j w_j(t_i) / D_i`` with shape ``(m, n)``."""
    w = np.exp(fit.alpha[:, None] + fit.beta @ h.T)
    return sample.rho[:, None] * w * (sample.n0 * fit.masses)[None, :]


def _info_matrix(q: np.ndarray, X: np.ndarray, n: int) -> np.ndarray:
    m, k = q.shape[0], X.shape[1]
    xx = np.einsum("na,nb->nab", X, X)
    S = np.zeros((m, k, m, k))
    for j in range(m):
        for l in range(m):
            wgt = q[j] * ((1.0 if j == l else 0.0) - q[l])
            S[j, :, l, :] = np.einsum("n,nab->ab", wgt, xx)
    return S.reshape(m * k, m * k) / n


def covariance_components(fit: DrmFit, sample: FusedSample, t: float) -> CovarianceComponents:
    """Plug-in ``A_j(t)``, ``B_j(t)`` and the information matrix ``S``."""
    h = fit.spec(sample.t)
    q = _q_matrix(fit, sample, h)
    ind = sample.t <= t
    wd = q / sample.rho[:, None]  # w_j / D
    A = (fit.masses * ind * wd).sum(axis=1)
    B = np.einsum("n,mn,nr->mr", fit.masses * ind, wd, h).ravel()
    X = _design(h[None], fit.center[None], fit.scale[None])[0]
    S = _info_matrix(q, X, sample.n)
    return CovarianceComponents(A_bar=A, B_bar=B, S=S, rho_diag=np.diag(sample.rho))


def _cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        with np.errstate(all="ignore"):
            cond = float(np.linalg.cond(S))
        raise CovarianceError("information matrix S is not positive definite", cond) from None


def covariance_ghat(fit: DrmFit, sample: FusedSample, t: float, s: float) -> float:
    """Plug-in ``Cov{sqrt(n)(G^(t) - G(t)), sqrt(n)(G^(s) - G(s))}``.

    ``S`` is the observed information of the profile log-likelihood divided by
    ``n``; ``A_j``, ``B_j`` and ``G`` are replaced by sums against the fitted
    masses. The quadratic form is evaluated in standardized tilt coordinates,
    where it takes the same value as on the original scale.
    """
    h = fit.spec(sample.t)
    q = _q_matrix(fit, sample, h)
    X = _design(h[None], fit.center[None], fit.scale[None])[0]
    L = _cholesky(_info_matrix(q, X, sample.n))
    p = fit.masses
    lo = min(t, s)
    ind_t, ind_s, ind_lo = sample.t <= t, sample.t <= s, sample.t <= lo
    G = lambda ind: float(np.sum(p[ind]))  # noqa: E731
    rho_a = float(np.sum(p[ind_lo] * q[:, ind_lo].sum(axis=0)))
    v_t = np.einsum("n,mn,nk->mk", p * ind_t, q, X).ravel()
    v_s = np.einsum("n,mn,nk->mk", p * ind_s, q, X).ravel()
    first = (sample.n / sample.n0) * (G(ind_lo) - G(ind_t) * G(ind_s) - rho_a)
    second = float(np.linalg.solve(L, v_s) @ np.linalg.solve(L, v_t))
    return float(first + second)


def tail_ci(fit: DrmFit, sample: FusedSample, T: float, level: float = 0.95) -> TailInterval:
    """Pointwise interval for ``1 - G(T)``, clamped to ``[0, 1]``."""
    z = z_upper(level)
    point = 1.0 - estimate_cdf(fit, sample, T)
    var = max(covariance_ghat(fit, sample, T, T), 0.0)
    half = z * np.sqrt(var / sample.n)
    return TailInterval(
        point=point,
        lower=float(min(max(point - half, 0.0), 1.0)),
        upper=float(min(max(point + half, 0.0), 1.0)),
        level=level,
        variance=var,
    )


# ---------------------------------------------------------------------------
# vectorized path used by repeated fusion


@dataclass
class BatchTail:
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    variance: np.ndarray
    converged: np.ndarray
    grad_norm: np.ndarray


def fit_tail_bounds(
    reference: np.ndarray,
    fusion: np.ndarray,
    T: float,
    level: float = 0.95,
    spec: TiltSpec = GAMMA_TILT,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> BatchTail:
    """Fit one model per row of ``fusion`` (m = 1) and return tail intervals.

    ``fusion`` has shape ``(R, n1)``; each row is fused with the shared
    ``reference``. Rows that fail to converge come back with
    ``converged=False`` and NaN bounds.
    """
    reference = np.asarray(reference, dtype=float)
    fusion = np.atleast_2d(np.asarray(fusion, dtype=float))
    R, n1 = fusion.shape
    n0 = reference.size
    n = n0 + n1
    t = np.concatenate((np.broadcast_to(reference, (R, n0)), fusion), axis=1)
    h = spec(t)
    center, scale = _standardization(h)
    degenerate = ~np.all(scale > 0, axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    X = _design(h, center, scale)
    labels = np.repeat([0, 1], [n0, n1])
    log_rho = np.array([np.log(n1 / n0)])
    res = _newton(X, labels, log_rho, tol, max_iter)
    converged = res.converged & ~degenerate

    eta, logd = _eta_logd(res.theta, X, log_rho)
    q = np.exp(eta[:, 0, :] + log_rho[0] - logd)  # (R, n)
    p = np.exp(-np.log(n0) - logd)
    ind = t <= T
    G = np.sum(p * ind, axis=1)
    rho_a = np.sum(p * q * ind, axis=1)
    v = np.einsum("rn,rnk->rk", p * q * ind, X)
    wgt = q * (1.0 - q)
    S = np.einsum("rn,rna,rnb->rab", wgt, X, X) / n
    quad = np.full(R, np.nan)
    for r in np.flatnonzero(converged):
        try:
            L = np.linalg.cholesky(S[r])
        except np.linalg.LinAlgError:
            converged[r] = False
            continue
        y = np.linalg.solve(L, v[r])
        quad[r] = y @ y
    var = np.maximum((n / n0) * (G - G * G - rho_a) + quad, 0.0)
    point = 1.0 - G
    half = z_upper(level) * np.sqrt(var / n)
    lower = np.clip(point - half, 0.0, 1.0)
    upper = np.clip(point + half, 0.0, 1.0)
    bad = ~converged
    for arr in (point, lower, upper, var):
        arr[bad] = np.nan
    return BatchTail(point, lower, upper, var, converged, res.grad_norm)
