"""Kalman filtering and smoothing over the collapsed factor state space.

The factor density targeted by the variational state update is the
smoothing law of a linear-Gaussian system whose observation vector stacks
the available data rows on top of s pseudo-observations of zero.  The zero
block carries the accumulated parameter-uncertainty precision, so wider
parameter densities shrink the state toward its unconditional mean.

Collapsing projects that (n_t + s)-dimensional observation onto the
s-dimensional GLS summary of the state, which is sufficient for filtering
and much cheaper when n >> s.  This module implements the collapse, the
filter/smoother over the collapsed system, an uncollapsed reference path,
and the decomposition that recovers the full-system log-likelihood from
collapsed quantities.

Conventions: time-major arrays; index t = 0 is the pre-sample state, data
run t = 1..T.  ``y_star[t-1]`` and friends refer to time t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError

_JITTER = 1e-10
_MAX_JITTER_TRIES = 3
_LN2PI = float(np.log(2.0 * np.pi))


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Average a (stack of) square matrices with their transpose."""
    return 0.5 * (a + a.swapaxes(-1, -2))


def chol_factor(a: np.ndarray, context: str = "") -> np.ndarray:
    """Lower Cholesky factor, retrying with diagonal jitter.

    Jitter of 1e-10 is added to the diagonal at most three times before a
    NumericalError is raised with the given context string.
    """
    mat = a
    for attempt in range(_MAX_JITTER_TRIES + 1):
        try:
            return np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            if attempt == _MAX_JITTER_TRIES:
                break
            mat = mat + _JITTER * np.eye(a.shape[-1])
    raise NumericalError(
        f"matrix not positive definite after jitter{': ' + context if context else ''}"
    )


def chol_solve(chol_lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.linalg.cho_solve((chol_lower, True), b, check_finite=False)


def chol_inverse(chol_lower: np.ndarray) -> np.ndarray:
    return chol_solve(chol_lower, np.eye(chol_lower.shape[0]))


def chol_logdet(chol_lower: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol_lower))))


def companion(trans_mean: np.ndarray) -> np.ndarray:
    """Companion-form transition: the r x s block on top, shifted identity below."""
    r, s = trans_mean.shape
    out = np.zeros((s, s))
    out[:r, :] = trans_mean
    if s > r:
        out[r:, : s - r] = np.eye(s - r)
    return out


def state_noise_cov(r: int, s: int) -> np.ndarray:
    """Covariance of the state innovation: identity on the top r coordinates."""
    q = np.zeros((s, s))
    q[:r, :r] = np.eye(r)
    return q


@dataclass(frozen=True)
class CollapsedObservation:
    """One collapsed observation: GLS state summary and its noise covariance."""

    y_star: np.ndarray
    H_star: np.ndarray


@dataclass(frozen=True)
class SsmParams:
    """Collapsed state-space system for one parameter setting.

    ``transition`` is the companion-form matrix, ``init_cov`` the origin
    state covariance after absorbing the transition-uncertainty term, and
    ``y_star``/``H_star`` the per-time collapsed observations.  The logdet
    and remainder-quadratic arrays are byproducts of the collapse reused
    by the objective and by the log-likelihood decomposition.
    """

    transition: np.ndarray  # (s, s)
    init_cov: np.ndarray  # (s, s)
    y_star: np.ndarray  # (T, s)
    H_star: np.ndarray  # (T, s, s)
    r: int
    h_star_logdet: np.ndarray  # (T,)
    sigma_theta_logdet: np.ndarray  # (T,)
    remainder_quads: np.ndarray  # (T,)

    @property
    def T(self) -> int:
        return self.y_star.shape[0]

    @property
    def s(self) -> int:
        return self.transition.shape[0]

    def collapsed(self, t: int) -> CollapsedObservation:
        """Collapsed observation for time t (1-based)."""
        return CollapsedObservation(self.y_star[t - 1], self.H_star[t - 1])


@dataclass(frozen=True)
class FilterResult:
    """Forward-pass output of the collapsed filter."""

    filt_mean: np.ndarray  # (T+1, s), index 0 is the origin state
    filt_cov: np.ndarray  # (T+1, s, s)
    pred_mean: np.ndarray  # (T, s), one-step-ahead mean of state t
    pred_cov: np.ndarray  # (T, s, s)
    innovations: np.ndarray  # (T, s)
    innovation_cov: np.ndarray  # (T, s, s)
    innovation_quads: np.ndarray  # (T,)
    innovation_logdets: np.ndarray  # (T,)
    loglik: float


@dataclass(frozen=True)
class StateMoments:
    """Smoothed state moments plus the filter byproducts behind them.

    ``lag_one[t-1]`` holds E[f_t F_{t-1}'] (top-r rows of the smoothed
    cross second moment) for t = 1..T.
    """

    mean: np.ndarray  # (T+1, s)
    cov: np.ndarray  # (T+1, s, s)
    second_moment: np.ndarray  # (T+1, s, s)
    lag_one: np.ndarray  # (T, r, s)
    innovations: np.ndarray  # (T, s)
    innovation_cov: np.ndarray  # (T, s, s)
    innovation_quads: np.ndarray  # (T,)
    innovation_logdets: np.ndarray  # (T,)
    loglik: float


def build_sigma_theta(
    mask_t: np.ndarray,
    loading_covs: np.ndarray,
    trans_cov: np.ndarray,
    r: int,
    is_last: bool,
) -> np.ndarray:
    """Parameter-uncertainty precision attached to the zero pseudo-observations.

    Sums the loading covariances of the variables available at time t and,
    for every step but the last, adds r times the transition covariance.
    The final step omits the transition term: its contribution is carried
    by the origin state covariance instead.
    """
    out = np.einsum("i,iab->ab", mask_t.astype(float), loading_covs)
    if not is_last:
        out = out + r * trans_cov
    return symmetrize(out)


def collapse_observation(
    y_t: np.ndarray,
    mask_t: np.ndarray,
    loading_mean: np.ndarray,
    noise_prec: np.ndarray,
    sigma_theta_t: np.ndarray,
) -> CollapsedObservation:
    """Collapse one augmented observation to its s-dimensional GLS summary.

    Masked-out entries of ``y_t`` are ignored regardless of content.  The
    returned covariance is the inverse of the total observation precision
    M' A Psi^-1 M + Sigma_theta, symmetrized.

    Raises
    ------
    NumericalError
        If the precision sum is singular, which can only happen when
        sigma_theta_t is singular and no data row is available.
    """
    w = np.where(mask_t, noise_prec, 0.0)
    gram = (loading_mean * w[:, None]).T @ loading_mean
    prec = gram + sigma_theta_t
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "singular collapsed observation precision; use positive definite "
            "priors or trim trailing all-missing time steps"
        ) from None
    rhs = loading_mean.T @ (w * np.where(mask_t, y_t, 0.0))
    y_star = chol_solve(chol, rhs)
    h_star = symmetrize(chol_inverse(chol))
    return CollapsedObservation(y_star=y_star, H_star=h_star)


def remainder_loglik_terms(
    y_t: np.ndarray,
    mask_t: np.ndarray,
    loading_mean: np.ndarray,
    noise_var: np.ndarray,
    sigma_theta_t: np.ndarray,
    y_star_t: np.ndarray,
) -> float:
    """Quadratic form of the residual left over after collapsing time t.

    The residual stacks the available data rows net of their fitted values
    at the GLS summary, and the negated summary itself against the zero
    pseudo-observations; the weights are the corresponding precisions.
    """
    avail = mask_t.astype(bool)
    resid = y_t[avail] - loading_mean[avail] @ y_star_t
    quad = float(np.sum(resid**2 / noise_var[avail]))
    quad += float(y_star_t @ sigma_theta_t @ y_star_t)
    return quad


def build_collapsed_system(
    values: np.ndarray,
    mask: np.ndarray,
    loading_mean: np.ndarray,
    loading_covs: np.ndarray,
    noise_prec: np.ndarray,
    trans_mean: np.ndarray,
    trans_cov: np.ndarray,
    init_state_cov: np.ndarray,
) -> SsmParams:
    """Assemble the collapsed system for a full panel in vectorized form.

    Equivalent to calling :func:`build_sigma_theta` and
    :func:`collapse_observation` per time step, with the collapse
    byproducts (logdets and remainder quadratics) computed along the way.
    """
    T, n = values.shape
    r, s = trans_mean.shape
    maskf = mask.astype(float)
    filled = np.where(mask, values, 0.0)

    weighted_outer = (loading_mean[:, :, None] * loading_mean[:, None, :]) * noise_prec[
        :, None, None
    ]
    gram = np.einsum("ti,iab->tab", maskf, weighted_outer)
    sigma_theta = np.einsum("ti,iab->tab", maskf, loading_covs)
    sigma_theta[:-1] += r * trans_cov
    sigma_theta = symmetrize(sigma_theta)

    prec = gram + sigma_theta
    sign, prec_logdet = np.linalg.slogdet(prec)
    if np.any(sign <= 0) or not np.all(np.isfinite(prec_logdet)):
        bad = int(np.argmax((sign <= 0) | ~np.isfinite(prec_logdet)))
        raise NumericalError(
            f"singular collapsed observation precision at time step {bad + 1}; "
            "use positive definite priors or trim trailing all-missing time steps"
        )
    h_star = symmetrize(np.linalg.inv(prec))
    rhs = (maskf * filled * noise_prec) @ loading_mean
    y_star = np.einsum("tab,tb->ta", h_star, rhs)

    sign_th, sigma_theta_logdet = np.linalg.slogdet(sigma_theta)
    sigma_theta_logdet = np.where(sign_th > 0, sigma_theta_logdet, -np.inf)

    resid = filled - y_star @ loading_mean.T
    quad_data = np.einsum("ti,ti->t", maskf, resid**2 * noise_prec)
    quad_zero = np.einsum("ta,tab,tb->t", y_star, sigma_theta, y_star)

    init_prec = np.linalg.inv(init_state_cov) + r * trans_cov
    init_cov = symmetrize(np.linalg.inv(symmetrize(init_prec)))

    return SsmParams(
        transition=companion(trans_mean),
        init_cov=init_cov,
        y_star=y_star,
        H_star=h_star,
        r=r,
        h_star_logdet=-prec_logdet,
        sigma_theta_logdet=sigma_theta_logdet,
        remainder_quads=quad_data + quad_zero,
    )


def kalman_filter(params: SsmParams) -> FilterResult:
    """Forward pass over the collapsed system.

    The observation matrix is the identity, so the innovation at time t is
    y_star_t minus the one-step state prediction and its covariance is the
    predicted state covariance plus H_star_t.  Covariances are kept
    symmetric with a Joseph-form update.  The returned log-likelihood is
    the standard Gaussian filter expression over the collapsed sequence.
    """
    T, s = params.y_star.shape
    trans = params.transition
    q = state_noise_cov(params.r, s)

    filt_mean = np.zeros((T + 1, s))
    filt_cov = np.zeros((T + 1, s, s))
    pred_mean = np.zeros((T, s))
    pred_cov = np.zeros((T, s, s))
    innovations = np.zeros((T, s))
    innovation_cov = np.zeros((T, s, s))
    quads = np.zeros(T)
    logdets = np.zeros(T)

    filt_cov[0] = symmetrize(params.init_cov)
    eye = np.eye(s)
    loglik = 0.0
    for t in range(1, T + 1):
        a = trans @ filt_mean[t - 1]
        p = symmetrize(trans @ filt_cov[t - 1] @ trans.T + q)
        pred_mean[t - 1] = a
        pred_cov[t - 1] = p

        h = params.H_star[t - 1]
        g = symmetrize(p + h)
        chol = chol_factor(g, context=f"innovation covariance at time step {t}")
        eps = params.y_star[t - 1] - a
        ginv_eps = chol_solve(chol, eps)
        gain = chol_solve(chol, p).T  # K = P G^-1
        filt_mean[t] = a + gain @ eps
        imk = eye - gain
        filt_cov[t] = symmetrize(imk @ p @ imk.T + gain @ h @ gain.T)

        innovations[t - 1] = eps
        innovation_cov[t - 1] = g
        quads[t - 1] = float(eps @ ginv_eps)
        logdets[t - 1] = chol_logdet(chol)
        loglik += -0.5 * (s * _LN2PI + logdets[t - 1] + quads[t - 1])

    return FilterResult(
        filt_mean=filt_mean,
        filt_cov=filt_cov,
        pred_mean=pred_mean,
        pred_cov=pred_cov,
        innovations=innovations,
        innovation_cov=innovation_cov,
        innovation_quads=quads,
        innovation_logdets=logdets,
        loglik=loglik,
    )


def kalman_smoother(filt: FilterResult, params: SsmParams) -> StateMoments:
    """Fixed-interval smoother with lag-one cross second moments.

    The lag-one covariance Cov[F_t, F_{t-1} | data] equals the smoothed
    covariance at t times the transpose of the smoothing gain at t-1, an
    identity that follows from the backward conditional mean being linear
    in the next state; it is validated against a dense joint-Gaussian
    oracle in the tests.
    """
    T, s = params.y_star.shape
    trans = params.transition
    r = params.r

    mean = filt.filt_mean.copy()
    cov = filt.filt_cov.copy()
    lag_one = np.zeros((T, r, s))

    gains = np.zeros((T, s, s))  # gains[t] smooths state t given state t+1
    for t in range(T - 1, -1, -1):
        p_pred = filt.pred_cov[t]
        chol = chol_factor(p_pred, context=f"predicted covariance at time step {t + 1}")
        j = chol_solve(chol, trans @ filt.filt_cov[t]).T
        gains[t] = j
        mean[t] = filt.filt_mean[t] + j @ (mean[t + 1] - filt.pred_mean[t])
        cov[t] = symmetrize(
            filt.filt_cov[t] + j @ (cov[t + 1] - p_pred) @ j.T
        )

    second = symmetrize(cov + mean[:, :, None] * mean[:, None, :])
    for t in range(1, T + 1):
        cross = cov[t] @ gains[t - 1].T + np.outer(mean[t], mean[t - 1])
        lag_one[t - 1] = cross[:r, :]

    return StateMoments(
        mean=mean,
        cov=cov,
        second_moment=second,
        lag_one=lag_one,
        innovations=filt.innovations,
        innovation_cov=filt.innovation_cov,
        innovation_quads=filt.innovation_quads,
        innovation_logdets=filt.innovation_logdets,
        loglik=filt.loglik,
    )


def smooth_collapsed(params: SsmParams) -> StateMoments:
    """Filter and smooth in one call."""
    return kalman_smoother(kalman_filter(params), params)


def decomposed_loglik(
    params: SsmParams, filt: FilterResult, mask: np.ndarray, noise_var: np.ndarray
) -> float:
    """Full-system log-likelihood recovered from collapsed quantities.

    Combines the collapsed-filter log-likelihood with the remainder
    residual part and the change-of-variables determinants of the
    collapse.  Matches the log-likelihood of the uncollapsed augmented
    filter exactly.
    """
    counts = mask.sum(axis=0).astype(float)
    obs_total = float(counts.sum())
    return (
        filt.loglik
        - 0.5 * obs_total * _LN2PI
        - 0.5 * float(params.remainder_quads.sum())
        + 0.5 * float(params.h_star_logdet.sum())
        - 0.5 * float(np.dot(counts, np.log(noise_var)))
        + 0.5 * float(params.sigma_theta_logdet.sum())
    )


def augmented_moments(
    values: np.ndarray,
    mask: np.ndarray,
    loading_mean: np.ndarray,
    loading_covs: np.ndarray,
    noise_var: np.ndarray,
    trans_mean: np.ndarray,
    trans_cov: np.ndarray,
    init_state_cov: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Reference path: filter and smooth the uncollapsed augmented system.

    Stacks, at each time step, the available data rows on the s zero
    pseudo-observations with covariance blockdiag(noise, inverse of the
    parameter-uncertainty precision), and runs a standard filter/smoother.
    Returns (smoothed means, smoothed covariances, lag-one top-r cross
    moments, log-likelihood).  Intended for validation; cost grows with n.
    """
    T, n = values.shape
    r, s = trans_mean.shape
    trans = companion(trans_mean)
    q = state_noise_cov(r, s)

    init_prec = np.linalg.inv(init_state_cov) + r * trans_cov
    p0 = symmetrize(np.linalg.inv(symmetrize(init_prec)))

    filt_mean = np.zeros((T + 1, s))
    filt_cov = np.zeros((T + 1, s, s))
    pred_mean = np.zeros((T, s))
    pred_cov = np.zeros((T, s, s))
    filt_cov[0] = p0
    loglik = 0.0
    for t in range(1, T + 1):
        a = trans @ filt_mean[t - 1]
        p = symmetrize(trans @ filt_cov[t - 1] @ trans.T + q)
        pred_mean[t - 1] = a
        pred_cov[t - 1] = p

        avail = mask[t - 1]
        sigma_theta = build_sigma_theta(avail, loading_covs, trans_cov, r, t == T)
        c = np.vstack([loading_mean[avail], np.eye(s)])
        robs = scipy.linalg.block_diag(
            np.diag(noise_var[avail]), np.linalg.inv(sigma_theta)
        )
        z = np.concatenate([values[t - 1][avail], np.zeros(s)])

        innov = z - c @ a
        g = c @ p @ c.T + robs
        chol = chol_factor(symmetrize(g), context=f"augmented system at time step {t}")
        gain = chol_solve(chol, c @ p).T
        filt_mean[t] = a + gain @ innov
        imkc = np.eye(s) - gain @ c
        filt_cov[t] = symmetrize(imkc @ p @ imkc.T + gain @ robs @ gain.T)
        loglik += -0.5 * (
            z.shape[0] * _LN2PI + chol_logdet(chol) + float(innov @ chol_solve(chol, innov))
        )

    mean = filt_mean.copy()
    cov = filt_cov.copy()
    lag_one = np.zeros((T, r, s))
    gains = np.zeros((T, s, s))
    for t in range(T - 1, -1, -1):
        chol = chol_factor(pred_cov[t], context=f"augmented smoother at time step {t + 1}")
        j = chol_solve(chol, trans @ filt_cov[t]).T
        gains[t] = j
        mean[t] = filt_mean[t] + j @ (mean[t + 1] - pred_mean[t])
        cov[t] = symmetrize(filt_cov[t] + j @ (cov[t + 1] - pred_cov[t]) @ j.T)
    for t in range(1, T + 1):
        cross = cov[t] @ gains[t - 1].T + np.outer(mean[t], mean[t - 1])
        lag_one[t - 1] = cross[:r, :]
    return mean, cov, lag_one, loglik
