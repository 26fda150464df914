"""Model dimensions, prior specification and identification restrictions.

The state vector stacks the current factors and their first p lags, so the
static state dimension is always s = r(p + 1).  Priors follow a conjugate
layout: per-equation Gaussian loadings scaled by an inverse-chi-square
noise variance, a matrix-normal transition block, and a Gaussian origin
state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions of the factor model: n series, r factors, p loading lags."""

    n: int
    r: int
    p: int

    def __post_init__(self):
        if self.n < 1 or self.r < 1 or self.p < 0:
            raise DomainError("require n >= 1, r >= 1, p >= 0")

    @property
    def s(self) -> int:
        """Static state dimension r(p + 1)."""
        return self.r * (self.p + 1)


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters.

    Attributes
    ----------
    loading_prec : (s, s) PSD precision of each loading row (given its
        noise variance).
    trans_prec : (s, s) PSD column precision of the transition block.
    init_state_cov : (s, s) PD covariance of the origin state.
    noise_df : (n,) positive prior degrees of freedom of the noise variances.
    noise_scale : (n,) positive prior scales of the noise variances.
    """

    loading_prec: np.ndarray
    trans_prec: np.ndarray
    init_state_cov: np.ndarray
    noise_df: np.ndarray
    noise_scale: np.ndarray


def minnesota_prior(
    spec: ModelSpec,
    eta_lambda: float = 1.0,
    eta_phi: float = 1.0,
    ell_lambda: float = 2.0,
    ell_phi: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal shrinkage precisions with overall tightness and lag decay.

    Returns the pair (loading precision, transition precision).  Each is
    block diagonal with one scalar per lag block: lag block k (zero-based)
    carries weight eta * (k + 1)**ell on all r of its diagonal entries, so
    within each lag block the entries are equal.  Both matrices are
    diagonal, which keeps the prior invariant under factor rotations.

    Raises
    ------
    DomainError
        If an overall tightness is not positive or a lag decay is <= 1.
    """
    if eta_lambda <= 0 or eta_phi <= 0:
        raise DomainError("overall shrinkage parameters must be positive")
    if ell_lambda <= 1 or ell_phi <= 1:
        raise DomainError("lag-decay parameters must exceed 1")
    lags = np.arange(1, spec.p + 2, dtype=float)
    v_inv = eta_lambda * np.kron(np.diag(lags**ell_lambda), np.eye(spec.r))
    w_inv = eta_phi * np.kron(np.diag(lags**ell_phi), np.eye(spec.r))
    return v_inv, w_inv


def default_prior(
    spec: ModelSpec,
    eta_lambda: float = 1.0,
    eta_phi: float = 1.0,
    ell_lambda: float = 2.0,
    ell_phi: float = 2.0,
    nu: float = 1.0,
    tau2: float = 1.0,
) -> PriorSpec:
    """Minnesota precisions, identity origin covariance, unit noise prior."""
    v_inv, w_inv = minnesota_prior(spec, eta_lambda, eta_phi, ell_lambda, ell_phi)
    return validate_prior(
        PriorSpec(
            loading_prec=v_inv,
            trans_prec=w_inv,
            init_state_cov=np.eye(spec.s),
            noise_df=np.full(spec.n, float(nu)),
            noise_scale=np.full(spec.n, float(tau2)),
        ),
        spec,
    )


def validate_prior(prior: PriorSpec, spec: ModelSpec) -> PriorSpec:
    """Check dimensions and definiteness, returning a normalized copy.

    Symmetry is enforced by averaging with the transpose.  PSD of the
    precisions is verified through an eigenvalue bound and PD of the origin
    covariance through a Cholesky factorization.  Improper priors (zero
    degrees of freedom or scales) are rejected since they leave the
    objective undefined.
    """
    s, n = spec.s, spec.n
    v_inv = np.asarray(prior.loading_prec, dtype=float)
    w_inv = np.asarray(prior.trans_prec, dtype=float)
    f0 = np.asarray(prior.init_state_cov, dtype=float)
    nu = np.asarray(prior.noise_df, dtype=float)
    tau2 = np.asarray(prior.noise_scale, dtype=float)
    for name, mat in (("loading_prec", v_inv), ("trans_prec", w_inv), ("init_state_cov", f0)):
        if mat.shape != (s, s):
            raise DomainError(f"{name} must be {s} x {s}, got {mat.shape}")
    if nu.shape != (n,) or tau2.shape != (n,):
        raise DomainError(f"noise_df and noise_scale must have length {n}")
    if np.any(nu <= 0) or np.any(tau2 <= 0):
        raise DomainError(
            "noise_df and noise_scale must be strictly positive; "
            "improper priors leave the objective undefined"
        )
    v_inv = 0.5 * (v_inv + v_inv.T)
    w_inv = 0.5 * (w_inv + w_inv.T)
    f0 = 0.5 * (f0 + f0.T)
    tol = 1e-10 * max(1.0, float(np.abs(v_inv).max()), float(np.abs(w_inv).max()))
    if np.linalg.eigvalsh(v_inv).min() < -tol:
        raise DomainError("loading_prec is not positive semidefinite")
    if np.linalg.eigvalsh(w_inv).min() < -tol:
        raise DomainError("trans_prec is not positive semidefinite")
    try:
        np.linalg.cholesky(f0)
    except np.linalg.LinAlgError:
        raise DomainError("init_state_cov is not positive definite") from None
    return PriorSpec(
        loading_prec=v_inv,
        trans_prec=w_inv,
        init_state_cov=f0,
        noise_df=nu,
        noise_scale=tau2,
    )


@dataclass(frozen=True)
class Restrictions:
    """Loading restrictions pinning the factor rotation.

    ``free[i, k]`` is False where the loading of variable i on state
    coordinate k is constrained to zero; ``positive`` lists (variable,
    state coordinate) pairs whose loading must be positive.
    """

    free: np.ndarray
    positive: tuple[tuple[int, int], ...]

    def __post_init__(self):
        free = np.asarray(self.free, dtype=bool).copy()
        free.flags.writeable = False
        object.__setattr__(self, "free", free)
        object.__setattr__(
            self, "positive", tuple((int(i), int(k)) for i, k in self.positive)
        )


def identification_restrictions(
    spec: ModelSpec, anchors: list[tuple[int, int]]
) -> Restrictions:
    """Anchor-variable identification scheme.

    Each (variable, factor) anchor zeroes all loadings of that variable
    except its contemporaneous loading on the anchored factor, and
    constrains that loading to be positive.  One anchor per factor pins the
    rotation up to nothing at all (sign flips included).
    """
    free = np.ones((spec.n, spec.s), dtype=bool)
    positive = []
    seen_factors = set()
    for var, fac in anchors:
        if not (0 <= var < spec.n) or not (0 <= fac < spec.r):
            raise DomainError(f"anchor ({var}, {fac}) out of range")
        if fac in seen_factors:
            raise DomainError(f"factor {fac} anchored more than once")
        seen_factors.add(fac)
        free[var, :] = False
        free[var, fac] = True
        positive.append((var, fac))
    return Restrictions(free=free, positive=tuple(positive))


def apply_factor_sign_flips(
    loading_matrix: np.ndarray,
    trans_matrix: np.ndarray,
    flips: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Flip the signs of selected factors in loading and transition blocks.

    ``flips`` is a length-r boolean vector.  Sign flips are orthogonal
    rotations applied blockwise over lags, so they leave the likelihood
    and any diagonal, per-block-equal prior unchanged.
    """
    r = flips.shape[0]
    s = loading_matrix.shape[1]
    signs = np.ones(s)
    for j in range(r):
        if flips[j]:
            signs[j::r] = -1.0
    lam = loading_matrix * signs
    phi = trans_matrix * signs  # column rotation
    phi = phi * signs[:r, None]  # row rotation
    return lam, phi


def state_sign_vector(flips: np.ndarray, s: int) -> np.ndarray:
    """Signs applied to state coordinates under the given factor flips."""
    r = flips.shape[0]
    signs = np.ones(s)
    for j in range(r):
        if flips[j]:
            signs[j::r] = -1.0
    return signs
