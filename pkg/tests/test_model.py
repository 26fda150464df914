import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from dfmvi.errors import DomainError
from dfmvi.model import (
    ModelSpec,
    PriorSpec,
    apply_factor_sign_flips,
    default_prior,
    identification_restrictions,
    minnesota_prior,
    validate_prior,
)


def test_spec_static_dimension():
    assert ModelSpec(n=5, r=2, p=3).s == 8
    with pytest.raises(DomainError):
        ModelSpec(n=0, r=1, p=0)
    with pytest.raises(DomainError):
        ModelSpec(n=1, r=1, p=-1)


def test_minnesota_single_block():
    v_inv, w_inv = minnesota_prior(ModelSpec(n=1, r=1, p=0), eta_lambda=1.0)
    assert_allclose(v_inv, [[1.0]])
    assert_allclose(w_inv, [[1.0]])


def test_minnesota_lag_decay_blocks():
    v_inv, _ = minnesota_prior(
        ModelSpec(n=1, r=2, p=1), eta_lambda=1.0, ell_lambda=2.0
    )
    assert_allclose(v_inv, np.diag([1.0, 1.0, 4.0, 4.0]))


def test_minnesota_scales_linearly():
    spec = ModelSpec(n=1, r=2, p=2)
    base, _ = minnesota_prior(spec, eta_lambda=1.0)
    scaled, _ = minnesota_prior(spec, eta_lambda=3.5)
    assert_array_equal(scaled, 3.5 * base)


def test_minnesota_domain_errors():
    spec = ModelSpec(n=1, r=1, p=1)
    with pytest.raises(DomainError):
        minnesota_prior(spec, eta_lambda=0.0)
    with pytest.raises(DomainError):
        minnesota_prior(spec, eta_phi=-1.0)
    with pytest.raises(DomainError):
        minnesota_prior(spec, ell_lambda=1.0)


@settings(deadline=None, max_examples=50)
@given(
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=3),
    st.floats(min_value=0.01, max_value=50.0),
    st.floats(min_value=1.001, max_value=6.0),
)
def test_minnesota_diagonal_with_equal_blocks(r, p, eta, ell):
    spec = ModelSpec(n=1, r=r, p=p)
    v_inv, w_inv = minnesota_prior(spec, eta, eta, ell, ell)
    for mat in (v_inv, w_inv):
        assert_array_equal(mat - np.diag(np.diag(mat)), np.zeros_like(mat))
        diag = np.diag(mat)
        for lag in range(p + 1):
            block = diag[lag * r : (lag + 1) * r]
            assert np.all(block == block[0])


def test_validate_prior_accepts_identity(tiny_spec):
    prior = PriorSpec(
        loading_prec=np.eye(1),
        trans_prec=np.eye(1),
        init_state_cov=np.eye(1),
        noise_df=np.ones(2),
        noise_scale=np.ones(2),
    )
    validated = validate_prior(prior, tiny_spec)
    assert_allclose(validated.loading_prec, np.eye(1))


def test_validate_prior_rejects_indefinite_init_cov():
    spec = ModelSpec(n=2, r=2, p=0)
    prior = PriorSpec(
        loading_prec=np.eye(2),
        trans_prec=np.eye(2),
        init_state_cov=np.diag([1.0, -0.5]),
        noise_df=np.ones(2),
        noise_scale=np.ones(2),
    )
    with pytest.raises(DomainError, match="init_state_cov"):
        validate_prior(prior, spec)


def test_validate_prior_symmetrizes_tiny_asymmetry():
    spec = ModelSpec(n=1, r=2, p=0)
    v = np.eye(2)
    v[0, 1] = 1e-14
    prior = PriorSpec(
        loading_prec=v,
        trans_prec=np.eye(2),
        init_state_cov=np.eye(2),
        noise_df=np.ones(1),
        noise_scale=np.ones(1),
    )
    validated = validate_prior(prior, spec)
    assert_array_equal(validated.loading_prec, validated.loading_prec.T)


def test_validate_prior_rejects_improper():
    spec = ModelSpec(n=1, r=1, p=0)
    with pytest.raises(DomainError, match="improper"):
        validate_prior(
            PriorSpec(
                loading_prec=np.eye(1),
                trans_prec=np.eye(1),
                init_state_cov=np.eye(1),
                noise_df=np.zeros(1),
                noise_scale=np.ones(1),
            ),
            spec,
        )


def test_validate_prior_dimension_mismatch():
    spec = ModelSpec(n=1, r=2, p=0)
    with pytest.raises(DomainError, match="loading_prec"):
        validate_prior(
            PriorSpec(
                loading_prec=np.eye(3),
                trans_prec=np.eye(2),
                init_state_cov=np.eye(2),
                noise_df=np.ones(1),
                noise_scale=np.ones(1),
            ),
            spec,
        )


def test_identification_restrictions_anchor_scheme():
    spec = ModelSpec(n=4, r=2, p=1)
    restr = identification_restrictions(spec, [(0, 0), (2, 1)])
    assert restr.free[0].tolist() == [True, False, False, False]
    assert restr.free[2].tolist() == [False, True, False, False]
    assert restr.free[1].all() and restr.free[3].all()
    assert restr.positive == ((0, 0), (2, 1))
    with pytest.raises(DomainError):
        identification_restrictions(spec, [(0, 0), (1, 0)])
    with pytest.raises(DomainError):
        identification_restrictions(spec, [(9, 0)])


def test_sign_flips_preserve_fit():
    rng = np.random.default_rng(5)
    r, p, n = 2, 1, 3
    s = r * (p + 1)
    lam = rng.standard_normal((n, s))
    phi = rng.standard_normal((r, s))
    states = rng.standard_normal((4, s))
    flips = np.array([True, False])
    lam2, phi2 = apply_factor_sign_flips(lam, phi, flips)
    signs = np.ones(s)
    signs[0::r] = -1.0
    # common component and transition dynamics are unchanged
    assert_allclose(lam2 @ (states * signs).T, lam @ states.T)
    assert_allclose(
        (phi2 @ (states * signs).T) * signs[:r, None], phi @ states.T
    )


def test_default_prior_composition():
    spec = ModelSpec(n=3, r=1, p=1)
    prior = default_prior(spec)
    assert_allclose(prior.loading_prec, np.diag([1.0, 4.0]))
    assert_allclose(prior.init_state_cov, np.eye(2))
    assert_allclose(prior.noise_df, np.ones(3))
