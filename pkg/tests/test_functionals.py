import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpdemesh.errors import NonSPDMetric
from mmpdemesh.functionals import (FunctionalSpec, balance_p, coercivity_constants,
                                   coercivity_lower_bound, eval_g, eval_g_value)

SPECS = [FunctionalSpec.winslow(), FunctionalSpec.huang(), FunctionalSpec.huang(2.0, 0.25),
         FunctionalSpec.huang(1.2, 0.5), FunctionalSpec.huang(1.0, 0.0)]


def random_case(rng, d):
    J = rng.standard_normal((d, d)) + 2 * np.eye(d)
    if np.linalg.det(J) < 0:
        J[:, 0] *= -1
    A = rng.standard_normal((d, d))
    M = A.T @ A + 0.5 * np.eye(d)
    return J, float(np.linalg.det(J)), M


def _fd_matrix(f, X, h):
    """Central differences in the scalar-by-matrix layout ``out[i, j] = df/dX[j, i]``."""
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        for j in range(X.shape[1]):
            Xp, Xm = X.copy(), X.copy()
            Xp[j, i] += h
            Xm[j, i] -= h
            out[i, j] = (f(Xp) - f(Xm)) / (2 * h)
    return out


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.p}-{s.theta:.2f}")
@pytest.mark.parametrize("d", [2, 3])
def test_derivatives_match_finite_differences(spec, d):
    rng = np.random.default_rng(17 + d)
    worst = 0.0
    for _ in range(60):
        J, detJ, M = random_case(rng, d)
        der = eval_g(spec, J, detJ, M)
        h = 1e-6
        fJ = _fd_matrix(lambda X: eval_g_value(spec, X, detJ, M), J, h)
        fM = _fd_matrix(lambda X: eval_g_value(spec, J, detJ, X), M, h)
        fdet = (eval_g_value(spec, J, detJ + h, M) - eval_g_value(spec, J, detJ - h, M)) / (2 * h)
        scale = abs(der.G) + 1.0
        worst = max(worst,
                    np.abs(fJ - der.dG_dJ).max() / scale,
                    np.abs(fM - der.dG_dM).max() / scale,
                    abs(fdet - der.dG_ddet) / scale)
        assert np.allclose(der.G, eval_g_value(spec, J, detJ, M), rtol=1e-14)
        assert np.all(der.dG_dx == 0)
    assert worst <= 1e-7


def test_batched_matches_single():
    rng = np.random.default_rng(3)
    cases = [random_case(rng, 3) for _ in range(5)]
    J = np.stack([c[0] for c in cases])
    detJ = np.array([c[1] for c in cases])
    M = np.stack([c[2] for c in cases])
    der = eval_g(FunctionalSpec.huang(), J, detJ, M)
    for k, (Jk, dk, Mk) in enumerate(cases):
        one = eval_g(FunctionalSpec.huang(), Jk, dk, Mk)
        np.testing.assert_allclose(der.dG_dJ[k], one.dG_dJ, rtol=1e-13)
        np.testing.assert_allclose(der.dG_dM[k], one.dG_dM, rtol=1e-13)


def test_winslow_identity():
    for d in (2, 3):
        assert eval_g_value(FunctionalSpec.winslow(), np.eye(d), 1.0, np.eye(d)) == d


@pytest.mark.parametrize("d", [2, 3])
def test_huang_half_equals_half_winslow(d):
    rng = np.random.default_rng(d)
    spec = FunctionalSpec.huang(2.0 / d, 0.5)
    for _ in range(20):
        J, detJ, _ = random_case(rng, d)
        I = np.eye(d)
        assert eval_g_value(spec, J, detJ, I) == pytest.approx(
            0.5 * eval_g_value(FunctionalSpec.winslow(), J, detJ, I), rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([2, 3]), st.floats(0.05, 20.0),
       st.floats(1.0, 3.0), st.floats(0.0, 1.0))
def test_huang_metric_scaling_law(seed, d, c, p, theta):
    spec = FunctionalSpec.huang(p, theta)
    J, detJ, M = random_case(np.random.default_rng(seed), d)
    g1 = eval_g_value(spec, J, detJ, c * M)
    g0 = eval_g_value(spec, J, detJ, M)
    assert g1 == pytest.approx(c ** (d * (1 - p) / 2) * g0, rel=1e-11)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([2, 3]), st.floats(0.05, 20.0))
def test_balance_function_scaling(seed, d, c):
    _, _, M = random_case(np.random.default_rng(seed), d)
    for spec in (FunctionalSpec.winslow(), FunctionalSpec.huang()):
        ratio = balance_p(spec, c * M) / balance_p(spec, M)
        expect = c if spec.kind == "winslow" else c ** (d * (spec.p - 1) / 2)
        assert ratio == pytest.approx(expect, rel=1e-11)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([2, 3]), st.floats(1.01, 3.0),
       st.floats(0.01, 0.99))
def test_coercivity_inequality(seed, d, p, theta):
    spec = FunctionalSpec.huang(p, theta)
    rng = np.random.default_rng(seed)
    J, detJ, M = random_case(rng, d)
    J *= rng.uniform(0.1, 10.0)
    detJ = float(np.linalg.det(J))
    w = np.linalg.eigvalsh(M)
    coerc = coercivity_constants(spec, (w[0], w[-1]), d)
    assert coerc is not None and coerc.q == pytest.approx(d * p / 2)
    G = eval_g_value(spec, J, detJ, M)
    assert G >= coercivity_lower_bound(spec, coerc, J, M) * (1 - 1e-12)


def test_coercivity_flags():
    assert coercivity_constants(FunctionalSpec.winslow(), (1, 1), 2) is None
    assert coercivity_constants(FunctionalSpec.huang(1.0, 1 / 3), (1, 1), 2) is None
    assert coercivity_constants(FunctionalSpec.huang(1.5, 0.0), (1, 1), 2) is None
    assert FunctionalSpec.huang(1.5, 1 / 3).is_coercive(3)
    assert FunctionalSpec.huang(1.5).exponent(3) == 2.25


def test_spec_validation_and_config():
    with pytest.raises(ValueError):
        FunctionalSpec.huang(1.5, 1.5)
    with pytest.raises(ValueError):
        FunctionalSpec.huang(-1.0, 0.3)
    with pytest.raises(ValueError):
        FunctionalSpec.huang(0.5, 0.3)
    FunctionalSpec.huang(2 / 3, 0.5)
    with pytest.raises(ValueError):
        FunctionalSpec("laplace")
    for spec in (FunctionalSpec.winslow(), FunctionalSpec.huang(1.7, 0.2)):
        assert FunctionalSpec.from_config(spec.to_config()) == spec
    assert FunctionalSpec.from_config({"type": "huang", "p": 1.5, "theta": 1 / 3}) == \
        FunctionalSpec.huang()


def test_non_spd_metric():
    with pytest.raises(NonSPDMetric):
        eval_g(FunctionalSpec.huang(), np.eye(2), 1.0, np.diag([1.0, -2.0]))
