import math

import numpy as np
import pytest

from expanderlab.geometry import (
    ConformalTorusMetric,
    HomogeneousMetric,
    ModelSpaceMetric,
    curvature,
    curvature_conformal,
    curvature_homogeneous,
    curvature_model_space,
    curvature_operator_nonneg,
    hessian_covariant,
    integrate,
    laplacian,
    model_from_json,
    model_to_json,
    soliton_residual_sq,
    volume,
)
from oracles import koszul_ricci

HEISENBERG = (1.0, 0.0, 0.0)
SU2 = (2.0, 2.0, 2.0)


def torus(n=32, amp=0.0, lx=1.0, ly=1.0):
    x = (np.arange(n) * lx / n)[:, None]
    phi = amp * np.sin(2 * math.pi * x / lx) * np.ones((n, n))
    return ConformalTorusMetric(phi=phi, periods=(lx, ly))


def test_abelian_is_flat():
    m = HomogeneousMetric((0.0, 0.0, 0.0), (1.3, 0.7, 2.2))
    data = curvature_homogeneous(m)
    assert np.max(np.abs(data.ricci)) == 0.0
    assert data.scalar == 0.0


def test_heisenberg_matches_koszul_oracle():
    m = HomogeneousMetric(HEISENBERG, (1.0, 1.0, 1.0))
    data = curvature_homogeneous(m)
    oracle = koszul_ricci(HEISENBERG, m.diag)
    off = oracle - np.diag(np.diag(oracle))
    assert np.max(np.abs(off)) < 1e-12
    assert np.max(np.abs(np.diag(oracle) - data.ricci)) < 1e-6


def test_su2_round_sphere_cross_check():
    # bracket coefficients (2,2,2) at diag (1,1,1) give the unit round 3-sphere
    m = HomogeneousMetric(SU2, (1.0, 1.0, 1.0))
    data = curvature_homogeneous(m)
    assert np.max(np.abs(data.ricci - 2.0)) < 1e-12  # Ricci = 2 g
    assert abs(data.scalar - 6.0) < 1e-12
    model = ModelSpaceMetric(dim=3, sectional_sign=1, scale=1.0)
    model_data = curvature_model_space(model)
    assert abs(model_data.ricci - 2.0) < 1e-15
    assert abs(model_data.scalar - data.scalar) < 1e-12


def test_koszul_agreement_on_random_samples():
    rng = np.random.default_rng(17)
    for _ in range(50):
        c = tuple(rng.uniform(-2.0, 2.0, size=3))
        diag = tuple(rng.uniform(0.2, 3.0, size=3))
        m = HomogeneousMetric(c, diag)
        data = curvature_homogeneous(m)
        oracle = koszul_ricci(c, diag)
        off = oracle - np.diag(np.diag(oracle))
        assert np.max(np.abs(off)) < 1e-10
        scale = np.max(np.abs(np.diag(oracle))) + 1e-12
        assert np.max(np.abs(np.diag(oracle) - data.ricci)) / scale < 1e-5


def test_conformal_constant_phi_flat():
    m = torus(16, amp=0.0)
    assert np.max(np.abs(curvature_conformal(m).scalar)) == 0.0


def test_conformal_linearized_curvature():
    eps, n, lx = 1e-4, 64, 1.0
    m = torus(n, amp=eps, lx=lx)
    x = (np.arange(n) / n * lx)[:, None]
    want = 2 * eps * (2 * math.pi / lx) ** 2 * np.sin(2 * math.pi * x / lx) * np.ones((n, n))
    got = curvature_conformal(m).scalar
    h = lx / n
    # linearization error O(eps^2) plus stencil error O(h^2) on the eps-scale
    assert np.max(np.abs(got - want)) < 10 * eps * (eps + h * h) * (2 * math.pi) ** 2


def test_conformal_curvature_second_order_convergence():
    # high-resolution oracle: N=512 values sampled down to coarse grids
    def smooth_phi(n):
        x = (np.arange(n) / n)[:, None]
        y = (np.arange(n) / n)[None, :]
        return 0.2 * np.sin(2 * math.pi * x) * np.cos(4 * math.pi * y) + 0.1 * np.cos(
            2 * math.pi * y
        ) * np.ones((n, n))

    n_fine = 512
    fine = curvature_conformal(ConformalTorusMetric(smooth_phi(n_fine))).scalar
    errs = []
    for n in (32, 64):
        coarse = curvature_conformal(ConformalTorusMetric(smooth_phi(n))).scalar
        stride = n_fine // n
        errs.append(np.max(np.abs(coarse - fine[::stride, ::stride])))
    order = math.log2(errs[0] / errs[1])
    assert order > 1.8


def test_volume_examples():
    assert abs(volume(torus(16, 0.0)) - 1.0) < 1e-12
    assert abs(volume(HomogeneousMetric(SU2, (1.0, 1.0, 1.0), frame_volume=2.5)) - 2.5) < 1e-12
    m = ModelSpaceMetric(dim=3, sectional_sign=-1, scale=1.7, base_volume=0.9)
    assert abs(volume(m) - 1.7**1.5 * 0.9) < 1e-12


def test_volume_scaling_law():
    rng = np.random.default_rng(3)
    for _ in range(10):
        alpha = float(rng.uniform(0.5, 3.0))
        m = ModelSpaceMetric(dim=4, sectional_sign=-1, scale=1.0, base_volume=2.0)
        scaled = ModelSpaceMetric(dim=4, sectional_sign=-1, scale=alpha, base_volume=2.0)
        assert abs(volume(scaled) - alpha ** (4 / 2) * volume(m)) < 1e-12 * volume(scaled)
    # conformal scaling: g -> alpha*g means phi -> phi + log(alpha)/2
    base = torus(16, 0.1)
    alpha = 1.7
    scaled = ConformalTorusMetric(base.phi + 0.5 * math.log(alpha), base.periods)
    assert abs(volume(scaled) - alpha * volume(base)) < 1e-12 * volume(scaled)


def test_laplacian_examples():
    m = torus(64, 0.0)
    assert laplacian(HomogeneousMetric(SU2, (1, 1, 1)), 3.7) == 0.0
    n = 64
    x = (np.arange(n) / n)[:, None] * np.ones((n, n))
    f = np.sin(2 * math.pi * x)
    got = laplacian(m, f)
    want = -((2 * math.pi) ** 2) * f
    assert np.max(np.abs(got - want)) < (2 * math.pi) ** 4 / (n * n)


def test_laplacian_integrates_to_zero():
    # divergence theorem on the closed torus, discrete summation by parts
    rng = np.random.default_rng(8)
    m = torus(32, 0.15)
    x = (np.arange(32) / 32)[:, None]
    y = (np.arange(32) / 32)[None, :]
    f = np.sin(2 * math.pi * x) * np.cos(2 * math.pi * y) + 0.3 * rng.random((32, 32))
    assert abs(integrate(m, laplacian(m, f))) < 1e-10


def test_laplacian_shape_mismatch():
    with pytest.raises(ValueError):
        laplacian(torus(16), np.zeros((8, 8)))


def test_curvature_operator_sign():
    assert curvature_operator_nonneg(ModelSpaceMetric(3, 1, 1.0))
    assert not curvature_operator_nonneg(ModelSpaceMetric(3, -1, 1.0))
    assert curvature_operator_nonneg(torus(16, 0.0))  # flat boundary case
    assert not curvature_operator_nonneg(torus(32, 0.2))
    assert curvature_operator_nonneg(HomogeneousMetric(SU2, (1.0, 1.0, 1.0)))
    assert not curvature_operator_nonneg(HomogeneousMetric(HEISENBERG, (1.0, 1.0, 1.0)))


def test_trace_and_cauchy_schwarz_invariants():
    rng = np.random.default_rng(23)
    models = [
        HomogeneousMetric(tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(0.3, 2.5, 3)))
        for _ in range(10)
    ]
    models += [ModelSpaceMetric(3, -1, 1.4), ModelSpaceMetric(5, 1, 0.6), torus(32, 0.25)]
    for m in models:
        data = curvature(m)
        n = m.dim
        if isinstance(m, HomogeneousMetric):
            trace = float(np.sum(np.asarray(data.ricci) / np.asarray(m.diag)))
            assert abs(trace - data.scalar) < 1e-12 * (1 + abs(data.scalar))
        r_sq = np.asarray(data.scalar) ** 2
        bound = n * np.asarray(data.ricci_norm_sq)
        assert np.all(r_sq <= bound + 1e-12 * (1 + np.max(bound)))


def test_soliton_residual_vanishes_on_matched_scale():
    # Ricci + g/(2 sigma) = 0 exactly when sigma = -scale/(2 rho0)
    m = ModelSpaceMetric(dim=3, sectional_sign=-1, scale=2.0)
    sigma = -m.scale / (2.0 * m.rho0)
    assert soliton_residual_sq(m, 0.0, sigma) < 1e-28
    assert soliton_residual_sq(m, 0.0, 2 * sigma) > 1e-3


def test_hessian_covariant_flat_quadratic():
    # flat metric: covariant Hessian of a smooth periodic field matches
    # coordinate second derivatives
    n = 64
    m = torus(n, 0.0)
    x = (np.arange(n) / n)[:, None] * np.ones((n, n))
    f = np.cos(2 * math.pi * x)
    hxx, hxy, hyy = hessian_covariant(m, f)
    assert np.max(np.abs(hxx + (2 * math.pi) ** 2 * f)) < (2 * math.pi) ** 4 / n**2
    assert np.max(np.abs(hxy)) < 1e-10
    assert np.max(np.abs(hyy)) < 1e-10


def test_model_json_round_trip():
    models = [
        HomogeneousMetric(HEISENBERG, (1.0, 2.0, 3.0), 1.5),
        torus(16, 0.1),
        ModelSpaceMetric(3, -1, 1.0, 1.0),
    ]
    for m in models:
        doc = model_to_json(m)
        m2 = model_from_json(doc)
        assert type(m2) is type(m)
        assert abs(volume(m2) - volume(m)) < 1e-12
