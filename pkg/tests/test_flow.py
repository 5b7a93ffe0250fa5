import math

import numpy as np
import pytest

from expanderlab.flow import (
    BlowdownSpec,
    blowdown,
    check_R_lower_bound,
    evolve,
    scaled_volume,
)
from expanderlab.geometry import (
    ConformalTorusMetric,
    HomogeneousMetric,
    ModelSpaceMetric,
    curvature,
    integrate,
    volume,
)

HYPERBOLIC3 = ModelSpaceMetric(dim=3, sectional_sign=-1, scale=1.0, base_volume=1.0)
SPHERE3 = ModelSpaceMetric(dim=3, sectional_sign=1, scale=1.0, base_volume=1.0)


def sine_torus(n=32, amp=0.3):
    x = (np.arange(n) / n)[:, None]
    return ConformalTorusMetric(amp * np.sin(2 * math.pi * x) * np.ones((n, n)))


def test_hyperbolic_scale_exact():
    h = evolve(HYPERBOLIC3, (0.0, 10.0))
    ts = np.linspace(0.0, 10.0, 23)
    for t in ts:
        assert abs(h.metric_at(t).scale - (1.0 + 4.0 * t)) < 1e-12
    assert h.extinct_at is None
    assert abs(h.birth_time - (-0.25)) < 1e-15


def test_round_sphere_extinction():
    h = evolve(SPHERE3, (0.0, 1.0))
    assert h.extinct_at is not None
    assert abs(h.extinct_at - 0.25) < 1e-12
    t = 0.2
    assert abs(h.metric_at(t).scale - (1.0 - 4.0 * t)) < 1e-12


def test_torus_constant_phi_static():
    m0 = ConformalTorusMetric(np.full((16, 16), 0.37))
    h = evolve(m0, (0.0, 0.01))
    assert np.max(np.abs(h.metric_at(0.01).phi - 0.37)) < 1e-13


def test_torus_flow_decays_and_conserves_volume():
    m0 = sine_torus(32, 0.3)
    h = evolve(m0, (0.0, 0.05))
    v0, v1 = h.volume_at(0.0), h.volume_at(0.05)
    # closed surface of zero Euler characteristic: total curvature zero,
    # so the volume is constant along the flow up to the O(dt^2) stepping drift
    assert abs(v1 - v0) < 5e-5 * v0
    amp0 = np.max(np.abs(h.metric_at(0.0).phi))
    amp1 = np.max(np.abs(h.metric_at(0.05).phi))
    assert amp1 < 0.35 * amp0


def test_dV_dt_equals_minus_total_curvature():
    h = evolve(HomogeneousMetric((1.0, 0.0, 0.0), (1.0, 1.0, 1.0)), (0.0, 2.0))
    for t in (0.3, 1.0, 1.7):
        d = 1e-5
        dv = (h.volume_at(t + d) - h.volume_at(t - d)) / (2 * d)
        m = h.metric_at(t)
        total_r = integrate(m, curvature(m).scalar)
        assert abs(dv + total_r) < 1e-6 * (1 + abs(total_r))


def test_einstein_initial_data_stays_einstein():
    h = evolve(HomogeneousMetric((2.0, 2.0, 2.0), (1.0, 1.0, 1.0)), (0.0, 0.2))
    for t in (0.05, 0.1, 0.18):
        m = h.metric_at(t)
        rho = np.asarray(curvature(m).ricci) / np.asarray(m.diag)
        assert np.max(rho) - np.min(rho) < 1e-8
        # matches the round model-space law a(t) = 1 - 4t
        assert abs(m.diag[0] - (1.0 - 4.0 * t)) < 1e-9


def test_su2_flow_halts_at_extinction():
    h = evolve(HomogeneousMetric((2.0, 2.0, 2.0), (1.0, 1.0, 1.0)), (0.0, 1.0))
    assert h.extinct_at is not None
    assert abs(h.extinct_at - 0.25) < 1e-3


def test_scaled_volume_hyperbolic():
    h = evolve(HYPERBOLIC3, (0.0, 20.0))
    want = (41.0 / 10.0) ** 1.5
    assert abs(scaled_volume(h, 10.0) - want) < 1e-12
    # nonincreasing at the sampled grid
    ts = np.linspace(0.5, 20.0, 40)
    vals = [scaled_volume(h, t) for t in ts]
    assert all(b <= a + 1e-10 for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        scaled_volume(h, 0.0)


def test_scaled_volume_static_flat_decreasing():
    m0 = ConformalTorusMetric(np.zeros((16, 16)))
    h = evolve(m0, (0.0, 0.05))
    ts = np.linspace(0.005, 0.05, 12)
    vals = [scaled_volume(h, t) for t in ts]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_scaled_volume_nonincreasing_on_testbeds():
    histories = [
        evolve(HYPERBOLIC3, (0.0, 5.0)),
        evolve(HomogeneousMetric((1.0, 0.0, 0.0), (1.0, 1.0, 1.0)), (0.0, 5.0)),
        evolve(sine_torus(16, 0.2), (0.0, 0.04)),
    ]
    for h in histories:
        ts = np.linspace(max(h.t_min, 1e-2 * h.t_max) + 1e-9, h.t_max, 25)
        vals = [scaled_volume(h, t) for t in ts]
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(vals, vals[1:]))


def test_R_lower_bound_reports():
    for h in (
        evolve(HYPERBOLIC3, (0.0, 10.0)),
        evolve(sine_torus(32, 0.3), (0.0, 0.03)),
        evolve(HomogeneousMetric((1.0, 0.0, 0.0), (1.0, 1.0, 1.0)), (0.0, 3.0)),
    ):
        rep = check_R_lower_bound(h, tol=1e-8)
        assert rep.ok, f"{h.kind}: min margin {rep.margins.min()}"


def test_blowdown_scale_algebra():
    h = evolve(HYPERBOLIC3, (0.0, 40.0))
    bd = blowdown(h, BlowdownSpec(alpha=8.0))
    for t in (0.5, 1.0, 4.0):
        assert abs(scaled_volume(bd, t) - scaled_volume(h, 8.0 * t)) < 1e-10
        # rescaled metric: a_alpha(t) = (1 + 4 alpha t)/alpha
        assert abs(bd.metric_at(t).scale - (1.0 + 32.0 * t) / 8.0) < 1e-10


def test_blowdown_flat_static_collapses():
    m0 = ConformalTorusMetric(np.zeros((16, 16)))
    h = evolve(m0, (0.0, 1e-2))
    bd = blowdown(h, BlowdownSpec(alpha=4.0))
    assert abs(volume(bd.metric_at(1e-3)) - 1.0 / 4.0) < 1e-12


def test_blowdown_requires_alpha_geq_one():
    with pytest.raises(ValueError):
        BlowdownSpec(alpha=0.5)


def test_export_csv(tmp_path):
    h = evolve(HYPERBOLIC3, (0.0, 1.0), n_snapshots=5)
    out = tmp_path / "hist.csv"
    h.export_csv(out)
    text = out.read_text()
    assert text.splitlines()[0] == "t,a,V,R_min,R_max"
    assert len(text.splitlines()) == 6
