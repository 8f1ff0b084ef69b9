"""Analytic interference law: overlap geometry, mixtures, outage, MMSE."""

import math

import numpy as np
import pytest

from gfaloha.interference import (DegenerateInputError, InterferenceCdf,
                                  analytic_outage, area_grid, build_base_cdf,
                                  combined_sinr, convolve_cdf, mmse_weights,
                                  offered_load_of, outage_independent,
                                  outage_mrc, outage_mrc_sinr, outage_single,
                                  overlap_area, overlap_ccdf_paper,
                                  overlap_cdf_oracle, overlap_probability,
                                  sinr, solve_offered_load, unconditional_cdf)
from gfaloha.params import InvalidParamsError, SystemParams

P = SystemParams()


def test_sinr_limits():
    assert sinr(0.0, P) == pytest.approx(P.gamma)
    # full overlap of one equal-power interferer: 1/(1 + 1/gamma)
    full = P.W * P.Tp
    assert sinr(full, P) == pytest.approx(1.0 / (1.0 + 1.0 / P.gamma))
    with pytest.raises(InvalidParamsError):
        sinr(-1.0, P)


def test_overlap_area_geometry():
    assert overlap_area(0.0, 0.0, P) == pytest.approx(P.W * P.Tp)
    assert overlap_area(P.Tp, 0.0, P) == 0.0
    assert overlap_area(0.0, P.W, P) == 0.0
    assert overlap_area(0.25, 50.0, P) == pytest.approx(0.25 * 150.0)
    assert overlap_area(-0.25, -50.0, P) == overlap_area(0.25, 50.0, P)


def test_overlap_probability_modes():
    assert overlap_probability(P, "triangular") == 1.0   # 2Fm = W here
    assert overlap_probability(SystemParams(Fm=0.0)) == 1.0
    wide = SystemParams(Fm=200.0)
    assert overlap_probability(wide, "triangular") == pytest.approx(0.75)
    assert overlap_probability(wide, "uniform") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        overlap_probability(P, "gaussian")


def test_closed_form_ccdf_endpoints():
    smax = P.W * P.Tp
    val, clamped = overlap_ccdf_paper(smax, P)
    assert val == pytest.approx(0.0, abs=1e-12)
    assert not clamped
    # the small-s limit W/Fm = 2 exceeds 1, so the clamp must fire
    val, clamped = overlap_ccdf_paper(1e-9, P)
    assert val == 1.0 and clamped
    vals, flags = overlap_ccdf_paper(np.array([1.0, 50.0, smax]), P)
    assert vals.shape == (3,) and flags.shape == (3,)
    assert np.all(np.diff(vals) <= 0)
    with pytest.raises(ValueError):
        overlap_ccdf_paper(2 * smax, P)


def test_cdf_container_invariants():
    grid = np.array([0.0, 1.0, 2.0, 3.0])
    c = InterferenceCdf(grid, np.array([0.0, 1.0, 1.0, 1.0]), {})
    assert c.value_at(0.5) == pytest.approx(0.5)   # linear interpolation
    assert c.value_at(-1.0) == 0.0
    assert c.value_at(99.0) == 1.0
    assert c.pmf().sum() == pytest.approx(1.0)
    with pytest.raises(InvalidParamsError):
        InterferenceCdf(grid + 1.0, np.ones(4), {})      # grid must start at 0
    with pytest.raises(InvalidParamsError):
        InterferenceCdf(grid, np.array([0.5, 0.4, 1.0, 1.0]), {})


def test_convolution_point_masses():
    grid = np.array([0.0, 1.0, 2.0, 3.0])
    delta = lambda k: InterferenceCdf(
        grid, (np.arange(4) >= k).astype(float), {})
    s = convolve_cdf(delta(1), delta(1))
    assert np.allclose(s.cdf, [0.0, 0.0, 1.0, 1.0])
    # mass pushed past the grid folds into the top bin
    s = convolve_cdf(delta(3), delta(2))
    assert np.allclose(s.cdf, [0.0, 0.0, 0.0, 1.0])
    other = InterferenceCdf(np.array([0.0, 2.0, 4.0, 6.0]),
                            np.ones(4), {})
    with pytest.raises(ValueError):
        convolve_cdf(delta(1), other)


def test_oracle_cdf_basics():
    rng = np.random.default_rng(10)
    c = overlap_cdf_oracle(rng, P, samples=100_000)
    assert c.grid[0] == 0.0
    assert c.cdf[-1] == pytest.approx(1.0, abs=1e-3)
    assert 0.99 <= c.meta["overlap_prob"] <= 1.0
    # conditioned on a hit, zero area has no mass
    assert c.value_at(0.0) == pytest.approx(0.0, abs=1e-4)
    wide = SystemParams(Fm=200.0)
    c = overlap_cdf_oracle(np.random.default_rng(11), wide, samples=200_000)
    assert c.meta["overlap_prob"] == pytest.approx(
        overlap_probability(wide, "triangular"), abs=5e-3)


def test_oracle_seed_stability_smoke():
    a = overlap_cdf_oracle(np.random.default_rng(1), P, samples=100_000)
    b = overlap_cdf_oracle(np.random.default_rng(2), P, samples=100_000)
    assert np.max(np.abs(a.cdf - b.cdf)) < 0.02


def test_unconditional_cdf_zero_rate():
    base = build_base_cdf(P, base="paper")
    agg = unconditional_cdf(base, 0.0, P)
    assert agg.value_at(0.0) == pytest.approx(1.0)   # no interferer at all
    with pytest.raises(InvalidParamsError):
        unconditional_cdf(base, -1.0, P)
    with pytest.raises(ValueError):
        unconditional_cdf(base, 1.0, P, mixture="binomial")


def test_mixture_modes_agree_at_low_rate():
    base = build_base_cdf(P, base="paper")
    po_p = outage_single(unconditional_cdf(base, 0.01, P, "poisson"), P)
    po_m = outage_single(unconditional_cdf(base, 0.01, P, "mean-count"), P)
    # mean-count rounds the interferer count to zero here
    assert po_m == 0.0
    assert po_p < 0.02


def test_outage_orderings():
    base = build_base_cdf(P, base="oracle",
                          rng=np.random.default_rng(3), samples=200_000)
    for g in (0.4, 0.8):
        agg = unconditional_cdf(base, g, P)
        po_1 = outage_single(agg, P)
        assert 0.0 <= po_1 <= 1.0
        assert outage_independent(agg, P) == pytest.approx(po_1 ** P.N)
        # the area-sum threshold form over-counts split interference
        assert outage_mrc(agg, P) >= outage_mrc_sinr(agg, P) - 1e-12
        # combining never loses to a single branch
        assert outage_mrc_sinr(agg, P) <= po_1 + 1e-12


def test_outage_monotone_in_rate():
    base = build_base_cdf(P, base="paper")
    pos = [analytic_outage(base, g, P, "mrc") for g in (0.1, 0.4, 1.0, 2.0)]
    assert all(a <= b + 1e-12 for a, b in zip(pos, pos[1:]))


def test_analytic_outage_rejects_unknown_modes():
    base = build_base_cdf(P, base="paper")
    with pytest.raises(ValueError):
        analytic_outage(base, 0.1, P, policy="selection")
    with pytest.raises(ValueError):
        analytic_outage(base, 0.1, P, policy="mrc", mrc_mode="harmonic")


def test_mmse_weights_equal_noise():
    w = mmse_weights(2.0, np.full(4, 0.5))
    assert np.allclose(w, w[0])
    branch = 2.0 / 0.5
    assert combined_sinr(2.0, np.full(4, 0.5), w) == pytest.approx(4 * branch)


def test_mmse_weights_validation():
    with pytest.raises(DegenerateInputError):
        mmse_weights(1.0, [1.0, -1.0])
    with pytest.raises(DegenerateInputError):
        mmse_weights(1.0, [])
    with pytest.raises(InvalidParamsError):
        mmse_weights(-1.0, [1.0])


def test_mmse_favors_clean_branches():
    w = mmse_weights(1.0, np.array([0.1, 10.0]))
    assert w[0] > w[1] > 0.0


def test_offered_load_axis():
    # W/(2Fm+W) halves the replica load at the default geometry
    assert offered_load_of(1.0, P) == pytest.approx(0.25)


def test_solve_offered_load_converges():
    base = build_base_cdf(P, base="paper")
    res = solve_offered_load(0.1, P, base=base)
    assert res.status == "converged"
    assert res.load.g >= P.N * 0.1            # retries only inflate
    assert res.load.g == pytest.approx(P.N * 0.1 / (1.0 - res.po), rel=1e-3)
    res0 = solve_offered_load(0.0, P, base=base)
    assert res0.status == "converged" and res0.po == 0.0


def test_solve_offered_load_overload():
    base = build_base_cdf(P, base="paper")
    res = solve_offered_load(20.0, P, base=base)
    assert res.status == "overload"
    assert res.po >= 1.0 - 1e-6
    with pytest.raises(InvalidParamsError):
        solve_offered_load(-0.1, P, base=base)


def test_area_grid_span():
    g = area_grid(P)
    assert g[0] == 0.0
    assert g[-1] == pytest.approx(P.N * P.W * P.Tp)
