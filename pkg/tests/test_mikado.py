"""Mikado profile, exponent selection and the blocks."""

import dataclasses
import math

import numpy as np
import pytest
from scipy import integrate

from convexint.errors import (
    ConcentrationTooSmall,
    DimensionTooSmall,
    InadmissibleExponents,
)
from convexint.mikado import (
    admissibility_conditions,
    block_norm,
    build_block,
    build_blocks,
    build_profile,
    choose_exponents,
)
from convexint.spectral_calculus import divergence
from convexint.torus_field import lp_norm, separable_lp_norm
from convexint.verify import check_mikado_identities


@pytest.fixture(scope="module")
def transport3():
    return choose_exponents(3, 4 / 3, 1.0)


class TestProfile:
    def test_zero_integral(self):
        assert abs(build_profile(3).integral()) < 1e-12

    def test_unit_square_integral_by_independent_quadrature(self):
        prof = build_profile(3)
        lo, hi = prof.support

        def sq(position):
            val, _ = integrate.quad(lambda s: float(prof.factor(position, 0, np.array([s]))[0]) ** 2,
                                    lo, hi, limit=400, epsabs=1e-15, epsrel=1e-13)
            return val

        assert sq(0) * sq(1) == pytest.approx(1.0, abs=1e-10)
        assert prof.square_integral() == pytest.approx(1.0, abs=1e-10)

    def test_compact_support(self):
        prof = build_profile(4)
        y = np.random.default_rng(0).uniform(0, 1, size=(2000, 3))
        outside = np.any((y < prof.delta0) | (y > 1 - prof.delta0), axis=1)
        assert np.all(prof.evaluate(y[outside]) == 0.0)
        assert np.any(prof.evaluate(y[~outside]) != 0.0)

    def test_dimension_too_small(self):
        with pytest.raises(DimensionTooSmall):
            build_profile(2)

    def test_norm_table_matches_grid_quadrature(self):
        prof = build_profile(3)
        y = (np.arange(4096) + 0.5) / 4096
        f0 = prof.factor(0, 0, y)
        f1 = prof.factor(1, 0, y)
        grid = float(np.mean(np.abs(f0))) * float(np.mean(np.abs(f1)))
        assert prof.norm(0, 1.0) == pytest.approx(grid, rel=1e-6)


class TestExponents:
    def test_worked_example(self, transport3):
        e = transport3
        assert (e.a, e.b) == pytest.approx((1.5, 0.5))
        assert e.gammas["gamma1"] == pytest.approx(0.5)
        assert e.gammas["gamma2"] == pytest.approx(1.5)
        assert e.gammas["gamma3"] == pytest.approx(0.5)
        assert e.gamma == pytest.approx(0.5)
        assert e.a + e.b == pytest.approx(e.d - 1)

    def test_inadmissible_names_inequality(self):
        with pytest.raises(InadmissibleExponents) as info:
            choose_exponents(3, 2.0, 2.0)
        assert "1/p + 1/p~" in info.value.inequality

    def test_diffusion(self):
        e = choose_exponents(5, 1.5, 1.0, variant="diffusion")
        assert e.gammas["gamma4"] == pytest.approx(1 / 3)
        assert e.gamma == pytest.approx(1 / 3)

    def test_diffusion_needs_small_conjugate(self):
        # p' = 3 is not below d - 1 = 2
        with pytest.raises(InadmissibleExponents):
            choose_exponents(3, 1.5, 1.0, variant="diffusion")

    def test_strong_midpoint(self):
        e = choose_exponents(4, 1.5, 1.2, m=0, m_tilde=0, variant="strong")
        lo = max(0.0, 3 * (1 - 1 / 1.2))
        hi = min(3.0, 3 / 1.5)
        assert e.a == pytest.approx(0.5 * (lo + hi))
        assert 0 < e.a < 3 and 0 < e.b < 3
        assert e.s == pytest.approx(3 / e.a)
        assert e.s_prime == pytest.approx(3 / e.b)

    def test_higher_order_bound(self):
        e = choose_exponents(6, 1.2, 1.1, k=2, variant="higher_order")
        assert e.a < e.d - e.k

    def test_higher_order_inadmissible(self):
        # p~ = 2.5 is not below (d-1)/(m~+k-1) = 2
        with pytest.raises(InadmissibleExponents) as info:
            choose_exponents(3, 1.2, 2.5, k=2, variant="higher_order")
        assert "p~ <" in info.value.inequality
        with pytest.raises(InadmissibleExponents):
            choose_exponents(3, 1.2, 1.1, k=1, variant="higher_order")

    def test_variant_spelling(self):
        e = choose_exponents(6, 1.2, 1.1, k=2, variant="higher-order")
        assert e.variant == "higher_order"

    def test_conditions_agree_with_acceptance(self):
        for d, p, pt in [(3, 4 / 3, 1.0), (3, 2.0, 2.0), (4, 1.1, 1.5), (5, 3.0, 1.0)]:
            ok = all(admissibility_conditions(d, p, pt).values())
            try:
                choose_exponents(d, p, pt)
                accepted = True
            except InadmissibleExponents:
                accepted = False
            assert ok == accepted

    def test_constant_M(self, transport3):
        prof = build_profile(3)
        sup0 = prof.norm(0, math.inf)
        expected = 6 * max(sup0, sup0 ** 2, prof.norm(1, math.inf))
        assert transport3.M == pytest.approx(expected)


class TestBlocks:
    def test_concentration_too_small(self, transport3):
        with pytest.raises(ConcentrationTooSmall):
            build_block(1, 4, transport3)
        with pytest.raises(ConcentrationTooSmall):
            build_block(1, 6, transport3)

    def test_direction_range(self, transport3):
        with pytest.raises(ValueError):
            build_block(0, 16, transport3)

    def test_mean_of_product_is_unit_vector(self, transport3):
        cfg = dataclasses.replace(transport3, a=1.0, b=1.0)
        blk = build_block(1, 8, cfg)
        prod = blk.sample(256, kind="density") * blk.field_sample(256)
        means = prod.mean(axis=(1, 2, 3))
        np.testing.assert_allclose(means, [1.0, 0.0, 0.0], atol=1e-10)

    def test_lp_norm_independent_of_mu(self, transport3):
        vals = [block_norm(build_block(2, mu, transport3), 0, transport3.p) for mu in (8, 16, 32)]
        assert np.ptp(vals) < 1e-10
        assert vals[0] == pytest.approx(build_profile(3).norm(0, transport3.p), rel=1e-12)

    def test_divergence_free(self, transport3):
        for blk in build_blocks(8, transport3):
            assert np.max(np.abs(divergence(blk.field_sample(128)))) < 1e-10

    def test_norm_examples(self, transport3):
        blk = build_block(1, 16, transport3)
        prof = build_profile(3)
        assert block_norm(blk, 0, 1) == pytest.approx(prof.norm(0, 1) / 4, rel=1e-14)
        assert block_norm(blk, 0, math.inf) == pytest.approx(prof.norm(0, math.inf) * 16 ** 1.5)

    def test_norm_matches_grid_quadrature(self, transport3):
        blk = build_block(3, 8, transport3)
        # |Theta|^r has kinks, so the rule converges like h^2: use the
        # separable structure for a 2^20-point axis grid ...
        for r in (1.0, 4 / 3, 2.0, 4.0, math.inf):
            quad = separable_lp_norm(blk.factors(2 ** 20), r)
            assert quad == pytest.approx(block_norm(blk, 0, r), rel=1e-6)
        # ... and check the full-grid quadrature agrees at the level its resolution allows
        samples = blk.sample(512)
        assert lp_norm(samples, 2.0) == pytest.approx(block_norm(blk, 0, 2.0), rel=1e-10)
        assert lp_norm(samples, 1.0) == pytest.approx(block_norm(blk, 0, 1.0), rel=1e-3)

    def test_evaluate_matches_samples(self, transport3):
        blk = build_block(2, 16, transport3)
        samples = np.broadcast_to(blk.sample(64), (64,) * 3)
        idx = np.array([[5, 0, 17], [40, 9, 33], [63, 63, 1]])
        pts = idx / 64
        np.testing.assert_allclose(blk.evaluate(pts), samples[tuple(idx.T)], rtol=1e-12, atol=1e-12)

    def test_scaling_law_exact_in_mu(self, transport3):
        prof = build_profile(3)
        for mu in (8, 16, 64, 1000):
            blk = build_block(1, mu, transport3)
            for k in (0, 1, 2):
                for r in (1.0, 2.0, math.inf):
                    rate = transport3.a + k - (0 if math.isinf(r) else 2 / r)
                    assert block_norm(blk, k, r) / prof.norm(k, r) == pytest.approx(mu ** rate,
                                                                                     rel=1e-13)


class TestIdentitySuite:
    def test_passes_for_small_mu(self, transport3):
        rep = check_mikado_identities(transport3, 8, N=2 ** 16)
        assert rep.passed, rep.summary()
        names = {e.name for e in rep.entries}
        assert {"mean(Theta W) = e_j", "disjoint supports", "scaling law", "div W = 0"} <= names

    def test_diffusion_extra_bound(self):
        cfg = choose_exponents(5, 1.5, 1.0, variant="diffusion")
        rep = check_mikado_identities(cfg, 16)
        assert rep.select("||grad Theta||_1")
        assert rep.passed, rep.summary()
