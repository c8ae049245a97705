"""Defect parts, their assembly and the split of constant-coefficient operators."""

import numpy as np
import pytest

from convexint.defect import (
    PART_NAMES,
    DiffOperator,
    assemble_defect,
    combine_parts,
    part_norms,
    variant_operator,
)
from convexint.mikado import build_blocks
from convexint.perturbation import BlockContext, SpaceCutoff, TimeCutoff, build_perturbations
from convexint.scheme import SchemeConfig, initial_data, step
from convexint.spectral_calculus import divergence
from convexint.torus_field import GridSpec, lp_norm
from convexint.verify import TestFunctionFamily, weak_residual

DELTA, SIGMA, ETA, LAM = 0.25, 0.25, 0.5, 2


@pytest.fixture(scope="module")
def setup(exps3):
    cfg = SchemeConfig(exps3, GridSpec(3, 32, 33))
    st0 = initial_data(cfg.target, cfg.grid, cfg.eps_tilde)
    blocks = build_blocks(16, exps3)
    ctx = BlockContext(blocks, 32, LAM)
    pert = build_perturbations(st0.rho, None, st0.R, ETA, LAM, blocks, TimeCutoff(SIGMA),
                               SpaceCutoff(DELTA, 3), times=st0.times, dR0=st0.dR, ctx=ctx)
    R1, parts = assemble_defect(st0, pert, ctx=ctx)
    return cfg, st0, pert, R1, parts


def new_state(st0, pert):
    rho1 = st0.rho + pert.theta + pert.theta_c[:, None, None, None]
    u1 = pert.w + pert.w_c
    return rho1, u1


class TestAssembly:
    def test_unchanged_where_cutoff_vanishes(self, setup):
        _, st0, pert, R1, _ = setup
        off = (pert.psi(st0.times) == 0.0) & (pert.psi.derivative(st0.times) == 0.0)
        assert np.any(off)
        for i in np.flatnonzero(off):
            np.testing.assert_allclose(R1[i], st0.R[i], rtol=0, atol=1e-15)

    def test_R_psi_vanishes_on_interval(self, setup):
        _, st0, _, _, parts = setup
        inside = (st0.times > SIGMA) & (st0.times < 1 - SIGMA)
        assert np.all(parts.norms["R_psi"][inside] == 0.0)

    def test_R_chi_bound(self, setup):
        _, _, _, _, parts = setup
        assert np.all(parts.norms["R_chi"] <= DELTA / 2)

    def test_part_report(self, setup):
        _, st0, _, _, parts = setup
        rep = part_norms(parts, DELTA, SIGMA, st0.R_norms())
        assert rep.passed, rep.summary()

    def test_parts_sum_to_defect(self, setup):
        _, st0, _, R1, parts = setup
        i = len(st0.times) // 2
        fields = {name: parts.fields[name][i] for name in PART_NAMES}
        np.testing.assert_allclose(combine_parts(fields), R1[i], atol=1e-12)

    def test_divergence_identity_per_slice(self, setup):
        # d_t rho1 + div(rho1 u1) = -div R1, with d_t rho1 = d_t rho0 + dtheta
        _, st0, pert, R1, _ = setup
        rho1, u1 = new_state(st0, pert)
        i = len(st0.times) // 2
        drho0 = -divergence(np.asarray(st0.R[i]))
        lhs = drho0 + pert.dtheta[i] + divergence(rho1[i] * u1[i])
        rhs = -divergence(np.asarray(R1[i]))
        assert lp_norm(lhs - rhs, 2) <= 1e-9 * lp_norm(rhs, 2)

    def test_weak_residual_small(self, setup):
        _, st0, pert, R1, _ = setup
        rho1, u1 = new_state(st0, pert)
        res = weak_residual(rho1, u1, R1, TestFunctionFamily(3, 20, seed=1), st0.times)
        assert res <= 1e-6

    def test_matches_step(self, setup):
        cfg, st0, _, R1, _ = setup
        new = step(st0, ETA, DELTA, SIGMA, LAM, 4.0, cfg)
        np.testing.assert_allclose(new.R, R1, rtol=0, atol=1e-10 * np.max(np.abs(R1)))


class TestDiffOperator:
    @pytest.fixture
    def f(self):
        x = GridSpec(3, 32).coords()
        out = np.cos(2 * np.pi * x[0]) * np.sin(4 * np.pi * x[1]) + 0.5 * np.cos(2 * np.pi * x[2])
        return np.broadcast_to(out, (32,) * 3).copy()

    @pytest.mark.parametrize("op", [DiffOperator.laplacian(3), DiffOperator.pure_powers(3, 3),
                                    DiffOperator((((1, 1, 0), 2.0), ((0, 0, 2), -1.0)))])
    def test_split(self, f, op):
        lhs = divergence(op.split(f))
        assert lp_norm(lhs - op.apply(f), 2) <= 1e-10 * lp_norm(op.apply(f), 2)

    def test_laplacian_symbol(self, f):
        from convexint.spectral_calculus import laplacian
        np.testing.assert_allclose(DiffOperator.laplacian(3).apply(f), laplacian(f), atol=1e-9)

    def test_adjoint(self, f):
        op = DiffOperator.pure_powers(3, 3)
        g = np.roll(f, 5, axis=0) ** 2
        assert np.mean(op.apply(f) * g) == pytest.approx(np.mean(f * op.adjoint_apply(g)),
                                                         abs=1e-8)

    def test_order_and_variants(self):
        assert DiffOperator.pure_powers(4, 3).order == 3
        assert variant_operator("transport", 3) is None
        assert variant_operator("diffusion", 3).order == 2
        assert variant_operator("higher_order", 3, k=4).order == 4
