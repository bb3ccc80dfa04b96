"""Derivative oracles and Newton pipeline checks.

Gradients and Hessians are compared against central finite differences of the
scalar energy; the twin relaxation values are frozen from converged runs.
"""

import numpy as np
import pytest
import scipy.sparse

from chaingen import random_chain
from twinchain.energy import chain_energy
from twinchain.lattice import affine_chain, check_admissible, reconstruct
from twinchain.minimize import (
    ChainProblem,
    MinimizeOptions,
    gradient,
    hessian,
    laminate_chain,
    newton_minimize,
    preoptimize_middle,
    twin_chain,
)
from twinchain.wells import build_wells


@pytest.fixture(scope="module")
def wells():
    return build_wells(np.sqrt(2.0))


def fd_gradient(problem, x, step=1e-6):
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        g[k] = (problem.energy(x + e) - problem.energy(x - e)) / (2 * step)
    return g


def fd_hessian(problem, x, step=1e-6):
    h = np.empty((x.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        h[k] = (problem.gradient(x + e) - problem.gradient(x - e)) / (2 * step)
    return 0.5 * (h + h.T)


class TestDerivatives:
    @pytest.mark.parametrize("variable_tau", [False, True])
    def test_gradient_matches_fd(self, rng, variable_tau):
        chain = random_chain(rng, n=8, dtheta=0.05 if variable_tau else 0.0)
        problem = ChainProblem(chain, variable_tau=variable_tau)
        x = problem.pack(chain)
        g = problem.gradient(x)
        g_fd = fd_gradient(problem, x)
        assert np.abs(g - g_fd).max() <= 1e-5 * (1.0 + np.abs(g).max())

    @pytest.mark.parametrize("variable_tau", [False, True])
    def test_hessian_matches_fd(self, rng, variable_tau):
        chain = random_chain(rng, n=8, dtheta=0.05 if variable_tau else 0.0)
        problem = ChainProblem(chain, variable_tau=variable_tau)
        x = problem.pack(chain)
        h = problem.hessian_dense(x)
        h_fd = fd_hessian(problem, x)
        assert np.abs(h - h_fd).max() <= 1e-4 * (1.0 + np.abs(h).max())

    def test_hessian_symmetric(self, rng):
        chain = random_chain(rng, n=8, dtheta=0.05)
        problem = ChainProblem(chain, variable_tau=True)
        h = problem.hessian_dense(problem.pack(chain))
        assert np.abs(h - h.T).max() < 1e-9 * (1.0 + np.abs(h).max())

    def test_banded_matches_dense(self, rng):
        for variable_tau in (False, True):
            chain = random_chain(rng, n=6, dtheta=0.05)
            problem = ChainProblem(chain, variable_tau=variable_tau)
            x = problem.pack(chain)
            h = problem.hessian_dense(x)
            ab, bw = problem.hessian_banded(x)
            assert ab.shape == (bw + 1, x.size)
            assert np.abs(np.diag(h, k=bw + 1)).max() == 0.0  # band is tight
            for d in range(bw + 1):
                assert np.array_equal(ab[bw - d, d:], np.diag(h, k=d))

    def test_energy_matches_breakdown(self, rng):
        chain = random_chain(rng, n=7, dtheta=0.05)
        problem = ChainProblem(chain, variable_tau=True)
        assert problem.energy(problem.pack(chain)) == pytest.approx(
            chain_energy(chain).total, rel=1e-14)

    def test_pack_apply_round_trip(self, rng):
        chain = random_chain(rng, n=6, dtheta=0.05)
        problem = ChainProblem(chain, variable_tau=True)
        back = problem.apply(problem.pack(chain))
        assert np.array_equal(back.u, chain.u)
        assert np.array_equal(back.theta, chain.theta)

    def test_module_level_wrappers(self, wells):
        chain = affine_chain(6, wells, wells.U0)
        g = gradient(chain)
        assert np.abs(g).max() < 1e-11  # exact minimizer, rounding only
        H = hessian(chain)
        assert scipy.sparse.issparse(H)
        d = H - H.T
        assert abs(d).max() < 1e-9 if d.nnz else True


class TestNewton:
    def test_affine_well_is_a_fixed_point(self, wells):
        report = newton_minimize(affine_chain(8, wells, wells.U0))
        assert report.converged and report.iterations == 0
        assert report.stop_reason == "gradient"
        assert chain_energy(report.final_chain).total < 1e-20

    def test_twin_relaxation_small(self, wells):
        report = newton_minimize(twin_chain(8, wells))
        assert report.converged
        assert report.admissibility_violations == 0
        e = np.asarray(report.energy_history)
        assert (np.diff(e) <= 1e-12).all()
        assert check_admissible(reconstruct(report.final_chain)) == []
        final = chain_energy(report.final_chain).rescaled
        assert final == pytest.approx(31.408826, abs=1e-4)

    def test_twin_relaxation_medium(self, wells):
        report = newton_minimize(twin_chain(40, wells))
        assert report.converged
        final = chain_energy(report.final_chain).rescaled
        assert final == pytest.approx(29.013329, abs=1e-4)

    def test_gradient_small_at_solution(self, wells):
        report = newton_minimize(twin_chain(8, wells))
        assert np.abs(gradient(report.final_chain)).max() < 1e-8

    def test_report_histories_align(self, wells):
        report = newton_minimize(twin_chain(8, wells))
        assert len(report.energy_history) == report.iterations + 1
        assert len(report.grad_norm_history) == report.iterations + 1

    def test_max_iters_stops_honestly(self, wells):
        opts = MinimizeOptions(max_iters=1, grad_tol=1e-16)
        report = newton_minimize(twin_chain(8, wells), opts)
        assert not report.converged
        assert report.stop_reason == "max iterations"
        assert report.iterations == 1


class TestPreoptimize:
    def test_middle_atom_descends(self, wells):
        raw = twin_chain(40, wells)
        tuned = preoptimize_middle(raw)
        before = chain_energy(raw).rescaled
        after = chain_energy(tuned).rescaled
        assert after < before
        assert after == pytest.approx(37.2219, abs=1e-3)
        # clamps and every other atom untouched
        k = raw.geometry.atom_index(0)
        mask = np.ones(len(raw.u), dtype=bool)
        mask[k] = False
        assert np.array_equal(tuned.u[mask], raw.u[mask])


class TestConstructors:
    def test_twin_interface_can_shift(self, wells):
        chain = twin_chain(8, wells, interface_column=2)
        assert check_admissible(reconstruct(chain)) == []
        bd = chain_energy(chain)
        hot = np.nonzero(bd.col_sums > 1e-12)[0]
        assert list(hot) == [bd.n + 2]

    def test_twin_interface_bounds(self, wells):
        with pytest.raises(ValueError):
            twin_chain(8, wells, interface_column=8)
        with pytest.raises(ValueError):
            twin_chain(8, wells, interface_column=-9)

    def test_laminate_variants_symmetric(self, wells):
        e = []
        for variant in (0, 1):
            chain = laminate_chain(20, wells, 0.5, variant=variant)
            assert check_admissible(reconstruct(chain)) == []
            e.append(chain_energy(chain).rescaled)
        assert e[0] == pytest.approx(116.444768, abs=1e-4)
        assert e[0] == pytest.approx(e[1], rel=1e-12)

    def test_laminate_relaxes(self, wells):
        chain = laminate_chain(20, wells, 0.5)
        report = newton_minimize(chain)
        assert report.converged
        assert chain_energy(report.final_chain).total < chain_energy(chain).total

    def test_laminate_fraction_validated(self, wells):
        with pytest.raises(ValueError):
            laminate_chain(20, wells, 0.0)
        with pytest.raises(ValueError):
            laminate_chain(20, wells, 1.0)


class TestOptions:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            MinimizeOptions(grad_tol=0.0)
        with pytest.raises(ValueError):
            MinimizeOptions(backtrack=1.0)
        with pytest.raises(ValueError):
            MinimizeOptions(hessian_regularization=-1.0)
