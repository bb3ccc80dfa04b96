"""Layer energies, vertical averaging and affine tail splicing."""

import math

import numpy as np
import pytest

from chaingen import random_chain
from twinchain.energy import chain_energy, field_local_grid
from twinchain.gamma import (LayerSpec, TranslatedChain, average_down,
                             cut_and_extend, estimate_EK, estimate_layer,
                             save_layer_estimates, thin_strip_energy)
from twinchain.lattice import affine_chain, check_admissible, reconstruct
from twinchain.minimize import MinimizeOptions, newton_minimize, twin_chain
from twinchain.wells import boundary_gradient, build_wells

# frozen reference: rescaled energy of the relaxed n=100 interface state
MINIMIZER_H1_100 = 28.665439


@pytest.fixture(scope="module")
def wells():
    return build_wells(np.sqrt(2.0))


@pytest.fixture(scope="module")
def f_half(wells):
    return boundary_gradient(wells, 0.5).F


class TestStripAndTranslation:
    def test_full_height_strip_is_the_rescaled_energy(self, wells):
        chain = twin_chain(8, wells)
        bd = chain_energy(chain)
        assert thin_strip_energy(chain, 8) == pytest.approx(bd.rescaled, rel=1e-12)

    def test_view_locals_match_the_field_route(self, rng, wells):
        # independent oracle: site energies straight from reconstructed positions
        chain = random_chain(rng, n=8, du=0.03, dtheta=0.02, wells=wells)
        grid = field_local_grid(reconstruct(chain))
        j0 = 3
        ids = np.arange(-5, 6)
        rows = np.arange(-6, 3)
        view = TranslatedChain(chain=chain, j0=j0)
        got = view.local_grid(ids, rows)
        want = grid[np.ix_(ids + j0 + 8, rows + j0 + 8)]
        assert np.abs(got - want).max() < 1e-10

    def test_generator_row_reproduces_field_positions(self, rng, wells):
        chain = random_chain(rng, n=8, du=0.03, dtheta=0.02, wells=wells)
        field = reconstruct(chain)
        view = TranslatedChain(chain=chain, j0=-2)
        ids = np.arange(-6, 7)
        got = view.generator_row(ids)
        want = field.positions[field.pos_index(ids - 2, -2)]
        assert np.abs(got - want).max() < 1e-12


class TestAverageDown:
    def test_quiet_chain_takes_any_strip(self, wells):
        chain = affine_chain(40, wells, wells.U0)
        res = average_down(chain, 5, 0.01)
        assert res.input_energy < 1e-20
        assert res.strip_energy < 1e-20
        assert res.strip_energy <= res.input_energy + res.epsilon

    def test_uniform_rows_meet_the_bound(self, rng, wells):
        # theta = 0 keeps every row identical; strip averages inflate by
        # about H/(2m), so eps = H/2 leaves room and passes the precondition
        base = twin_chain(40, wells)
        ids = np.arange(-39, 40)
        u = base.u.copy()
        u[base.geometry.atom_index(ids)] += (
            0.002 * base.lam * rng.standard_normal((ids.size, 2)))
        chain = base.with_arrays(u=u)
        H = chain_energy(chain).rescaled
        res = average_down(chain, 5, H / 2)
        assert res.strip_energy <= res.input_energy + res.epsilon
        assert 0 <= res.k
        assert abs(res.j0) <= 35

    def test_row_concentration_leaves_a_cheap_strip(self, wells):
        # an angle kick makes site energies grow with |j|: central strips
        # stay near zero while the full vertical average is large
        base = affine_chain(40, wells, wells.U0)
        theta = base.theta.copy()
        theta[base.geometry.atom_index(0)] = 0.02
        chain = base.with_arrays(theta=theta)
        H = chain_energy(chain).rescaled
        res = average_down(chain, 4, H)
        assert res.strip_energy < 0.05 * H
        assert res.j0 == 0

    def test_strip_energy_matches_the_view(self, rng, wells):
        chain = random_chain(rng, n=12, du=0.02, dtheta=0.01, wells=wells)
        H = chain_energy(chain).rescaled
        res = average_down(chain, 3, H)
        ids = np.arange(-12, 13)
        rows = np.arange(-3, 4)
        direct = float(res.view.local_grid(ids, rows).sum()) / 3
        assert direct == pytest.approx(res.strip_energy, rel=1e-12)

    def test_relaxed_interface_state_fails_the_precondition(self, minimizer100):
        # H ~ 28.7 forces n > m (1 + H/eps) ~ 5743, far beyond n = 100
        with pytest.raises(ValueError, match="averaging needs"):
            average_down(minimizer100, 10, 0.05)

    def test_parameter_validation(self, wells):
        chain = twin_chain(8, wells)
        with pytest.raises(ValueError, match="epsilon"):
            average_down(chain, 2, 0.0)
        with pytest.raises(ValueError, match="strip height"):
            average_down(chain, 8, 1.0)
        with pytest.raises(ValueError, match="strip height"):
            average_down(chain, 0, 1.0)

    def test_random_inputs_meeting_the_precondition_all_pass(self, rng, wells):
        # eps chosen just above m H / (n - m) so the precondition holds
        for _ in range(12):
            m = int(rng.integers(2, 4))
            n = int(rng.integers(4 * m, 2 * m * m + m + 1))
            chain = random_chain(rng, n=n, du=0.01, dtheta=0.002, wells=wells)
            H = chain_energy(chain).rescaled
            eps = 1.05 * m * H / (n - m) + 1e-9
            res = average_down(chain, m, eps)
            assert res.strip_energy <= res.input_energy + eps


class TestCutAndExtend:
    def test_exact_twin_is_left_untouched(self, wells):
        # tail rebuild follows a different float path: rounding only
        chain = twin_chain(8, wells)
        res = cut_and_extend(chain, side="right")
        assert res.energy_change == 0.0
        assert np.abs(res.chain.u - chain.u).max() < 1e-14
        assert np.array_equal(res.chain.theta, chain.theta)
        (cut,) = res.cuts
        assert (cut.side, cut.column, cut.well_id) == ("right", 7, 1)
        assert cut.criterion < 1e-12

        left = cut_and_extend(chain, side="left")
        assert left.cuts[0].column == -7
        assert left.cuts[0].well_id == 0
        assert np.abs(left.chain.u - chain.u).max() < 1e-14

    def test_relaxed_interface_tails_cut_cleanly(self, minimizer100):
        n = minimizer100.n
        res = cut_and_extend(minimizer100, side="both", alpha=0.4)
        assert abs(res.energy_change) < 0.01
        assert not check_admissible(reconstruct(res.chain))
        sides = {c.side: c for c in res.cuts}
        assert sides["left"].well_id == 0
        assert sides["right"].well_id == 1
        threshold = n ** (-0.1)
        for cut in res.cuts:
            assert n - abs(cut.column) <= math.ceil(n ** 0.4)
            assert cut.criterion <= threshold
        # untouched between the two cut columns
        lo, hi = sides["left"].column, sides["right"].column
        ids = np.arange(lo, hi + 1)
        idx = minimizer100.geometry.atom_index(ids)
        assert np.array_equal(res.chain.u[idx], minimizer100.u[idx])

    def test_boundary_gradient_state_has_no_cut_column(self, wells, f_half):
        # every column sits ~0.67 from both wells, above the 100^-0.1 bar
        chain = affine_chain(100, wells, f_half)
        with pytest.raises(RuntimeError, match="no column within"):
            cut_and_extend(chain, side="right")

    def test_parameter_validation(self, wells):
        chain = twin_chain(6, wells)
        with pytest.raises(ValueError, match="side"):
            cut_and_extend(chain, side="up")
        with pytest.raises(ValueError, match="alpha"):
            cut_and_extend(chain, alpha=1.5)


class TestLayerSpec:
    def test_field_validation(self, wells):
        U = wells.U0
        with pytest.raises(ValueError, match="kind"):
            LayerSpec("B", U, U)
        with pytest.raises(ValueError, match="clamp distance"):
            LayerSpec("C", U, U, L=4, n=8)
        with pytest.raises(ValueError, match="at least 2"):
            LayerSpec("C", U, U, L=4, n=1)
        with pytest.raises(ValueError, match="2x2"):
            LayerSpec("C", np.eye(3), U)

    def test_requires_relaxed_row_directions(self, wells):
        spec = LayerSpec("C", wells.U0, wells.U0, L=8, n=4)
        with pytest.raises(ValueError, match="variable_tau"):
            estimate_layer(spec, wells, MinimizeOptions(variable_tau=False))


class TestLayerEstimates:
    def test_same_well_internal_layer_is_zero(self, wells):
        for V in (wells.U0, wells.QU1):
            spec = LayerSpec("C", V, V, (0.0, 0.0), L=18, n=6)
            est = estimate_layer(spec, wells)
            assert est.value <= 1e-10
            assert est.converged

    def test_boundary_layers_vanish_at_zero_offset(self, wells, f_half):
        # the centre clamp pins one column to the origin only, so the far
        # well's affine state satisfies it exactly: B(F, well, 0) = 0
        plus = estimate_layer(
            LayerSpec("B_plus", f_half, wells.U0, (0.0, 0.0), L=18, n=6), wells)
        minus = estimate_layer(
            LayerSpec("B_minus", wells.QU1, f_half, (0.0, 0.0), L=18, n=6), wells)
        assert plus.value <= 1e-10
        assert minus.value <= 1e-10

    def test_offset_boundary_layer_decays_elastically(self, wells, f_half):
        # a far-field offset is absorbed by an O(r/n) drift inside one well,
        # so the estimate is positive at finite n but falls off like 1/n
        spec = LayerSpec("B_plus", f_half, wells.U0, (0.3, 0.0), L=24, n=8)
        est = estimate_layer(spec, wells, n_sequence=(4, 6, 8))
        values = [e for _, e in est.n_sequence]
        assert all(v > 0.1 for v in values)
        assert values[0] > values[1] > values[2]
        scaled = [n * v for (n, _), v in zip(est.n_sequence, values)]
        assert max(scaled) / min(scaled) < 1.15
        assert not est.converged

    def test_internal_twin_layer_matches_the_relaxed_state(self, wells):
        spec = LayerSpec("C", wells.U0, wells.QU1, (0.0, 0.0), L=120, n=40)
        est = estimate_layer(spec, wells, n_sequence=(10, 20, 40))
        assert est.value == pytest.approx(28.794652, abs=1e-3)
        assert abs(est.value - MINIMIZER_H1_100) / MINIMIZER_H1_100 < 0.10
        assert est.converged
        values = [e for _, e in est.n_sequence]
        assert values[0] > values[1] > values[2] > 0
        # interface forces keep the far columns warm; the tail monitor
        # pushes the clamp out
        assert est.L_final > 120

    def test_offset_search_returns_to_the_compatible_offset(self, wells, f_half):
        spec = LayerSpec("B_plus", f_half, wells.U0, (0.25, 0.1), L=18, n=6)
        est = estimate_layer(spec, wells, n_sequence=(4, 6), search_offset=True)
        assert est.value < 1e-4
        assert np.linalg.norm(est.offsets_tried[-1][0]) < 0.05
        tried = [e for _, e in est.offsets_tried if math.isfinite(e)]
        assert len(tried) > 5
        assert est.value <= tried[0]

    def test_mirrored_internal_layers_agree(self, wells):
        a = estimate_layer(
            LayerSpec("C", wells.U0, wells.QU1, (0.0, 0.0), L=18, n=6), wells)
        b = estimate_layer(
            LayerSpec("C", wells.QU1, wells.U0, (0.0, 0.0), L=18, n=6), wells)
        assert a.value > 1.0
        assert a.value == pytest.approx(b.value, rel=1e-3)
        # degenerate-triple comparison: going there and back costs at least
        # as much as staying put
        assert a.value + b.value >= 0.0 - 2e-6

    def test_failed_solves_are_excluded_and_reported(self, wells):
        spec = LayerSpec("C", wells.U0, wells.QU1, (0.0, 0.0), L=12, n=4)
        starved = MinimizeOptions(variable_tau=True, grad_tol=1e-16, max_iters=1)
        with pytest.raises(RuntimeError, match="no height"):
            estimate_layer(spec, wells, starved, n_sequence=(4,))


class TestEstimateEK:
    def test_trivial_fraction_has_zero_surface_energy(self, wells):
        total = estimate_EK([wells.U0, wells.U0, wells.U0], wells,
                            n=6, n_sequence=(4, 6), search_offset=False)
        assert total <= 1e-10

    def test_two_layer_structure_without_internal_layer(self, wells):
        total, parts = estimate_EK([wells.U0, wells.U0, wells.U0], wells,
                                   n=6, n_sequence=(4, 6), search_offset=False,
                                   return_parts=True)
        assert [spec.kind for spec, _ in parts] == ["B_plus", "B_minus"]

    def test_half_fraction_orderings_agree(self, wells, f_half):
        first, parts = estimate_EK([f_half, wells.U0, wells.QU1, f_half], wells,
                                   n=8, n_sequence=(4, 8), search_offset=False,
                                   return_parts=True)
        second = estimate_EK([f_half, wells.QU1, wells.U0, f_half], wells,
                             n=8, n_sequence=(4, 8), search_offset=False)
        assert first == pytest.approx(30.226905, abs=1e-3)
        assert second == pytest.approx(first, rel=1e-6)
        kinds = [spec.kind for spec, _ in parts]
        assert kinds == ["B_plus", "C", "B_minus"]
        # the boundary layers are free: all surface energy is the interface
        values = [p.value for _, p in parts]
        assert values[0] <= 1e-10
        assert values[2] <= 1e-10
        assert values[1] == pytest.approx(first, rel=1e-9)

    def test_sequence_validation(self, wells, f_half):
        with pytest.raises(ValueError, match="at least"):
            estimate_EK([wells.U0, wells.U0], wells)
        with pytest.raises(ValueError, match="start and end"):
            estimate_EK([wells.U0, wells.QU1, wells.QU1], wells)
        with pytest.raises(ValueError, match="wells"):
            estimate_EK([f_half, f_half, f_half], wells)


class TestExport:
    def test_layer_table_layout(self, wells, tmp_path):
        spec = LayerSpec("C", wells.U0, wells.U0, (0.0, 0.0), L=8, n=4)
        est = estimate_layer(spec, wells, n_sequence=(4,))
        path = tmp_path / "layers.csv"
        save_layer_estimates([(spec, est)], path, header="sweep")
        lines = path.read_text().splitlines()
        assert lines[0] == "# sweep"
        assert lines[1] == "# layer-estimates v1"
        assert lines[2].startswith("kind,")
        assert len(lines) == 4
        row = lines[3].split(",")
        assert row[0] == "C"
        assert int(row[4]) == 4
        assert float(row[5]) <= 1e-10
