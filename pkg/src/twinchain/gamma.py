"""Layer energies and the reduction steps that feed them.

Three pieces live here.  `average_down` trades the full-height energy of a
chain for a thin horizontal strip at a small premium, by scanning vertical
translations.  `cut_and_extend` replaces everything beyond a well-shaped
column with an exact affine tail.  `estimate_layer` / `estimate_EK` compute
boundary-layer and internal-layer energies on rescaled half-open geometries
by Newton descent with relaxed row directions, including an offset search
over the relative shift between the two far fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as _nm_minimize

from .energy import chain_energy, chain_local_grid, window_sum
from .lattice import (GHOST, BoundaryClamp, ChainState, LatticeField,
                      LatticeGeometry, check_admissible, reconstruct)
from .minimize import ChainProblem, MinimizeOptions, newton_minimize
from .wells import WellPair

__all__ = [
    "AverageDownResult",
    "CutResult",
    "LayerEnergyEstimate",
    "LayerSpec",
    "TranslatedChain",
    "average_down",
    "cut_and_extend",
    "estimate_EK",
    "estimate_layer",
    "save_layer_estimates",
    "thin_strip_energy",
]

_E1 = np.array([1.0, 0.0])

LAYER_KINDS = ("B_plus", "B_minus", "C")

# a column counts as decayed when its averaged local energy drops below this
TAIL_TOL = 1e-8


# ---------------------------------------------------------------------------
# vertical averaging


def thin_strip_energy(chain: ChainState, m: int, j0: int = 0) -> float:
    """Energy of the height-m strip centred on row j0, rows averaged by 1/m.

    The horizontal extent follows the translation: columns j0-n .. j0+n.
    With m = n and j0 = 0 this reproduces the rescaled chain energy.
    """
    n = chain.n
    return window_sum(chain, -n + j0, n + j0, j0 - m, j0 + m, weight=1.0 / m)


@dataclass(frozen=True, eq=False)
class TranslatedChain:
    """Read-only view of a chain shifted down-left along the row direction.

    Shifting by j0 maps site (i, j) of the view to (i + j0, j + j0) of the
    parent.  The view exists because the shifted boundary columns are not
    affine in general, so a standalone clamped chain cannot represent it.
    """

    chain: ChainState
    j0: int

    def local_grid(self, ids, j_rows):
        ids = np.asarray(ids, dtype=int)
        j_rows = np.asarray(j_rows, dtype=float)
        return chain_local_grid(self.chain, ids + self.j0, j_rows + self.j0)

    def generator_row(self, ids):
        """Atom positions of the view's own j = 0 row."""
        ids = np.asarray(ids, dtype=int)
        chain = self.chain
        u, theta = chain.atoms_at(ids + self.j0)
        c, s = np.cos(theta), np.sin(theta)
        tx, ty = chain.wells.tau
        t = np.stack([c * tx - s * ty, s * tx + c * ty], axis=-1)
        return u + self.j0 * chain.lam * t


@dataclass(frozen=True, eq=False)
class AverageDownResult:
    k: int
    j0: int
    input_energy: float
    strip_energy: float
    epsilon: float
    view: TranslatedChain


def average_down(chain, m: int, epsilon: float) -> AverageDownResult:
    """Find a vertical translation whose height-m strip energy is small.

    Guarantees strip_energy <= input_energy + epsilon provided
    n > m (1 + input_energy / epsilon); under that bound one of the
    floor((2n+1)/(2m+1)) disjoint strips must come in under the average.
    The disjoint-strip scan runs first; if the winner still misses the
    bound (possible at small m, where the 1/m row weight inflates every
    strip), every translation in range is tried before giving up.
    """
    if isinstance(chain, LatticeField):
        chain = chain.chain
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = chain.n
    m = int(m)
    if not 1 <= m < n:
        raise ValueError("strip height m must satisfy 1 <= m < n")
    input_energy = thin_strip_energy(chain, n)
    bound = m * (1.0 + input_energy / epsilon)
    if not n > bound:
        raise ValueError(
            f"averaging needs n > m (1 + H/eps) = {bound:.6g}, chain has n = {n}")

    count = (2 * n + 1) // (2 * m + 1)
    centers = [-n + k * (2 * m + 1) + m for k in range(count)]
    energies = [thin_strip_energy(chain, m, j0) for j0 in centers]
    k = int(np.argmin(energies))
    j0, best = centers[k], energies[k]

    if best > input_energy + epsilon:
        span = n - m
        sweep = {j: thin_strip_energy(chain, m, j) for j in range(-span, span + 1)}
        j0, best = min(sweep.items(), key=lambda kv: (kv[1], abs(kv[0])))
        k = min(range(count), key=lambda kk: abs(centers[kk] - j0))
        if best > input_energy + epsilon:
            raise RuntimeError(
                "no vertical translation meets the averaging bound: best strip "
                f"{best:.6g} exceeds {input_energy:.6g} + {epsilon:g}")

    return AverageDownResult(k=k, j0=int(j0), input_energy=input_energy,
                             strip_energy=float(best), epsilon=float(epsilon),
                             view=TranslatedChain(chain=chain, j0=int(j0)))


# ---------------------------------------------------------------------------
# horizontal cutting


@dataclass(frozen=True)
class CutRecord:
    side: str
    column: int
    well_id: int
    criterion: float


@dataclass(frozen=True, eq=False)
class CutResult:
    chain: ChainState
    cuts: tuple
    energy_change: float


def _nearest_well_column(field, r, wells):
    """Max Frobenius distance of column r's cell gradients to each well."""
    col = field.gradients[r + field.n]
    best = (math.inf, -1)
    for wid, U in ((0, wells.U0), (1, wells.QU1)):
        d = float(np.linalg.norm(col - U, axis=(1, 2)).max())
        if d < best[0]:
            best = (d, wid)
    return best


def cut_and_extend(chain: ChainState, side: str = "right", alpha: float = 0.4,
                   cap: float = 1.0) -> CutResult:
    """Replace the chain beyond a near-well column with an exact affine tail.

    Searches the ceil(n^alpha) columns nearest the chosen boundary for the
    one whose cell gradients sit closest to a well, requires that distance
    to be below cap * n^(-alpha/4), and splices in the well's affine map
    from that column outward (angles reset to zero, clamp retargeted so the
    result validates).  Raises if no column qualifies or if the splice
    breaks orientation admissibility.  energy_change reports the rescaled
    energy delta, which the caller treats as the width of the glue.
    """
    if side not in ("left", "right", "both"):
        raise ValueError("side must be 'left', 'right' or 'both'")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    sides = ("left", "right") if side == "both" else (side,)

    e_in = chain_energy(chain).rescaled
    work = chain
    cuts = []
    for s in sides:
        n = work.n
        lam = work.lam
        wells = work.wells
        geom = work.geometry
        field = reconstruct(work)
        reach = max(1, math.ceil(n ** alpha))
        threshold = cap * n ** (-alpha / 4.0)

        if s == "right":
            candidates = range(n - 1, n - 1 - reach, -1)
        else:
            candidates = range(-n + 1, -n + 1 + reach)
        best = (math.inf, -1, 0)
        for r in candidates:
            d, wid = _nearest_well_column(field, r, wells)
            if d < best[0]:
                best = (d, r, wid)
        crit, r, wid = best
        if crit > threshold:
            raise RuntimeError(
                f"no column within {reach} of the {s} boundary is within "
                f"{threshold:.3g} of a well (best {crit:.3g} at column {r})")

        V = wells.U0 if wid == 0 else wells.QU1
        u = work.u.copy()
        theta = work.theta.copy()
        anchor = u[geom.atom_index(r)]
        if s == "right":
            ids = np.arange(r + 1, n + GHOST + 1)
            offset = anchor - V @ np.array([r * lam, 0.0])
            bc = BoundaryClamp.pieces(work.bc.V_left, work.bc.r_left, V, offset)
        else:
            ids = np.arange(-n - GHOST, r)
            offset = anchor - V @ np.array([r * lam, 0.0])
            bc = BoundaryClamp.pieces(V, offset, work.bc.V_right, work.bc.r_right)
        idx = geom.atom_index(ids)
        u[idx] = anchor + np.outer((ids - r) * lam, V @ _E1)
        theta[idx] = 0.0
        theta[geom.atom_index(r)] = 0.0
        work = ChainState(geometry=geom, wells=wells, bc=bc, u=u, theta=theta)

        spoiled = check_admissible(reconstruct(work))
        if spoiled:
            raise RuntimeError(
                f"affine tail at column {r} flips {len(spoiled)} cell triangles")
        cuts.append(CutRecord(side=s, column=int(r), well_id=int(wid),
                              criterion=float(crit)))

    e_out = chain_energy(work).rescaled
    return CutResult(chain=work, cuts=tuple(cuts),
                     energy_change=float(e_out - e_in))


# ---------------------------------------------------------------------------
# layer problems


@dataclass(frozen=True)
class LayerSpec:
    """One layer energy problem on the rescaled (spacing-1) geometry.

    kind 'B_plus' clamps the centre column to the V_left affine map and the
    far right to V_right x + r_star, counting energy on the right half.
    'B_minus' mirrors it: far left carries V_left x + r_star, the centre
    column is clamped to V_right, energy counts on the left half.  'C'
    clamps both far sides (left offset fixed at zero, right at r_star) and
    counts everything.  L is the clamp distance, n the vertical averaging
    height; truncation needs L >= n.
    """

    kind: str
    V_left: np.ndarray
    V_right: np.ndarray
    r_star: np.ndarray = (0.0, 0.0)
    L: int = 48
    n: int = 16

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"kind must be one of {LAYER_KINDS}")
        if self.n < 2:
            raise ValueError("vertical height n must be at least 2")
        if self.L < self.n:
            raise ValueError("clamp distance L must be at least n")
        for name in ("V_left", "V_right"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.shape != (2, 2):
                raise ValueError(f"{name} must be a 2x2 matrix")
            object.__setattr__(self, name, M)
        r = np.asarray(self.r_star, dtype=float).reshape(2)
        object.__setattr__(self, "r_star", r)


@dataclass(frozen=True, eq=False)
class LayerEnergyEstimate:
    value: float
    n_sequence: tuple        # (n, estimate) pairs, nan where the solve failed
    offsets_tried: tuple     # offsets visited by the search, in order
    converged: bool          # final two estimates within 2 percent
    L_final: int


def _layer_problem(kind, V_left, V_right, r, L, n_v, wells, variable_tau=True):
    """Build the clamped chain and windowed problem for one layer solve."""
    geom = LatticeGeometry(n=L, rescaled=True)
    ids = geom.atom_ids()
    x = np.stack([ids.astype(float), np.zeros(ids.size)], axis=-1)
    r = np.asarray(r, dtype=float).reshape(2)

    if kind == "C":
        # split column: continuity V_left x = V_right x + r along e1 fixes it
        omega = (V_left - V_right) @ _E1
        den = float(omega @ omega)
        c = float(r @ omega) / den if den > 1e-24 else 0.0
        m = int(np.clip(round(c), -L + 2, L - 2))
        ramp = np.clip((ids - m) / max(L - m, 1), 0.0, 1.0)[:, None]
        u = np.where((ids <= m)[:, None],
                     x @ V_left.T,
                     x @ V_right.T + m * omega + ramp * (r - m * omega))
        bc = BoundaryClamp.pieces(V_left, (0.0, 0.0), V_right, r)
        free = np.arange(-L + 1, L)
        i_window = (-L - 1, L + 1)
        adm = (-L - 1, L + 1)
    elif kind == "B_plus":
        ramp = np.clip(ids / L, 0.0, 1.0)[:, None]
        u = np.where((ids <= 0)[:, None], x @ V_left.T, x @ V_right.T + ramp * r)
        bc = BoundaryClamp.pieces(V_left, (0.0, 0.0), V_right, r)
        # atom -1 is free because the counted centre column reaches it
        free = np.concatenate([[-1], np.arange(1, L)])
        i_window = (0, L + 1)
        adm = (-2, L + 1)
    else:
        ramp = np.clip(-ids / L, 0.0, 1.0)[:, None]
        u = np.where((ids >= 0)[:, None], x @ V_right.T, x @ V_left.T + ramp * r)
        bc = BoundaryClamp.pieces(V_left, r, V_right, (0.0, 0.0))
        free = np.concatenate([np.arange(-L + 1, 0), [1]])
        i_window = (-L - 1, 0)
        adm = (-L - 1, 2)

    chain = ChainState(geometry=geom, wells=wells, bc=bc, u=u,
                       theta=np.zeros(geom.atom_count))
    problem = ChainProblem(chain, variable_tau=variable_tau, free_ids=free,
                           i_window=i_window, j_window=(-n_v, n_v),
                           scale=1.0 / n_v, admissible_cells=adm)
    return chain, problem


def _tail_columns(kind, L):
    if kind == "B_plus":
        return (L,)
    if kind == "B_minus":
        return (-L,)
    return (-L, L)


def _solve_layer(kind, V_left, V_right, r, L, n_v, wells, opts):
    """One Newton solve; returns (estimate, converged, tail, final_chain)."""
    chain, problem = _layer_problem(kind, V_left, V_right, r, L, n_v, wells)
    if not problem.admissible(chain):
        return math.nan, False, math.inf, None
    report = newton_minimize(chain, opts, problem=problem)
    final = report.final_chain
    estimate = problem.energy(problem.pack(final))
    rows = np.arange(-n_v, n_v + 1, dtype=float)
    tail = max(
        float(chain_local_grid(final, np.array([col]), rows).sum()) / n_v
        for col in _tail_columns(kind, L))
    return float(estimate), bool(report.converged), tail, final


def estimate_layer(spec: LayerSpec, wells: WellPair,
                   opts: MinimizeOptions = None, *,
                   n_sequence=None, search_offset: bool = False
                   ) -> LayerEnergyEstimate:
    """Layer energy by Newton descent over a refining sequence of heights.

    Solves the requested clamped problem at each height in n_sequence (clamp
    distance scaled to keep L/n fixed), optionally searching the far-field
    offset by Nelder-Mead at the coarsest height first.  Heights whose solve
    fails to converge are recorded as nan and excluded from the value.  If
    the outermost counted column keeps averaged energy above 1e-8 the clamp
    distance is doubled (at most twice) before accepting the solve.
    """
    if opts is None:
        # the kink position is a nearly flat mode: the regularized Newton
        # step stalls near grad 1e-8 long after the energy has converged
        opts = MinimizeOptions(variable_tau=True, grad_tol=1e-6, max_iters=120)
    if not opts.variable_tau:
        raise ValueError("layer estimates require variable_tau minimization")
    if n_sequence is None:
        n_sequence = sorted({max(4, spec.n // 4), max(6, spec.n // 2), spec.n})
    n_sequence = [int(v) for v in n_sequence]
    if any(v < 2 for v in n_sequence):
        raise ValueError("heights must be at least 2")
    ratio = max(1, math.ceil(spec.L / spec.n))

    offsets_tried = []
    r_best = np.asarray(spec.r_star, dtype=float).reshape(2)

    if search_offset:
        n0 = n_sequence[0]
        L0 = ratio * n0

        def objective(rv):
            est, ok, _, _ = _solve_layer(spec.kind, spec.V_left, spec.V_right,
                                         rv, L0, n0, wells, opts)
            offsets_tried.append((np.array(rv, dtype=float), est if ok else math.nan))
            return est if ok and math.isfinite(est) else 1e6

        result = _nm_minimize(objective, r_best, method="Nelder-Mead",
                              options={"xatol": 0.02, "fatol": 1e-5,
                                       "maxiter": 60, "maxfev": 90})
        r_best = np.asarray(result.x, dtype=float)

    records = []
    L_final = ratio * n_sequence[-1]
    for n_v in n_sequence:
        L = ratio * n_v
        estimate = math.nan
        for attempt in range(3):
            est, ok, tail, _ = _solve_layer(spec.kind, spec.V_left, spec.V_right,
                                            r_best, L, n_v, wells, opts)
            if not ok:
                break
            estimate = est
            if tail < TAIL_TOL or attempt == 2:
                break
            L *= 2  # layer has not decayed by the clamp: push it out
        records.append((n_v, estimate))
        if n_v == n_sequence[-1]:
            L_final = L
    offsets_tried.append((r_best.copy(), records[-1][1]))

    valid = [(n_v, e) for n_v, e in records if math.isfinite(e)]
    if not valid:
        raise RuntimeError("no height in the sequence produced a converged solve")
    value = valid[-1][1]
    converged = (len(valid) >= 2
                 and abs(valid[-1][1] - valid[-2][1])
                 <= 0.02 * max(abs(valid[-1][1]), 1e-9))
    return LayerEnergyEstimate(value=float(value),
                               n_sequence=tuple(records),
                               offsets_tried=tuple(offsets_tried),
                               converged=converged,
                               L_final=int(L_final))


def _is_well(M, wells, tol=1e-9):
    return (np.abs(M - wells.U0).max() <= tol
            or np.abs(M - wells.QU1).max() <= tol)


def estimate_EK(V_sequence, wells: WellPair, opts: MinimizeOptions = None, *,
                n: int = 16, L_ratio: int = 3, n_sequence=None,
                search_offset: bool = True, return_parts: bool = False):
    """Total layer energy of a gradient sequence V_0 .. V_K.

    The sequence must start and end at the same boundary gradient and pass
    through wells in between.  The total splits exactly into one right
    boundary layer, K-2 internal layers and one left boundary layer, each
    minimized over its own offset independently.
    """
    V = [np.asarray(M, dtype=float).reshape(2, 2) for M in V_sequence]
    if len(V) < 3:
        raise ValueError("need at least V_0, V_1, V_K")
    if np.abs(V[0] - V[-1]).max() > 1e-12:
        raise ValueError("sequence must start and end at the same gradient")
    for M in V[1:-1]:
        if not _is_well(M, wells):
            raise ValueError("interior gradients must sit on the wells")

    L = L_ratio * n
    specs = [LayerSpec("B_plus", V[0], V[1], (0.0, 0.0), L, n)]
    for s in range(1, len(V) - 2):
        specs.append(LayerSpec("C", V[s], V[s + 1], (0.0, 0.0), L, n))
    specs.append(LayerSpec("B_minus", V[-2], V[-1], (0.0, 0.0), L, n))

    parts = [estimate_layer(spec, wells, opts, n_sequence=n_sequence,
                            search_offset=search_offset) for spec in specs]
    total = float(sum(p.value for p in parts))
    if return_parts:
        return total, tuple(zip(specs, parts))
    return total


def save_layer_estimates(entries, path, header=None):
    """Write layer estimates as a flat csv-ish table, one row per height."""
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.append("# layer-estimates v1")
    lines.append("kind,V_left,V_right,r_star,n,estimate,stability_gap")
    for spec, est in entries:
        flat_l = " ".join(f"{v:.17g}" for v in spec.V_left.ravel())
        flat_r = " ".join(f"{v:.17g}" for v in spec.V_right.ravel())
        offset = est.offsets_tried[-1][0] if est.offsets_tried else spec.r_star
        flat_o = " ".join(f"{v:.17g}" for v in np.asarray(offset).ravel())
        seq = [e for _, e in est.n_sequence if math.isfinite(e)]
        gap = abs(seq[-1] - seq[-2]) if len(seq) >= 2 else math.nan
        for n_v, e in est.n_sequence:
            lines.append(f"{spec.kind},{flat_l},{flat_r},{flat_o},{n_v},"
                         f"{e:.17g},{gap:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
