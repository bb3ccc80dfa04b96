"""Well classification, interface detection, and decay diagnostics.

Everything here consumes already-computed fields or breakdowns and reduces
them to the quantities one actually looks at: which well each cell sits in,
where the phase interfaces are, how fast a perturbation decays along the
chain, and which horizontal rows are quiet enough to section the strip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .energy import EnergyBreakdown, default_jump_threshold
from .lattice import ChainState, LatticeField
from .wells import WellPair, build_wells, dist_to_well

__all__ = [
    "WellClassification",
    "InterfaceRecord",
    "DecayFit",
    "GoodLines",
    "GoodLineFailure",
    "classify",
    "interface_positions",
    "deviation_profile",
    "fit_exponential",
    "find_good_lines",
    "save_classification",
    "save_profile",
]

TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class WellClassification:
    """Per-cell nearest well.

    well_id[k, l] labels the cell at chain index i = k - n, row j = l - n
    with 0 or 1; distance and angle carry the matching orbit distance and
    minimizing rotation.  Equidistant cells get well 0 and a tie flag.
    """

    well_id: np.ndarray
    distance: np.ndarray
    angle: np.ndarray
    tie: np.ndarray
    n: int
    lam: float

    def cell_at(self, i, j):
        k, l = i + self.n, j + self.n
        return (int(self.well_id[k, l]), float(self.distance[k, l]),
                float(self.angle[k, l]), bool(self.tie[k, l]))


def classify(field: LatticeField, wells: WellPair) -> WellClassification:
    """Assign every gradient cell to its nearest energy well."""
    d0, a0 = dist_to_well(field.gradients, wells.U0)
    d1, a1 = dist_to_well(field.gradients, wells.U1)
    tie = np.abs(d0 - d1) <= TIE_TOL
    well = np.where(tie, 0, (d1 < d0).astype(int))
    pick0 = well == 0
    return WellClassification(
        well_id=well,
        distance=np.where(pick0, d0, d1),
        angle=np.where(pick0, a0, a1),
        tie=tie,
        n=field.n,
        lam=field.lam,
    )


@dataclass(frozen=True)
class InterfaceRecord:
    """One gap between two single-well column runs, in continuum coordinates."""

    x: float
    left_well: int
    right_well: int
    width_in_atoms: int


def interface_positions(cls: WellClassification, tol: float):
    """Interfaces as gaps between maximal runs of single-well columns.

    A column counts as "in" a well when every cell in it carries that well id
    with distance <= tol; anything else is layer material.  Cell i spans
    [i, i+1] in atom units, so the interface coordinate is the midpoint of
    the touching interval ends; width reports the layer columns in the gap.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = cls.n
    runs = []  # (well, first_i, last_i)
    for k in range(2 * n + 1):
        i = k - n
        col_w = cls.well_id[k]
        col_d = cls.distance[k]
        if col_d.max() <= tol and (col_w == col_w[0]).all():
            w = int(col_w[0])
            if runs and runs[-1][0] == w and runs[-1][2] == i - 1:
                runs[-1][2] = i
            else:
                runs.append([w, i, i])
    records = []
    for left, right in zip(runs, runs[1:]):
        records.append(InterfaceRecord(
            x=cls.lam * 0.5 * (left[2] + 1 + right[1]),
            left_well=left[0],
            right_well=right[0],
            width_in_atoms=right[1] - left[2] - 1,
        ))
    return records


def deviation_profile(chain: ChainState, reference: ChainState):
    """Per-atom Euclidean distance between two chains' generator positions.

    Returns an (atom_count, 2) array of rows (i, deviation) covering every
    stored atom including the clamped ones.
    """
    if chain.n != reference.n or chain.geometry != reference.geometry:
        raise ValueError("chains must share the same lattice geometry")
    ids = chain.geometry.atom_ids().astype(float)
    dev = np.linalg.norm(chain.u - reference.u, axis=1)
    return np.stack([ids, dev], axis=1)


@dataclass(frozen=True, eq=False)
class DecayFit:
    """Least-squares exponential through a deviation profile window."""

    rate: float
    amplitude: float
    r_squared: float
    profile: np.ndarray

    def predict(self, i):
        return self.amplitude * np.exp(self.rate * np.asarray(i, dtype=float))


def fit_exponential(profile, window) -> DecayFit:
    """Fit deviation ~ amplitude * exp(rate * i) over window = (i_lo, i_hi).

    The fit is an ordinary least-squares line on (i, log deviation), so the
    window must contain at least 5 atoms and strictly positive deviations.
    """
    profile = np.asarray(profile, dtype=float)
    i_lo, i_hi = window
    rows = profile[(profile[:, 0] >= i_lo) & (profile[:, 0] <= i_hi)]
    if rows.shape[0] < 5:
        raise ValueError(f"window holds {rows.shape[0]} points, need at least 5")
    if (rows[:, 1] <= 0).any():
        raise ValueError("window contains nonpositive deviations")
    x, y = rows[:, 0], np.log(rows[:, 1])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-20 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return DecayFit(rate=float(slope), amplitude=float(np.exp(intercept)),
                    r_squared=r2, profile=rows)


@dataclass(frozen=True)
class GoodLines:
    """Three equally spaced quiet rows, one per band, with their diagnostics.

    diagnostics maps each selected j to (weighted_sum, soft_count, hard_count).
    """

    j_minus: int
    j_zero: int
    j_plus: int
    diagnostics: dict


@dataclass(frozen=True)
class GoodLineFailure:
    """Why no quiet-row triple exists, and the nearest misses per band."""

    reason: str
    band_good_counts: dict
    best: dict


def _row_diagnostics(bd: EnergyBreakdown, alpha, c_tilde):
    soft = float(bd.n) ** (-alpha)
    weighted = bd.lam * bd.row_sums
    soft_counts = (bd.local >= soft).sum(axis=0)
    hard_counts = (bd.local >= c_tilde).sum(axis=0)
    return weighted, soft_counts, hard_counts


def find_good_lines(bd: EnergyBreakdown, alpha: float = 0.4, delta: float = 0.1,
                    c_tilde: float = None, cap: float = 1.0,
                    max_hard_sites: int = 50):
    """Pick rows j_minus < j_zero < j_plus that are quiet in three senses.

    A row j qualifies when its lam-weighted energy sum is <= cap * n^-alpha,
    at most cap * n^alpha / delta of its sites reach n^-alpha, and at most
    max_hard_sites of its sites reach the jump threshold c_tilde.  The rows
    must be equally spaced with j_minus in [-n, -n+2*delta*n], j_zero in
    [-delta*n, delta*n], j_plus mirrored.  Returns GoodLines, or a
    GoodLineFailure naming the binding condition.

    The jump-count cap has no principled finite value (the underlying bound
    only needs some n-independent constant), so max_hard_sites=None disables
    that condition while still reporting the counts.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0.0 < delta < 0.25:
        raise ValueError("delta must lie in (0, 1/4)")
    n = bd.n
    if c_tilde is None:
        c_tilde = default_jump_threshold(build_wells(bd.a))
    weighted, soft_counts, hard_counts = _row_diagnostics(bd, alpha, c_tilde)
    sum_cap = cap * float(n) ** (-alpha)
    soft_cap = cap * float(n) ** alpha / delta
    hard_cap = np.inf if max_hard_sites is None else max_hard_sites
    ok = (weighted <= sum_cap) & (soft_counts <= soft_cap) \
        & (hard_counts <= hard_cap)

    wide = int(math.floor(2 * delta * n))
    half = int(math.floor(delta * n))
    bands = {
        "minus": range(-n, -n + wide + 1),
        "zero": range(-half, half + 1),
        "plus": range(n - wide, n + 1),
    }
    good = {label: [j for j in band if ok[j + n]] for label, band in bands.items()}

    def diag(j):
        return (float(weighted[j + n]), int(soft_counts[j + n]),
                int(hard_counts[j + n]))

    if all(good.values()):
        plus_set = set(good["plus"])
        s_mid = n - 0.5 * wide
        best = None
        for j0 in sorted(good["zero"], key=lambda j: (abs(j), j)):
            for jm in good["minus"]:
                s = j0 - jm
                if s > 0 and j0 + s in plus_set:
                    key = (abs(j0), abs(s - s_mid), s)
                    if best is None or key < best[0]:
                        best = (key, (jm, j0, j0 + s))
        if best is not None:
            jm, j0, jp = best[1]
            for j in (jm, j0, jp):  # claimed conditions re-verified
                assert ok[j + n], "selected row fails its own conditions"
            return GoodLines(j_minus=jm, j_zero=j0, j_plus=jp,
                             diagnostics={j: diag(j) for j in (jm, j0, jp)})
        reason = "no equally spaced triple across the bands"
    else:
        label = next(k for k, v in good.items() if not v)
        band = list(bands[label])
        checks = [
            ("row-sum bound", np.array([weighted[j + n] <= sum_cap for j in band])),
            ("spread-count bound", np.array([soft_counts[j + n] <= soft_cap for j in band])),
            ("jump-count bound", np.array([hard_counts[j + n] <= hard_cap for j in band])),
        ]
        name = next((nm for nm, hit in checks if not hit.any()), "combined conditions")
        reason = f"no row in band '{label}' satisfies the {name}"

    def nearest(band):
        # normalized worst-violation score; lowest is the best miss
        js = list(band)
        hard_norm = 1.0 if max_hard_sites is None else max(max_hard_sites, 1)
        scores = [max(weighted[j + n] / sum_cap, soft_counts[j + n] / soft_cap,
                      0.0 if max_hard_sites is None
                      else hard_counts[j + n] / hard_norm) for j in js]
        j = js[int(np.argmin(scores))]
        return (j,) + diag(j)

    return GoodLineFailure(
        reason=reason,
        band_good_counts={k: len(v) for k, v in good.items()},
        best={k: nearest(band) for k, band in bands.items()},
    )


def save_classification(cls: WellClassification, path, header=None):
    """Integer matrix export of the per-cell well ids."""
    lines = []
    if header:
        lines.append("# " + header)
    lines.append("# well-classification v1")
    lines.append(f"n={cls.n},lambda={'%.17g' % cls.lam}")
    lines.append("i\\j," + ",".join(str(l - cls.n) for l in range(2 * cls.n + 1)))
    for k in range(2 * cls.n + 1):
        row = cls.well_id[k]
        lines.append(f"{k - cls.n}," + ",".join(str(int(w)) for w in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_profile(fit: DecayFit, path, header=None):
    """Delimited export of the fitted window: i, deviation, log, fitted."""
    g17 = "%.17g"
    lines = []
    if header:
        lines.append("# " + header)
    lines.append("# decay-profile v1")
    lines.append(f"rate={g17 % fit.rate},amplitude={g17 % fit.amplitude},"
                 f"r_squared={g17 % fit.r_squared}")
    lines.append("i,deviation,log_deviation,fitted_value")
    for i, d in fit.profile:
        lines.append(",".join(g17 % v for v in
                              (i, d, math.log(d), fit.predict(i))))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
