"""Two-well lattice energy: density, per-site grids, totals and diagnostics.

The density is a product of two bracket sums over all signed neighbor
differences of a site.  With v_s = (u^{i,j+s} - u^{ij})/lam (s = +1, -1) and
h_s = (u^{i+s,j} - u^{ij})/lam:

    bracket(alpha, beta) = sum_s (|v_s|^2 - alpha)^2 + sum_s (|h_s|^2 - beta)^2
                           + sum_{s,t} (v_s . h_t)^2
    density = bracket(a^2, b^2) * bracket(b^2, a^2)

The first bracket vanishes exactly on SO(2)U1, the second on SO(2)U0, so the
product vanishes precisely on the union of the wells.  Cross terms enumerate
all four sign pairs.

Two evaluation routes exist on purpose: `lattice_energy` differences the
reconstructed 2D positions, while `chain_energy` works directly in chain
variables (du, per-column tau vectors, row index j) without materializing the
lattice.  They agree to rounding and cross-validate each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import GHOST, ChainState, LatticeField

__all__ = [
    "EnergyBreakdown",
    "density",
    "chain_energy",
    "lattice_energy",
    "chain_local_grid",
    "field_local_grid",
    "window_sum",
    "local_energy_threshold_census",
    "default_jump_threshold",
    "save_breakdown",
]


def density(vdiffs, hdiffs, wells):
    """Two-well density from signed neighbor differences.

    vdiffs and hdiffs carry the +/- difference vectors on axis -2 (order
    [plus, minus]); leading axes broadcast.  Returns a float for single sites.
    """
    v = np.asarray(vdiffs, dtype=float)
    h = np.asarray(hdiffs, dtype=float)
    a2 = wells.a * wells.a
    b2 = wells.b * wells.b
    q = (v * v).sum(axis=-1)
    r = (h * h).sum(axis=-1)
    cross = np.einsum("...si,...ti->...st", v, h)
    cross2 = (cross * cross).sum(axis=(-2, -1))
    b1 = ((q - a2) ** 2).sum(axis=-1) + ((r - b2) ** 2).sum(axis=-1) + cross2
    b2_ = ((q - b2) ** 2).sum(axis=-1) + ((r - a2) ** 2).sum(axis=-1) + cross2
    out = b1 * b2_
    return float(out) if out.ndim == 0 else out


def chain_pair_vectors(chain: ChainState, ids, j_rows):
    """Difference vectors (v_plus, v_minus, h_plus, h_minus) in chain variables.

    ids: chain indices of the summand centers (1D).  j_rows: row indices (1D).
    Each returned array has shape (len(ids), len(j_rows), 2).
    """
    lam = chain.lam
    ids = np.asarray(ids)
    u_c, th_c = chain.atoms_at(ids)
    u_p, th_p = chain.atoms_at(ids + 1)
    u_m, th_m = chain.atoms_at(ids - 1)
    t_c = _tau_of(chain, th_c)
    t_p = _tau_of(chain, th_p)
    t_m = _tau_of(chain, th_m)

    du_p = (u_p - u_c) / lam
    du_m = (u_m - u_c) / lam
    dt_p = t_p - t_c
    dt_m = t_m - t_c

    j = np.asarray(j_rows, dtype=float)[None, :, None]
    v_p = du_p[:, None, :] + t_p[:, None, :] + j * dt_p[:, None, :]
    v_m = du_m[:, None, :] - t_m[:, None, :] + j * dt_m[:, None, :]
    h_p = du_p[:, None, :] + j * dt_p[:, None, :]
    h_m = du_m[:, None, :] + j * dt_m[:, None, :]
    return v_p, v_m, h_p, h_m


def _tau_of(chain: ChainState, theta):
    c, s = np.cos(theta), np.sin(theta)
    tx, ty = chain.wells.tau
    return np.stack([c * tx - s * ty, s * tx + c * ty], axis=-1)


def chain_local_grid(chain: ChainState, ids, j_rows):
    """Per-site densities evaluated in chain variables; shape (len(ids), len(j_rows))."""
    v_p, v_m, h_p, h_m = chain_pair_vectors(chain, ids, j_rows)
    v = np.stack([v_p, v_m], axis=-2)
    h = np.stack([h_p, h_m], axis=-2)
    return density(v, h, chain.wells)


def field_local_grid(field: LatticeField):
    """Per-site densities from reconstructed positions, i and j in [-n, n]."""
    n, lam = field.n, field.lam
    pos = field.positions
    lo = GHOST  # storage offset of atom -n
    hi = lo + 2 * n + 1
    center = pos[lo:hi, 1:-1]
    v_p = (pos[lo + 1:hi + 1, 2:] - center) / lam
    v_m = (pos[lo - 1:hi - 1, :-2] - center) / lam
    h_p = (pos[lo + 1:hi + 1, 1:-1] - center) / lam
    h_m = (pos[lo - 1:hi - 1, 1:-1] - center) / lam
    v = np.stack([v_p, v_m], axis=-2)
    h = np.stack([h_p, h_m], axis=-2)
    return density(v, h, field.chain.wells)


@dataclass(frozen=True, eq=False)
class EnergyBreakdown:
    """Per-site energies and their reductions.

    local[k, l] is the density at chain index i = k - n, row j = l - n.
    total = lam^2 * sum(local); rescaled = total / lam.
    """

    local: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    total: float
    rescaled: float
    n: int
    lam: float
    a: float

    def local_at(self, i, j):
        return self.local[i + self.n, j + self.n]


def _breakdown(local, n, lam, a):
    row_sums = np.array([math.fsum(local[:, l]) for l in range(local.shape[1])])
    col_sums = np.array([math.fsum(local[k, :]) for k in range(local.shape[0])])
    total = lam * lam * math.fsum(local.ravel(order="C"))
    return EnergyBreakdown(local=local, row_sums=row_sums, col_sums=col_sums,
                           total=total, rescaled=total / lam, n=n, lam=lam, a=a)


def chain_energy(chain: ChainState) -> EnergyBreakdown:
    """Total energy evaluated directly in chain variables."""
    n = chain.n
    ids = np.arange(-n, n + 1)
    local = chain_local_grid(chain, ids, ids)
    return _breakdown(local, n, chain.lam, chain.wells.a)


def lattice_energy(field: LatticeField) -> EnergyBreakdown:
    """Total energy evaluated from the reconstructed 2D positions."""
    local = field_local_grid(field)
    return _breakdown(local, field.n, field.lam, field.chain.wells.a)


def window_sum(chain: ChainState, i_lo, i_hi, j_lo, j_hi, weight=1.0):
    """weight * sum of local densities over the index window (compensated)."""
    ids = np.arange(i_lo, i_hi + 1)
    rows = np.arange(j_lo, j_hi + 1)
    local = chain_local_grid(chain, ids, rows)
    return weight * math.fsum(local.ravel(order="C"))


def default_jump_threshold(wells):
    """Density level below which a site cannot host a jump between the wells."""
    a2, b2 = wells.a ** 2, wells.b ** 2
    return ((b2 - a2) / (100.0 * (a2 + b2))) ** 4


@dataclass(frozen=True)
class ThresholdCensus:
    threshold: float
    site_count: int
    row_count: int
    sites: list
    rows: list


def local_energy_threshold_census(bd: EnergyBreakdown, threshold) -> ThresholdCensus:
    """Sites with local >= threshold and rows whose lam-weighted sum reaches it."""
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    n = bd.n
    hot = np.argwhere(bd.local >= threshold)
    sites = [(int(k) - n, int(l) - n) for k, l in hot]
    hot_rows = np.nonzero(bd.lam * bd.row_sums >= threshold)[0]
    rows = [int(l) - n for l in hot_rows]
    return ThresholdCensus(threshold=float(threshold), site_count=len(sites),
                           row_count=len(rows), sites=sites, rows=rows)


def save_breakdown(bd: EnergyBreakdown, path, header=None):
    """Delimited-text export: summary record, then the local(i, j) matrix."""
    g17 = "%.17g"
    lines = []
    if header:
        lines.append("# " + header)
    lines.append("# energy-breakdown v1")
    lines.append(f"n={bd.n},a={g17 % bd.a},lambda={g17 % bd.lam},"
                 f"total={g17 % bd.total},rescaled={g17 % bd.rescaled}")
    lines.append("i\\j," + ",".join(str(j - bd.n) for j in range(bd.local.shape[1])))
    for k in range(bd.local.shape[0]):
        lines.append(f"{k - bd.n}," + ",".join(g17 % v for v in bd.local[k]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
