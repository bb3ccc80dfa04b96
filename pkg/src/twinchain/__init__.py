"""Two-well chain energies: twin relaxation and transition layer estimates."""

from .wells import WellPair, build_wells, boundary_gradient, dist_to_well, rotation
from .lattice import (
    BoundaryClamp,
    ChainState,
    LatticeGeometry,
    affine_chain,
    check_admissible,
    extract_chain,
    load_chain,
    reconstruct,
    save_chain,
)
from .energy import (
    EnergyBreakdown,
    chain_energy,
    density,
    lattice_energy,
    save_breakdown,
)
from .minimize import (
    ChainProblem,
    MinimizationReport,
    MinimizeOptions,
    gradient,
    hessian,
    laminate_chain,
    newton_minimize,
    preoptimize_middle,
    twin_chain,
)
from .analysis import (
    DecayFit,
    GoodLineFailure,
    GoodLines,
    InterfaceRecord,
    WellClassification,
    classify,
    deviation_profile,
    find_good_lines,
    fit_exponential,
    interface_positions,
)
from .gamma import (
    AverageDownResult,
    CutResult,
    LayerEnergyEstimate,
    LayerSpec,
    TranslatedChain,
    average_down,
    cut_and_extend,
    estimate_EK,
    estimate_layer,
    save_layer_estimates,
    thin_strip_energy,
)

__all__ = [
    "WellPair",
    "build_wells",
    "boundary_gradient",
    "dist_to_well",
    "rotation",
    "BoundaryClamp",
    "ChainState",
    "LatticeGeometry",
    "affine_chain",
    "check_admissible",
    "extract_chain",
    "load_chain",
    "reconstruct",
    "save_chain",
    "EnergyBreakdown",
    "chain_energy",
    "density",
    "lattice_energy",
    "save_breakdown",
    "ChainProblem",
    "MinimizationReport",
    "MinimizeOptions",
    "gradient",
    "hessian",
    "laminate_chain",
    "newton_minimize",
    "preoptimize_middle",
    "twin_chain",
    "DecayFit",
    "GoodLineFailure",
    "GoodLines",
    "InterfaceRecord",
    "WellClassification",
    "classify",
    "deviation_profile",
    "find_good_lines",
    "fit_exponential",
    "interface_positions",
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
