"""Explicit solutions, entropy decay and particle checks for the linear
McKean-Vlasov equation."""

from .errors import (
    DegenerateInputError,
    DomainError,
    InvalidInputError,
    LyapunovError,
    MkvError,
    NotAdmissibleError,
    NotAlmostPositivelyStableError,
    ScenarioError,
    SimulationBlowUpError,
)
from .fokker_planck import (
    GaussianState,
    ckp_check,
    equilibrium,
    fp_decay_certificate,
    fp_density,
    gaussian_flow,
    gaussian_relative_entropy,
    gram_kernel,
)
from .grid import GridDensity, Lattice, read_grid_density, write_grid_density
from .linalg import (
    expm,
    is_admissible,
    is_almost_positively_stable,
    kernel_basis,
    matrix_semigroup_bound,
    psd_sqrt,
    solve_lyapunov,
    spectral_summary,
)
from .mckean_vlasov import (
    ModelTriple,
    entropy_decomposition,
    first_moment,
    mkv_entropy_bound,
    normalize_mass,
    pde_residual,
    shift,
    shift_general,
    shift_limit,
    shift_trajectory,
    solve,
    solve_law,
    xi_bound,
)
from .particles import ParticleEnsemble, em_step, gaussian_fit_entropy, init_ensemble, simulate
from .scenario import Scenario, dumps_scenario, parse_scenario

__version__ = "0.1.0"
