"""Randomized accelerated proximal methods for nonconvex finite-sum and
linearly constrained multi-block problems."""
from .baselines import BaselineConfig, run_admm, run_ag, run_svrg, tune_inner_iterations
from .generators import GenSpec, gen_compressed_sensing, gen_scad_ls, load_instance, save_instance
from .metrics import (
    RunRecord,
    StationarityReport,
    eps_delta_certificate,
    multiblock_kkt,
    ncone_distance_sq,
    strong_gap,
)
from .problems import (
    BlockSpec,
    FeasibleSet,
    FiniteSumProblem,
    MultiBlockProblem,
    QuadraticOracle,
    full_gradient,
    full_objective,
    project,
    reformulate,
)
from .rapdual import (
    RapDualConfig,
    RaDualSchedule,
    RaDualState,
    compute_radual_schedule,
    radual_solve,
    radual_step,
    rapdual_run,
    validate_radual_schedule,
)
from .rapgrad import (
    RapGradConfig,
    RaGradSchedule,
    RaGradState,
    compute_ragrad_schedule,
    ragrad_solve,
    ragrad_step,
    rapgrad_run,
    validate_ragrad_schedule,
)
from .scad import ScadParams, build_scad_ls, scad_grad, scad_scalar_prox, scad_value

__version__ = "0.1.0"
