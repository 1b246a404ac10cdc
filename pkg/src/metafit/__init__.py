"""Meta-learned, uncertainty-aware test-time optimization for fitting an
articulated 3D kinematic model to 2D keypoint observations."""

from .body_model import (
    FitParams,
    KinematicTree,
    bone_lengths,
    default_tree,
    forward_kinematics,
    rodrigues,
)
from .energy import (
    EnergyConfig,
    Observation,
    energy,
    energy_grad_analytic,
    energy_grad_stochastic,
    project,
    reprojection_error,
)
from .errors import (
    AlignmentDegenerateError,
    ConfigError,
    DegenerateShapeError,
    DivergedError,
    InvalidCameraError,
    InvalidInputError,
    MetafitError,
    NumericOverflowError,
    TrainingDivergenceError,
    UndefinedCorrelationError,
)
from .meta import (
    LossReport,
    MetaConfig,
    Regressor,
    final_loss,
    init_regressor,
    inner_loop,
    load_regressor,
    meta_train,
    outer_step,
    regress,
    save_regressor,
)
from .metrics import mpjpe, pa_mpjpe, spearman, uncertainty_correlation
from .optimizer import (
    OptimizerConfig,
    OptimizerState,
    RefinementResult,
    UpdateDistribution,
    adaptive_step_size,
    caching_decision,
    evolve_distribution,
    init_state,
    refine,
    sample_update,
    target_variance,
)
from .tasks import (
    BUILTIN_PROFILES,
    CLEAN_PROFILE,
    HARD_PROFILE,
    NOISELESS_PROFILE,
    DomainProfile,
    TaskRecord,
    domain_pair,
    generate_dataset,
    read_tasks,
    sample_task,
    write_tasks,
)

__version__ = "0.1.0"
