"""Motion-compensated list-mode PET: simulation and ML-EM reconstruction.

The toolkit simulates detection events from a phantom moving under a
known continuous motion model (independent inhomogeneous Poisson
processes per detector, sampled by thinning) and reconstructs the
time-zero template with a motion-aware ML-EM iteration that reduces to
classical and gated ML-EM for static and piecewise-constant motion.
"""

from .grid import (
    DensityImage,
    GridFunction,
    GridGeometry,
    kl_images,
    kl_vec,
    load_image,
    make_derenzo,
    pairing,
    sample_bilinear,
    save_image,
    save_pgm,
    total_mass,
)
from .motion import (
    DiffeoMap,
    MassPreservingDiffeoMotion,
    MotionModel,
    PiecewiseConstantMotion,
    StaticMotion,
    TranslationMotion,
    VelocityField,
    integrate_flow,
    inverse_flow,
    jacobian_det,
    load_velocity,
    model_from_descriptor,
    model_to_descriptor,
    save_velocity,
)
from .projector import (
    ProjectorConfig,
    Sinogram,
    StripProjector,
    load_sinogram,
    save_sinogram,
    sinogram_to_csv,
)
from .recon import (
    DomainViolationError,
    EventKernel,
    KernelSet,
    ReconState,
    SensitivityImage,
    classical_mlem_step,
    default_mu0,
    event_kernels,
    gated_mlem_step,
    gated_operators,
    kernel_set_from_rows,
    kkt_residual,
    loss,
    loss_gradient,
    mlem_run,
    mlem_step,
    sensitivity,
    support_union,
    surrogate_gap,
)
from .simulate import (
    BoundViolationError,
    Event,
    ListModeData,
    aggregate,
    intensity,
    intensity_bound,
    load_listmode,
    save_listmode,
    simulate_listmode,
)

__version__ = "0.1.0"
