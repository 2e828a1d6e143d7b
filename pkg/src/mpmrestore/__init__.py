"""3D PSF calibration from bead images, noise estimation, and constrained
deconvolution for multiphoton microscopy volumes."""

from .errors import (
    ConfigError,
    DescentError,
    NoRegionsError,
    ShapeError,
    VolumeDataError,
)
from .volume import (
    Grid,
    Kernel3D,
    Volume3D,
    convolve_circular,
    convolve_zeropad,
    dft_max_power,
    dirac_kernel,
    prd_percent,
    read_volume,
    snr_db,
    write_volume,
)
from .psf import (
    BeadSpec,
    EulerDecomp,
    GaussianPSFParams,
    GenExpParams,
    euler_decompose,
    fwhm_from_eig,
    gaussian_kernel,
    genexp_kernel,
    spd_from_angles,
    spd_from_euler,
    sphere_bead,
    theoretical_fwhm,
)
from .kernelfit import (
    EntropicProxProblem,
    KernelFitConfig,
    KernelFitResult,
    KernelFitState,
    cost_value,
    fit_bead_kernel,
    lambda_grid_search,
    lambert_w,
    lambert_w_of_exp,
    prox_entropic_simplex,
    prox_precision,
)
from .beads import BeadRegion, average_psf_models, extract_regions, wiener_denoise
from .noise import NoiseParams, SegmentStats, estimate_noise, lloyd_max_quantize, sigma
from .restore import (
    PenaltySchedule,
    RestorationProblem,
    RestoreResult,
    curvature_apply,
    data_fidelity_f,
    grad_g,
    grad_r1,
    grad_r2,
    mm_inner_solve,
    penalty_r1,
    penalty_r2,
    reg_g,
    restore_constrained,
)
from .baselines import NLSParams, nls_fit, nls_moment_init, penalized_restore, richardson_lucy

__version__ = "0.1.0"
