"""recurstab: diagnosing and preventing instabilities in recurrent video processors.

A numpy laboratory for the stability of frame-recurrent convolutional models:
a minimal autodiff substrate with exact conv/adjoint pairs, three independent
routes to the singular spectrum of a convolutional layer, spectral-norm and
stable-rank weight normalization, a model zoo covering the common recurrence
wirings, an adversarial receptive-field search, and a long-sequence harness
with instability-onset bookkeeping.
"""

from .archive import load_rvpt, save_rvpt
from .dataio import (
    NoiseSpec,
    SyntheticMotionSource,
    add_noise,
    load_sequence,
    make_test_still,
    read_image,
    sample_crops,
    synth_motion_sequence,
    write_image,
)
from .diagnostics import (
    FailureInjector,
    IdentityModel,
    StabilityReport,
    StrfReport,
    divergence_probe,
    onset_deciles,
    psnr,
    stability_harness,
    strf_search,
)
from .models import (
    ArchitectureSpec,
    RecurrentModel,
    RecurrentState,
    build,
    load_checkpoint,
    save_checkpoint,
    wiring_plan,
)
from .normalize import (
    NormalizedLayer,
    NormalizerConfig,
    dampen_features,
    dampen_kernel,
    rank_one_kernel,
    srn_normalize,
    srnl_normalize,
)
from .optim import AdamState, adam_step
from .spectral import (
    LayerSpectrum,
    PowerIterationState,
    estimate_layer_sigma1,
    fft_exact_spectrum,
    lipschitz_upper_bound,
    materialize_operator,
    materialized_spectrum,
    power_iteration_kernel2d,
    power_iteration_layer,
    stable_rank,
    stable_rank_layer,
)
from .tensor import (
    KernelTensor,
    Tensor,
    TensorError,
    conv2d,
    conv2d_adjoint,
    conv2d_raw,
    l1_center_pixel,
    l2_norm,
    mse,
    relu,
)
from .training import TrainConfig, TrainResult, load_adam, train

__version__ = "0.1.0"
