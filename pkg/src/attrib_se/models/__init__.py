"""Speech-enhancement model families and the shared spectral front end."""

from .bsrnn import (  # noqa: F401
    Bsrnn,
    BsrnnConfig,
    K_MASK,
    ModelError,
    bsrnn_forward,
    bsrnn_from_checkpoint,
    bsrnn_loss,
    default_band_edges,
    magnitude_mae,
    waveform_mae,
)
from .checkpoint import (  # noqa: F401
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .sgmse import (  # noqa: F401
    OuveParams,
    ScoreNet,
    diffusion_coeff,
    marginal_std,
    ouve_marginal,
    reverse_sample,
    score_loss,
    scorenet_from_checkpoint,
    sgmse_enhance,
    sgmse_enhance_model,
    unit_draw_like,
)
from .spectral import (  # noqa: F401
    SpectralConfigError,
    SpectrogramConfig,
    compress,
    decompress,
    istft,
    istft_torch,
    stft,
    stft_torch,
)
