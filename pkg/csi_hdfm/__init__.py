__version__ = "0.1.0"

from .classify import (
    ClassifierModel,
    ConfusionMatrix,
    MetricsReport,
    TrainConfig,
    confusion,
    evaluate,
    metrics,
    predict,
    train,
)
from .csi import (
    CsiFrame,
    LabeledFrame,
    amplitude,
    iter_channel_blocks,
    load_dataset,
    load_frame,
    phase,
    read_geometry,
    sanitize_phase,
    sanitized_phase_basis,
    save_dataset,
    store_frame,
)
from .errors import (
    CorruptionError,
    CsiHdfmError,
    DegenerateInputError,
    FormatError,
    UsageError,
    ValidationError,
)
from .features import FusedFeatures, Spectrogram, StftConfig, fuse, stft, summarize
from .hdfm import (
    FactorDecomposition,
    HdfmConfig,
    HdfmResult,
    estimate_sigma2,
    extract_features,
    fit_factor_count,
    pca_compress,
    residual,
    top_principal_components,
)
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .spectral import (
    Ecdf,
    EigenSpectrum,
    MpParams,
    covariance,
    eigenvalues,
    mp_cdf,
    mp_edges,
    mp_pdf,
    spectral_distance,
    spiked_limit,
)
from .synth import (
    SpikedModelSpec,
    SyntheticDatasetSpec,
    gen_labeled_dataset,
    gen_noise,
    gen_spiked,
)
