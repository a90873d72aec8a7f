"""Super-resolution of fire-risk rasters.

Builds 3-channel fire-risk rasters (fire counts, temperature deviation,
burnable land index), trains a small fully-convolutional super-resolution
network from scratch at 2x/4x/8x, benchmarks it against bicubic interpolation
with pooled RMSE/R² and precision/F1/threat score, and applies trained
networks to coarse climate-model-style inputs.
"""

from .dataset import (
    DatasetManifest,
    NormalizationSpec,
    Sample,
    build_sample,
    burnable_index,
    default_burnable_mapping,
    load_manifest,
    split_manifest,
    synth_generate,
    temp_deviation,
)
from .errors import (
    DataError,
    DivergenceError,
    FireSrError,
    FormatError,
    GridMismatchError,
    NumericError,
    UsageError,
)
from .evaluation import (
    DEFAULT_THRESHOLD,
    BinaryFireMap,
    EvalReport,
    binarize,
    classification_metrics,
    continuous_metrics,
    evaluate_models,
    evaluate_predictions,
    infer_coarse,
)
from .model import (
    ConvLayer,
    NetworkWeights,
    build_network,
    export_layer1_filters,
    forward,
    load_weights,
    save_weights,
)
from .raster import (
    ChannelStack,
    Raster,
    bicubic_resample,
    bilinear_resample,
    block_average_downsample,
    raster_from_csv,
    read_raster,
    write_pgm,
    write_raster,
)
from .training import (
    AdamState,
    GradientSet,
    TrainConfig,
    backward,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
