"""qlwa: layer-wise quantization analysis on a minimal inference engine.

The package decomposes a network's post-training quantization degradation
into per-layer contributions, checks that those contributions sum to the
whole-network degradation, and applies targeted per-layer fixes (clipping,
bias correction, channel equalization).
"""

from .analysis import (
    AdditivityResult,
    AdditivityTrial,
    FixComparison,
    LayerSensitivity,
    OutlierSummary,
    SensitivityReport,
    additivity_to_json,
    analyze_layer,
    check_additivity,
    compare_fixes,
    diagnose_outliers,
    fix_comparison_to_json,
    heatmap_csv,
    histogram_csv,
    outliers_to_json,
    rank_layers,
    report_from_json,
    report_to_json,
    scatter_csv,
    sweep,
)
from .data import (
    ARCHES,
    NEG_L2,
    OUTLIER_FACTOR,
    OUTLIER_LAYER,
    TOP1,
    Dataset,
    Metric,
    evaluate,
    evaluate_stacked,
    gen_dataset,
    gen_fixture,
    load_dataset,
    save_dataset,
    stack_samples,
)
from .errors import ConfigError, FormatError, GraphError, QlwaError, ShapeError
from .graph import (
    BatchNorm,
    LayerNode,
    NetworkGraph,
    compute_layers,
    fold_batch_norms,
    forward,
    has_batch_norm,
    load_model,
    network_id,
    save_model,
    validate,
)
from .quant import (
    CalibrationRecord,
    LayerQuantConfig,
    LayerQuantizer,
    NetworkQuantizer,
    QuantParams,
    bias_correct,
    calibrate,
    configs_from_json,
    configs_to_json,
    equalization_scales,
    equalize_pair,
    make_layer_quantizer,
    preactivation_mean_shift,
    quantize_dequantize,
    quantize_network,
    uniform_configs,
    weight_range_minmax,
    weight_range_mse_grid,
)
from .rng import SplitMix64, uniform_block
from .tensor import (
    TENSOR_MAGIC,
    add,
    as_tensor,
    avgpool2d,
    conv2d,
    dense,
    global_avg_pool,
    load_tensor,
    maxpool2d,
    relu,
    save_tensor,
)

__version__ = "0.1.0"
