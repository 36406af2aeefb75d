"""Dense CRF inference for instance segmentation.

A pairwise CRF with Gaussian-mixture edge potentials is augmented with
higher-order detection cliques, each tied to a latent validity variable.
Mean-field inference jointly refines pixel marginals and recalibrates
detection scores; the recalibrated detections then drive a second,
dynamically-sized CRF that assigns pixels to object instances.
"""

from .core import (
    DegenerateDetectionError,
    Detection,
    DetectionParams,
    DistributionField,
    KernelSpec,
    Labeling,
    LabelSpace,
    PairwiseConfig,
    PixelGrid,
    UnaryField,
    clamp_score,
    potts_matrix,
    softmax_rows,
    y_unary_pair,
)
from .energy import (
    OracleTooLargeError,
    detection_clique_energy,
    exact_marginals_bruteforce,
    free_energy,
    total_energy,
)
from .filters import (
    FeatureField,
    FilterPlan,
    bilateral_features,
    build_plan,
    build_plans,
    combined_kernel_matrix,
    features_for_kernel,
    filter_adjoint,
    filter_values,
    kernel_matrix,
    spatial_features,
)
from .meanfield import (
    InferenceSettings,
    SemanticResult,
    decode,
    fixed_point_residual,
    run,
)
from .instances import (
    InstanceLabelSpace,
    InstanceMap,
    box_iou,
    foreground_heuristic,
    identify_instances,
    naive_baseline,
    nms,
    run_instance_crf,
    segment_instances,
)
from .autodiff import (
    GradCheckInstance,
    GradCheckReport,
    GradientBundle,
    Tape,
    TapeMismatchError,
    backward,
    gradcheck,
)
from .metrics import (
    AprSummary,
    GroundTruthInstance,
    PredictedInstance,
    apr_at,
    apr_summary,
    average_precision,
    mask_iou,
    match_predictions,
)
from .permutohedral import PermutohedralLattice

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
