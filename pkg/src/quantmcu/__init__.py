"""Value-driven mixed-precision quantization planning for patch-based inference."""

from .actstats import (
    GaussianFit,
    HistogramStats,
    OutlierModel,
    calibration_range,
    classify_value,
    fake_quantize,
    fit_gaussian,
    histogram_entropy,
)
from .errors import Infeasible, QuantMCUError
from .estimator import QuantMCUPlanner
from .netgraph import (
    DataflowBranch,
    FeatureMapShape,
    LayerSpec,
    MemoryModel,
    NetworkSpec,
    Region,
    bitops,
    infer_shapes,
    load_network,
    mac_count,
    peak_memory,
    receptive_region,
    redundancy_ratio,
    split_patches,
)
from .pipeline import (
    PlanConfig,
    QuantPlan,
    build_plan,
    evaluate_fidelity,
    load_report,
    plan_to_dict,
    save_report,
    sweep,
)
from .refengine import (
    CalibrationSet,
    WeightSet,
    calibrate,
    forward_branch,
    forward_fp,
    forward_quant,
    load_calibration,
    load_tensor,
    save_tensor,
    stitch,
    synthetic_weights,
)
from .vdpc import BranchPolicy, PatchClass, PatchLabel, Policy, assign_policies, classify_all, classify_patch
from .vdqs import (
    BitwidthAssignment,
    QuantScoreTable,
    SearchConfig,
    build_score_table,
    phi_score,
    quant_score,
    search_bitwidths,
)

__version__ = "0.1.0"

__all__ = [
    "BitwidthAssignment",
    "BranchPolicy",
    "CalibrationSet",
    "DataflowBranch",
    "FeatureMapShape",
    "GaussianFit",
    "HistogramStats",
    "Infeasible",
    "LayerSpec",
    "MemoryModel",
    "NetworkSpec",
    "OutlierModel",
    "PatchClass",
    "PatchLabel",
    "PlanConfig",
    "Policy",
    "QuantMCUError",
    "QuantMCUPlanner",
    "QuantPlan",
    "QuantScoreTable",
    "Region",
    "SearchConfig",
    "WeightSet",
    "assign_policies",
    "bitops",
    "build_plan",
    "build_score_table",
    "calibrate",
    "calibration_range",
    "classify_all",
    "classify_patch",
    "classify_value",
    "evaluate_fidelity",
    "fake_quantize",
    "fit_gaussian",
    "forward_branch",
    "forward_fp",
    "forward_quant",
    "histogram_entropy",
    "infer_shapes",
    "load_calibration",
    "load_network",
    "load_report",
    "load_tensor",
    "mac_count",
    "peak_memory",
    "phi_score",
    "plan_to_dict",
    "quant_score",
    "receptive_region",
    "redundancy_ratio",
    "save_report",
    "save_tensor",
    "search_bitwidths",
    "split_patches",
    "stitch",
    "sweep",
    "synthetic_weights",
]
