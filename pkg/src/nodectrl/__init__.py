"""Control synthesis for ReLU neural ODEs with piecewise-constant parameters."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Box,
    CertificationError,
    ControlSchedule,
    DiscreteMeasure,
    ElementaryControl,
    LabeledEnsemble,
    NodeCtrlError,
    PreconditionError,
    Region,
    SchemaError,
    SimpleFunction,
    StripPartition,
    concat,
    rescale,
    reverse,
    schedule_from_json,
    schedule_metrics,
    schedule_to_json,
)
from .flow import elementary_flow, flow_points, integrate_schedule, rk4_flow  # noqa: E402
from .classify import synthesize_classifier, verify_classification  # noqa: E402
from .simcontrol import synthesize_approx_simcontrol, synthesize_simcontrol  # noqa: E402
from .approx import approximate, build_cover, estimate_box_dimension, l2_error, synthesize_approximator  # noqa: E402
from .wasserstein import wasserstein1  # noqa: E402
from .transport import DensitySpec, synthesize_multiclass_transport, synthesize_transport  # noqa: E402

__all__ = [
    "Box",
    "CertificationError",
    "ControlSchedule",
    "DensitySpec",
    "DiscreteMeasure",
    "ElementaryControl",
    "LabeledEnsemble",
    "NodeCtrlError",
    "PreconditionError",
    "Region",
    "SchemaError",
    "SimpleFunction",
    "StripPartition",
    "approximate",
    "build_cover",
    "concat",
    "elementary_flow",
    "estimate_box_dimension",
    "flow_points",
    "integrate_schedule",
    "l2_error",
    "rescale",
    "reverse",
    "rk4_flow",
    "schedule_from_json",
    "schedule_metrics",
    "schedule_to_json",
    "synthesize_approx_simcontrol",
    "synthesize_approximator",
    "synthesize_classifier",
    "synthesize_multiclass_transport",
    "synthesize_simcontrol",
    "synthesize_transport",
    "verify_classification",
    "wasserstein1",
]
