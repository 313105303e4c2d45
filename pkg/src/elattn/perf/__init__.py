"""Cost accounting, roofline prediction, benchmarks and report rendering."""

from elattn.perf.accounting import (
    CONVENTIONS,
    GroupCost,
    OpGroupProfile,
    StepKind,
    WorkloadSpec,
    cache_bytes,
    op_group_profile,
)
from elattn.perf.roofline import RooflinePrediction, RooflineSpec, roofline_predict

__all__ = [
    "CONVENTIONS",
    "GroupCost",
    "OpGroupProfile",
    "RooflinePrediction",
    "RooflineSpec",
    "StepKind",
    "WorkloadSpec",
    "cache_bytes",
    "op_group_profile",
    "roofline_predict",
]
