"""Roofline time prediction: GFLOP/s = min(peak GFLOP/s, peak GB/s x AI)."""

from dataclasses import dataclass
from typing import Dict

from elattn.config import RooflineSpec
from elattn.perf.accounting import GroupCost, OpGroupProfile

__all__ = ["RooflinePrediction", "RooflineSpec", "predict_group", "roofline_predict"]


@dataclass(frozen=True)
class RooflinePrediction:
    """Predicted seconds per operation group and in total."""

    seconds: Dict[str, float]

    @property
    def total(self) -> float:
        return sum(self.seconds.values())


def predict_group(cost: GroupCost, hw: RooflineSpec) -> float:
    """Seconds for one group.

    A group with no FLOPs is charged its bytes at peak bandwidth, and one
    that moves no bytes is compute-bound.
    """
    if cost.flops == 0:
        return cost.bytes / (hw.peak_gbs * 1e9)
    if cost.bytes == 0:
        return cost.flops / (hw.peak_gflops * 1e9)
    attainable = min(hw.peak_gflops, hw.peak_gbs * cost.ai)
    return cost.flops / (attainable * 1e9)


def roofline_predict(profile: OpGroupProfile, hw: RooflineSpec) -> RooflinePrediction:
    """Predict the time of every group of ``profile`` on ``hw``.

    Raises:
        ParameterError: If either hardware peak is not positive.
    """
    hw.validate()
    return RooflinePrediction(
        {name: predict_group(cost, hw) for name, cost in profile.groups().items()}
    )
