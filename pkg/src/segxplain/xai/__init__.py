"""Prediction explanation: superpixels, LIME, Grad-CAM, heatmap aggregation."""

from segxplain.xai.superpixels import quickshift, segment_count
from segxplain.xai.lime import Explanation, LimeConfig, lime_explain
from segxplain.xai.gradcam import IntegrationError, gradcam
from segxplain.xai.aggregate import (
    AggregateHeatmap,
    aggregate,
    cam_to_mask,
    explanation_to_mask,
)

__all__ = [
    "AggregateHeatmap",
    "Explanation",
    "IntegrationError",
    "LimeConfig",
    "aggregate",
    "cam_to_mask",
    "explanation_to_mask",
    "gradcam",
    "lime_explain",
    "quickshift",
    "segment_count",
]
