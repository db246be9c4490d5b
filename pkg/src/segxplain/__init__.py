"""Segmentation, classification and explanation pipeline for chest radiograph studies.

The package is organized around three pipeline stages:

* ``segxplain.segmentation`` -- U-Net lung-field segmentation plus mask
  post-processing and overlap metrics,
* ``segxplain.classification`` -- backbone/head classifier with two-phase
  training, evaluation metrics and paired statistics,
* ``segxplain.xai`` -- LIME and Grad-CAM explanations aggregated into
  class-level heatmaps.

Supporting modules: ``segxplain.nn`` (the tensor/layer runtime everything is
built on), ``segxplain.augment``, ``segxplain.dataio``, ``segxplain.cli`` and
``segxplain.review`` (human mask-review HTTP service).
"""

__version__ = "0.1.0"
