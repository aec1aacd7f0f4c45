"""Keypoint-detector evasion toolkit.

Renders synthetic stick-figure subjects, trains a small heatmap keypoint
detector, perturbs images globally or inside a disk around one keypoint to
remove or flip detections, fits a parametric skeleton to the surviving
keypoints with a robust objective, and reports the induced shape error.

Submodules are imported on demand; `shape_evade.detector` and friends pull in
the compiled kernel backend, which takes a moment on first import.
"""

__version__ = "0.1.0"
