"""Relation-shape convolution for point clouds.

Self-contained: a small reverse-mode autodiff engine on numpy arrays,
point-cloud geometry kernels, the relation-shape convolution operator,
hierarchical networks for classification / part segmentation / normal
estimation, a synthetic-shape data pipeline, and a training harness.
"""

__version__ = "0.1.0"
