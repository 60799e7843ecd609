"""Sparse-to-dense feature matching on numpy/scipy.

A small reverse-mode autograd (:mod:`s2dmatch.tensor`, :mod:`s2dmatch.layers`)
drives a multi-level VGG-style backbone (:mod:`s2dmatch.backbone`). Sparse
descriptors from image A are correlated against dense feature maps of image B
(:mod:`s2dmatch.matcher`). Training on synthetic homography pairs lives in
:mod:`s2dmatch.training`, homography evaluation in :mod:`s2dmatch.evaluation`
and the PnP noise study in :mod:`s2dmatch.pose`.
"""

__version__ = "0.1.0"
