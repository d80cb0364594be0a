"""3D segmentation networks built on decomposed large-kernel attention.

From-scratch numpy autograd, network assembly, training, Gaussian-weighted
sliding-window inference, lesion metrics and receptive-field analysis, with
a compiled convolution core and a pure-numpy fallback.
"""

__version__ = "0.1.0"
