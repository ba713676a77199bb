"""facerender: semantically controlled portrait sprite rendering.

A desk-scale neural rendering stack: morphable-model motion descriptors
drive an AdaIN-conditioned warp-and-edit generator, and a conditional
recurrent normalizing flow maps audio features to motion sequences. All
numerics run on an in-repo float64 autodiff core.
"""

__version__ = "0.1.0"
