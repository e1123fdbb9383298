"""Referring multi-object tracking on a synthetic shape world.

A query-based tracker driven by natural-language expressions, built from
scratch: float64 autodiff, multi-scale deformable attention, text fusion,
query adaptation, set matching losses, temporal refinement, an online
tracker, and HOTA evaluation. numpy is the only runtime dependency.
"""

__version__ = "0.1.0"
