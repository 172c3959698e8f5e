from .analyzer import (
    COMPLEMENTARITY_RADIUS,
    DEFAULT_RADII,
    ComplementarityReport,
    ErfResult,
    complementarity,
    compute_erf,
    pick_anchors,
    reproject_pixels,
)
from .export import export_erf, read_ply, write_heatmap
