from .camera import (
    IGNORE_LABEL,
    Intrinsics,
    PointCloud,
    back_project,
    gather_point_features,
    make_sparse_depth,
    pixel_indices,
    project,
    project_labels,
    round_half_up,
    sample_colors,
    zbuffer_winners,
)
