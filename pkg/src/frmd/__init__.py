"""One-step movement-primitive diffusion policies for 2D manipulation tasks."""

from .mp import (
    MPConfig,
    BasisTables,
    BoundaryState,
    Trajectory,
    build_basis,
    solve_boundary,
    decode,
    decode_affine_map,
    reference_integrate,
)
from .metrics import curvature, nonsmooth_count, success_rate, bench_inference

__version__ = "0.1.0"
