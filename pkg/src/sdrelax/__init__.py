"""Relaxed energies of multi-level structured deformations on discrete SBV fields."""

__version__ = "0.1.0"

from .densities import (  # noqa: E402
    BulkDensity,
    SurfaceDensity,
    eval_bulk,
    eval_surface,
    recession_estimate,
)
from .dsl import parse, to_text  # noqa: E402
from .catalog import get_density, list_catalog, parse_density  # noqa: E402
from .validate import validate_bulk, validate_surface  # noqa: E402
from .sbv import (  # noqa: E402
    CubeGrid,
    DiscreteSBVField,
    discrete_alberti,
    energy,
    jumps,
    l1_distance,
    make_field,
    moment_pairing,
    piecewise_constant_approx,
)
from .cell import (  # noqa: E402
    CellProblemSpec,
    SolveResult,
    blowup_bulk,
    blowup_surface,
    refine_ladder,
    solve_bulk_cell,
    solve_dirichlet,
    solve_surface_cell,
)
from .approx import (  # noqa: E402
    MultiLevelDeformation,
    StructuredDeformation,
    build_determining_sequence,
    build_multilevel_sequence,
    verify_hsd_convergence,
)
from .multilevel import compare, relax_direct, relax_iterated  # noqa: E402
