"""Singular Monge-Ampere Dirichlet solver and gradient-graph diagnostics.

Solves det D2(phi) = A + sum_i 1/(2|u - p_i|) on a convex polygon with
affine-linear boundary data, then rebuilds and measures the graph of the
gradient map: vertex subgradient sets, the gradient-image amoeba, mass
balance, and the asymptotics of the ends.
"""

from .geometry import (MonopoleConfig, ConfigError, BoundaryToleranceError,
                       SingularPotentialError, EdgeFrame, WedgeRegion,
                       validate_config, config_from_json, potential,
                       boundary_value, convex_envelope_init, edge_frame, wedge)
from .grid import GridError, SolverGrid, Stencil, build_grid, make_stencil
from .solver import (SolverParams, PotentialField, ConvergenceError,
                     solve, ma_operator, verify_bounds, export_solution)
from .convexity import (GradientField, LegendreTable, VertexSubgradientSet,
                        AmoebaRaster, SubgradientEmptyError, gradient_field,
                        legendre_transform, subgradient_set, amoeba_raster,
                        mass_balance, ray_decay)
from .slbuild import (ReducedGraphMesh, EndDiagnostics, MeshError,
                      EndResolutionError, build_reduced_graph,
                      sl_residual_report, extract_end,
                      appendix_constraint_check, export_mesh, load_mesh)
from .quadrature import potential_mass

__version__ = "0.1.0"
