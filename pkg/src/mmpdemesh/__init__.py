"""Moving mesh PDE smoothing and adaptation of simplicial meshes."""

from .diagnostics import (FloorMonitor, QualityReport, TheoremBounds, check_lemma_fk1,
                          check_lemma_fk2, quality_report, scaling_study, theorem_floors)
from .errors import (DegenerateElement, IndexBaseError, MeshError, NonSPDMetric, NotCoercive,
                     ParseError, SingularPatch, UnsupportedDimension, ZeroSurfaceGradient)
from .functionals import FunctionalSpec, balance_p, eval_g
from .integrate import EnergyTrace, IntegratorConfig, integrate, step
from .io import read_mesh, write_mesh
from .mesh import (BoundaryConstraint, ComputationalMesh, SimplicialMesh, box_mesh,
                   perturb_mesh, reference_equilateral, unit_square_mesh)
from .metric import (AnalyticMetric, IdentityMetric, NodalMetric, absolute_spd,
                     build_adaptation_metric, estimate_bounds, recover_hessian,
                     solve_regularization_alpha)
from .mmpde import (MmpdeProblem, apply_constraints, assemble_velocities, discrete_functional,
                    fd_gradient, local_velocities)
from .scenarios import Scenario, build, custom

__version__ = "0.1.0"
