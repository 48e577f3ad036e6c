"""Input-output dimension reduction for parameterized dynamical models."""

__version__ = "0.1.0"

from .gpce import LegendrePCE, eval_surrogate, fit_gpce, grad_surrogate, total_degree_set  # noqa: E402
from .model import (BuiltinRunner, ExternalRunner, FunctionRunner, ModelConfig,  # noqa: E402
                    ParameterSpace, evaluate_design, from_unit, outcomes, simulate, to_unit)
from .pipeline import (InputOutputROM, PlanResult, ReducedRom, build_rom, evaluate_plans,  # noqa: E402
                       export_loadings, plan_for_target, reduced_directions, verify_directions)
from .reduction import (OutputPCA, PCABasis, SnapshotMatrix, Standardization, project,  # noqa: E402
                        pseudoinverse, standardize_rows, truncated_pca)
from .sparsegrid import SparseGrid, clenshaw_curtis_1d, grid_quadrature, smolyak_grid  # noqa: E402

__all__ = [
    "BuiltinRunner", "ExternalRunner", "FunctionRunner", "InputOutputROM", "LegendrePCE",
    "ModelConfig", "OutputPCA", "PCABasis", "ParameterSpace", "PlanResult", "ReducedRom",
    "SnapshotMatrix", "SparseGrid", "Standardization", "build_rom", "clenshaw_curtis_1d",
    "eval_surrogate", "evaluate_design", "evaluate_plans", "export_loadings", "fit_gpce",
    "from_unit", "grad_surrogate", "grid_quadrature", "outcomes", "plan_for_target", "project",
    "pseudoinverse", "reduced_directions", "simulate", "smolyak_grid", "standardize_rows",
    "to_unit", "total_degree_set", "truncated_pca", "verify_directions",
]
