"""Critical multi-type branching processes with immigration and their diffusion limits."""

__version__ = "0.1.0"

from .errors import (BranchlabError, ConvergenceError, DegenerateLawError,  # noqa: E402
                     InsufficientStepsError, ModelSpecError, MomentMismatchError,
                     NotCriticalError, NotPSDError, ReducibleMatrixError,
                     SimulationOverflowError)
from .matrix_analysis import CyclicStructure, analyze, limit_projector, perron_data  # noqa: E402
from .model import (BranchingModel, OffspringLaw, build_model, load_model,  # noqa: E402
                    model_from_spec, validate_critical_indecomposable)
