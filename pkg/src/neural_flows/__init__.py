"""Neural flows: direct parameterizations of ODE solution curves, with neural-ODE baselines."""
from .autograd import Tape, Tensor, backward, no_grad
from .flows import (
    CouplingFlowLayer,
    FlowStack,
    GRUFlowLayer,
    InversionError,
    LinearFlow,
    ResNetFlowLayer,
    autonomous_penalty,
    build_flow,
    embed_time,
    flow_forward,
    flow_inverse,
    solve_ivp,
)
from .linalg import matrix_exp
from .ode import SolverConfig, VectorField, batched_solve, ode_solve, stiff_reference

__version__ = "0.1.0"
