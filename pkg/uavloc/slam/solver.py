import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import spsolve

from uavloc.slam.graph import evaluate_loss, linearize
from uavloc.slam.state import StateVector
from uavloc.utils.io_utils import write_table

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Non-finite loss, or a normal system that stays singular after damping escalation."""


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 50
    step_tol: float = 1e-4
    damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    max_damping: float = 1e10
    min_damping: float = 1e-12
    min_distance: float = 0.5

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"Solver max_iters must be at least 1, got {self.max_iters}")
        if not (self.step_tol > 0 and self.min_distance > 0):
            raise ValueError("Solver step_tol and min_distance must be positive")
        if self.damping < 0 or self.damping_up <= 1 or not 0 < self.damping_down < 1:
            raise ValueError("Damping must be non-negative, damping_up > 1 and 0 < damping_down < 1")

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: value for key, value in (data or {}).items()})


@dataclass(frozen=True)
class IterationTrace:
    iteration: int
    loss: float
    step_norm: float
    damping: float
    accepted: bool


@dataclass(frozen=True, eq=False)
class SolveResult:
    state: StateVector
    loss: float
    trace: list
    initial_loss: float

    @property
    def n_iter(self):
        return len(self.trace)


def trace_frame(trace):
    return pd.DataFrame([vars(entry) for entry in trace],
                        columns=["iteration", "loss", "step_norm", "damping", "accepted"])


def save_trace(trace, path):
    return write_table(trace_frame(trace), path)


def _solve_damped(hessian, gradient, damping):
    system = (hessian + damping * sparse.identity(hessian.shape[0], format="csc")).tocsc()
    with np.errstate(all="ignore"):
        delta = spsolve(system, -gradient)
    return np.atleast_1d(delta)


def solve_gauss_newton(graph, init, config=None):
    """
    Levenberg-damped Gauss-Newton on the residual graph.

    Args:
        graph (ResidualGraph): residual blocks.
        init (StateVector): starting state.
        config (SolverConfig, optional): iteration limits and damping schedule.

    Returns:
        SolveResult: final state, its loss (never above the initial loss) and the iteration trace.

    Raises:
        SolverError: If the loss is not finite or the damped system cannot be solved.
    """
    config = config or SolverConfig()
    x = init.pack().copy()
    lin = linearize(graph, x)
    loss = lin.loss
    if not np.isfinite(loss):
        logger.error(f"Initial loss is not finite: {loss}")
        raise SolverError(f"Initial loss is not finite: {loss}")
    initial_loss = loss
    damping = config.damping
    trace = []
    for iteration in range(1, config.max_iters + 1):
        delta = _solve_damped(lin.H, lin.b, damping)
        if not np.all(np.isfinite(delta)):
            damping = max(damping * config.damping_up, config.min_damping)
            if damping > config.max_damping:
                raise SolverError(f"Normal system stayed singular up to damping {damping:.3e}")
            trace.append(IterationTrace(iteration, loss, float("nan"), damping, False))
            continue
        step = float(np.linalg.norm(delta))
        if step < config.step_tol:
            trace.append(IterationTrace(iteration, loss, step, damping, False))
            break
        candidate = x + delta
        candidate_loss = evaluate_loss(graph, candidate)
        accepted = bool(np.isfinite(candidate_loss) and candidate_loss < loss)
        if accepted:
            x = candidate
            lin = linearize(graph, x)
            loss = lin.loss
            damping = damping * config.damping_down
        else:
            damping = max(damping * config.damping_up, config.min_damping)
        trace.append(IterationTrace(iteration, loss, step, damping, accepted))
        logger.debug(f"GN iteration {iteration}: loss {loss:.6f}, step {step:.3e}, damping {damping:.3e}, "
                     f"{'accepted' if accepted else 'rejected'}")
        if damping > config.max_damping:
            logger.debug("Damping limit reached without further descent")
            break
    state = StateVector.from_packed(x, graph.n_uav, graph.n_users)
    return SolveResult(state=state, loss=loss, trace=trace, initial_loss=initial_loss)
