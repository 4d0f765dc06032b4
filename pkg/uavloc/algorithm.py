import logging
from dataclasses import dataclass, field

import numpy as np

from uavloc.em_learn import (ClassificationState, EmConfig, fit_toa_params, hard_classify, initial_gain_params,
                             run_em_gain)
from uavloc.radio_model import link_geometry
from uavloc.slam.graph import build_graph, evaluate_loss
from uavloc.slam.solver import SolverConfig, solve_gauss_newton
from uavloc.slam.state import StateVector
from uavloc.utils.modes import EstimatorMode, validate_estimator_mode

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Algorithm1Config:
    outer_tol: float = 1e-3
    max_outer_iters: int = 10
    grid_step: float = 10.0
    mode: EstimatorMode = EstimatorMode.FULL
    em: EmConfig = field(default_factory=EmConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        object.__setattr__(self, "mode", validate_estimator_mode(self.mode))
        if self.outer_tol <= 0 or self.grid_step <= 0:
            raise ValueError("outer_tol and grid_step must be positive")
        if self.max_outer_iters < 1:
            raise ValueError(f"max_outer_iters must be at least 1, got {self.max_outer_iters}")


@dataclass(eq=False)
class Algorithm1Result:
    state: StateVector
    params: object
    classification: ClassificationState
    converged: bool
    n_outer: int
    objective: list
    solve_traces: list

    @property
    def warning(self):
        return not self.converged


def learn_channel(measurements, state, template, em_config, params_init=None, min_distance=0.5):
    """
    EM with positions held fixed: classify every link and learn the channel parameters
    :param measurements: MeasurementSet
    :param state: StateVector supplying the link distances
    :param template: ChannelParams holding the ToA prior used when a segment has no mass
    :param em_config: EmConfig
    :param params_init: warm start for the gain mixture; None uses the data-driven initializer
    :return: (ChannelParams, ClassificationState with labels, EmResult)
    """
    distances = np.maximum(link_geometry(measurements, state.uav, state.users), min_distance)
    gains = measurements.pooled("gain")
    phi = np.log10(distances)
    init = params_init if params_init is not None else initial_gain_params(template, gains, phi, em_config)
    em = run_em_gain(em_config, init, gains, phi)
    params = fit_toa_params(em.omega, measurements.pooled("toa_range"), distances, em.params, em_config)
    soft = ClassificationState.from_pooled(em.omega, measurements.family_shapes())
    return params, hard_classify(soft), em


def _user_anchors(measurements, uav_xy, k):
    uav = np.column_stack([np.asarray(uav_xy, dtype=float).reshape(-1, 2), measurements.uav_altitudes])
    anchors = np.vstack([uav, measurements.bs_sites])
    gains = np.concatenate([measurements.uav_ue.gain[:, k], measurements.bs_ue.gain[:, k]])
    toa = np.concatenate([measurements.uav_ue.toa_range[:, k], measurements.bs_ue.toa_range[:, k]])
    return anchors, gains, toa


def user_mixture_nll(points, anchors, gains, toa, params, mode=EstimatorMode.FULL, min_distance=0.5):
    """
    Negative log-likelihood of one user's links at candidate ground points, marginalizing the link state.
    Gain and ToA of a link share the state.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mode = validate_estimator_mode(mode)
    if len(anchors) == 0:
        return np.zeros(len(points))
    delta = np.empty((len(points), len(anchors), 3))
    delta[..., :2] = points[:, None, :] - anchors[None, :, :2]
    delta[..., 2] = -anchors[None, :, 2]
    distance = np.maximum(np.linalg.norm(delta, axis=-1), min_distance)
    phi = np.log10(distance)
    terms = []
    for seg, prior in ((params.los, params.pi_los), (params.nlos, params.pi_nlos)):
        with np.errstate(divide="ignore"):
            term = np.log(prior) - 0.5 * np.log(2 * np.pi * seg.sigma ** 2) \
                - 0.5 * ((gains - seg.beta - seg.alpha * phi) / seg.sigma) ** 2
        if mode is EstimatorMode.FULL:
            term = term - 0.5 * np.log(2 * np.pi * seg.sigma_tau ** 2) \
                - 0.5 * ((toa - distance - seg.mu_tau) / seg.sigma_tau) ** 2
        terms.append(term)
    return -np.sum(np.logaddexp(terms[0], terms[1]), axis=1)


def _grid(area, step):
    xs = np.arange(area.x_min + step / 2.0, area.x_max, step)
    ys = np.arange(area.y_min + step / 2.0, area.y_max, step)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


def initial_state(measurements, params, area, config=None, uav_xy=None, warm_users=None):
    """
    Starting point for the solver.

    UAV nodes start at their GPS fixes (or at uav_xy). Each user starts at the minimum of the mixture
    NLL of its links over a grid covering the area; a warm user estimate replaces the grid minimum when
    it scores better.

    Returns:
        StateVector
    """
    config = config or Algorithm1Config()
    uav_xy = measurements.gps[:, :2].copy() if uav_xy is None else np.asarray(uav_xy, dtype=float).reshape(-1, 2)
    grid = _grid(area, config.grid_step)
    users = np.zeros((measurements.n_users, 2))
    for k in range(measurements.n_users):
        anchors, gains, toa = _user_anchors(measurements, uav_xy, k)
        nll = user_mixture_nll(grid, anchors, gains, toa, params, config.mode, config.solver.min_distance)
        best = int(np.argmin(nll))
        users[k] = grid[best]
        if warm_users is not None:
            warm_nll = user_mixture_nll(warm_users[k], anchors, gains, toa, params, config.mode,
                                        config.solver.min_distance)[0]
            if warm_nll <= nll[best]:
                users[k] = warm_users[k]
    return StateVector(uav=uav_xy, users=users)


def run_algorithm1(measurements, urban_map, params_prior, noise, config=None, init_state=None, params_init=None):
    """
    Alternate EM (positions fixed) and Gauss-Newton SLAM (labels and parameters fixed)

    The objective is the graph loss plus the log variances of the label-selected segments. A channel
    update that would raise it at the current positions is discarded, and the solver never raises it,
    so the objective sequence is non-increasing.

    :param measurements: MeasurementSet
    :param urban_map: UrbanMap; its area bounds the user grid search
    :param params_prior: ChannelParams assumed before learning; drives the grid initializer and is the
                         ToA fallback for a segment without mass. Never the synthesis channel.
    :param noise: OdometryNoise
    :param config: Algorithm1Config
    :param init_state: StateVector; None runs initial_state
    :param params_init: warm start for the first EM pass; None uses the data-driven initializer
    :return: Algorithm1Result; result.warning is set when the outer loop hits max_outer_iters
    """
    config = config or Algorithm1Config()
    state = init_state if init_state is not None else initial_state(measurements, params_prior, urban_map.area, config)
    params_current = params_init
    objective, traces = [], []
    graph = params = labels = None
    converged = False
    n_outer = 0
    for n_outer in range(1, config.max_outer_iters + 1):
        new_params, new_labels, em = learn_channel(measurements, state, params_prior, config.em, params_current,
                                                   config.solver.min_distance)
        new_graph = build_graph(measurements, new_labels, new_params, noise, urban_map, config.mode,
                                config.solver.min_distance)
        proposed = evaluate_loss(new_graph, state) + new_graph.log_variance_sum
        if graph is None or proposed <= objective[-1]:
            graph, params, labels = new_graph, new_params, new_labels
        else:
            logger.debug(f"Channel update raises the objective from {objective[-1]:.4f} to {proposed:.4f}; "
                         f"keeping the previous labels and parameters")
        solved = solve_gauss_newton(graph, state, config.solver)
        value = solved.loss + graph.log_variance_sum
        change = solved.state.max_change(state)
        objective.append(value)
        traces.append(solved.trace)
        logger.debug(f"Outer iteration {n_outer}: objective {value:.4f}, position change {change:.3e} m, "
                     f"EM iterations {em.n_iter}")
        state = solved.state
        params_current = params
        if change < config.outer_tol:
            converged = True
            break
    if not converged:
        logger.warning(f"Outer loop did not converge in {config.max_outer_iters} iterations")
    return Algorithm1Result(state=state, params=params, classification=labels, converged=converged,
                            n_outer=n_outer, objective=objective, solve_traces=traces)
