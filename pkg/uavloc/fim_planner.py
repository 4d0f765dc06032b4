import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import block_diag

from uavloc.algorithm import Algorithm1Config, initial_state, run_algorithm1
from uavloc.em_learn import DegenerateSegmentError
from uavloc.geo_env import Area, los_probability
from uavloc.radio_model import MeasurementSet, collect_epoch, collect_static_links
from uavloc.slam.solver import SolverError

logger = logging.getLogger(__name__)

# E, NE, N, NW, W, SW, S, SE, then stay
NEIGHBOR_ANGLES = np.deg2rad(np.arange(0, 360, 45))
CONDITION_LIMIT = 1e12
REACH_TOL = 1e-9


@dataclass(frozen=True)
class PlannerConfig:
    d_max: float
    n_total: int
    x_start: tuple
    x_end: tuple
    neighbor_step: float = None
    prior_fim_eps: float = 1e-4
    stay_in_area: bool = True
    area: Area = None
    min_distance: float = 0.5
    replan_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "x_start", tuple(float(v) for v in self.x_start))
        object.__setattr__(self, "x_end", tuple(float(v) for v in self.x_end))
        if self.neighbor_step is None:
            object.__setattr__(self, "neighbor_step", float(self.d_max))
        if self.area is not None:
            object.__setattr__(self, "area", Area.coerce(self.area))
        if not self.d_max > 0:
            raise ValueError(f"d_max must be positive, got {self.d_max}")
        if not 0 < self.neighbor_step <= self.d_max + REACH_TOL:
            raise ValueError(f"neighbor_step must lie in (0, d_max], got {self.neighbor_step}")
        if self.n_total < 1 or self.replan_stride < 1:
            raise ValueError("n_total and replan_stride must be at least 1")
        gap = float(np.linalg.norm(np.subtract(self.x_end, self.x_start)))
        if gap > self.d_max * (self.n_total - 1) + REACH_TOL:
            raise ValueError(f"x_end is {gap:.1f} m from x_start, beyond the reach of {self.n_total} epochs")


@dataclass(eq=False)
class FimState:
    """
    Fisher information over the stacked user coordinates, kept as per-user 2x2 blocks
    (users share no parameters, so F is block-diagonal). n is the last epoch folded in, -1 before take-off.
    """
    blocks: np.ndarray
    n: int = -1
    inv_blocks: np.ndarray = field(default=None)

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float).reshape(-1, 2, 2)
        if self.inv_blocks is None:
            self.inv_blocks = np.linalg.inv(self.blocks) if len(self.blocks) else np.zeros((0, 2, 2))

    @property
    def n_users(self):
        return len(self.blocks)

    @property
    def F(self):
        return block_diag(*self.blocks) if self.n_users else np.zeros((0, 0))

    @property
    def F_inv(self):
        return block_diag(*self.inv_blocks) if self.n_users else np.zeros((0, 0))

    def crb_trace(self):
        return float(np.trace(self.inv_blocks, axis1=1, axis2=2).sum())


def fim_contributions(anchor, user_ests, w, params, min_distance=0.5):
    """Vectorized fim_contribution for one anchor and K users; returns (K, 2, 2)."""
    anchor = np.asarray(anchor, dtype=float)
    users = np.asarray(user_ests, dtype=float).reshape(-1, 2)
    w = np.broadcast_to(np.asarray(w, dtype=float), (len(users),))
    if np.any((w < 0) | (w > 1)):
        raise ValueError("LoS probabilities must lie in [0, 1]")
    horizontal = users - anchor[:2]
    distance = np.sqrt(np.sum(horizontal ** 2, axis=1) + anchor[2] ** 2)
    if np.any(distance < min_distance):
        raise ValueError(f"Link distance below {min_distance} m has no usable Fisher information")
    g = horizontal / distance[:, None]
    outer = g[:, :, None] * g[:, None, :]
    weight = w / params.los.sigma_tau ** 2 + (1.0 - w) / params.nlos.sigma_tau ** 2
    return outer * weight[:, None, None]


def fim_contribution(uav, user_est, w, params, min_distance=0.5):
    """
    ToA Fisher information about one user from one link.

    Args:
        uav: 3D anchor position (UAV or BS).
        user_est: 2D user estimate, at ground level.
        w (float): LoS probability of the link.
        params (ChannelParams): sigma_tau of both segments; the ToA bias carries no position information.

    Returns:
        numpy.ndarray: 2x2 matrix w * H_LoS + (1 - w) * H_NLoS with H_s = g g' / sigma_tau_s^2.
    """
    return fim_contributions(uav, np.asarray(user_est, dtype=float)[None, :], w, params, min_distance)[0]


def fim_accumulate(state, contributions):
    contributions = np.asarray(contributions, dtype=float).reshape(state.blocks.shape)
    return FimState(blocks=state.blocks + contributions, n=state.n + 1)


def _improvement_blocks(state, contributions):
    blocks = []
    for f_block, f_inv, h_block in zip(state.blocks, state.inv_blocks, contributions):
        if np.linalg.cond(h_block) < CONDITION_LIMIT:
            blocks.append(f_inv @ np.linalg.inv(np.linalg.inv(h_block) + f_inv) @ f_inv)
        else:
            blocks.append(f_inv - np.linalg.inv(f_block + h_block))
    return np.array(blocks).reshape(-1, 2, 2)


def improvement_matrix(state, contributions):
    """
    Reduction of the inverse FIM brought by one epoch of contributions
    :param state: FimState before the epoch
    :param contributions: (K, 2, 2) per-user information of the epoch
    :return: 2K x 2K matrix R with F_prev^-1 - R = (F_prev + sum H)^-1
    """
    contributions = np.asarray(contributions, dtype=float).reshape(state.blocks.shape)
    blocks = _improvement_blocks(state, contributions)
    return block_diag(*blocks) if len(blocks) else np.zeros((0, 0))


def _current_index(state):
    # before any epoch is folded in the UAV sits at x_start, epoch 0
    return max(state.n, 0)


def greedy_objective(candidate, state, user_ests, predictor, params, config):
    candidate = np.asarray(candidate, dtype=float)
    remaining = config.n_total - 1 - (_current_index(state) + 1)
    reach = config.d_max * remaining
    if np.linalg.norm(candidate - np.asarray(config.x_end)) > reach + REACH_TOL:
        return -np.inf
    if config.stay_in_area and config.area is not None and not config.area.contains(candidate[:2]):
        return -np.inf
    users = np.asarray(user_ests, dtype=float).reshape(-1, 2)
    w = np.atleast_1d(los_probability(predictor, candidate, np.column_stack([users, np.zeros(len(users))])))
    contributions = fim_contributions(candidate, users, w, params, config.min_distance)
    return float(np.trace(_improvement_blocks(state, contributions), axis1=1, axis2=2).sum())


def neighbor_candidates(current, step):
    current = np.asarray(current, dtype=float)
    offsets = np.column_stack([np.cos(NEIGHBOR_ANGLES), np.sin(NEIGHBOR_ANGLES), np.zeros(len(NEIGHBOR_ANGLES))])
    ring = current + step * offsets
    return np.vstack([ring, current[None, :]])


def greedy_step(current, state, user_ests, predictor, params, config):
    """
    Pick the next UAV position among the 8 neighbors and "stay", maximizing the CRB improvement.
    Ties go to the first candidate in E, NE, N, NW, W, SW, S, SE, stay order. When no candidate can
    still reach x_end in time, move straight toward it by the remaining distance over the remaining epochs.
    """
    current = np.asarray(current, dtype=float)
    steps_left = config.n_total - 1 - _current_index(state)
    if steps_left < 1:
        raise ValueError(f"No epochs left after step {state.n} of {config.n_total}")
    candidates = neighbor_candidates(current, config.neighbor_step)
    scores = np.array([greedy_objective(c, state, user_ests, predictor, params, config) for c in candidates])
    if np.all(np.isneginf(scores)):
        target = np.asarray(config.x_end)
        logger.debug(f"No feasible candidate at step {state.n}; homing toward {target.tolist()}")
        return current + (target - current) / steps_left
    best = int(np.argmax(scores))
    logger.debug(f"Step {state.n}: candidate {best} with score {scores[best]:.4e}")
    return candidates[best]


def initial_fim(user_ests, bs_sites, bs_weights, params, eps=1e-4, min_distance=0.5):
    """Diagonal loading plus the ToA information of the BS-user links."""
    users = np.asarray(user_ests, dtype=float).reshape(-1, 2)
    blocks = np.tile(eps * np.eye(2), (len(users), 1, 1))
    bs_weights = np.asarray(bs_weights, dtype=float).reshape(-1, len(users))
    for site, w in zip(np.asarray(bs_sites, dtype=float).reshape(-1, 3), bs_weights):
        blocks = blocks + fim_contributions(site, users, w, params, min_distance)
    return FimState(blocks=blocks, n=-1)


def rebuild_fim(user_ests, uav_positions, uav_weights, bs_sites, bs_weights, params, config):
    """
    F after len(uav_positions) epochs, evaluated from scratch at the current user estimates
    :param uav_positions: (n, 3) estimated UAV positions of past epochs
    :param uav_weights: (n, K) LoS weights (hard labels or predicted probabilities)
    :param bs_weights: (M, K) LoS weights of the BS-user links
    """
    state = initial_fim(user_ests, bs_sites, bs_weights, params, config.prior_fim_eps, config.min_distance)
    for position, w in zip(np.asarray(uav_positions, dtype=float).reshape(-1, 3), np.asarray(uav_weights)):
        state = fim_accumulate(state, fim_contributions(position, user_ests, w, params, config.min_distance))
    return state


def rectangle_trajectory(center, budget, n_points, altitude):
    """
    n_points evenly spaced along a square of perimeter budget centered at center, starting at its
    south-west corner and running counter-clockwise.
    """
    side = budget / 4.0
    cx, cy = np.asarray(center, dtype=float)[:2]
    corners = np.array([[cx - side / 2, cy - side / 2], [cx + side / 2, cy - side / 2],
                        [cx + side / 2, cy + side / 2], [cx - side / 2, cy + side / 2]])
    arc = np.arange(n_points) * budget / n_points
    leg = np.minimum((arc // side).astype(int), 3)
    frac = (arc - leg * side) / side
    start = corners[leg]
    end = corners[(leg + 1) % 4]
    xy = start + (end - start) * frac[:, None]
    return np.column_stack([xy, np.full(n_points, float(altitude))])


def is_feasible(trajectory, config, terminal_tol=None):
    traj = np.asarray(trajectory, dtype=float).reshape(-1, 3)
    terminal_tol = config.neighbor_step / 2.0 if terminal_tol is None else terminal_tol
    steps = np.linalg.norm(np.diff(traj, axis=0), axis=1)
    return bool(np.all(steps <= config.d_max + 1e-6)
                and np.linalg.norm(traj[-1] - np.asarray(config.x_end)) <= terminal_tol + 1e-6)


@dataclass(eq=False)
class MissionRecord:
    trajectory: np.ndarray
    uav_estimates: np.ndarray
    user_history: np.ndarray
    crb_history: np.ndarray
    measurements: MeasurementSet
    result: object
    failures: list

    @property
    def user_estimates(self):
        return self.user_history[-1]

    def to_frame(self):
        rows = []
        for n, (true_xy, est_xy) in enumerate(zip(self.trajectory, self.uav_estimates)):
            row = {"n": n, "uav_x": true_xy[0], "uav_y": true_xy[1], "uav_z": true_xy[2],
                   "uav_est_x": est_xy[0], "uav_est_y": est_xy[1], "crb_trace": self.crb_history[n]}
            for k, user in enumerate(self.user_history[n]):
                row[f"user{k}_x"], row[f"user{k}_y"] = user
            rows.append(row)
        return pd.DataFrame(rows)


def _predicted_weights(predictor, anchors, users):
    users3 = np.column_stack([users, np.zeros(len(users))])
    return np.array([np.atleast_1d(los_probability(predictor, a, users3)) for a in anchors]).reshape(-1, len(users))


def _fim_weights(result, measurements, predictor, uav_positions, users):
    # hard labels where the estimator has classified the link, predicted probabilities elsewhere
    uav_w = _predicted_weights(predictor, uav_positions, users)
    bs_w = _predicted_weights(predictor, measurements.bs_sites, users)
    if result is not None:
        labels = result.classification.labels
        known = min(len(labels["uav_ue"]), len(uav_w))
        uav_w[:known] = labels["uav_ue"][:known]
        bs_w = labels["bs_ue"].astype(float)
    return uav_w, bs_w


def run_mission_online(urban_map, true_users, params_true, noise, predictor, config, algorithm_config, rng,
                       params_prior):
    """
    Fly the greedy planner: at every epoch move, collect, re-estimate and refresh the FIM at the new estimates.

    Args:
        urban_map (UrbanMap): city and BS sites.
        true_users: (K, 2) ground-truth user positions, used only to synthesize measurements.
        params_true (ChannelParams): channel used for synthesis.
        noise (OdometryNoise): odometry noise.
        predictor (LosPredictorParams): LoS sigmoid for predicted link states.
        config (PlannerConfig): motion and terminal constraints.
        algorithm_config (Algorithm1Config): estimator settings.
        rng: numpy Generator for measurement synthesis.
        params_prior (ChannelParams): channel assumed by the estimator before learning; it seeds the grid
            initializer, the ToA fallback and the first FIM. params_true never reaches the estimator.

    Returns:
        MissionRecord
    """
    algorithm_config = algorithm_config or Algorithm1Config()
    true_users = np.asarray(true_users, dtype=float).reshape(-1, 2)
    area = config.area or urban_map.area
    bs_ue = collect_static_links(urban_map, params_true, true_users, rng)
    measurements = MeasurementSet.without_uav(bs_ue, urban_map.bs_positions)

    position = np.asarray(config.x_start, dtype=float)
    trajectory = [position]
    measurements = measurements.append_epoch(collect_epoch(urban_map, params_true, noise, position, None,
                                                           true_users, rng))
    result = None
    failures = []
    user_history, crb_history = [], []
    users = None
    uav_est = measurements.gps[:, :2].copy()

    for n in range(config.n_total):
        if n > 0:
            position = greedy_step(trajectory[-1], fim, users, predictor, fim_params, config)
            measurements = measurements.append_epoch(collect_epoch(urban_map, params_true, noise, position,
                                                                   trajectory[-1], true_users, rng))
            trajectory.append(position)
            uav_est = np.vstack([uav_est, measurements.gps[-1, :2]])
        if n % config.replan_stride == 0 or n == config.n_total - 1:
            init = initial_state(measurements, params_prior if result is None else result.params, area,
                                 algorithm_config, uav_xy=uav_est, warm_users=users)
            try:
                result = run_algorithm1(measurements, urban_map, params_prior, noise, algorithm_config,
                                        init_state=init, params_init=None if result is None else result.params)
                users = result.state.users
                uav_est = result.state.uav
            except (SolverError, DegenerateSegmentError, np.linalg.LinAlgError) as ex:
                logger.warning(f"Estimation failed at epoch {n}: {ex}; keeping previous estimates")
                failures.append((n, str(ex)))
                if users is None:
                    users = init.users
        fim_params = params_prior if result is None else result.params
        uav3 = np.column_stack([uav_est, measurements.uav_altitudes])
        uav_w, bs_w = _fim_weights(result, measurements, predictor, uav3, users)
        fim = rebuild_fim(users, uav3, uav_w, measurements.bs_sites, bs_w, fim_params, config)
        user_history.append(users.copy())
        crb_history.append(fim.crb_trace())

    trajectory = np.array(trajectory)
    if not is_feasible(trajectory, config):
        logger.warning("Planned trajectory violates the step or terminal constraint")
    return MissionRecord(trajectory=trajectory, uav_estimates=uav_est, user_history=np.array(user_history),
                         crb_history=np.array(crb_history), measurements=measurements, result=result,
                         failures=failures)
