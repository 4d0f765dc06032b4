import logging
import os
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.stats import norm

from uavloc.geo_env import los_many
from uavloc.utils.io_utils import read_table, read_yaml_file, write_table, write_yaml_file
from uavloc.utils.modes import LINK_FAMILIES, Segment

logger = logging.getLogger(__name__)

LINKS_FILE = "links.csv"
ODOMETRY_FILE = "odometry.csv"
TRUTH_FILE = "truth.csv"
META_FILE = "measurements.yaml"


@dataclass(frozen=True)
class SegmentParams:
    """
    Channel parameters of one link state.

    alpha is the coefficient on log10(distance), beta the gain at 1 m (dB), sigma the shadowing std (dB).
    mu_tau and sigma_tau are the ToA bias and std, both expressed as range in meters.
    """
    alpha: float
    beta: float
    sigma: float
    mu_tau: float = 0.0
    sigma_tau: float = 1.0

    def __post_init__(self):
        values = (self.alpha, self.beta, self.sigma, self.mu_tau, self.sigma_tau)
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"Segment parameters must be finite, got {values}")
        # zero stds are accepted for noiseless synthesis, likelihoods reject them
        if self.sigma < 0 or self.sigma_tau < 0:
            raise ValueError(f"Segment stds must be non-negative, got sigma={self.sigma}, sigma_tau={self.sigma_tau}")

    def gain_mean(self, distance):
        return self.beta + self.alpha * np.log10(distance)

    def to_dict(self):
        return {"alpha": float(self.alpha), "beta": float(self.beta), "sigma2": float(self.sigma) ** 2,
                "mu_tau": float(self.mu_tau), "sigma_tau": float(self.sigma_tau)}

    @classmethod
    def from_dict(cls, data):
        if "sigma2" in data:
            sigma = float(np.sqrt(float(data["sigma2"])))
        else:
            sigma = float(data["sigma"])
        return cls(alpha=float(data["alpha"]), beta=float(data["beta"]), sigma=sigma,
                   mu_tau=float(data.get("mu_tau", 0.0)), sigma_tau=float(data.get("sigma_tau", 1.0)))


@dataclass(frozen=True)
class ChannelParams:
    los: SegmentParams
    nlos: SegmentParams
    pi_los: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.pi_los <= 1.0:
            raise ValueError(f"pi_los must lie in [0, 1], got {self.pi_los}")

    @property
    def pi_nlos(self):
        return 1.0 - self.pi_los

    def segment(self, segment):
        return self.los if Segment(segment) is Segment.LOS else self.nlos

    def prior(self, segment):
        return self.pi_los if Segment(segment) is Segment.LOS else self.pi_nlos

    def with_segment(self, segment, params):
        if Segment(segment) is Segment.LOS:
            return replace(self, los=params)
        return replace(self, nlos=params)

    def swapped(self):
        return ChannelParams(los=self.nlos, nlos=self.los, pi_los=self.pi_nlos)

    def select(self, field_name, los_mask):
        """Per-link array of one field, taken from the LoS or NLoS segment by mask."""
        return np.where(los_mask, getattr(self.los, field_name), getattr(self.nlos, field_name))

    def to_dict(self):
        return {"pi_los": float(self.pi_los), "los": self.los.to_dict(), "nlos": self.nlos.to_dict()}

    @classmethod
    def from_dict(cls, data):
        return cls(los=SegmentParams.from_dict(data["los"]), nlos=SegmentParams.from_dict(data["nlos"]),
                   pi_los=float(data.get("pi_los", 0.5)))


@dataclass(frozen=True)
class OdometryNoise:
    sigma_gps: float
    sigma_vel: float
    dt: float = 1.0

    def __post_init__(self):
        if self.sigma_gps < 0 or self.sigma_vel < 0:
            raise ValueError(f"Odometry stds must be non-negative, got {self.sigma_gps}, {self.sigma_vel}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @classmethod
    def from_dict(cls, data, dt=1.0):
        return cls(sigma_gps=float(np.sqrt(float(data["sigma2_gps"]))),
                   sigma_vel=float(np.sqrt(float(data["sigma2_vel"]))), dt=float(dt))


@dataclass(frozen=True)
class LinkMeasurement:
    gain: float
    toa_range: float
    true_los: bool


@dataclass(frozen=True, eq=False)
class LinkTable:
    gain: np.ndarray
    toa_range: np.ndarray
    true_los: np.ndarray

    @classmethod
    def empty(cls, shape):
        return cls(gain=np.zeros(shape), toa_range=np.zeros(shape), true_los=np.zeros(shape, dtype=bool))

    @property
    def shape(self):
        return self.gain.shape

    @property
    def size(self):
        return self.gain.size

    def __getitem__(self, index):
        return LinkMeasurement(gain=float(self.gain[index]), toa_range=float(self.toa_range[index]),
                               true_los=bool(self.true_los[index]))

    def stack(self, row):
        """Append one row (a 1D table) below this 2D table."""
        return LinkTable(gain=np.vstack([self.gain, row.gain[None, :]]),
                         toa_range=np.vstack([self.toa_range, row.toa_range[None, :]]),
                         true_los=np.vstack([self.true_los, row.true_los[None, :]]))


@dataclass(frozen=True, eq=False)
class EpochMeasurement:
    gps: np.ndarray
    velocity: np.ndarray
    uav_ue: LinkTable
    bs_uav: LinkTable


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """
    Everything the UAV has collected: odometry per epoch and three link families.

    gps is (N, 3) with the altitude reported exactly, velocity is (N, 2) with row 0 undefined (NaN),
    uav_ue is (N, K), bs_uav is (N, M) and bs_ue is (M, K).
    """
    gps: np.ndarray
    velocity: np.ndarray
    uav_ue: LinkTable
    bs_uav: LinkTable
    bs_ue: LinkTable
    bs_sites: np.ndarray

    def __post_init__(self):
        n, k, m = self.n_epochs, self.n_users, self.n_bs
        expected = {"uav_ue": (n, k), "bs_uav": (n, m), "bs_ue": (m, k)}
        for name, shape in expected.items():
            if self.family(name).shape != shape:
                raise ValueError(f"{name} has shape {self.family(name).shape}, expected {shape}")
        if self.velocity.shape != (n, 2):
            raise ValueError(f"velocity has shape {self.velocity.shape}, expected {(n, 2)}")

    @property
    def n_epochs(self):
        return len(self.gps)

    @property
    def n_users(self):
        return self.bs_ue.shape[1]

    @property
    def n_bs(self):
        return len(self.bs_sites)

    @property
    def uav_altitudes(self):
        return self.gps[:, 2]

    def family(self, name):
        if name not in LINK_FAMILIES:
            raise ValueError("Invalid link family: '{}'. Must be one of the following: {}".format(
                name, ", ".join(LINK_FAMILIES)))
        return getattr(self, name)

    def family_shapes(self):
        return {name: self.family(name).shape for name in LINK_FAMILIES}

    def odometry(self, n):
        return self.gps[n], self.velocity[n]

    def pooled(self, attribute):
        """Concatenate one LinkTable attribute over the families in LINK_FAMILIES order."""
        return np.concatenate([getattr(self.family(name), attribute).ravel() for name in LINK_FAMILIES])

    @property
    def n_links(self):
        return sum(self.family(name).size for name in LINK_FAMILIES)

    def append_epoch(self, epoch):
        return MeasurementSet(gps=np.vstack([self.gps, epoch.gps[None, :]]),
                              velocity=np.vstack([self.velocity, epoch.velocity[None, :]]),
                              uav_ue=self.uav_ue.stack(epoch.uav_ue),
                              bs_uav=self.bs_uav.stack(epoch.bs_uav),
                              bs_ue=self.bs_ue,
                              bs_sites=self.bs_sites)

    @classmethod
    def without_uav(cls, bs_ue, bs_sites):
        bs_sites = np.asarray(bs_sites, dtype=float).reshape(-1, 3)
        k = bs_ue.shape[1]
        return cls(gps=np.zeros((0, 3)), velocity=np.zeros((0, 2)), uav_ue=LinkTable.empty((0, k)),
                   bs_uav=LinkTable.empty((0, len(bs_sites))), bs_ue=bs_ue, bs_sites=bs_sites)


def _check_distance(distance):
    distance = np.asarray(distance, dtype=float)
    if np.any(~(distance > 0)):
        raise ValueError(f"Link distance must be positive, got min {np.min(distance) if distance.size else distance}")
    return distance


def _as_output(values):
    return float(values) if np.ndim(values) == 0 else values


def sample_gain(params, distance, is_los, rng):
    """
    Draw channel gains beta_s + alpha_s * log10(d) + shadowing, segment chosen per link by is_los.
    Accepts scalars or arrays of matching shape.
    """
    distance = _check_distance(distance)
    los = np.asarray(is_los, dtype=bool)
    mean = params.select("beta", los) + params.select("alpha", los) * np.log10(distance)
    noise = rng.standard_normal(size=np.shape(mean)) * params.select("sigma", los)
    return _as_output(mean + noise)


def sample_toa_range(params, distance, is_los, rng):
    distance = _check_distance(distance)
    los = np.asarray(is_los, dtype=bool)
    mean = distance + params.select("mu_tau", los)
    noise = rng.standard_normal(size=np.shape(mean)) * params.select("sigma_tau", los)
    return _as_output(mean + noise)


def sample_odometry(noise, true_traj, rng):
    """
    GPS fixes and IMU velocities for a trajectory
    :param noise: OdometryNoise
    :param true_traj: (N, 3) true UAV positions
    :param rng: numpy Generator
    :return: (gps (N, 3), velocity (N, 2)); altitude is exact and velocity row 0 is NaN
    """
    traj = np.asarray(true_traj, dtype=float).reshape(-1, 3)
    if len(traj) < 1:
        raise ValueError("Odometry needs at least one trajectory point")
    gps = traj.copy()
    gps[:, :2] += rng.standard_normal(size=(len(traj), 2)) * noise.sigma_gps
    velocity = np.full((len(traj), 2), np.nan)
    velocity[1:] = np.diff(traj[:, :2], axis=0) / noise.dt \
        + rng.standard_normal(size=(len(traj) - 1, 2)) * noise.sigma_vel
    return gps, velocity


def _draw_links(urban_map, params, starts, ends, rng):
    starts = np.asarray(starts, dtype=float).reshape(-1, 3)
    ends = np.asarray(ends, dtype=float).reshape(-1, 3)
    shape = (len(starts), len(ends))
    if 0 in shape:
        return LinkTable.empty(shape)
    p = np.repeat(starts, len(ends), axis=0)
    q = np.tile(ends, (len(starts), 1))
    distance = np.linalg.norm(p - q, axis=1)
    los = los_many(urban_map, p, q)
    gain = sample_gain(params, distance, los, rng)
    toa = sample_toa_range(params, distance, los, rng)
    return LinkTable(gain=np.reshape(gain, shape), toa_range=np.reshape(toa, shape), true_los=los.reshape(shape))


def users_3d(users):
    users = np.asarray(users, dtype=float).reshape(-1, 2)
    return np.column_stack([users, np.zeros(len(users))])


def collect_static_links(urban_map, params, users, rng):
    """BS-user links, drawn once per mission."""
    return _draw_links(urban_map, params, urban_map.bs_positions, users_3d(users), rng)


def _first_row(table):
    return LinkTable(gain=table.gain[0], toa_range=table.toa_range[0], true_los=table.true_los[0])


def collect_epoch(urban_map, params, noise, position, previous, users, rng):
    """
    Measurements of one epoch of the online mission.

    Args:
        position: true 3D UAV position at this epoch.
        previous: true 3D UAV position at the previous epoch, or None at take-off.
        users: (K, 2) true user positions.

    Returns:
        EpochMeasurement: GPS fix, IMU velocity (NaN at take-off), UAV-user and BS-UAV links.
    """
    position = np.asarray(position, dtype=float)
    gps = position.copy()
    gps[:2] += rng.standard_normal(size=2) * noise.sigma_gps
    if previous is None:
        velocity = np.full(2, np.nan)
    else:
        velocity = (position[:2] - np.asarray(previous, dtype=float)[:2]) / noise.dt \
            + rng.standard_normal(size=2) * noise.sigma_vel
    uav_ue = _draw_links(urban_map, params, position, users_3d(users), rng)
    bs_uav = _draw_links(urban_map, params, position, urban_map.bs_positions, rng)
    return EpochMeasurement(gps=gps, velocity=velocity, uav_ue=_first_row(uav_ue), bs_uav=_first_row(bs_uav))


def collect_mission(urban_map, params, noise, traj, users, rng):
    traj = np.asarray(traj, dtype=float).reshape(-1, 3)
    users = np.asarray(users, dtype=float).reshape(-1, 2)
    bs = urban_map.bs_positions
    if len(traj):
        gps, velocity = sample_odometry(noise, traj, rng)
    else:
        gps, velocity = np.zeros((0, 3)), np.zeros((0, 2))
    uav_ue = _draw_links(urban_map, params, traj, users_3d(users), rng)
    bs_uav = _draw_links(urban_map, params, traj, bs, rng)
    bs_ue = _draw_links(urban_map, params, bs, users_3d(users), rng)
    logger.debug(f"Collected {len(traj)} epochs, {uav_ue.size} UAV-user, {bs_uav.size} BS-UAV "
                 f"and {bs_ue.size} BS-user links")
    return MeasurementSet(gps=gps, velocity=velocity, uav_ue=uav_ue, bs_uav=bs_uav, bs_ue=bs_ue, bs_sites=bs)


def link_distances(measurements, uav_xy, users_xy):
    """3D link distances per family for horizontal UAV/user positions (UAV altitude from GPS, users at z=0)."""
    uav = np.column_stack([np.asarray(uav_xy, dtype=float).reshape(-1, 2), measurements.uav_altitudes])
    users = users_3d(users_xy)
    bs = measurements.bs_sites

    def pairwise(a, b):
        return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1).reshape(len(a), len(b))

    return {"uav_ue": pairwise(uav, users), "bs_uav": pairwise(uav, bs), "bs_ue": pairwise(bs, users)}


def link_geometry(measurements, uav_xy, users_xy):
    """Pooled link distances in LINK_FAMILIES order, aligned with MeasurementSet.pooled."""
    tables = link_distances(measurements, uav_xy, users_xy)
    return np.concatenate([tables[name].ravel() for name in LINK_FAMILIES])


def _loglik(observed, mean, std):
    std = np.asarray(std, dtype=float)
    if np.any(std <= 0):
        raise ValueError("Likelihood needs a positive standard deviation")
    return _as_output(norm.logpdf(observed, loc=mean, scale=std))


def gain_loglik(params, gain, distance, segment):
    seg = params.segment(segment)
    distance = _check_distance(distance)
    return _loglik(gain, seg.gain_mean(distance), seg.sigma)


def toa_loglik(params, toa_range, distance, segment):
    seg = params.segment(segment)
    distance = _check_distance(distance)
    return _loglik(toa_range, distance + seg.mu_tau, seg.sigma_tau)


def save_measurements(measurements, directory):
    """
    Write a measurement set as CSV tables (links, odometry, hidden truth) plus a small YAML header
    :param measurements: MeasurementSet
    :param directory: output directory, created when missing
    :return: the directory
    """
    links, truth = [], []
    for name in LINK_FAMILIES:
        table = measurements.family(name)
        rows, cols = np.indices(table.shape)
        links.append(pd.DataFrame({"family": name, "row": rows.ravel(), "col": cols.ravel(),
                                   "gain": table.gain.ravel(), "toa_range": table.toa_range.ravel()}))
        truth.append(pd.DataFrame({"family": name, "row": rows.ravel(), "col": cols.ravel(),
                                   "true_los": table.true_los.ravel()}))
    odometry = pd.DataFrame({"n": np.arange(measurements.n_epochs),
                             "gps_x": measurements.gps[:, 0], "gps_y": measurements.gps[:, 1],
                             "gps_z": measurements.gps[:, 2],
                             "vel_x": measurements.velocity[:, 0], "vel_y": measurements.velocity[:, 1]})
    write_table(pd.concat(links, ignore_index=True), os.path.join(directory, LINKS_FILE))
    write_table(pd.concat(truth, ignore_index=True), os.path.join(directory, TRUTH_FILE))
    write_table(odometry, os.path.join(directory, ODOMETRY_FILE))
    write_yaml_file({"n_epochs": measurements.n_epochs, "n_users": measurements.n_users,
                     "bs_sites": measurements.bs_sites.tolist()}, os.path.join(directory, META_FILE))
    return directory


def load_measurements(directory):
    meta = read_yaml_file(os.path.join(directory, META_FILE))
    try:
        links = read_table(os.path.join(directory, LINKS_FILE))
        truth = read_table(os.path.join(directory, TRUTH_FILE))
        odometry = read_table(os.path.join(directory, ODOMETRY_FILE))
    except OSError as ex:
        raise OSError(f"Unable to read measurement tables from {directory}: {ex}") from ex
    n, k = int(meta["n_epochs"]), int(meta["n_users"])
    bs_sites = np.asarray(meta.get("bs_sites") or [], dtype=float).reshape(-1, 3)
    shapes = {"uav_ue": (n, k), "bs_uav": (n, len(bs_sites)), "bs_ue": (len(bs_sites), k)}
    tables = {}
    for name in LINK_FAMILIES:
        table = LinkTable.empty(shapes[name])
        rec = links[links["family"] == name]
        flags = truth[truth["family"] == name]
        table.gain[rec["row"].to_numpy(), rec["col"].to_numpy()] = rec["gain"].to_numpy()
        table.toa_range[rec["row"].to_numpy(), rec["col"].to_numpy()] = rec["toa_range"].to_numpy()
        table.true_los[flags["row"].to_numpy(), flags["col"].to_numpy()] = flags["true_los"].to_numpy(dtype=bool)
        tables[name] = table
    odometry = odometry.sort_values("n")
    gps = odometry[["gps_x", "gps_y", "gps_z"]].to_numpy(dtype=float).reshape(-1, 3)
    velocity = odometry[["vel_x", "vel_y"]].to_numpy(dtype=float).reshape(-1, 2)
    return MeasurementSet(gps=gps, velocity=velocity, bs_sites=bs_sites, **tables)
