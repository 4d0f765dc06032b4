import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit

from uavloc.utils.io_utils import read_yaml_file, write_yaml_file

logger = logging.getLogger(__name__)

DEFAULT_SIZE_RANGE = (20.0, 50.0)
PLACEMENT_TRIES_PER_BUILDING = 100


class CityGenerationError(ValueError):
    """Raised when buildings or users cannot be placed within the retry budget."""


@dataclass(frozen=True)
class Area:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"Degenerate area: {self.as_list()}")

    @classmethod
    def coerce(cls, area):
        if isinstance(area, Area):
            return area
        return cls(*(float(v) for v in area))

    @property
    def centroid(self):
        return np.array([(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0])

    def contains(self, xy, margin=0.0):
        xy = np.asarray(xy, dtype=float)
        return ((xy[..., 0] >= self.x_min + margin) & (xy[..., 0] <= self.x_max - margin)
                & (xy[..., 1] >= self.y_min + margin) & (xy[..., 1] <= self.y_max - margin))

    def as_list(self):
        return [self.x_min, self.x_max, self.y_min, self.y_max]


@dataclass(frozen=True)
class Building:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    height: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"Degenerate building footprint: ({self.x_min}, {self.x_max}, {self.y_min}, {self.y_max})")
        if not self.height > 0:
            raise ValueError(f"Building height must be positive, got {self.height}")

    def contains(self, xy):
        x, y = xy[0], xy[1]
        return self.x_min < x < self.x_max and self.y_min < y < self.y_max

    def overlaps(self, other):
        return not (self.x_max <= other.x_min or other.x_max <= self.x_min
                    or self.y_max <= other.y_min or other.y_max <= self.y_min)


@dataclass(frozen=True)
class LosPredictorParams:
    """
    Coefficients of the elevation-angle LoS sigmoid p = 1 / (1 + exp(a * psi + b)).
    With a < 0 the probability grows with elevation.
    """
    a: float = -9.6
    b: float = 2.688

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError(f"LoS predictor coefficients must be finite, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class UrbanMap:
    area: Area
    buildings: tuple = ()
    bs_sites: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "area", Area.coerce(self.area))
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "bs_sites", tuple(tuple(float(c) for c in site) for site in self.bs_sites))
        for building in self.buildings:
            corners = [(building.x_min, building.y_min), (building.x_max, building.y_max)]
            if not all(self.area.contains(c) for c in corners):
                raise ValueError(f"Building {building} lies outside the area {self.area.as_list()}")
        for site in self.bs_sites:
            if len(site) != 3:
                raise ValueError(f"BS site must be a 3D position, got {site}")
            if not self.area.contains(site[:2]):
                raise ValueError(f"BS site {site} lies outside the area {self.area.as_list()}")

    @cached_property
    def _boxes(self):
        if not self.buildings:
            return np.zeros((0, 3)), np.zeros((0, 3))
        lo = np.array([[b.x_min, b.y_min, 0.0] for b in self.buildings])
        hi = np.array([[b.x_max, b.y_max, b.height] for b in self.buildings])
        return lo, hi

    @property
    def bs_positions(self):
        return np.array(self.bs_sites, dtype=float).reshape(-1, 3)

    def with_bs_sites(self, bs_sites):
        return UrbanMap(area=self.area, buildings=self.buildings, bs_sites=bs_sites)

    def contains_point(self, xy):
        """True when the ground point is strictly inside a building footprint."""
        xy = np.asarray(xy, dtype=float)
        lo, hi = self._boxes
        if len(lo) == 0:
            return np.zeros(xy.shape[:-1], dtype=bool) if xy.ndim > 1 else False
        pts = xy.reshape(-1, 2)
        inside = ((pts[:, None, 0] > lo[None, :, 0]) & (pts[:, None, 0] < hi[None, :, 0])
                  & (pts[:, None, 1] > lo[None, :, 1]) & (pts[:, None, 1] < hi[None, :, 1])).any(axis=1)
        return inside.reshape(xy.shape[:-1]) if xy.ndim > 1 else bool(inside[0])


def _segments_blocked(lo, hi, p, q, eps=1e-12):
    # slab test of every segment against every box; returns one flag per segment
    d = q - p
    n_seg, n_box = len(p), len(lo)
    t_lo = np.zeros((n_seg, n_box))
    t_hi = np.ones((n_seg, n_box))
    inside = np.ones((n_seg, n_box), dtype=bool)
    for axis in range(3):
        da = d[:, axis][:, None]
        pa = p[:, axis][:, None]
        box_lo = lo[None, :, axis]
        box_hi = hi[None, :, axis]
        parallel = np.abs(da) < eps
        safe = np.where(parallel, 1.0, da)
        t1 = (box_lo - pa) / safe
        t2 = (box_hi - pa) / safe
        inside &= np.where(parallel, (pa > box_lo) & (pa < box_hi), True)
        t_lo = np.where(parallel, t_lo, np.maximum(t_lo, np.minimum(t1, t2)))
        t_hi = np.where(parallel, t_hi, np.minimum(t_hi, np.maximum(t1, t2)))
    return np.any(inside & (t_lo < t_hi), axis=1)


def _canonical_order(p, q):
    # order each pair lexicographically so that (p, q) and (q, p) run the same arithmetic
    swap = np.zeros(len(p), dtype=bool)
    decided = np.zeros(len(p), dtype=bool)
    for axis in range(3):
        greater = (p[:, axis] > q[:, axis]) & ~decided
        swap |= greater
        decided |= p[:, axis] != q[:, axis]
    first = np.where(swap[:, None], q, p)
    second = np.where(swap[:, None], p, q)
    return first, second


def los_many(urban_map, p, q):
    """
    Ground-truth LoS flags for many segments at once
    :param urban_map: UrbanMap
    :param p: (L, 3) segment starts
    :param q: (L, 3) segment ends
    :return: (L,) boolean array, True when no building volume cuts the open segment
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    p, q = np.broadcast_arrays(p, q)
    if p.shape[-1] != 3:
        raise ValueError(f"LoS queries need 3D positions, got shape {p.shape}")
    lo, hi = urban_map._boxes
    if len(lo) == 0 or len(p) == 0:
        return np.ones(len(p), dtype=bool)
    first, second = _canonical_order(p, q)
    return ~_segments_blocked(lo, hi, first, second)


def is_los(urban_map, p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.array_equal(p, q):
        raise ValueError(f"LoS query needs distinct endpoints, got {p.tolist()} twice")
    return bool(los_many(urban_map, p[None, :], q[None, :])[0])


def elevation_angle(uav, user):
    uav = np.asarray(uav, dtype=float)
    user = np.asarray(user, dtype=float)
    r = np.linalg.norm(user[..., :2] - uav[..., :2], axis=-1)
    user_z = user[..., 2] if user.shape[-1] == 3 else 0.0
    # arctan2 maps r = 0 to pi/2 for a UAV above the user
    return np.arctan2(uav[..., 2] - user_z, r)


def los_probability(params, uav, user):
    """
    Predicted LoS probability 1 / (1 + exp(a * psi + b)) of the UAV-user link.

    Args:
        params (LosPredictorParams): sigmoid coefficients.
        uav: 3D UAV position (or array of them).
        user: 2D ground position of the user (or array of them).

    Returns:
        float or numpy.ndarray: probability in [0, 1].
    """
    psi = elevation_angle(uav, user)
    prob = expit(-(params.a * psi + params.b))
    return float(prob) if np.ndim(prob) == 0 else prob


def generate_city(seed, area, n_buildings, height_scale, height_range, size_range=DEFAULT_SIZE_RANGE,
                  bs_sites=(), keepout=(), keepout_radius=5.0, max_attempts=None):
    """
    Place non-overlapping prism buildings uniformly inside the area
    :param seed: RNG seed (int, SeedSequence or numpy Generator)
    :param area: Area or (x_min, x_max, y_min, y_max)
    :param n_buildings: number of buildings to place
    :param height_scale: Rayleigh scale of building heights
    :param height_range: (min, max) clamp applied to the drawn heights
    :param size_range: (min, max) side length of a footprint
    :param bs_sites: 3D BS positions, kept out of every footprint and stored on the map
    :param keepout: extra 2D points no footprint may cover (e.g. the take-off point)
    :param keepout_radius: clearance around keep-out points
    :param max_attempts: placement attempts, 100 per building by default
    :return: UrbanMap
    """
    area = Area.coerce(area)
    h_min, h_max = (float(v) for v in height_range)
    s_min, s_max = (float(v) for v in size_range)
    if n_buildings < 0:
        raise ValueError(f"n_buildings must be non-negative, got {n_buildings}")
    if not 0 < h_min < h_max:
        raise ValueError(f"height_range must satisfy 0 < min < max, got {height_range}")
    if not 0 < s_min <= s_max:
        raise ValueError(f"size_range must satisfy 0 < min <= max, got {size_range}")
    if s_max >= min(area.x_max - area.x_min, area.y_max - area.y_min):
        raise ValueError(f"size_range {size_range} does not fit inside the area {area.as_list()}")
    if height_scale <= 0:
        raise ValueError(f"height_scale must be positive, got {height_scale}")

    rng = np.random.default_rng(seed)
    blocked = [np.asarray(site, dtype=float)[:2] for site in bs_sites] + \
              [np.asarray(point, dtype=float)[:2] for point in keepout]
    max_attempts = max_attempts or PLACEMENT_TRIES_PER_BUILDING * n_buildings
    buildings = []
    attempts = 0
    while len(buildings) < n_buildings:
        if attempts >= max_attempts:
            raise CityGenerationError(
                f"Placed only {len(buildings)} of {n_buildings} buildings after {attempts} attempts; "
                f"density too high for area {area.as_list()} and sizes {size_range}")
        attempts += 1
        width, depth = rng.uniform(s_min, s_max, size=2)
        x0 = rng.uniform(area.x_min, area.x_max - width)
        y0 = rng.uniform(area.y_min, area.y_max - depth)
        height = float(np.clip(rng.rayleigh(height_scale), h_min, h_max))
        candidate = Building(x0, x0 + width, y0, y0 + depth, height)
        if any(candidate.overlaps(other) for other in buildings):
            continue
        if any(candidate.x_min - keepout_radius < pt[0] < candidate.x_max + keepout_radius
               and candidate.y_min - keepout_radius < pt[1] < candidate.y_max + keepout_radius
               for pt in blocked):
            continue
        buildings.append(candidate)
    logger.debug(f"Placed {len(buildings)} buildings in {attempts} attempts")
    return UrbanMap(area=area, buildings=tuple(buildings), bs_sites=tuple(bs_sites))


def place_users(urban_map, k, rng, margin=0.0, max_attempts=None):
    """Draw K ground users uniformly over the street area (outside every footprint)."""
    rng = np.random.default_rng(rng)
    area = urban_map.area
    users = []
    max_attempts = max_attempts or PLACEMENT_TRIES_PER_BUILDING * max(k, 1)
    attempts = 0
    while len(users) < k:
        if attempts >= max_attempts:
            raise CityGenerationError(f"Placed only {len(users)} of {k} users after {attempts} attempts")
        attempts += 1
        xy = np.array([rng.uniform(area.x_min + margin, area.x_max - margin),
                       rng.uniform(area.y_min + margin, area.y_max - margin)])
        if not urban_map.contains_point(xy):
            users.append(xy)
    return np.array(users, dtype=float).reshape(-1, 2)


def map_to_dict(urban_map):
    return {
        "area": urban_map.area.as_list(),
        "buildings": [{"footprint": [b.x_min, b.x_max, b.y_min, b.y_max], "height": b.height}
                      for b in urban_map.buildings],
        "bs_sites": [list(site) for site in urban_map.bs_sites],
    }


def map_from_dict(data):
    try:
        buildings = tuple(Building(*(float(v) for v in rec["footprint"]), float(rec["height"]))
                          for rec in data.get("buildings") or [])
        return UrbanMap(area=Area.coerce(data["area"]), buildings=buildings,
                        bs_sites=tuple(data.get("bs_sites") or []))
    except (KeyError, TypeError) as ex:
        raise ValueError(f"Malformed map record: {ex}") from ex


def save_map(urban_map, path):
    return write_yaml_file(map_to_dict(urban_map), path)


def load_map(path):
    logger.debug(f"Loading map from {path}")
    return map_from_dict(read_yaml_file(path))
