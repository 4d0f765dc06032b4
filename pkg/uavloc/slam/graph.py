import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from uavloc.utils.modes import EstimatorMode, validate_estimator_mode

logger = logging.getLogger(__name__)

LN10 = np.log(10.0)
BLOCK_KINDS = ("gps", "vel", "gain", "toa")
FIXED = -1

Linearization = namedtuple("Linearization", ["H", "b", "loss", "n_clamped"])


@dataclass(frozen=True)
class ResidualBlock:
    """
    One term of the loss. endpoints holds node indices into the state, or ("bs", m) for a fixed BS.
    weight is the inverse variance; bias is the ToA offset of the block's segment.
    """
    kind: str
    endpoints: tuple
    observed: object
    weight: float
    bias: float = 0.0


@dataclass(frozen=True, eq=False)
class ResidualGraph:
    """
    All residual blocks of a problem, stored column-wise per kind.

    Link blocks share endpoint arrays: a gain block and (in the full estimator) a ToA block per link.
    Endpoint positions come from the state for node endpoints and from *_xyz for fixed BS endpoints;
    the z column always holds the known altitude.
    """
    n_uav: int
    n_users: int
    gps_obs: np.ndarray
    gps_weight: float
    vel_prev: np.ndarray
    vel_cur: np.ndarray
    vel_obs: np.ndarray
    vel_weight: float
    dt: float
    a_node: np.ndarray
    a_xyz: np.ndarray
    b_node: np.ndarray
    b_xyz: np.ndarray
    link_family: np.ndarray
    link_index: np.ndarray
    link_los: np.ndarray
    gain_obs: np.ndarray
    gain_alpha: np.ndarray
    gain_beta: np.ndarray
    gain_weight: np.ndarray
    use_toa: bool
    toa_obs: np.ndarray
    toa_bias: np.ndarray
    toa_weight: np.ndarray
    label_term: float
    log_variance_sum: float
    min_distance: float = 0.5

    @property
    def dim(self):
        return 2 * (self.n_uav + self.n_users)

    @property
    def n_links(self):
        return len(self.gain_obs)

    def block_counts(self):
        return {"gps": len(self.gps_obs), "vel": len(self.vel_obs), "gain": self.n_links,
                "toa": self.n_links if self.use_toa else 0}

    def __len__(self):
        return sum(self.block_counts().values())

    def blocks(self):
        """Materialize every block as a ResidualBlock (diagnostics and tests; the solver uses the arrays)."""
        for n, obs in enumerate(self.gps_obs):
            yield ResidualBlock("gps", (n,), tuple(obs), self.gps_weight)
        for prev, cur, obs in zip(self.vel_prev, self.vel_cur, self.vel_obs):
            yield ResidualBlock("vel", (int(prev), int(cur)), tuple(obs), self.vel_weight)
        for i in range(self.n_links):
            ends = (self._link_end(self.a_node, i), self._link_end(self.b_node, i))
            yield ResidualBlock("gain", ends, float(self.gain_obs[i]), float(self.gain_weight[i]))
            if self.use_toa:
                yield ResidualBlock("toa", ends, float(self.toa_obs[i]), float(self.toa_weight[i]),
                                    bias=float(self.toa_bias[i]))

    def _link_end(self, nodes, i):
        if nodes[i] != FIXED:
            return int(nodes[i])
        family, index = self.link_family[i], self.link_index[i]
        # the BS id is the row of bs_uav/bs_ue links
        return ("bs", int(index[1] if family == "bs_uav" else index[0]))


def _link_records(measurements, labels, n_uav):
    """Endpoints, observations and per-link parameters of every link, families in pooled order."""
    bs = measurements.bs_sites
    altitudes = measurements.uav_altitudes
    records = []
    for name in ("uav_ue", "bs_uav", "bs_ue"):
        table = measurements.family(name)
        los = np.asarray(labels.labels[name], dtype=bool)
        if los.shape != table.shape:
            raise ValueError(f"Labels for {name} have shape {los.shape}, measurements {table.shape}")
        rows, cols = np.indices(table.shape)
        rows, cols = rows.ravel(), cols.ravel()
        count = len(rows)
        a_xyz = np.zeros((count, 3))
        b_xyz = np.zeros((count, 3))
        if name == "uav_ue":
            a_node, b_node = rows, n_uav + cols
            a_xyz[:, 2] = altitudes[rows] if count else 0.0
        elif name == "bs_uav":
            a_node, b_node = rows, np.full(count, FIXED)
            a_xyz[:, 2] = altitudes[rows] if count else 0.0
            b_xyz[:] = bs[cols] if count else 0.0
        else:
            a_node, b_node = np.full(count, FIXED), n_uav + cols
            a_xyz[:] = bs[rows] if count else 0.0
        records.append({
            "a_node": a_node, "a_xyz": a_xyz, "b_node": b_node, "b_xyz": b_xyz,
            "family": np.full(count, name, dtype=object), "index": np.column_stack([rows, cols]),
            "los": los.ravel(), "gain": table.gain.ravel(), "toa": table.toa_range.ravel(),
        })
    merged = {key: np.concatenate([rec[key] for rec in records]) for key in records[0]}
    merged["a_node"] = merged["a_node"].astype(int)
    merged["b_node"] = merged["b_node"].astype(int)
    merged["index"] = merged["index"].reshape(-1, 2).astype(int)
    return merged


def build_graph(measurements, labels, params, noise, urban_map=None, mode=EstimatorMode.FULL, min_distance=0.5):
    """
    Assemble the residual blocks of the joint localization loss.

    Args:
        measurements (MeasurementSet): collected data.
        labels (ClassificationState): hard labels for every link.
        params (ChannelParams): segment parameters routed to each link by its label.
        noise (OdometryNoise): GPS and velocity noise.
        urban_map (UrbanMap, optional): cross-checked against the BS sites of the measurements.
        mode (EstimatorMode): 'full' keeps ToA blocks, 'rss-only' drops them.

    Returns:
        ResidualGraph: N GPS, N-1 velocity, and one gain (plus one ToA) block per link.

    Raises:
        ValueError: If labels are missing or do not match the measurements.
    """
    mode = validate_estimator_mode(mode)
    if labels is None or labels.labels is None:
        raise ValueError("build_graph needs hard labels for every link")
    if urban_map is not None and not np.allclose(urban_map.bs_positions.reshape(-1, 3), measurements.bs_sites):
        raise ValueError("BS sites of the map and of the measurements differ")
    for seg in (params.los, params.nlos):
        if seg.sigma <= 0 or seg.sigma_tau <= 0:
            raise ValueError("Residual weights need positive channel stds")
    if noise.sigma_gps <= 0 or noise.sigma_vel <= 0:
        raise ValueError("Residual weights need positive odometry stds")

    n_uav, n_users = measurements.n_epochs, measurements.n_users
    links = _link_records(measurements, labels, n_uav)
    los = links["los"]
    gain_sigma = params.select("sigma", los)
    toa_sigma = params.select("sigma_tau", los)
    use_toa = mode is EstimatorMode.FULL

    vel_cur = np.arange(1, n_uav)
    finite = np.all(np.isfinite(measurements.velocity[1:]), axis=1) if n_uav > 1 else np.zeros(0, dtype=bool)
    vel_cur = vel_cur[finite]

    log_ratio = np.log(params.los.sigma ** 2 / params.nlos.sigma ** 2)
    log_variance_sum = float(np.sum(np.log(gain_sigma ** 2)))
    if use_toa:
        log_ratio += np.log(params.los.sigma_tau ** 2 / params.nlos.sigma_tau ** 2)
        log_variance_sum += float(np.sum(np.log(toa_sigma ** 2)))

    graph = ResidualGraph(
        n_uav=n_uav, n_users=n_users,
        gps_obs=measurements.gps[:, :2].copy(), gps_weight=1.0 / noise.sigma_gps ** 2,
        vel_prev=vel_cur - 1, vel_cur=vel_cur, vel_obs=measurements.velocity[vel_cur].reshape(-1, 2),
        vel_weight=1.0 / noise.sigma_vel ** 2, dt=noise.dt,
        a_node=links["a_node"], a_xyz=links["a_xyz"], b_node=links["b_node"], b_xyz=links["b_xyz"],
        link_family=links["family"], link_index=links["index"], link_los=los,
        gain_obs=links["gain"], gain_alpha=params.select("alpha", los), gain_beta=params.select("beta", los),
        gain_weight=1.0 / gain_sigma ** 2,
        use_toa=use_toa, toa_obs=links["toa"], toa_bias=params.select("mu_tau", los),
        toa_weight=1.0 / toa_sigma ** 2,
        label_term=float(log_ratio * np.sum(los)), log_variance_sum=log_variance_sum,
        min_distance=min_distance,
    )
    logger.debug(f"Built graph with {graph.block_counts()} blocks over {n_uav} UAV nodes and {n_users} users")
    return graph


def _as_nodes(graph, state):
    packed = state.pack() if hasattr(state, "pack") else np.asarray(state, dtype=float)
    if packed.shape != (graph.dim,):
        raise ValueError(f"State has dimension {packed.shape}, graph needs {graph.dim}")
    return packed.reshape(-1, 2)


def _link_geometry(graph, nodes):
    a = graph.a_xyz.copy()
    b = graph.b_xyz.copy()
    a_free = graph.a_node != FIXED
    b_free = graph.b_node != FIXED
    a[a_free, :2] = nodes[graph.a_node[a_free]]
    b[b_free, :2] = nodes[graph.b_node[b_free]]
    diff = a - b
    distance = np.linalg.norm(diff, axis=1)
    clamped = distance < graph.min_distance
    return diff[:, :2], np.maximum(distance, graph.min_distance), clamped


def residuals(graph, state):
    """Residuals per kind: observed minus predicted."""
    nodes = _as_nodes(graph, state)
    uav = nodes[:graph.n_uav]
    _, distance, clamped = _link_geometry(graph, nodes)
    out = {
        "gps": graph.gps_obs - uav,
        "vel": graph.vel_obs - (uav[graph.vel_cur] - uav[graph.vel_prev]) / graph.dt,
        "gain": graph.gain_obs - graph.gain_beta - graph.gain_alpha * np.log10(distance),
        "toa": (graph.toa_obs - distance - graph.toa_bias) if graph.use_toa else np.zeros(0),
    }
    return out, clamped


def _weighted_sum(graph, res):
    loss = graph.gps_weight * np.sum(res["gps"] ** 2) + graph.vel_weight * np.sum(res["vel"] ** 2)
    loss += np.sum(graph.gain_weight * res["gain"] ** 2)
    if graph.use_toa:
        loss += np.sum(graph.toa_weight * res["toa"] ** 2)
    return float(loss)


def evaluate_loss(graph, state):
    """Weighted sum of squared residuals; the state-independent label term is graph.label_term."""
    res, _ = residuals(graph, state)
    return _weighted_sum(graph, res)


def linearize(graph, state):
    """
    First-order expansion of every residual around the state
    :param graph: ResidualGraph
    :param state: StateVector or packed array
    :return: Linearization(H = J'WJ (sparse), b = J'We, loss, n_clamped); the loss gradient is 2b
    """
    nodes = _as_nodes(graph, state)
    res, clamped = residuals(graph, state)
    diff, distance, _ = _link_geometry(graph, nodes)
    n_clamped = int(np.sum(clamped))
    if n_clamped:
        logger.warning(f"{n_clamped} link distance(s) clamped to {graph.min_distance} m")

    rows, cols, vals, weights, errors = [], [], [], [], []
    offset = 0

    n_gps = len(graph.gps_obs)
    for c in range(2):
        rows.append(offset + 2 * np.arange(n_gps) + c)
        cols.append(2 * np.arange(n_gps) + c)
        vals.append(np.full(n_gps, -1.0))
    weights.append(np.full(2 * n_gps, graph.gps_weight))
    errors.append(res["gps"].ravel())
    offset += 2 * n_gps

    n_vel = len(graph.vel_obs)
    for c in range(2):
        vel_rows = offset + 2 * np.arange(n_vel) + c
        rows += [vel_rows, vel_rows]
        cols += [2 * graph.vel_cur + c, 2 * graph.vel_prev + c]
        vals += [np.full(n_vel, -1.0 / graph.dt), np.full(n_vel, 1.0 / graph.dt)]
    weights.append(np.full(2 * n_vel, graph.vel_weight))
    errors.append(res["vel"].ravel())
    offset += 2 * n_vel

    a_free = graph.a_node != FIXED
    b_free = graph.b_node != FIXED
    link_rows = np.arange(graph.n_links)
    # d/da of a residual that depends on ||a - b||; the b endpoint takes the opposite sign
    derivatives = [(-(graph.gain_alpha / (LN10 * distance ** 2))[:, None] * diff, graph.gain_weight, res["gain"])]
    if graph.use_toa:
        derivatives.append((-diff / distance[:, None], graph.toa_weight, res["toa"]))
    for grad_a, weight, err in derivatives:
        for c in range(2):
            rows += [offset + link_rows[a_free], offset + link_rows[b_free]]
            cols += [2 * graph.a_node[a_free] + c, 2 * graph.b_node[b_free] + c]
            vals += [grad_a[a_free, c], -grad_a[b_free, c]]
        weights.append(weight)
        errors.append(err)
        offset += graph.n_links

    jac = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(offset, graph.dim)).tocsr()
    w = np.concatenate(weights)
    e = np.concatenate(errors)
    hessian = (jac.T @ jac.multiply(w[:, None])).tocsc()
    gradient = jac.T @ (w * e)
    return Linearization(H=hessian, b=np.asarray(gradient).ravel(), loss=float(np.sum(w * e ** 2)),
                         n_clamped=n_clamped)
