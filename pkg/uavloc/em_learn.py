import logging
from collections import namedtuple
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import xlogy
from scipy.stats import norm, theilslopes

from uavloc.utils.modes import Denominator, LINK_FAMILIES, Segment, validate_denominator

logger = logging.getLogger(__name__)

GainFit = namedtuple("GainFit", ["alpha", "beta", "sigma", "pi"])


class DegenerateSegmentError(ValueError):
    """The M-step normal matrix of a segment is singular (all its mass sits at one distance)."""


class EmMonotonicityError(RuntimeError):
    """The EM lower bound decreased between iterations."""


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 50
    tol: float = 1e-6
    min_sigma: float = 1e-3
    responsibility_floor: float = 1e-12
    denominator: Denominator = Denominator.TOTAL
    check_monotone: bool = False
    # fit a flat line instead of failing when a segment sees a single distance
    allow_degenerate: bool = False
    min_segment_mass: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "denominator", validate_denominator(self.denominator))
        if self.max_iters < 1:
            raise ValueError(f"EM max_iters must be at least 1, got {self.max_iters}")
        if not (self.tol > 0 and self.min_sigma > 0 and self.responsibility_floor > 0):
            raise ValueError("EM tol, min_sigma and responsibility_floor must be positive")
        if self.responsibility_floor >= 0.5:
            raise ValueError(f"responsibility_floor must be below 0.5, got {self.responsibility_floor}")

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: value for key, value in (data or {}).items()})


@dataclass(frozen=True, eq=False)
class ClassificationState:
    """LoS responsibilities (and, after hard classification, labels) per link family."""
    omega: dict
    labels: dict = field(default=None)

    def __post_init__(self):
        for name, values in self.omega.items():
            if np.any((values < 0) | (values > 1)):
                raise ValueError(f"Responsibilities of {name} must lie in [0, 1]")

    @classmethod
    def from_pooled(cls, omega, shapes, labels=None):
        omega_parts, label_parts, offset = {}, ({} if labels is not None else None), 0
        for name in LINK_FAMILIES:
            shape = tuple(shapes[name])
            size = int(np.prod(shape))
            omega_parts[name] = np.asarray(omega[offset:offset + size], dtype=float).reshape(shape)
            if labels is not None:
                label_parts[name] = np.asarray(labels[offset:offset + size], dtype=bool).reshape(shape)
            offset += size
        if offset != len(omega):
            raise ValueError(f"Pooled responsibilities have {len(omega)} entries, shapes need {offset}")
        return cls(omega=omega_parts, labels=label_parts)

    def pooled_omega(self):
        return np.concatenate([self.omega[name].ravel() for name in LINK_FAMILIES])

    def pooled_labels(self):
        if self.labels is None:
            raise ValueError("Classification state has no hard labels; run hard_classify first")
        return np.concatenate([self.labels[name].ravel() for name in LINK_FAMILIES])

    def to_frame(self):
        """One row per link: family, row, col, omega and (when classified) the hard label."""
        frames = []
        for name in LINK_FAMILIES:
            rows, cols = np.indices(self.omega[name].shape)
            frame = pd.DataFrame({"family": name, "row": rows.ravel(), "col": cols.ravel(),
                                  "omega": self.omega[name].ravel()})
            if self.labels is not None:
                frame["los"] = self.labels[name].ravel()
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)


@dataclass(frozen=True, eq=False)
class EmResult:
    params: object
    omega: np.ndarray
    n_iter: int
    converged: bool
    surrogate: list


def _segment_loglik(seg, gains, phi):
    return norm.logpdf(gains, loc=seg.beta + seg.alpha * phi, scale=seg.sigma)


def _responsibilities(params, gains, phi):
    with np.errstate(divide="ignore"):
        log_los = np.log(params.pi_los) + _segment_loglik(params.los, gains, phi)
        log_nlos = np.log(params.pi_nlos) + _segment_loglik(params.nlos, gains, phi)
    total = np.logaddexp(log_los, log_nlos)
    finite = np.isfinite(total)
    omega = np.zeros_like(total, dtype=float)
    omega[finite] = np.exp(log_los[finite] - total[finite])
    if not np.all(finite):
        # both densities vanished: the nearer segment mean takes the link, NLoS on ties
        dist_los = np.abs(gains - (params.los.beta + params.los.alpha * phi))
        dist_nlos = np.abs(gains - (params.nlos.beta + params.nlos.alpha * phi))
        omega[~finite] = (dist_los < dist_nlos)[~finite].astype(float)
    return np.clip(omega, 0.0, 1.0)


def e_step(params, distances, gains):
    """
    Posterior probability that each link is LoS, given the gain-only mixture

    :param params: ChannelParams (gain part and priors are used)
    :param distances: link distances, meters
    :param gains: measured gains, dB
    :return: array of LoS responsibilities; the NLoS responsibility is one minus it
    """
    distances = np.asarray(distances, dtype=float)
    if np.any(distances <= 0):
        raise ValueError("e_step needs positive link distances")
    return _responsibilities(params, np.asarray(gains, dtype=float), np.log10(distances))


def _fit_segment(weights, gains, phi, n_total, config, segment):
    mass = float(np.sum(weights))
    if mass <= 0:
        raise DegenerateSegmentError(f"{segment.value} segment has no responsibility mass")
    phi_mean = float(np.sum(weights * phi) / mass)
    phi_var = float(np.sum(weights * (phi - phi_mean) ** 2) / mass)
    if phi_var <= 1e-12 * max(1.0, phi_mean ** 2):
        if not config.allow_degenerate:
            raise DegenerateSegmentError(
                f"{segment.value} segment is degenerate: all its measurements sit at one distance")
        alpha, beta = 0.0, float(np.sum(weights * gains) / mass)
    else:
        a_mat = np.array([[np.sum(weights * phi ** 2), np.sum(weights * phi)],
                          [np.sum(weights * phi), mass]])
        b_vec = np.array([np.sum(weights * phi * gains), np.sum(weights * gains)])
        alpha, beta = np.linalg.solve(a_mat, b_vec)
    residual = gains - beta - alpha * phi
    denom = n_total if config.denominator is Denominator.TOTAL else mass
    sigma = max(float(np.sqrt(np.sum(weights * residual ** 2) / denom)), config.min_sigma)
    return GainFit(alpha=float(alpha), beta=float(beta), sigma=sigma, pi=mass / n_total)


def m_step_gain(omega, gains, log_distances, config=None):
    """
    Closed-form M-step for the gain mixture.

    Args:
        omega (numpy.ndarray): LoS responsibilities per link.
        gains (numpy.ndarray): measured gains, dB.
        log_distances (numpy.ndarray): log10 of the link distances.
        config (EmConfig, optional): denominator switch and sigma floor.

    Returns:
        dict: Segment -> GainFit(alpha, beta, sigma, pi).

    Raises:
        DegenerateSegmentError: If a segment's normal matrix is singular.
    """
    config = config or EmConfig()
    omega = np.asarray(omega, dtype=float)
    gains = np.asarray(gains, dtype=float)
    phi = np.asarray(log_distances, dtype=float)
    n_total = len(gains)
    if n_total == 0:
        raise DegenerateSegmentError("No measurements to fit")
    return {Segment.LOS: _fit_segment(omega, gains, phi, n_total, config, Segment.LOS),
            Segment.NLOS: _fit_segment(1.0 - omega, gains, phi, n_total, config, Segment.NLOS)}


def _m_step_keeping(params, omega, gains, phi, config):
    # a segment whose mass collapses onto one distance keeps the line it had
    fits = {}
    for segment, weights in ((Segment.LOS, omega), (Segment.NLOS, 1.0 - omega)):
        try:
            fits[segment] = _fit_segment(weights, gains, phi, len(gains), config, segment)
        except DegenerateSegmentError as ex:
            logger.debug(f"{ex}; keeping its previous line")
            seg = params.segment(segment)
            fits[segment] = GainFit(alpha=seg.alpha, beta=seg.beta, sigma=seg.sigma,
                                    pi=float(np.sum(weights)) / len(gains))
    return fits


def apply_gain_fit(params, fits):
    los = replace(params.los, alpha=fits[Segment.LOS].alpha, beta=fits[Segment.LOS].beta,
                  sigma=fits[Segment.LOS].sigma)
    nlos = replace(params.nlos, alpha=fits[Segment.NLOS].alpha, beta=fits[Segment.NLOS].beta,
                   sigma=fits[Segment.NLOS].sigma)
    pi_los = float(np.clip(fits[Segment.LOS].pi, 0.0, 1.0))
    return replace(params, los=los, nlos=nlos, pi_los=pi_los)


def surrogate(params, omega, gains, log_distances):
    """EM lower bound on the gain log-likelihood; equal to it when omega is the posterior under params."""
    omega = np.asarray(omega, dtype=float)
    phi = np.asarray(log_distances, dtype=float)
    ll_los = _segment_loglik(params.los, gains, phi)
    ll_nlos = _segment_loglik(params.nlos, gains, phi)
    expected = (xlogy(omega, params.pi_los) + omega * ll_los
                + xlogy(1.0 - omega, params.pi_nlos) + (1.0 - omega) * ll_nlos)
    entropy = -(xlogy(omega, omega) + xlogy(1.0 - omega, 1.0 - omega))
    return float(np.sum(expected) + np.sum(entropy))


def _param_vector(params):
    return np.array([params.los.alpha, params.los.beta, params.los.sigma,
                     params.nlos.alpha, params.nlos.beta, params.nlos.sigma, params.pi_los])


def canonicalize(params, omega, log_distances):
    """Swap segment identities when the LoS segment predicts the weaker gain at the mean log-distance."""
    phi_bar = float(np.mean(log_distances)) if len(log_distances) else 0.0
    los_gain = params.los.beta + params.los.alpha * phi_bar
    nlos_gain = params.nlos.beta + params.nlos.alpha * phi_bar
    if los_gain < nlos_gain - 1e-9 * max(1.0, abs(nlos_gain)):
        logger.debug(f"Swapping segments: LoS predicts {los_gain:.2f} dB, NLoS {nlos_gain:.2f} dB")
        return params.swapped(), 1.0 - omega
    return params, omega


def initial_gain_params(template, gains, log_distances, config=None):
    """
    Data-driven starting point: a Theil-Sen line through all links, with the upper half of the links by
    residual rank seeding LoS and the lower half NLoS, and pi_LoS = 0.5.

    When one line explains every link to within min_sigma, the halves cannot be told apart: LoS is
    seeded from that line and NLoS keeps the template's gain line. A half whose links all sit at one
    distance also starts from the template line.
    """
    config = config or EmConfig()
    seed_config = replace(config, denominator=Denominator.RESPONSIBILITY)
    gains = np.asarray(gains, dtype=float)
    phi = np.asarray(log_distances, dtype=float)
    if len(gains) == 0:
        raise DegenerateSegmentError("No measurements to fit")
    if np.ptp(phi) > 1e-12:
        slope, intercept = theilslopes(gains, phi)[:2]
    else:
        slope, intercept = 0.0, float(np.median(gains))
    residual = gains - (intercept + slope * phi)
    if np.median(np.abs(residual - np.median(residual))) <= config.min_sigma:
        fit = _fit_segment(np.ones_like(gains), gains, phi, len(gains), seed_config, Segment.LOS)
        los = replace(template.los, alpha=fit.alpha, beta=fit.beta, sigma=fit.sigma)
        return replace(template, los=los, pi_los=0.5)
    above = np.zeros(len(gains), dtype=bool)
    above[np.argsort(residual, kind="stable")[len(gains) // 2:]] = True
    omega = np.clip(above.astype(float), config.responsibility_floor, 1.0 - config.responsibility_floor)
    fits = _m_step_keeping(template, omega, gains, phi, seed_config)
    return replace(apply_gain_fit(template, fits), pi_los=0.5)


def run_em_gain(config, params0, gains, log_distances):
    """
    Alternate E and M steps on the gain mixture until the relative parameter change drops below tol.

    :param config: EmConfig
    :param params0: starting ChannelParams (sigma_s > 0)
    :param gains: pooled gains, dB
    :param log_distances: pooled log10 distances
    :return: EmResult with canonicalized params, LoS responsibilities and the lower-bound trace
    """
    gains = np.asarray(gains, dtype=float)
    phi = np.asarray(log_distances, dtype=float)
    if params0.los.sigma <= 0 or params0.nlos.sigma <= 0:
        raise ValueError("EM needs positive initial shadowing stds")
    params = params0
    omega = _responsibilities(params, gains, phi)
    trace = [surrogate(params, omega, gains, phi)]
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iters + 1):
        floored = np.clip(omega, config.responsibility_floor, 1.0 - config.responsibility_floor)
        updated = apply_gain_fit(params, _m_step_keeping(params, floored, gains, phi, config))
        old = _param_vector(params)
        change = float(np.linalg.norm(_param_vector(updated) - old) / max(np.linalg.norm(old), 1e-12))
        params = updated
        omega = _responsibilities(params, gains, phi)
        value = surrogate(params, omega, gains, phi)
        if config.check_monotone and value < trace[-1] - 1e-9 * max(1.0, abs(trace[-1])):
            raise EmMonotonicityError(f"EM lower bound fell from {trace[-1]} to {value} at iteration {n_iter}")
        trace.append(value)
        logger.debug(f"EM iteration {n_iter}: bound {value:.6f}, relative change {change:.3e}, "
                     f"pi_los {params.pi_los:.3f}")
        if change < config.tol:
            converged = True
            break
    params, omega = canonicalize(params, omega, phi)
    return EmResult(params=params, omega=omega, n_iter=n_iter, converged=converged, surrogate=trace)


def fit_toa_params(omega, toa_ranges, distances, params, config=None):
    """
    Fit the ToA bias and std of each segment from the final responsibilities.
    mu_tau of the LoS segment is clamped to zero after fitting.
    """
    config = config or EmConfig()
    omega = np.asarray(omega, dtype=float)
    residual = np.asarray(toa_ranges, dtype=float) - np.asarray(distances, dtype=float)
    n_total = len(residual)
    for segment, weights in ((Segment.LOS, omega), (Segment.NLOS, 1.0 - omega)):
        mass = float(np.sum(weights))
        if mass < config.min_segment_mass:
            logger.warning(f"{segment.value} segment has no responsibility mass; keeping its ToA prior")
            continue
        denom = n_total if config.denominator is Denominator.TOTAL else mass
        mu = float(np.sum(weights * residual) / denom)
        sigma = max(float(np.sqrt(np.sum(weights * (residual - mu) ** 2) / denom)), config.min_sigma)
        if segment is Segment.LOS:
            mu = 0.0
        params = params.with_segment(segment, replace(params.segment(segment), mu_tau=mu, sigma_tau=sigma))
    return params


def hard_labels(omega):
    return np.asarray(omega, dtype=float) > 0.5


def hard_classify(soft):
    """w = 1 iff the LoS responsibility exceeds 0.5; a tie goes to NLoS."""
    return ClassificationState(omega=soft.omega, labels={name: hard_labels(values)
                                                         for name, values in soft.omega.items()})


def classification_error(labels, truth):
    labels = np.asarray(labels, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if labels.shape != truth.shape:
        raise ValueError(f"Label shape {labels.shape} does not match truth shape {truth.shape}")
    if labels.size == 0:
        return 0.0
    return float(np.mean(labels != truth))
