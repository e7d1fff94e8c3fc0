"""Gaussian-mixture CPHD recursion with catalog clutter and FOV-limited detection.

The filter carries a 6D Cartesian intensity mixture plus a cardinality PMF.
Prediction pushes every component through two-body dynamics with the
unscented transform; the update handles missed detections, catalog-origin
clutter, and empty scans. The combinatorial update terms are evaluated in log
space because the clutter-density ratio can span hundreds of orders of
magnitude for target-origin measurements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .astro import (
    MU_EARTH,
    Epoch,
    StateVector,
    propagate_states_any,
    wrap_angle_diff,
)
from .gmm import (
    FovRect,
    GaussianMixture,
    RadecProjection,
    empty_mixture,
    spd_repair,
    unscented_transform_batch,
)

LOG_KAPPA_FLOOR = math.log(1e-300)


class ModelInconsistency(RuntimeError):
    """The update normalizer vanished: the measurement set has zero probability."""


@dataclass(frozen=True)
class CardinalityPmf:
    """PMF over target count n = 0..N_max."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a nonempty vector")
        if np.any(p < 0) or not np.isfinite(p).all():
            raise ValueError("probs must be nonnegative and finite")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probs must sum to 1")

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    def mean(self) -> float:
        return float(np.arange(self.probs.size) @ self.probs)

    def map_estimate(self) -> int:
        return int(np.argmax(self.probs))  # argmax takes the smallest tie

    def abs_error(self, n_star: int) -> float:
        return float(self.probs @ np.abs(np.arange(self.probs.size) - n_star))

    @staticmethod
    def point_mass(n: int, n_max: int) -> "CardinalityPmf":
        p = np.zeros(n_max + 1)
        p[n] = 1.0
        return CardinalityPmf(p)

    @staticmethod
    def poisson(mean: float, n_max: int) -> "CardinalityPmf":
        n = np.arange(n_max + 1)
        logs = n * math.log(mean) - mean - np.cumsum(np.log(np.maximum(n, 1)))
        p = np.exp(logs)
        return CardinalityPmf(p / p.sum())

    @staticmethod
    def uniform(n_hi: int, n_max: int) -> "CardinalityPmf":
        if n_hi > n_max:
            raise ValueError("uniform support exceeds N_max")
        p = np.zeros(n_max + 1)
        p[: n_hi + 1] = 1.0 / (n_hi + 1)
        return CardinalityPmf(p)


@dataclass(frozen=True)
class CphdState:
    """Intensity mixture paired with the cardinality PMF.

    The total mixture weight must match the PMF mean (the expected-count
    identity) to 1e-6 relative.
    """

    intensity: GaussianMixture
    cardinality: CardinalityPmf

    def __post_init__(self):
        err = self.consistency_error()
        if err > 1e-6:
            raise ValueError(
                f"intensity weight {self.intensity.total_weight:.6g} inconsistent "
                f"with expected cardinality {self.cardinality.mean():.6g}"
            )

    def consistency_error(self) -> float:
        nhat = self.cardinality.mean()
        return abs(self.intensity.total_weight - nhat) / max(1.0, nhat)


@dataclass(frozen=True)
class DetectionModel:
    p_d: float
    fov: FovRect
    observer: StateVector

    def __post_init__(self):
        if not 0.0 < self.p_d <= 1.0:
            raise ValueError("p_d must be in (0, 1]")


@dataclass(frozen=True)
class ClutterModel:
    """Known catalog objects: 6D state means/covariances at a common epoch."""

    epoch: Epoch
    means: np.ndarray  # (n, 6)
    covs: np.ndarray  # (n, 6, 6)
    p_d: float

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float).reshape(-1, 6))
        object.__setattr__(
            self, "covs", np.asarray(self.covs, dtype=float).reshape(-1, 6, 6)
        )
        if self.means.shape[0] != self.covs.shape[0]:
            raise ValueError("catalog means/covs length mismatch")

    def __len__(self) -> int:
        return self.means.shape[0]

    def at_epoch(self, epoch: Epoch, mu: float = MU_EARTH) -> "ClutterModel":
        """Propagate the catalog to another epoch (two-body, unscented)."""
        dt = epoch - self.epoch
        if dt == 0.0 or len(self) == 0:
            return ClutterModel(epoch, self.means, self.covs, self.p_d)
        means, covs = unscented_transform_batch(
            self.means, self.covs, lambda s: propagate_states_any(s, dt, mu)
        )
        return ClutterModel(epoch, means, covs, self.p_d)


@dataclass(frozen=True)
class MeasurementSet:
    """Angle measurements collected in one scan, with shared noise covariance."""

    z: np.ndarray  # (m, 2) ra/dec radians
    epoch: Epoch
    noise: np.ndarray  # (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "noise", np.asarray(self.noise, dtype=float))
        if self.noise.shape != (2, 2):
            raise ValueError("noise must be 2x2")
        if np.any(np.linalg.eigvalsh(self.noise) <= 0):
            raise ValueError("noise must be positive definite")

    def __len__(self) -> int:
        return self.z.shape[0]


def esf(values) -> np.ndarray:
    """Elementary symmetric functions e_0..e_m by incremental polynomial expansion."""
    values = np.asarray(values, dtype=float).reshape(-1)
    e = np.zeros(values.size + 1)
    e[0] = 1.0
    for v in values:
        e[1:] = e[1:] + v * e[:-1]
    return e


def log_esf(log_values: np.ndarray) -> np.ndarray:
    """log e_j of nonnegative values given by their logs; stable for huge ranges."""
    log_values = np.asarray(log_values, dtype=float).reshape(-1)
    m = log_values.size
    log_e = np.full(m + 1, -np.inf)
    log_e[0] = 0.0
    for lv in log_values:
        # e[j] <- e[j] + v * e[j-1], highest order first
        upd = np.logaddexp(log_e[1:], lv + log_e[:-1])
        log_e[1:] = upd
    return log_e


def clutter_intensity(
    clut: ClutterModel, epoch: Epoch, observer: StateVector, R: np.ndarray
) -> GaussianMixture:
    """2D (ra, dec) clutter mixture: one unit-weight component per catalog object."""
    cat = clut.at_epoch(epoch)
    if len(cat) == 0:
        return empty_mixture(2)
    proj = RadecProjection(observer)
    z, P2, _ = proj.project(cat.means, cat.covs)
    S = P2 + np.asarray(R)[None, :, :]
    return GaussianMixture(np.ones(len(cat)), z, S)


def clutter_cardinality(n_kappa_fov: int, p_d: float) -> CardinalityPmf:
    """Binomial clutter-count PMF over 0..N for N in-FOV catalog objects."""
    if not 0.0 <= p_d <= 1.0:
        raise ValueError("p_d must be in [0, 1]")
    n = n_kappa_fov
    probs = np.array(
        [math.comb(n, k) * p_d**k * (1 - p_d) ** (n - k) for k in range(n + 1)]
    )
    return CardinalityPmf(probs / probs.sum())


def predict(state: CphdState, dt: float, mu: float = MU_EARTH) -> CphdState:
    """Push the intensity through two-body dynamics; cardinality is unchanged."""
    mix = state.intensity
    if dt == 0.0 or len(mix) == 0:
        return state
    means, covs = unscented_transform_batch(
        mix.means, mix.covs, lambda s: propagate_states_any(s, dt, mu)
    )
    return CphdState(GaussianMixture(mix.weights.copy(), means, covs), state.cardinality)


def expected_cardinality(state: CphdState) -> float:
    return state.cardinality.mean()


def map_cardinality(state: CphdState) -> int:
    return state.cardinality.map_estimate()


def logsumexp(a, axis=None):
    """Lean log-sum-exp that tolerates -inf entries (all -inf rows give -inf)."""
    a = np.asarray(a, dtype=float)
    mx = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    out = np.where(np.isfinite(mx), out, mx)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


_LF_CACHE = np.concatenate([[0.0], np.cumsum(np.log(np.arange(1, 512)))])


def _log_factorials(n: int) -> np.ndarray:
    if n < _LF_CACHE.size:
        return _LF_CACHE
    return np.concatenate([[0.0], np.cumsum(np.log(np.arange(1, n + 1)))])


_UPSILON_GRIDS: dict = {}


def _upsilon_grids(n_max: int, m_eff: int, u: int):
    """Cached index grids for the Y^u term matrix: (valid, expo, perm, expo>0)."""
    key = (n_max, m_eff, u)
    hit = _UPSILON_GRIDS.get(key)
    if hit is None:
        ns_col = np.arange(n_max + 1)[:, None]
        js = np.arange(m_eff + 1)[None, :]
        valid = js + u <= ns_col
        expo = np.clip(ns_col - js - u, 0, None)
        lf = _log_factorials(n_max + m_eff + 2)
        perm = lf[ns_col] - lf[expo]
        hit = (valid, expo, perm, expo > 0)
        _UPSILON_GRIDS[key] = hit
    return hit


def update_terms(
    total_weight: float,
    miss_weight: float,
    log_xi: np.ndarray,
    log_rho_clutter: np.ndarray,
    prior: CardinalityPmf,
):
    """Shared combinatorial core of the CPHD update.

    total_weight: <1, D>, miss_weight: <1 - p_D, D>, log_xi: log <D, psi_z>
    per measurement, log_rho_clutter: log binomial clutter-count PMF.

    Returns (posterior CardinalityPmf, miss coefficient, per-measurement log
    coefficients log(<Y1_z, rho>/<Y0, rho>)).
    """
    m = log_xi.size
    n_max = prior.n_max
    log_w = math.log(total_weight) if total_weight > 0 else -np.inf
    log_phi = math.log(miss_weight) if miss_weight > 0 else -np.inf
    old_err = np.seterr(divide="ignore", invalid="ignore")
    try:
        log_prior = np.log(prior.probs)
        lf = _log_factorials(max(n_max, m) + 1)
        ns_col = np.arange(n_max + 1)[:, None]
        ns = ns_col[:, 0]
        log_phibar = log_phi - log_w  # log of the normalized miss fraction
        zero_w = total_weight == 0.0

        if m == 0:
            # empty scan: Y0(n) = rho_K(0) * phibar^n, Y1(n) = rho_K(0) * n * phi^(n-1) / W^n
            lk0 = log_rho_clutter[0]
            log_y0 = np.full(n_max + 1, -np.inf)
            log_y1 = np.full(n_max + 1, -np.inf)
            log_y0[0] = lk0
            if not zero_w:
                if miss_weight > 0.0:
                    log_y0[1:] = lk0 + ns[1:] * log_phibar
                    log_y1[1:] = (
                        lk0 + np.log(ns[1:]) + (ns[1:] - 1) * log_phi - ns[1:] * log_w
                    )
                else:
                    # detection certain inside the support: only n = 1 survives Y1
                    log_y1[1] = lk0 - log_w
            log_norm = logsumexp(log_y0 + log_prior)
            if not np.isfinite(log_norm):
                raise ModelInconsistency(
                    "zero-probability measurement set under the current model"
                )
            posterior = CardinalityPmf(_normalized_exp(log_y0 + log_prior - log_norm))
            miss_coef = math.exp(logsumexp(log_y1 + log_prior) - log_norm)
            return posterior, miss_coef, np.empty(0)

        def log_upsilon(u: int, log_e: np.ndarray) -> np.ndarray:
            """log Y^u(n) for n = 0..n_max given log-ESF of the measurement set."""
            m_eff = log_e.size - 1
            valid, expo, perm, expo_pos = _upsilon_grids(n_max, m_eff, u)
            if zero_w:
                valid = valid & (ns_col == 0)  # only n = 0 carries mass
            # clutter-count factor (m_eff - j)! * rho_K(m_eff - j), fused with e_j
            kk = m_eff - np.arange(m_eff + 1)
            const = np.full(m_eff + 1, -np.inf)
            ok = kk < log_rho_clutter.size
            const[ok] = lf[kk[ok]] + log_rho_clutter[kk[ok]]
            const = const + log_e
            power = np.where(expo_pos, expo * log_phi, 0.0)
            log_wn = np.where(ns_col > 0, ns_col * log_w, 0.0)
            terms = np.where(valid, const[None, :] + perm + power - log_wn, -np.inf)
            return logsumexp(terms, axis=1)

        log_e_full = log_esf(log_xi)
        log_y0 = log_upsilon(0, log_e_full)
        log_y1 = log_upsilon(1, log_e_full)

        log_norm = logsumexp(log_y0 + log_prior)
        if not np.isfinite(log_norm):
            raise ModelInconsistency(
                "zero-probability measurement set under the current model"
            )
        posterior = CardinalityPmf(_normalized_exp(log_y0 + log_prior - log_norm))
        miss_coef = math.exp(logsumexp(log_y1 + log_prior) - log_norm)

        log_meas_coef = np.empty(m)
        for k in range(m):
            log_e_k = log_esf(np.delete(log_xi, k))
            log_y1k = log_upsilon(1, log_e_k)
            log_meas_coef[k] = logsumexp(log_y1k + log_prior) - log_norm
        return posterior, miss_coef, log_meas_coef
    finally:
        np.seterr(**old_err)


def _normalized_exp(log_p: np.ndarray) -> np.ndarray:
    p = np.exp(log_p - log_p.max())
    p = np.where(np.isfinite(log_p), p, 0.0)
    return p / p.sum()


def _clutter_log_ratio(z: np.ndarray, clutter_fov: GaussianMixture) -> float:
    """log(<1, kappa>/kappa(z)) with the spec underflow floor; 0 with no clutter."""
    n_fov = len(clutter_fov)
    if n_fov == 0:
        # the ratio provably cancels against the same factor inside Xi
        return 0.0
    logs = np.empty(n_fov)
    for i in range(n_fov):
        S = clutter_fov.covs[i]
        diff = np.array(
            [wrap_angle_diff(z[0] - clutter_fov.means[i, 0]), z[1] - clutter_fov.means[i, 1]]
        )
        sign, logdet = np.linalg.slogdet(S)
        maha = float(diff @ np.linalg.solve(S, diff))
        logs[i] = -0.5 * (maha + logdet + 2.0 * math.log(2 * math.pi))
    log_kappa = max(float(logsumexp(logs)), LOG_KAPPA_FLOOR)
    return math.log(n_fov) - log_kappa


def update(
    state: CphdState,
    Z: MeasurementSet,
    det: DetectionModel,
    clut: ClutterModel,
) -> CphdState:
    """Measurement update with FOV-limited detection and catalog clutter.

    The intensity must already be FOV-split so every component is wholly
    inside or outside the field of view (classified by its projected mean).
    """
    mix = state.intensity
    if mix.dim != 6:
        raise ValueError("intensity must be a 6D Cartesian mixture")
    m = len(Z)
    proj = RadecProjection(det.observer)

    n_comp = len(mix)
    if n_comp:
        z_proj, P_proj, H = proj.project(mix.means, mix.covs)
        inside = det.fov.contains(z_proj[:, 0], z_proj[:, 1])
    else:
        z_proj = np.zeros((0, 2))
        P_proj = np.zeros((0, 2, 2))
        H = np.zeros((0, 2, 6))
        inside = np.zeros(0, dtype=bool)

    W = mix.total_weight
    W_in = float(mix.weights[inside].sum())
    miss_weight = W - det.p_d * W_in

    clutter_all = clutter_intensity(clut, Z.epoch, det.observer, Z.noise)
    if len(clutter_all):
        in_fov = det.fov.contains(clutter_all.means[:, 0], clutter_all.means[:, 1])
        clutter_fov = GaussianMixture(
            clutter_all.weights[in_fov],
            clutter_all.means[in_fov],
            clutter_all.covs[in_fov],
            dim=2,
        )
    else:
        clutter_fov = clutter_all
    n_kappa_fov = len(clutter_fov)
    with np.errstate(divide="ignore"):
        log_rho_k = np.log(clutter_cardinality(n_kappa_fov, clut.p_d).probs)

    # per-measurement Gaussian-product likelihoods for in-FOV components
    idx_in = np.flatnonzero(inside)
    S = P_proj[idx_in] + Z.noise[None, :, :]
    log_q = np.full((m, idx_in.size), -np.inf)
    kalman_means = np.empty((m, idx_in.size, 6))
    kalman_covs = np.empty((idx_in.size, 6, 6))
    if idx_in.size:
        S_inv = np.linalg.inv(S)
        PHt = np.einsum("nij,nkj->nik", mix.covs[idx_in], H[idx_in])
        K = np.einsum("nik,nkl->nil", PHt, S_inv)
        sign, logdet = np.linalg.slogdet(S)
        HP = np.einsum("nij,njk->nik", H[idx_in], mix.covs[idx_in])
        kalman_covs = spd_repair(mix.covs[idx_in] - np.einsum("nij,njk->nik", K, HP))
        for k in range(m):
            resid = np.column_stack(
                [
                    wrap_angle_diff(Z.z[k, 0] - z_proj[idx_in, 0]),
                    Z.z[k, 1] - z_proj[idx_in, 1],
                ]
            )
            maha = np.einsum("ni,nij,nj->n", resid, S_inv, resid)
            log_q[k] = -0.5 * (maha + logdet + 2.0 * math.log(2 * math.pi))
            kalman_means[k] = mix.means[idx_in] + np.einsum("nik,nk->ni", K, resid)

    log_w_in = np.log(np.maximum(mix.weights[idx_in], 1e-320)) if idx_in.size else np.zeros(0)
    log_pd = math.log(det.p_d)
    log_r = np.array([_clutter_log_ratio(Z.z[k], clutter_fov) for k in range(m)])
    if idx_in.size:
        log_inner = np.array(
            [logsumexp(log_w_in + log_q[k]) if np.any(np.isfinite(log_q[k])) else -np.inf for k in range(m)]
        )
    else:
        log_inner = np.full(m, -np.inf)
    log_xi = log_r + log_pd + log_inner

    posterior_card, miss_coef, log_meas_coef = update_terms(
        W, miss_weight, log_xi, log_rho_k, state.cardinality
    )

    # assemble the posterior mixture: scaled priors first, then one component
    # per (measurement, in-FOV component) pair
    new_w = [mix.weights * miss_coef * np.where(inside, 1.0 - det.p_d, 1.0)]
    new_m = [mix.means]
    new_c = [mix.covs]
    for k in range(m):
        if idx_in.size == 0:
            continue
        lw = log_meas_coef[k] + log_r[k] + log_pd + log_w_in + log_q[k]
        w_k = np.exp(lw)
        new_w.append(w_k)
        new_m.append(kalman_means[k])
        new_c.append(kalman_covs.copy())
    weights = np.concatenate(new_w) if new_w else np.zeros(0)
    means = np.concatenate(new_m) if new_m else np.zeros((0, 6))
    covs = np.concatenate(new_c) if new_c else np.zeros((0, 6, 6))

    posterior_mix = GaussianMixture(weights, means, covs, dim=6)
    nhat = posterior_card.mean()
    w_tot = posterior_mix.total_weight
    rel_err = abs(w_tot - nhat) / max(1.0, nhat)
    if rel_err > 1e-6:
        raise ModelInconsistency(
            f"posterior weight {w_tot:.9g} disagrees with expected count {nhat:.9g}"
        )
    if w_tot > 0.0 and nhat > 0.0:
        posterior_mix = posterior_mix.scaled(nhat / w_tot)
    return CphdState(posterior_mix, posterior_card)
