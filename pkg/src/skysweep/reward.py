"""Expected Rényi-divergence reward over candidate pointings, from particles.

Once per scan the predicted intensity is sampled into a particle cloud and a
nearest-neighbor index is built; both are shared across every candidate
action and Monte-Carlo measurement draw, then discarded. Per action, sampled
measurement sets drive a particle CPHD update whose reweighted cloud feeds
the k-nearest-neighbor divergence estimate.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .astro import Epoch, StateVector, measure_radec_many, wrap_angle_diff
from .cphd import (
    ModelInconsistency,
    CardinalityPmf,
    ClutterModel,
    CphdState,
    DetectionModel,
    MeasurementSet,
    clutter_cardinality,
    clutter_intensity,
    esf,
    logsumexp,
    update_terms,
)
from .gmm import FovRect, GaussianMixture, sample_mixture

THREADS_ENV = "SKYSWEEP_THREADS"

# stream tags for derived RNG streams
_TAG_CLOUD = 11
_TAG_ACTION = 12


def rng_stream(*keys: int) -> np.random.Generator:
    """Deterministic generator derived from integer keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class ParticleCloud:
    """Importance samples of the predicted intensity with cached projections.

    Prior weights are uniform 1/n by construction.
    """

    states: np.ndarray  # (n, 6)
    projected: np.ndarray  # (n, 2) ra/dec

    def __post_init__(self):
        if self.states.shape[0] != self.projected.shape[0]:
            raise ValueError("states/projections length mismatch")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def prior_weight(self) -> float:
        return 1.0 / self.states.shape[0]


@dataclass(frozen=True)
class KnnIndex:
    """Per-particle neighbor sets (self included) and kernel radii.

    indices: (n, ell) nearest neighbors including the particle itself;
    radii: distance to the ell-th neighbor excluding itself, in the
    standardized metric. The kernel constants built from the radii cancel in
    the divergence ratio and are never evaluated.
    """

    indices: np.ndarray
    radii: np.ndarray

    @property
    def ell(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class Action:
    """Candidate pointing direction with its field of view."""

    ra: float
    dec: float
    fov: FovRect

    @staticmethod
    def at(ra: float, dec: float, half_width: float, half_height: float) -> "Action":
        return Action(ra, dec, FovRect(ra, dec, half_width, half_height))


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    ell: int = 10
    n_samp: int = 5000
    n_trials: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0.0 or self.alpha == 1.0:
            raise ValueError("alpha must be in (0,1) or (1,inf)")
        if self.ell < 2:
            raise ValueError("ell must be at least 2")
        if self.n_samp <= self.ell:
            raise ValueError("n_samp must exceed ell")
        if self.n_trials <= 0:
            raise ValueError("n_trials must be positive")


def sample_particles(
    intensity: GaussianMixture,
    n_samp: int,
    rng: np.random.Generator,
    observer: StateVector,
) -> ParticleCloud:
    """Draw particles from the normalized intensity and cache their projections."""
    states = sample_mixture(intensity, n_samp, rng)
    projected = measure_radec_many(states[:, :3], observer.position)
    return ParticleCloud(states=states, projected=projected)


def build_knn(cloud: ParticleCloud, ell: int) -> KnnIndex:
    """Exact ell-nearest-neighbor index under per-dimension standardized distance.

    Raw Euclidean distance would be dominated by the position scale (1e4 km
    vs km/s), so each dimension is standardized by its marginal deviation.
    """
    n = len(cloud)
    if n <= ell:
        raise ValueError("need more particles than neighbors")
    sd = cloud.states.std(axis=0)
    sd = np.where(sd > 0.0, sd, 1.0)
    scaled = cloud.states / sd
    tree = cKDTree(scaled)
    dists, idx = tree.query(scaled, k=ell + 1)
    radii = dists[:, ell].copy()
    if np.any(radii <= 0.0):
        positive = radii[radii > 0.0]
        if positive.size == 0:
            raise ValueError("degenerate particle cloud: all points coincide")
        warnings.warn("duplicate particles: substituting smallest positive kNN radius")
        radii[radii <= 0.0] = positive.min()
    return KnnIndex(indices=idx[:, :ell].copy(), radii=radii)


def target_count_pmf(q: np.ndarray) -> np.ndarray:
    """Multi-Bernoulli count PMF over 0..J from per-particle existence odds.

    Evaluates prod(1 - q) * e_n(q/(1 - q)) via the elementary symmetric
    functions.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.size == 0:
        return np.array([1.0])
    if np.any((q < 0) | (q >= 1)):
        raise ValueError("existence probabilities must lie in [0, 1)")
    pmf = np.prod(1.0 - q) * esf(q / (1.0 - q))
    total = pmf.sum()
    if not math.isfinite(total) or total <= 0:
        raise ValueError("degenerate multi-Bernoulli PMF")
    return pmf / total


def sample_target_count(q: np.ndarray, rng: np.random.Generator) -> int:
    """Draw a count from the multi-Bernoulli law by independent thinning."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.size == 0:
        return 0
    return int(np.count_nonzero(rng.random(q.size) < q))


def _clamp_existence(q: np.ndarray) -> np.ndarray:
    if np.any(q >= 1.0):
        warnings.warn("existence probability >= 1 clamped below 1")
        q = np.minimum(q, 1.0 - 1e-9)
    return q


@dataclass
class RewardContext:
    """Per-scan shared state for the action sweep: cloud, index, models."""

    cloud: ParticleCloud
    knn: KnnIndex
    prior_card: CardinalityPmf
    nhat: float
    p_d: float
    R: np.ndarray
    R_chol: np.ndarray
    R_inv: np.ndarray
    R_logdet: float
    clutter2d: GaussianMixture
    clutter_chol: np.ndarray
    epoch: Epoch
    log_prior_half: np.ndarray = field(init=False)

    def __post_init__(self):
        with np.errstate(divide="ignore"):
            self.log_prior_half = np.log(self.prior_card.probs)


def prepare_reward_context(
    state: CphdState,
    clut: ClutterModel,
    observer: StateVector,
    p_d: float,
    R: np.ndarray,
    epoch: Epoch,
    cfg: RewardConfig,
    rng: np.random.Generator,
) -> RewardContext:
    """Sample the shared particle cloud and build the per-scan reward context."""
    cloud = sample_particles(state.intensity, cfg.n_samp, rng, observer)
    knn = build_knn(cloud, cfg.ell)
    clutter2d = clutter_intensity(clut, epoch, observer, R)
    clutter_chol = (
        np.linalg.cholesky(clutter2d.covs) if len(clutter2d) else np.zeros((0, 2, 2))
    )
    R = np.asarray(R, dtype=float)
    return RewardContext(
        cloud=cloud,
        knn=knn,
        prior_card=state.cardinality,
        nhat=state.cardinality.mean(),
        p_d=p_d,
        R=R,
        R_chol=np.linalg.cholesky(R),
        R_inv=np.linalg.inv(R),
        R_logdet=float(np.linalg.slogdet(R)[1]),
        clutter2d=clutter2d,
        clutter_chol=clutter_chol,
        epoch=epoch,
    )


def _log_gauss2(resid: np.ndarray, R_inv: np.ndarray, R_logdet: float) -> np.ndarray:
    maha = np.einsum("ni,ij,nj->n", resid, R_inv, resid)
    return -0.5 * (maha + R_logdet + 2.0 * math.log(2 * math.pi))


def _clutter_log_ratio_2d(z: np.ndarray, means: np.ndarray, covs: np.ndarray) -> float:
    """log(<1,kappa>/kappa(z)) over the in-FOV clutter components."""
    n = means.shape[0]
    if n == 0:
        return 0.0
    logs = np.empty(n)
    for i in range(n):
        d = np.array([wrap_angle_diff(z[0] - means[i, 0]), z[1] - means[i, 1]])
        sign, logdet = np.linalg.slogdet(covs[i])
        logs[i] = -0.5 * (
            float(d @ np.linalg.solve(covs[i], d)) + logdet + 2 * math.log(2 * math.pi)
        )
    from .cphd import LOG_KAPPA_FLOOR

    return math.log(n) - max(float(logsumexp(logs)), LOG_KAPPA_FLOOR)


def particle_update_weights(
    cloud: ParticleCloud,
    Z: MeasurementSet,
    det: DetectionModel,
    clut: ClutterModel,
    prior_card: CardinalityPmf,
) -> tuple[np.ndarray, CardinalityPmf]:
    """Posterior particle weights and cardinality from the CPHD update.

    Detection probability per particle is det.p_d inside the FOV and zero
    outside. Returned weights are unit normalized.
    """
    clutter2d = clutter_intensity(clut, Z.epoch, det.observer, Z.noise)
    if len(clutter2d):
        keep = det.fov.contains(clutter2d.means[:, 0], clutter2d.means[:, 1])
        cmeans, ccovs = clutter2d.means[keep], clutter2d.covs[keep]
    else:
        cmeans, ccovs = clutter2d.means, clutter2d.covs
    mask_in = det.fov.contains(cloud.projected[:, 0], cloud.projected[:, 1])
    R_inv = np.linalg.inv(Z.noise)
    R_logdet = float(np.linalg.slogdet(Z.noise)[1])
    return _particle_posterior(
        cloud, mask_in, prior_card, det.p_d, Z.z, R_inv, R_logdet, cmeans, ccovs
    )


def _particle_posterior(
    cloud: ParticleCloud,
    mask_in: np.ndarray,
    prior_card: CardinalityPmf,
    p_d: float,
    z_arr: np.ndarray,
    R_inv: np.ndarray,
    R_logdet: float,
    clut_means: np.ndarray,
    clut_covs: np.ndarray,
) -> tuple[np.ndarray, CardinalityPmf]:
    n = len(cloud)
    nhat = prior_card.mean()
    m = z_arr.shape[0]
    n_in = int(mask_in.sum())
    W = nhat
    miss_weight = nhat * (1.0 - p_d * n_in / n)
    n_kappa = clut_means.shape[0]
    with np.errstate(divide="ignore"):
        log_rho_k = np.log(clutter_cardinality(n_kappa, p_d).probs)

    proj_in = cloud.projected[mask_in]
    log_g = np.empty((m, n_in))
    log_r = np.empty(m)
    log_xi = np.empty(m)
    for k in range(m):
        resid = np.column_stack(
            [wrap_angle_diff(z_arr[k, 0] - proj_in[:, 0]), z_arr[k, 1] - proj_in[:, 1]]
        )
        log_g[k] = _log_gauss2(resid, R_inv, R_logdet)
        log_r[k] = _clutter_log_ratio_2d(z_arr[k], clut_means, clut_covs)
        inner = logsumexp(log_g[k]) if n_in else -np.inf
        log_xi[k] = log_r[k] + math.log(p_d * nhat / n) + inner

    posterior_card, miss_coef, log_meas_coef = update_terms(
        W, miss_weight, log_xi, log_rho_k, prior_card
    )

    w = np.full(n, miss_coef)
    if n_in:
        w_in = np.full(n_in, miss_coef * (1.0 - p_d))
        for k in range(m):
            w_in += math.exp(log_meas_coef[k] + log_r[k]) * p_d * np.exp(log_g[k])
        w[mask_in] = w_in
    total = w.sum()
    if total <= 0.0 or not math.isfinite(total):
        raise ValueError("all-zero posterior particle weights")
    return w / total, posterior_card


def renyi_reward(
    cloud: ParticleCloud,
    posterior_weights: np.ndarray,
    prior_card: CardinalityPmf,
    posterior_card: CardinalityPmf,
    knn: KnnIndex,
    alpha: float,
) -> float:
    """Divergence estimate between posterior and prior from neighbor-summed weights.

    Normalized so an unchanged posterior scores exactly zero.
    """
    n = len(cloud)
    prior_w = cloud.prior_weight
    if (
        np.array_equal(posterior_card.probs, prior_card.probs)
        and np.all(posterior_weights == prior_w)
    ):
        return 0.0
    ell = knn.ell
    neigh = posterior_weights[knn.indices].sum(axis=1)
    bracket = float(np.mean((neigh * (n / ell)) ** alpha))
    with np.errstate(divide="ignore", invalid="ignore"):
        card = posterior_card.probs**alpha * prior_card.probs ** (1.0 - alpha)
    card_term = float(np.sum(np.where(np.isfinite(card), card, np.inf)))
    if card_term == 0.0 or bracket == 0.0:
        return math.inf if alpha < 1.0 else -math.inf
    return float(np.log(card_term * bracket) / (alpha - 1.0))


def sample_measurement_set(
    action: Action,
    ctx: RewardContext,
    rng: np.random.Generator,
) -> MeasurementSet:
    """Draw one hypothetical measurement set for an action: clutter plus targets."""
    pre = _action_precompute(action, ctx)
    return _sample_measurement_set_fast(pre, ctx, rng)


@dataclass
class _ActionPre:
    """Per-action cached geometry shared by all Monte-Carlo trials."""

    action: Action
    idx_in: np.ndarray
    n_in: int
    mask_in: np.ndarray
    q: np.ndarray
    clut_idx: np.ndarray
    neigh_in_count: np.ndarray
    neigh_rows: np.ndarray
    neigh_cols_local: np.ndarray


def _action_precompute(action: Action, ctx: RewardContext) -> _ActionPre:
    mask_in = action.fov.contains(ctx.cloud.projected[:, 0], ctx.cloud.projected[:, 1])
    idx_in = np.flatnonzero(mask_in)
    n = len(ctx.cloud)
    q = _clamp_existence(np.full(idx_in.size, ctx.p_d * ctx.nhat / n))
    if len(ctx.clutter2d):
        cmask = action.fov.contains(ctx.clutter2d.means[:, 0], ctx.clutter2d.means[:, 1])
        clut_idx = np.flatnonzero(cmask)
    else:
        clut_idx = np.zeros(0, dtype=int)
    # sparse structure of in-FOV entries in the neighbor table
    in_table = mask_in[ctx.knn.indices]
    neigh_in_count = in_table.sum(axis=1)
    rows, cols = np.nonzero(in_table)
    inv = np.full(n, -1, dtype=int)
    inv[idx_in] = np.arange(idx_in.size)
    cols_local = inv[ctx.knn.indices[rows, cols]]
    return _ActionPre(
        action=action,
        idx_in=idx_in,
        n_in=idx_in.size,
        mask_in=mask_in,
        q=q,
        clut_idx=clut_idx,
        neigh_in_count=neigh_in_count,
        neigh_rows=rows,
        neigh_cols_local=cols_local,
    )


def _sample_measurement_set_fast(
    pre: _ActionPre, ctx: RewardContext, rng: np.random.Generator
) -> MeasurementSet:
    zs = []
    # clutter: one Bernoulli per in-FOV catalog object, draw from its
    # predicted measurement density
    for ci in pre.clut_idx:
        if rng.random() < ctx.p_d:
            zs.append(ctx.clutter2d.means[ci] + ctx.clutter_chol[ci] @ rng.standard_normal(2))
    # targets: multi-Bernoulli count, then draws from the in-FOV projections
    n_t = sample_target_count(pre.q, rng)
    if n_t:
        picks = pre.idx_in[rng.integers(0, pre.n_in, size=n_t)]
        noise = rng.standard_normal((n_t, 2)) @ ctx.R_chol.T
        for j in range(n_t):
            zs.append(ctx.cloud.projected[picks[j]] + noise[j])
    z = np.array(zs).reshape(-1, 2)
    z[:, 0] = np.mod(z[:, 0], 2 * math.pi)
    return MeasurementSet(z, ctx.epoch, ctx.R)


def _trial_reward(pre: _ActionPre, ctx: RewardContext, cfg: RewardConfig, rng) -> float:
    Z = _sample_measurement_set_fast(pre, ctx, rng)
    cmeans = ctx.clutter2d.means[pre.clut_idx]
    ccovs = ctx.clutter2d.covs[pre.clut_idx]
    w_post, card_post = _particle_posterior(
        ctx.cloud, pre.mask_in, ctx.prior_card, ctx.p_d, Z.z,
        ctx.R_inv, ctx.R_logdet, cmeans, ccovs,
    )
    return _renyi_fast(pre, ctx, cfg.alpha, w_post, card_post)


def _renyi_fast(
    pre: _ActionPre, ctx: RewardContext, alpha: float, w_post: np.ndarray, card_post
) -> float:
    n = len(ctx.cloud)
    ell = ctx.knn.ell
    w_out = w_post[~pre.mask_in]
    w_out_common = float(w_out[0]) if w_out.size else 0.0
    base = w_out_common * (ell - pre.neigh_in_count)
    if pre.n_in:
        w_in_local = w_post[pre.mask_in]
        scatter = np.bincount(
            pre.neigh_rows, weights=w_in_local[pre.neigh_cols_local], minlength=n
        )
        neigh = base + scatter
    else:
        neigh = base
    bracket = float(np.mean((neigh * (n / ell)) ** alpha))
    card = card_post.probs**alpha * ctx.prior_card.probs ** (1.0 - alpha)
    card_term = float(card.sum())
    if card_term == 0.0 or bracket == 0.0:
        return math.inf if alpha < 1.0 else -math.inf
    return float(np.log(card_term * bracket) / (alpha - 1.0))


def expected_reward(
    action: Action, ctx: RewardContext, cfg: RewardConfig, rng: np.random.Generator
) -> float:
    """Average divergence over Monte-Carlo measurement-set draws for one action.

    The multi-Bernoulli set sampler only approximates the filter's predictive
    law, so a draw can be impossible under the exact update (for instance an
    empty set when detection is certain and the count PMF excludes zero);
    such trials are dropped from the average.
    """
    pre = _action_precompute(action, ctx)
    if pre.n_in == 0 and pre.clut_idx.size == 0:
        # no particle and no catalog object: every draw is empty and the
        # update is provably the identity
        return 0.0
    total = 0.0
    valid = 0
    for _ in range(cfg.n_trials):
        try:
            total += _trial_reward(pre, ctx, cfg, rng)
            valid += 1
        except ModelInconsistency:
            continue
    return total / valid if valid else 0.0


_POOL_CTX: dict = {}


def _pool_eval(args):
    lo, hi = args
    ctx = _POOL_CTX["ctx"]
    cfg = _POOL_CTX["cfg"]
    actions = _POOL_CTX["actions"]
    keys = _POOL_CTX["keys"]
    return [
        expected_reward(actions[i], ctx, cfg, rng_stream(*keys, i))
        for i in range(lo, hi)
    ]


def select_action(
    actions: list[Action],
    state: CphdState,
    clut: ClutterModel,
    det: DetectionModel,
    cfg: RewardConfig,
    epoch: Epoch,
    R: np.ndarray,
    scan_index: int = 0,
) -> tuple[int, Action, np.ndarray]:
    """Evaluate every action's expected reward and pick the argmax.

    det supplies p_d and the observer; each candidate action's own FOV
    replaces det.fov. Per-action RNG streams derive from (seed, scan, action
    index) so any evaluation order gives identical results. Ties break to the
    lowest action index. Returns (index, action, reward map).
    """
    if not actions:
        raise ValueError("need at least one candidate action")
    ctx = prepare_reward_context(
        state, clut, det.observer, det.p_d, R, epoch, cfg,
        rng_stream(cfg.seed, scan_index, _TAG_CLOUD),
    )
    keys = (cfg.seed, scan_index, _TAG_ACTION)
    n_workers = _thread_count()
    if n_workers > 1 and len(actions) >= 4 * n_workers:
        rewards = _parallel_rewards(actions, ctx, cfg, keys, n_workers)
    else:
        rewards = np.array(
            [
                expected_reward(a, ctx, cfg, rng_stream(*keys, i))
                for i, a in enumerate(actions)
            ]
        )
    best = int(np.argmax(rewards))  # argmax returns the first maximal index
    return best, actions[best], rewards


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _parallel_rewards(actions, ctx, cfg, keys, n_workers) -> np.ndarray:
    import multiprocessing as mp

    if mp.get_start_method(allow_none=False) != "fork":  # pragma: no cover
        return np.array(
            [
                expected_reward(a, ctx, cfg, rng_stream(*keys, i))
                for i, a in enumerate(actions)
            ]
        )
    _POOL_CTX.update(ctx=ctx, cfg=cfg, actions=actions, keys=keys)
    try:
        chunks = []
        step = max(1, math.ceil(len(actions) / (4 * n_workers)))
        for lo in range(0, len(actions), step):
            chunks.append((lo, min(lo + step, len(actions))))
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(_pool_eval, chunks))
        return np.array([r for part in parts for r in part])
    finally:
        _POOL_CTX.clear()
