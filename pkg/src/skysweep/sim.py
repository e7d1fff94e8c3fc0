"""Scenario setup, truth-model generation, closed-loop execution, and evaluation.

A scenario seeds an admissible-region search set from one noisy attributable,
hands it to the follow-up sensor as a CPHD, and then runs the scan loop:
select a pointing (information-driven or scanning baseline), collect the
truth-model measurement set, split/update/prune the filter, and forecast to
the next scan. Monte-Carlo trials rerun the truth sampling; both policies in
a trial share identical truth and measurement noise streams.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .admissible import (
    ArConstraints,
    ArGridSpec,
    AttributableVector,
    build_ar_gmm,
    default_grid,
)
from .astro import (
    MU_EARTH,
    Epoch,
    KeplerianElements,
    ObserverSite,
    StateVector,
    kepler_to_cartesian,
    measure_radec,
    measure_radec_many,
    propagate_states,
    site_state,
    wrap_angle,
    wrap_angle_diff,
)
from .cphd import (
    CardinalityPmf,
    ClutterModel,
    CphdState,
    DetectionModel,
    MeasurementSet,
    predict,
    update,
)
from .gmm import (
    FovRect,
    GaussianMixture,
    gaussian_logpdf,
    prune_and_merge,
    recursive_fov_split,
)
from .reward import Action, RewardConfig, rng_stream, select_action

ARCSEC = math.radians(1.0 / 3600.0)

# RNG stream tags rooted at (master_seed, trial_index)
_TAG_INIT = 1
_TAG_MEAS = 2
_TAG_POLICY = 3
# scenario-level stream (search set is built once per case, like the paper's
# single initial measurement; Monte-Carlo trials resample only truth states)
_TAG_ATTRIBUTABLE = 4

POLICY_INFO = "info"
POLICY_SCAN = "scan"


@dataclass(frozen=True)
class CardinalityPriorSpec:
    """Initial target-count prior: truncated Poisson or uniform over 0..n_hi."""

    kind: str
    mean: float = 3.0
    n_hi: int = 19

    def build(self, n_max: int) -> CardinalityPmf:
        if self.kind == "poisson":
            return CardinalityPmf.poisson(self.mean, n_max)
        if self.kind == "uniform":
            return CardinalityPmf.uniform(self.n_hi, n_max)
        raise ValueError(f"unknown cardinality prior kind {self.kind!r}")


@dataclass(frozen=True)
class ArGridParams:
    n_rho: int = 200
    n_rho_rate: int = 100
    rho_rate_abs_max: float = 10.0
    rho_min: float | None = None
    rho_max: float | None = None

    def build(self, att: AttributableVector, c: ArConstraints) -> ArGridSpec:
        grid = default_grid(
            att, c, n_rho=self.n_rho, n_rho_rate=self.n_rho_rate,
            rho_rate_abs_max=self.rho_rate_abs_max,
        )
        if self.rho_min is not None or self.rho_max is not None:
            grid = ArGridSpec(
                rho_min=self.rho_min if self.rho_min is not None else grid.rho_min,
                rho_max=self.rho_max if self.rho_max is not None else grid.rho_max,
                rho_rate_min=grid.rho_rate_min,
                rho_rate_max=grid.rho_rate_max,
                n_rho=grid.n_rho,
                n_rho_rate=grid.n_rho_rate,
            )
        return grid


@dataclass(frozen=True)
class FilterConfig:
    split_mahalanobis: float = 3.0
    split_depth_cap: int = 6
    component_cap: int = 10000
    prune_weight_floor: float = 1e-6
    merge_mahalanobis: float = 0.1


@dataclass(frozen=True)
class Scenario:
    name: str
    initial_site: ObserverSite
    followup_site: ObserverSite
    detection_epoch: Epoch
    cutout_hours: float
    fov_deg: float
    meas_noise_arcsec: float
    p_d: float
    n_scans: int
    scan_dt_s: float
    ar: ArConstraints
    truth_elements: KeplerianElements
    n_targets: int
    n_clutter: int
    cardinality_prior: CardinalityPriorSpec
    seed: int = 0
    n_max_cardinality: int = 50
    ar_grid: ArGridParams = field(default_factory=ArGridParams)
    catalog_sigma_pos_km: float = 1.0
    catalog_sigma_vel_kms: float = 0.001
    rate_interval_s: float = 1.0

    def __post_init__(self):
        if self.n_scans <= 0:
            raise ValueError("n_scans must be positive")
        if self.scan_dt_s <= 0:
            raise ValueError("scan_dt_s must be positive")
        if not 0.0 < self.p_d <= 1.0:
            raise ValueError("p_d must be in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def followup_start(self) -> Epoch:
        return self.detection_epoch.shifted(3600.0 * self.cutout_hours)

    @property
    def fov_half(self) -> float:
        return math.radians(self.fov_deg) / 2.0

    @property
    def noise_matrix(self) -> np.ndarray:
        s = self.meas_noise_arcsec * ARCSEC
        return np.diag([s**2, s**2])

    def scan_epoch(self, k: int) -> Epoch:
        return self.followup_start.shifted(k * self.scan_dt_s)


@dataclass(frozen=True)
class TruthModel:
    """Realized target and clutter states at the follow-up start epoch."""

    target_states: np.ndarray  # (n_targets, 6)
    clutter_states: np.ndarray  # (n_clutter, 6)


@dataclass(frozen=True)
class ForGrid:
    """Fixed action raster over the field of regard, spaced at half a FOV.

    ra values are kept on a continuous (unwrapped) axis so the raster stays
    monotone even when the search set straddles zero right ascension.
    """

    ra0: float
    dec0: float
    step: float
    n_ra: int
    n_dec: int

    @property
    def size(self) -> int:
        return self.n_ra * self.n_dec

    def centers(self) -> np.ndarray:
        """(size, 2) cell centers, row-major with declination as the row axis."""
        ras = self.ra0 + self.step * np.arange(self.n_ra)
        decs = self.dec0 + self.step * np.arange(self.n_dec)
        out = np.empty((self.size, 2))
        out[:, 0] = np.tile(ras, self.n_dec)
        out[:, 1] = np.repeat(decs, self.n_ra)
        return out

    def extent(self) -> tuple[float, float, float, float]:
        return (
            self.ra0,
            self.ra0 + self.step * (self.n_ra - 1),
            self.dec0,
            self.dec0 + self.step * (self.n_dec - 1),
        )

    def actions(self, half_width: float, half_height: float) -> list[Action]:
        return [
            Action(c[0], c[1], FovRect(wrap_angle(c[0]), c[1], half_width, half_height))
            for c in self.centers()
        ]


@dataclass
class InitializedRun:
    state: CphdState
    clutter_model: ClutterModel
    truth: TruthModel
    for_grid: ForGrid
    actions: list[Action]
    attributable: AttributableVector


def attributable_from_state(
    truth: StateVector,
    observer_site: ObserverSite,
    epoch: Epoch,
    noise_arcsec: float,
    rng: np.random.Generator | None,
    dt: float = 60.0,
) -> AttributableVector:
    """Angles plus finite-difference rates from two measurements dt seconds apart.

    With rng=None the attributable is noiseless. Rate noise is taken as
    2*(angle noise)/dt for the differenced pair.
    """
    obs0 = site_state(observer_site, epoch)
    obs1 = site_state(observer_site, epoch.shifted(dt))
    truth1 = StateVector.from_array(propagate_states(truth.as_array()[None], dt)[0])
    z0 = measure_radec(truth, obs0).as_array()
    z1 = measure_radec(truth1, obs1).as_array()
    s = noise_arcsec * ARCSEC
    if rng is not None:
        z0 = z0 + rng.normal(scale=s, size=2)
        z1 = z1 + rng.normal(scale=s, size=2)
    ra_rate = wrap_angle_diff(z1[0] - z0[0]) / dt
    dec_rate = (z1[1] - z0[1]) / dt
    rate_sigma = 2.0 * s / dt
    noise = np.diag([s**2, s**2, rate_sigma**2, rate_sigma**2])
    return AttributableVector(
        ra=wrap_angle(z0[0]), dec=float(np.clip(z0[1], -math.pi / 2, math.pi / 2)),
        ra_rate=float(ra_rate), dec_rate=float(dec_rate),
        epoch=epoch, observer=obs0, noise=noise,
    )


def _sample_admissible_states(
    mix: GaussianMixture,
    att: AttributableVector,
    constraints: ArConstraints,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw constraint-satisfying 6D states from the search-set mixture.

    Samples are accepted when their implied (rho, rho_dot) hypothesis passes
    the admissibility check against the attributable.
    """
    from .admissible import admissible_mask
    from .gmm import sample_mixture

    out = []
    guard = 0
    while len(out) < count:
        guard += 1
        if guard > 200:
            raise RuntimeError("admissible rejection sampling failed to converge")
        batch = sample_mixture(mix, max(4 * count, 32), rng)
        delta = batch[:, :3] - att.observer.position
        ddot = batch[:, 3:] - att.observer.velocity
        rho = np.linalg.norm(delta, axis=1)
        rho_rate = np.einsum("ij,ij->i", delta, ddot) / rho
        ok = admissible_mask(att, rho, rho_rate, constraints)
        # the raw draw must itself be a bound orbit, not just its hypothesis
        r = np.linalg.norm(batch[:, :3], axis=1)
        v2 = np.einsum("ij,ij->i", batch[:, 3:], batch[:, 3:])
        ok &= 2.0 / r - v2 / MU_EARTH > 1e-10
        for idx in np.flatnonzero(ok):
            out.append(batch[idx])
            if len(out) == count:
                break
    return np.array(out).reshape(count, 6)


def init_scenario(
    scenario: Scenario, rng: np.random.Generator
) -> InitializedRun:
    """Build the search set, truth realization, catalog, and action grid.

    The attributable's measurement noise is drawn from a scenario-seeded
    stream so the search set and action grid are identical across
    Monte-Carlo trials; the passed rng drives only the truth and catalog
    sampling.
    """
    truth_sv = kepler_to_cartesian(scenario.truth_elements)
    att = attributable_from_state(
        truth_sv, scenario.initial_site, scenario.detection_epoch,
        scenario.meas_noise_arcsec, rng_stream(scenario.seed, _TAG_ATTRIBUTABLE),
        dt=scenario.rate_interval_s,
    )
    prior = scenario.cardinality_prior.build(scenario.n_max_cardinality)
    grid = scenario.ar_grid.build(att, scenario.ar)
    ar_gmm = build_ar_gmm(att, scenario.ar, grid, total_weight=prior.mean())

    # truth targets and clutter objects drawn from the same search set
    targets0 = _sample_admissible_states(ar_gmm, att, scenario.ar, scenario.n_targets, rng)
    clutter0 = (
        _sample_admissible_states(ar_gmm, att, scenario.ar, scenario.n_clutter, rng)
        if scenario.n_clutter
        else np.zeros((0, 6))
    )

    cutout_s = 3600.0 * scenario.cutout_hours
    state = predict(CphdState(ar_gmm, prior), cutout_s)
    targets = propagate_states(targets0, cutout_s) if len(targets0) else targets0
    clutter = propagate_states(clutter0, cutout_s) if len(clutter0) else clutter0
    truth = TruthModel(target_states=targets, clutter_states=clutter)

    # the filter-side catalog: truth clutter perturbed by its own covariance
    cat_cov = np.diag(
        [scenario.catalog_sigma_pos_km**2] * 3 + [scenario.catalog_sigma_vel_kms**2] * 3
    )
    cat_means = clutter0 + rng.multivariate_normal(
        np.zeros(6), cat_cov, size=len(clutter0)
    ) if len(clutter0) else clutter0
    clutter_model = ClutterModel(
        epoch=scenario.detection_epoch,
        means=cat_means,
        covs=np.broadcast_to(cat_cov, (len(cat_means), 6, 6)).copy(),
        p_d=scenario.p_d,
    ).at_epoch(scenario.followup_start)

    for_grid = build_for_grid(state.intensity, scenario)
    actions = for_grid.actions(scenario.fov_half, scenario.fov_half)
    return InitializedRun(
        state=state, clutter_model=clutter_model, truth=truth,
        for_grid=for_grid, actions=actions, attributable=att,
    )


def build_for_grid(intensity: GaussianMixture, scenario: Scenario) -> ForGrid:
    """Bounding box of the projected search set, gridded at half a FOV."""
    observer = site_state(scenario.followup_site, scenario.followup_start)
    z = measure_radec_many(intensity.means[:, :3], observer.position)
    # unwrap right ascension about its circular mean
    c = math.atan2(np.sin(z[:, 0]).mean(), np.cos(z[:, 0]).mean())
    ra_u = c + wrap_angle_diff(z[:, 0] - c)
    pad = scenario.fov_half
    step = scenario.fov_half
    ra_lo, ra_hi = ra_u.min() - pad, ra_u.max() + pad
    dec_lo, dec_hi = z[:, 1].min() - pad, z[:, 1].max() + pad
    n_ra = int(math.floor((ra_hi - ra_lo) / step)) + 1
    n_dec = int(math.floor((dec_hi - dec_lo) / step)) + 1
    return ForGrid(ra0=ra_lo, dec0=dec_lo, step=step, n_ra=n_ra, n_dec=n_dec)


def projected_intensity_map(
    intensity: GaussianMixture, grid: ForGrid, observer: StateVector
) -> np.ndarray:
    """Projected intensity evaluated at every grid center (row-major raster)."""
    centers = grid.centers()
    if len(intensity) == 0:
        return np.zeros(grid.size)
    from .gmm import project_many

    z, P2, _ = project_many(intensity.means, intensity.covs, observer)
    out = np.zeros(grid.size)
    dets = np.linalg.det(P2)
    invs = np.linalg.inv(P2)
    norms = intensity.weights / (2 * math.pi * np.sqrt(dets))
    for j in range(len(intensity)):
        d = np.column_stack(
            [wrap_angle_diff(centers[:, 0] - z[j, 0]), centers[:, 1] - z[j, 1]]
        )
        maha = np.einsum("ni,ij,nj->n", d, invs[j], d)
        out += norms[j] * np.exp(-0.5 * np.clip(maha, 0.0, 1400.0))
    return out


def truth_measurements(
    truth: TruthModel,
    clutter_states: np.ndarray,
    action: Action,
    p_d: float,
    R: np.ndarray,
    epoch: Epoch,
    observer: StateVector,
    rng: np.random.Generator,
) -> MeasurementSet:
    """One Bernoulli detection trial per object; hits get noisy angle returns.

    The random stream is consumed in a fixed pattern (one uniform and one
    noise pair per object) so the draw sequence is identical regardless of
    which objects fall inside the field of view.
    """
    states = np.vstack([truth.target_states, clutter_states])
    n = states.shape[0]
    u = rng.random(n)
    noise = rng.standard_normal((n, 2)) @ np.linalg.cholesky(R).T
    if n == 0:
        return MeasurementSet(np.zeros((0, 2)), epoch, R)
    z = measure_radec_many(states[:, :3], observer.position)
    inside = action.fov.contains(z[:, 0], z[:, 1])
    hit = inside & (u < p_d)
    zs = z[hit] + noise[hit]
    zs[:, 0] = wrap_angle(zs[:, 0])
    zs[:, 1] = np.clip(zs[:, 1], -math.pi / 2, math.pi / 2)
    return MeasurementSet(zs, epoch, R)


class ScanningSchedule:
    """Baseline policy: cycle the FOV over the grid from high to low intensity.

    The ranking is computed once from the scan-0 prior and then cycled.
    """

    def __init__(self, order: np.ndarray, actions: list[Action]):
        self.order = order
        self.actions = actions

    @staticmethod
    def from_state(
        state: CphdState, grid: ForGrid, actions: list[Action], observer: StateVector
    ) -> "ScanningSchedule":
        density = projected_intensity_map(state.intensity, grid, observer)
        order = np.argsort(-density, kind="stable")
        return ScanningSchedule(order, actions)

    def action_index(self, scan_index: int) -> int:
        return int(self.order[scan_index % len(self.order)])

    def action(self, scan_index: int) -> Action:
        return self.actions[self.action_index(scan_index)]


def scanning_policy(schedule: ScanningSchedule, scan_index: int) -> Action:
    return schedule.action(scan_index)


def divergence_metric(state: CphdState, truth_targets: np.ndarray) -> float:
    """Truth-referenced divergence: count, localization, and cardinality terms.

    Grows without bound as the PMF mass at the true count vanishes; +inf when
    it is exactly zero or when no mixture mass covers any truth state.
    """
    n_star = truth_targets.shape[0]
    if n_star == 0:
        return math.inf
    pmf = state.cardinality.probs
    rho = pmf[n_star] if n_star < pmf.size else 0.0
    mix = state.intensity
    if len(mix) == 0 or mix.total_weight <= 0.0 or rho <= 0.0:
        return math.inf
    w_norm = mix.weights / mix.total_weight
    valid = w_norm > 0
    lw = np.full(len(mix), -np.inf)
    lw[valid] = np.log(w_norm[valid])
    sign, logdet = np.linalg.slogdet(mix.covs)
    inv = np.linalg.inv(mix.covs)
    logs = np.full((n_star, len(mix)), -np.inf)
    for i in range(n_star):
        diff = mix.means - truth_targets[i]
        maha = np.einsum("nj,njk,nk->n", diff, inv, diff)
        logs[i] = lw - 0.5 * (maha + logdet + 6.0 * math.log(2 * math.pi))
    flat = logs.ravel()
    mx = flat.max()
    if not np.isfinite(mx):
        return math.inf
    log_sum = mx + math.log(np.exp(flat - mx).sum())
    return n_star * math.log(n_star) - 2.0 * n_star * log_sum - math.log(rho)


def cardinality_error(state: CphdState, n_star: int) -> float:
    """Expected absolute deviation of the count PMF from the true count."""
    return state.cardinality.abs_error(n_star)


@dataclass
class RunResult:
    policy: str
    action_indices: np.ndarray
    n_measurements: np.ndarray
    divergence: np.ndarray
    expected_card: np.ndarray
    map_card: np.ndarray
    card_error: np.ndarray
    n_components: np.ndarray
    wall_time: np.ndarray
    final_state: CphdState
    final_truth_targets: np.ndarray
    final_observer: StateVector
    reward_maps: list[np.ndarray] | None = None
    cardinality_pmfs: list[np.ndarray] | None = None
    intensity_maps: list[np.ndarray] | None = None

    @property
    def n_scans(self) -> int:
        return self.divergence.size


def run_closed_loop(
    scenario: Scenario,
    policy: str,
    master_seed: int,
    trial_index: int = 0,
    fcfg: FilterConfig | None = None,
    rcfg: RewardConfig | None = None,
    collect: bool = False,
) -> RunResult:
    """Execute the full scan loop for one truth realization and one policy."""
    if policy not in (POLICY_INFO, POLICY_SCAN):
        raise ValueError(f"unknown policy {policy!r}")
    fcfg = fcfg or FilterConfig()
    rcfg = rcfg or RewardConfig()
    init = init_scenario(scenario, rng_stream(master_seed, trial_index, _TAG_INIT))
    state = init.state
    catalog = init.clutter_model
    targets = init.truth.target_states
    clutter = init.truth.clutter_states
    actions = init.actions
    R = scenario.noise_matrix
    n_star = scenario.n_targets

    observer0 = site_state(scenario.followup_site, scenario.followup_start)
    schedule = (
        ScanningSchedule.from_state(state, init.for_grid, actions, observer0)
        if policy == POLICY_SCAN
        else None
    )
    policy_seed = int(
        np.random.SeedSequence([master_seed, trial_index, _TAG_POLICY]).generate_state(1)[0]
    )
    run_rcfg = dataclasses.replace(rcfg, seed=policy_seed)

    n = scenario.n_scans
    out = RunResult(
        policy=policy,
        action_indices=np.zeros(n, dtype=int),
        n_measurements=np.zeros(n, dtype=int),
        divergence=np.zeros(n),
        expected_card=np.zeros(n),
        map_card=np.zeros(n, dtype=int),
        card_error=np.zeros(n),
        n_components=np.zeros(n, dtype=int),
        wall_time=np.zeros(n),
        final_state=state,
        final_truth_targets=targets,
        final_observer=observer0,
        reward_maps=[] if collect else None,
        cardinality_pmfs=[] if collect else None,
        intensity_maps=[] if collect else None,
    )

    for k in range(n):
        t0 = time.perf_counter()
        epoch_k = scenario.scan_epoch(k)
        observer_k = site_state(scenario.followup_site, epoch_k)
        catalog = catalog.at_epoch(epoch_k)

        if policy == POLICY_INFO:
            det0 = DetectionModel(scenario.p_d, actions[0].fov, observer_k)
            a_idx, action, rewards = select_action(
                actions, state, catalog, det0, run_rcfg, epoch_k, R, scan_index=k
            )
            if collect:
                out.reward_maps.append(rewards)
        else:
            a_idx = schedule.action_index(k)
            action = actions[a_idx]
            if collect:
                out.reward_maps.append(np.zeros(0))

        Z = truth_measurements(
            TruthModel(targets, np.zeros((0, 6))), clutter, action,
            scenario.p_d, R, epoch_k, observer_k,
            rng_stream(master_seed, trial_index, _TAG_MEAS, k),
        )

        split = recursive_fov_split(
            state.intensity, action.fov, observer_k,
            d_m=fcfg.split_mahalanobis, depth_cap=fcfg.split_depth_cap,
            component_cap=fcfg.component_cap,
        )
        det = DetectionModel(scenario.p_d, action.fov, observer_k)
        state = update(CphdState(split, state.cardinality), Z, det, catalog)
        pruned = prune_and_merge(
            state.intensity, weight_floor=fcfg.prune_weight_floor,
            merge_mahalanobis=fcfg.merge_mahalanobis, cap=fcfg.component_cap,
        )
        state = CphdState(pruned, state.cardinality)

        out.action_indices[k] = a_idx
        out.n_measurements[k] = len(Z)
        out.divergence[k] = divergence_metric(state, targets)
        out.expected_card[k] = state.cardinality.mean()
        out.map_card[k] = state.cardinality.map_estimate()
        out.card_error[k] = cardinality_error(state, n_star)
        out.n_components[k] = len(state.intensity)
        out.wall_time[k] = time.perf_counter() - t0
        if collect:
            out.cardinality_pmfs.append(state.cardinality.probs.copy())
            out.intensity_maps.append(
                projected_intensity_map(state.intensity, init.for_grid, observer_k)
            )

        if k + 1 < n:
            state = predict(state, scenario.scan_dt_s)
            targets = propagate_states(targets, scenario.scan_dt_s) if len(targets) else targets
            clutter = propagate_states(clutter, scenario.scan_dt_s) if len(clutter) else clutter

    out.final_state = state
    out.final_truth_targets = targets
    out.final_observer = site_state(scenario.followup_site, scenario.scan_epoch(n - 1))
    return out


@dataclass
class McAggregate:
    """Per-scan quartiles of divergence and cardinality error per policy."""

    policies: list[str]
    divergence_q: dict[str, np.ndarray]  # (n_scans, 3): 25/50/75
    card_error_q: dict[str, np.ndarray]
    n_trials: int


def monte_carlo(
    scenario: Scenario,
    policies: list[str],
    n_trials: int,
    master_seed: int,
    fcfg: FilterConfig | None = None,
    rcfg: RewardConfig | None = None,
    keep_runs: bool = False,
) -> tuple[McAggregate, dict[str, list[RunResult]]]:
    """Run both policies on shared truth realizations and aggregate quartiles."""
    if n_trials < 1:
        raise ValueError("need at least one trial")
    runs: dict[str, list[RunResult]] = {p: [] for p in policies}
    for trial in range(n_trials):
        for p in policies:
            result = run_closed_loop(
                scenario, p, master_seed, trial_index=trial, fcfg=fcfg, rcfg=rcfg
            )
            runs[p].append(result)
    div_q = {}
    card_q = {}
    for p in policies:
        div = np.stack([r.divergence for r in runs[p]])
        card = np.stack([r.card_error for r in runs[p]])
        div_q[p] = np.percentile(div, [25, 50, 75], axis=0).T
        card_q[p] = np.percentile(card, [25, 50, 75], axis=0).T
    agg = McAggregate(
        policies=list(policies), divergence_q=div_q, card_error_q=card_q,
        n_trials=n_trials,
    )
    return agg, runs if keep_runs else {p: [] for p in policies}
