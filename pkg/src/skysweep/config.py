"""YAML configuration parsing with strict schema validation.

Every key is checked against the documented tree; unknown keys are rejected
with their dotted path, and values are range-checked with the same paths so
configuration mistakes point at the offending line. Units live in the key
names (deg, km, arcsec, hours, seconds).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import yaml

from .admissible import ArConstraints
from .astro import Epoch, KeplerianElements, ObserverSite
from .reward import RewardConfig
from .sim import ArGridParams, CardinalityPriorSpec, FilterConfig, Scenario


class ConfigError(ValueError):
    """Configuration rejected; the message carries the dotted key path."""


@dataclass(frozen=True)
class ParsedConfig:
    scenario: Scenario
    reward: RewardConfig
    filter: FilterConfig
    mc_trials: int


def _require_mapping(node, path: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return node


def _check_known(node: dict, known: set[str], path: str) -> None:
    unknown = set(node) - known
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path}.{key}: unknown key")


def _get(node: dict, key: str, path: str, kind, required=True, default=None,
         lo=None, hi=None):
    if key not in node:
        if required:
            raise ConfigError(f"{path}.{key}: missing required key")
        return default
    val = node[key]
    if kind is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ConfigError(f"{path}.{key}: expected a number")
        val = float(val)
    elif kind is int:
        if not isinstance(val, int) or isinstance(val, bool):
            raise ConfigError(f"{path}.{key}: expected an integer")
    elif kind is str:
        if not isinstance(val, str):
            raise ConfigError(f"{path}.{key}: expected a string")
    if lo is not None and val < lo:
        raise ConfigError(f"{path}.{key}: must be >= {lo}")
    if hi is not None and val > hi:
        raise ConfigError(f"{path}.{key}: must be <= {hi}")
    return val


def _parse_site(node, path: str) -> ObserverSite:
    node = _require_mapping(node, path)
    _check_known(node, {"latitude_deg", "longitude_deg", "altitude_km"}, path)
    return ObserverSite(
        latitude=_get(node, "latitude_deg", path, float, lo=-90.0, hi=90.0),
        longitude=_get(node, "longitude_deg", path, float, lo=-360.0, hi=360.0),
        altitude=_get(node, "altitude_km", path, float, required=False, default=0.0, lo=0.0),
    )


def _parse_elements(node, path: str) -> KeplerianElements:
    node = _require_mapping(node, path)
    _check_known(
        node, {"a_km", "e", "i_deg", "raan_deg", "argp_deg", "true_anomaly_deg"}, path
    )
    return KeplerianElements(
        a=_get(node, "a_km", path, float, lo=1.0),
        e=_get(node, "e", path, float, lo=0.0, hi=0.999999),
        i=math.radians(_get(node, "i_deg", path, float, lo=0.0, hi=180.0)),
        raan=math.radians(_get(node, "raan_deg", path, float)),
        argp=math.radians(_get(node, "argp_deg", path, float)),
        true_anomaly=math.radians(_get(node, "true_anomaly_deg", path, float)),
    )


def _parse_ar(node, path: str) -> tuple[ArConstraints, ArGridParams]:
    node = _require_mapping(node, path)
    _check_known(
        node,
        {"e_min", "e_max", "a_min_km", "a_max_km", "r_periapsis_min_km", "grid"},
        path,
    )
    constraints = ArConstraints(
        e_min=_get(node, "e_min", path, float, lo=0.0, hi=0.999999),
        e_max=_get(node, "e_max", path, float, lo=0.0, hi=0.999999),
        a_min=_get(node, "a_min_km", path, float, lo=1.0),
        a_max=_get(node, "a_max_km", path, float, lo=1.0),
        r_periapsis_min=_get(node, "r_periapsis_min_km", path, float, lo=6378.138),
    )
    gpath = f"{path}.grid"
    gnode = node.get("grid", {})
    if gnode:
        gnode = _require_mapping(gnode, gpath)
        _check_known(
            gnode,
            {"n_rho", "n_rho_rate", "rho_rate_abs_max_kms", "rho_min_km", "rho_max_km"},
            gpath,
        )
    grid = ArGridParams(
        n_rho=_get(gnode, "n_rho", gpath, int, required=False, default=200, lo=2),
        n_rho_rate=_get(gnode, "n_rho_rate", gpath, int, required=False, default=100, lo=2),
        rho_rate_abs_max=_get(
            gnode, "rho_rate_abs_max_kms", gpath, float, required=False, default=10.0, lo=0.1
        ),
        rho_min=_get(gnode, "rho_min_km", gpath, float, required=False, default=None, lo=1.0),
        rho_max=_get(gnode, "rho_max_km", gpath, float, required=False, default=None, lo=1.0),
    )
    return constraints, grid


def _parse_cardinality(node, path: str) -> tuple[CardinalityPriorSpec, int]:
    node = _require_mapping(node, path)
    _check_known(node, {"prior", "poisson_mean", "uniform_max", "n_max"}, path)
    kind = _get(node, "prior", path, str)
    if kind not in ("poisson", "uniform"):
        raise ConfigError(f"{path}.prior: expected 'poisson' or 'uniform'")
    n_max = _get(node, "n_max", path, int, required=False, default=50, lo=1)
    if kind == "poisson":
        spec = CardinalityPriorSpec(
            kind="poisson", mean=_get(node, "poisson_mean", path, float, lo=0.0)
        )
    else:
        spec = CardinalityPriorSpec(
            kind="uniform", n_hi=_get(node, "uniform_max", path, int, lo=0, hi=n_max)
        )
    return spec, n_max


def parse_config(text: str) -> ParsedConfig:
    """Parse and validate a scenario configuration document."""
    try:
        root = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    root = _require_mapping(root, "<root>")
    _check_known(root, {"scenario", "reward", "filter", "mc"}, "<root>")
    if "scenario" not in root:
        raise ConfigError("<root>.scenario: missing required key")

    s = _require_mapping(root["scenario"], "scenario")
    _check_known(
        s,
        {"name", "seed", "detection", "followup", "admissible_region", "truth", "cardinality"},
        "scenario",
    )
    det = _require_mapping(_get(s, "detection", "scenario", dict), "scenario.detection")
    _check_known(det, {"epoch_s", "site", "rate_interval_s"}, "scenario.detection")
    fol = _require_mapping(_get(s, "followup", "scenario", dict), "scenario.followup")
    _check_known(
        fol,
        {"site", "cutout_hours", "fov_deg", "measurement_noise_arcsec", "p_d",
         "n_scans", "scan_dt_s"},
        "scenario.followup",
    )
    truth = _require_mapping(_get(s, "truth", "scenario", dict), "scenario.truth")
    _check_known(
        truth,
        {"elements", "n_targets", "n_clutter", "catalog_sigma_pos_km",
         "catalog_sigma_vel_kms"},
        "scenario.truth",
    )
    constraints, grid = _parse_ar(
        _get(s, "admissible_region", "scenario", dict), "scenario.admissible_region"
    )
    prior, n_max = _parse_cardinality(
        _get(s, "cardinality", "scenario", dict), "scenario.cardinality"
    )

    scenario = Scenario(
        name=_get(s, "name", "scenario", str),
        seed=_get(s, "seed", "scenario", int, lo=0),
        initial_site=_parse_site(_get(det, "site", "scenario.detection", dict), "scenario.detection.site"),
        followup_site=_parse_site(_get(fol, "site", "scenario.followup", dict), "scenario.followup.site"),
        detection_epoch=Epoch(_get(det, "epoch_s", "scenario.detection", float, required=False, default=0.0)),
        rate_interval_s=_get(det, "rate_interval_s", "scenario.detection", float, required=False, default=1.0, lo=1e-3),
        cutout_hours=_get(fol, "cutout_hours", "scenario.followup", float, lo=0.0),
        fov_deg=_get(fol, "fov_deg", "scenario.followup", float, lo=0.01, hi=90.0),
        meas_noise_arcsec=_get(fol, "measurement_noise_arcsec", "scenario.followup", float, lo=1e-6),
        p_d=_get(fol, "p_d", "scenario.followup", float, lo=1e-9, hi=1.0),
        n_scans=_get(fol, "n_scans", "scenario.followup", int, lo=1),
        scan_dt_s=_get(fol, "scan_dt_s", "scenario.followup", float, lo=1e-3),
        ar=constraints,
        ar_grid=grid,
        truth_elements=_parse_elements(_get(truth, "elements", "scenario.truth", dict), "scenario.truth.elements"),
        n_targets=_get(truth, "n_targets", "scenario.truth", int, lo=0),
        n_clutter=_get(truth, "n_clutter", "scenario.truth", int, lo=0),
        catalog_sigma_pos_km=_get(truth, "catalog_sigma_pos_km", "scenario.truth", float, required=False, default=1.0, lo=0.0),
        catalog_sigma_vel_kms=_get(truth, "catalog_sigma_vel_kms", "scenario.truth", float, required=False, default=0.001, lo=0.0),
        cardinality_prior=prior,
        n_max_cardinality=n_max,
    )

    rnode = root.get("reward", {})
    if rnode:
        rnode = _require_mapping(rnode, "reward")
        _check_known(rnode, {"alpha", "ell", "n_samp", "n_trials"}, "reward")
    reward = RewardConfig(
        alpha=_get(rnode, "alpha", "reward", float, required=False, default=0.5, lo=1e-6),
        ell=_get(rnode, "ell", "reward", int, required=False, default=10, lo=2),
        n_samp=_get(rnode, "n_samp", "reward", int, required=False, default=5000, lo=10),
        n_trials=_get(rnode, "n_trials", "reward", int, required=False, default=8, lo=1),
        seed=scenario.seed,
    )

    fnode = root.get("filter", {})
    if fnode:
        fnode = _require_mapping(fnode, "filter")
        _check_known(
            fnode,
            {"split_mahalanobis", "split_depth_cap", "component_cap",
             "prune_weight_floor", "merge_mahalanobis"},
            "filter",
        )
    fcfg = FilterConfig(
        split_mahalanobis=_get(fnode, "split_mahalanobis", "filter", float, required=False, default=3.0, lo=1e-6),
        split_depth_cap=_get(fnode, "split_depth_cap", "filter", int, required=False, default=6, lo=0),
        component_cap=_get(fnode, "component_cap", "filter", int, required=False, default=10000, lo=1),
        prune_weight_floor=_get(fnode, "prune_weight_floor", "filter", float, required=False, default=1e-6, lo=0.0),
        merge_mahalanobis=_get(fnode, "merge_mahalanobis", "filter", float, required=False, default=0.1, lo=0.0),
    )

    mnode = root.get("mc", {})
    if mnode:
        mnode = _require_mapping(mnode, "mc")
        _check_known(mnode, {"n_trials"}, "mc")
    mc_trials = _get(mnode, "n_trials", "mc", int, required=False, default=20, lo=1)

    return ParsedConfig(scenario=scenario, reward=reward, filter=fcfg, mc_trials=mc_trials)


def load_config(path: str) -> ParsedConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
