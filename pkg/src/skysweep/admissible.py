"""Range/range-rate search-set construction from a single optical attributable.

A grid of (rho, rho_dot) hypotheses is filtered by orbit constraints
(semimajor axis, eccentricity, periapsis radius) and the surviving points are
turned into a 6D Cartesian Gaussian mixture via the unscented transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .astro import MU_EARTH, R_EARTH, Epoch, StateVector
from .gmm import GaussianMixture, unscented_transform_batch


class EmptyAdmissibleRegion(ValueError):
    """No grid point satisfies every constraint."""


@dataclass(frozen=True)
class AttributableVector:
    """Angles-and-rates track summary: the seed of the search set.

    noise is the 4x4 covariance of (ra, dec, ra_rate, dec_rate).
    """

    ra: float
    dec: float
    ra_rate: float
    dec_rate: float
    epoch: Epoch
    observer: StateVector
    noise: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "noise", np.asarray(self.noise, dtype=float))
        if self.noise.shape != (4, 4):
            raise ValueError("noise must be 4x4")
        if not np.allclose(self.noise, self.noise.T, atol=1e-15):
            raise ValueError("noise must be symmetric")
        if np.any(np.linalg.eigvalsh(self.noise) <= 0.0):
            raise ValueError("noise must be positive definite")
        if not -math.pi / 2 <= self.dec <= math.pi / 2:
            raise ValueError("dec out of range")


@dataclass(frozen=True)
class ArConstraints:
    e_min: float
    e_max: float
    a_min: float
    a_max: float
    r_periapsis_min: float

    def __post_init__(self):
        # Reversed intervals are tolerated (they reject every point); values
        # must still be physically sensible.
        if not (0.0 <= self.e_min < 1.0 and 0.0 <= self.e_max < 1.0):
            raise ValueError("eccentricity bounds must lie in [0, 1)")
        if self.a_min <= 0.0 or self.a_max <= 0.0:
            raise ValueError("semimajor-axis bounds must be positive")
        if self.r_periapsis_min <= R_EARTH:
            raise ValueError("periapsis bound must exceed the Earth radius")


@dataclass(frozen=True)
class ArGridSpec:
    rho_min: float
    rho_max: float
    rho_rate_min: float
    rho_rate_max: float
    n_rho: int
    n_rho_rate: int

    def __post_init__(self):
        if self.n_rho <= 0 or self.n_rho_rate <= 0:
            raise ValueError("grid counts must be positive")
        if not (self.rho_min < self.rho_max and self.rho_rate_min < self.rho_rate_max):
            raise ValueError("grid bounds must be ordered")
        if self.rho_min <= 0.0:
            raise ValueError("rho_min must be positive")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.linspace(self.rho_min, self.rho_max, self.n_rho),
            np.linspace(self.rho_rate_min, self.rho_rate_max, self.n_rho_rate),
        )

    def spacing(self) -> tuple[float, float]:
        d_rho = (self.rho_max - self.rho_min) / max(self.n_rho - 1, 1)
        d_rate = (self.rho_rate_max - self.rho_rate_min) / max(self.n_rho_rate - 1, 1)
        return d_rho, d_rate


@dataclass(frozen=True)
class ArPointSet:
    """Admissible (rho, rho_dot) pairs, row-major over the (rho, rho_dot) grid."""

    points: np.ndarray  # (n, 2) km, km/s
    d_rho: float
    d_rho_rate: float

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def empty(self) -> bool:
        return len(self) == 0


def los_frame(ra, dec):
    """Line-of-sight unit vector and its angular partials.

    Returns (u, du_dra, du_ddec) with shapes (..., 3).
    """
    ra = np.asarray(ra, dtype=float)
    dec = np.asarray(dec, dtype=float)
    cr, sr = np.cos(ra), np.sin(ra)
    cd, sd = np.cos(dec), np.sin(dec)
    u = np.stack([cd * cr, cd * sr, sd], axis=-1)
    du_dra = np.stack([-cd * sr, cd * cr, np.zeros_like(cr)], axis=-1)
    du_ddec = np.stack([-sd * cr, -sd * sr, cd], axis=-1)
    return u, du_dra, du_ddec


def polar_to_cartesian(polar: np.ndarray, observer: StateVector) -> np.ndarray:
    """Map (ra, dec, ra_rate, dec_rate, rho, rho_dot) rows to Cartesian states.

    r = q + rho*u and v = q_dot + rho_dot*u + rho*u_dot, with u the line of
    sight and u_dot from the angle rates.
    """
    polar = np.atleast_2d(np.asarray(polar, dtype=float))
    ra, dec = polar[:, 0], polar[:, 1]
    ra_rate, dec_rate = polar[:, 2], polar[:, 3]
    rho, rho_rate = polar[:, 4], polar[:, 5]
    u, du_dra, du_ddec = los_frame(ra, dec)
    u_dot = du_dra * ra_rate[:, None] + du_ddec * dec_rate[:, None]
    out = np.empty((polar.shape[0], 6))
    out[:, :3] = observer.position + rho[:, None] * u
    out[:, 3:] = observer.velocity + rho_rate[:, None] * u + rho[:, None] * u_dot
    return out


def range_state(att: AttributableVector, rho: float, rho_rate: float) -> StateVector:
    """Cartesian state implied by the attributable plus a (rho, rho_dot) hypothesis."""
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    row = np.array([[att.ra, att.dec, att.ra_rate, att.dec_rate, rho, rho_rate]])
    return StateVector.from_array(polar_to_cartesian(row, att.observer)[0])


def admissible_mask(
    att: AttributableVector,
    rho: np.ndarray,
    rho_rate: np.ndarray,
    c: ArConstraints,
    mu: float = MU_EARTH,
) -> np.ndarray:
    """Vectorized constraint check over (rho, rho_dot) hypothesis arrays."""
    rho = np.asarray(rho, dtype=float)
    rho_rate = np.asarray(rho_rate, dtype=float)
    polar = np.column_stack(
        [
            np.full_like(rho, att.ra),
            np.full_like(rho, att.dec),
            np.full_like(rho, att.ra_rate),
            np.full_like(rho, att.dec_rate),
            rho,
            rho_rate,
        ]
    )
    states = polar_to_cartesian(polar, att.observer)
    return _constraints_ok(states, c, mu)


def _constraints_ok(states: np.ndarray, c: ArConstraints, mu: float = MU_EARTH) -> np.ndarray:
    r_vec = states[:, :3]
    v_vec = states[:, 3:]
    r = np.linalg.norm(r_vec, axis=1)
    v2 = np.einsum("ij,ij->i", v_vec, v_vec)
    alpha = 2.0 / r - v2 / mu  # 1/a; elliptical iff positive
    ok = alpha > 0.0
    a = np.where(ok, 1.0 / np.where(ok, alpha, 1.0), np.inf)
    rv = np.einsum("ij,ij->i", r_vec, v_vec)
    e_vec = ((v2 - mu / r)[:, None] * r_vec - rv[:, None] * v_vec) / mu
    e = np.linalg.norm(e_vec, axis=1)
    ok &= (a >= c.a_min) & (a <= c.a_max)
    ok &= (e >= c.e_min) & (e <= c.e_max)
    ok &= a * (1.0 - e) >= c.r_periapsis_min
    return ok


def admissible(
    att: AttributableVector, rho: float, rho_rate: float, c: ArConstraints
) -> bool:
    """True iff the implied orbit satisfies every constraint."""
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    return bool(admissible_mask(att, np.array([rho]), np.array([rho_rate]), c)[0])


def ar_point_set(att: AttributableVector, c: ArConstraints, grid: ArGridSpec) -> ArPointSet:
    """Admissible grid points, row-major (rho outer, rho_dot inner)."""
    rho_ax, rate_ax = grid.axes()
    RR, DD = np.meshgrid(rho_ax, rate_ax, indexing="ij")
    rho = RR.ravel()
    rate = DD.ravel()
    mask = admissible_mask(att, rho, rate, c)
    d_rho, d_rate = grid.spacing()
    return ArPointSet(
        points=np.column_stack([rho[mask], rate[mask]]), d_rho=d_rho, d_rho_rate=d_rate
    )


def build_ar_gmm(
    att: AttributableVector,
    c: ArConstraints,
    grid: ArGridSpec,
    total_weight: float = 1.0,
) -> GaussianMixture:
    """Homoscedastic polar GMM over the admissible set, pushed to 6D Cartesian.

    One component per admissible grid point; the shared polar covariance is
    the attributable noise block plus half-grid-spacing sigmas on the gridded
    dimensions. Weights are uniform and sum to total_weight.
    """
    pts = ar_point_set(att, c, grid)
    if pts.empty:
        raise EmptyAdmissibleRegion("no admissible (rho, rho_dot) grid point")
    n = len(pts)
    means_polar = np.column_stack(
        [
            np.full(n, att.ra),
            np.full(n, att.dec),
            np.full(n, att.ra_rate),
            np.full(n, att.dec_rate),
            pts.points[:, 0],
            pts.points[:, 1],
        ]
    )
    cov_polar = np.zeros((6, 6))
    cov_polar[:4, :4] = att.noise
    cov_polar[4, 4] = (pts.d_rho / 2.0) ** 2
    cov_polar[5, 5] = (pts.d_rho_rate / 2.0) ** 2

    means, covs = unscented_transform_batch(
        means_polar,
        np.broadcast_to(cov_polar, (n, 6, 6)),
        lambda p: polar_to_cartesian(p, att.observer),
    )
    weights = np.full(n, total_weight / n)
    return GaussianMixture(weights, means, covs)


def default_grid(
    att: AttributableVector,
    c: ArConstraints,
    n_rho: int = 200,
    n_rho_rate: int = 100,
    rho_rate_abs_max: float = 10.0,
) -> ArGridSpec:
    """Grid bounds wide enough to cover every orbit the constraints allow."""
    obs_r = float(np.linalg.norm(att.observer.position))
    rho_min = max(500.0, c.r_periapsis_min - obs_r)
    return ArGridSpec(
        rho_min=rho_min,
        rho_max=2.0 * c.a_max,
        rho_rate_min=-rho_rate_abs_max,
        rho_rate_max=rho_rate_abs_max,
        n_rho=n_rho,
        n_rho_rate=n_rho_rate,
    )
