"""Two-body orbital mechanics, observer kinematics, and the angles-only measurement model.

Conventions: km, km/s, radians, seconds. The inertial frame is Earth-centered
with the x-axis through longitude 0 at t = 0; the Earth is a rigid sphere
rotating uniformly about +z. All functions are pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MU_EARTH = 398600.4418  # km^3/s^2
R_EARTH = 6378.137  # km
OMEGA_EARTH = 7.2921159e-5  # rad/s

TWO_PI = 2.0 * math.pi

# Below this, eccentricity / inclination are treated as exactly zero when
# assigning the conventional (otherwise undefined) orbital angles.
_DEGENERATE_ANGLE_TOL = 1e-10

_KEPLER_TOL = 1e-12  # rad
_KEPLER_MAX_ITER = 50


class NonEllipticalOrbit(ValueError):
    """State or elements describe a parabolic/hyperbolic (or radial) trajectory."""


class KeplerConvergenceError(RuntimeError):
    """Kepler's equation failed to converge within the iteration cap."""


class DegenerateOrbit(ValueError):
    """Angular momentum too small to define an orbit plane."""


class DegenerateGeometry(ValueError):
    """Observer and target coincide; line of sight undefined."""


@dataclass(frozen=True)
class Epoch:
    """Seconds past the scenario reference epoch."""

    t: float

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("epoch must be finite")

    def shifted(self, dt: float) -> "Epoch":
        return Epoch(self.t + dt)

    def __sub__(self, other: "Epoch") -> float:
        return self.t - other.t


@dataclass(frozen=True)
class StateVector:
    """Inertial Cartesian state: position (km), velocity (km/s)."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        if self.position.shape != (3,) or self.velocity.shape != (3,):
            raise ValueError("position and velocity must be 3-vectors")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))):
            raise ValueError("state components must be finite")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @staticmethod
    def from_array(x: np.ndarray) -> "StateVector":
        x = np.asarray(x, dtype=float)
        return StateVector(x[:3], x[3:6])


@dataclass(frozen=True)
class KeplerianElements:
    """Classical elements: a (km), e, and angles in radians, wrapped to [0, 2pi)."""

    a: float
    e: float
    i: float
    raan: float
    argp: float
    true_anomaly: float


@dataclass(frozen=True)
class ObserverSite:
    """Ground site: geodetic latitude (deg), longitude (deg), altitude (km)."""

    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        if abs(self.latitude) > 90.0:
            raise ValueError("latitude must satisfy |lat| <= 90 deg")
        lon = ((self.longitude + 180.0) % 360.0) - 180.0
        if lon == -180.0:
            lon = 180.0
        object.__setattr__(self, "longitude", lon)


@dataclass(frozen=True)
class AngleMeasurement:
    """Topocentric right ascension and declination, radians."""

    ra: float
    dec: float

    def __post_init__(self):
        if not -math.pi / 2 <= self.dec <= math.pi / 2:
            raise ValueError("dec out of range")
        object.__setattr__(self, "ra", wrap_angle(self.ra))

    def as_array(self) -> np.ndarray:
        return np.array([self.ra, self.dec])


def wrap_angle(x):
    """Wrap angle(s) to [0, 2pi)."""
    return np.mod(x, TWO_PI)


def wrap_angle_diff(x):
    """Wrap angle difference(s) to [-pi, pi)."""
    return np.mod(np.asarray(x) + math.pi, TWO_PI) - math.pi


def kepler_to_cartesian(el: KeplerianElements, mu: float = MU_EARTH) -> StateVector:
    """Classical elements to inertial Cartesian state.

    Rejects non-elliptical inputs (e >= 1 or a <= 0).
    """
    if not 0.0 <= el.e < 1.0:
        raise NonEllipticalOrbit(f"eccentricity {el.e} outside [0, 1)")
    if el.a <= 0.0:
        raise NonEllipticalOrbit(f"semimajor axis {el.a} must be positive")
    p = el.a * (1.0 - el.e**2)
    nu = el.true_anomaly
    r = p / (1.0 + el.e * math.cos(nu))
    r_pf = np.array([r * math.cos(nu), r * math.sin(nu), 0.0])
    vs = math.sqrt(mu / p)
    v_pf = np.array([-vs * math.sin(nu), vs * (el.e + math.cos(nu)), 0.0])
    rot = _perifocal_to_inertial(el.i, el.raan, el.argp)
    return StateVector(rot @ r_pf, rot @ v_pf)


def _perifocal_to_inertial(i: float, raan: float, argp: float) -> np.ndarray:
    co, so = math.cos(raan), math.sin(raan)
    ci, si = math.cos(i), math.sin(i)
    cw, sw = math.cos(argp), math.sin(argp)
    return np.array(
        [
            [co * cw - so * sw * ci, -co * sw - so * cw * ci, so * si],
            [so * cw + co * sw * ci, -so * sw + co * cw * ci, -co * si],
            [sw * si, cw * si, ci],
        ]
    )


def cartesian_to_kepler(sv: StateVector, mu: float = MU_EARTH) -> KeplerianElements:
    """Inertial Cartesian state to classical elements.

    Degenerate angles (e ~ 0 and/or i ~ 0) are conventionally zeroed; the
    remaining anomaly is measured from the surviving reference direction.
    """
    r_vec, v_vec = sv.position, sv.velocity
    r = float(np.linalg.norm(r_vec))
    if r <= 0.0:
        raise DegenerateGeometry("zero position norm")
    v2 = float(v_vec @ v_vec)
    h_vec = np.cross(r_vec, v_vec)
    h = float(np.linalg.norm(h_vec))
    if h < 1e-8 * r * max(math.sqrt(v2), 1e-12):
        raise DegenerateOrbit("near-rectilinear trajectory: |r x v| ~ 0")
    alpha = 2.0 / r - v2 / mu  # 1/a
    if alpha <= 1e-12:
        raise NonEllipticalOrbit("non-negative specific energy")
    a = 1.0 / alpha
    e_vec = ((v2 - mu / r) * r_vec - float(r_vec @ v_vec) * v_vec) / mu
    e = float(np.linalg.norm(e_vec))
    if e >= 1.0:
        raise NonEllipticalOrbit(f"eccentricity {e} >= 1")

    i = math.acos(min(1.0, max(-1.0, h_vec[2] / h)))
    n_vec = np.array([-h_vec[1], h_vec[0], 0.0])  # z-hat cross h
    n = float(np.linalg.norm(n_vec))

    circular = e < _DEGENERATE_ANGLE_TOL
    equatorial = i < _DEGENERATE_ANGLE_TOL or n < _DEGENERATE_ANGLE_TOL * h

    if equatorial:
        raan = 0.0
        node = np.array([1.0, 0.0, 0.0])
    else:
        raan = wrap_angle(math.atan2(n_vec[1], n_vec[0]))
        node = n_vec / n

    if circular:
        argp = 0.0
        e = 0.0
        ref = node
    else:
        ref = e_vec / e
        cos_w = min(1.0, max(-1.0, float(node @ ref)))
        argp = math.acos(cos_w)
        # sign from the component of e out of the node/orbit plane
        if float(np.cross(node, ref) @ h_vec) < 0.0:
            argp = TWO_PI - argp
        argp = wrap_angle(argp)

    cos_nu = min(1.0, max(-1.0, float(ref @ r_vec) / r))
    nu = math.acos(cos_nu)
    if float(np.cross(ref, r_vec / r) @ h_vec) < 0.0:
        nu = TWO_PI - nu
    nu = wrap_angle(nu)

    if i < _DEGENERATE_ANGLE_TOL:
        i = 0.0
    return KeplerianElements(a=a, e=e, i=i, raan=raan, argp=argp, true_anomaly=nu)


def propagate_states(states: np.ndarray, dt, mu: float = MU_EARTH) -> np.ndarray:
    """Two-body propagation of an (n, 6) array of states by dt seconds.

    dt may be a scalar or an (n,) array. Uses Lagrange f/g coefficients in the
    eccentric-anomaly difference; Kepler's equation is solved by Newton
    iteration with a bisection fallback.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    rv = states[:, :3]
    vv = states[:, 3:]
    r0 = np.linalg.norm(rv, axis=1)
    v2 = np.einsum("ij,ij->i", vv, vv)
    alpha = 2.0 / r0 - v2 / mu
    if np.any(alpha <= 1e-12):
        raise NonEllipticalOrbit("non-elliptical state in propagation batch")
    a = 1.0 / alpha
    n = np.sqrt(mu / a**3)
    sigma0 = np.einsum("ij,ij->i", rv, vv) / math.sqrt(mu)
    M = n * np.asarray(dt, dtype=float)
    # Reduce by whole revolutions; the 2*pi*k part cancels in f and g.
    Mr = np.mod(M, TWO_PI)

    c1 = 1.0 - r0 / a  # e*cos(E0)
    c2 = sigma0 / np.sqrt(a)  # e*sin(E0)

    dE = Mr.copy()
    converged = np.zeros(dE.shape, dtype=bool)
    for _ in range(_KEPLER_MAX_ITER):
        f = dE - c1 * np.sin(dE) + c2 * (1.0 - np.cos(dE)) - Mr
        fp = 1.0 - c1 * np.cos(dE) + c2 * np.sin(dE)
        step = f / fp
        dE = np.where(converged, dE, dE - step)
        converged |= np.abs(step) < _KEPLER_TOL
        if np.all(converged):
            break
    if not np.all(converged):
        dE = _kepler_bisect(Mr, c1, c2, dE, converged)

    sin_dE = np.sin(dE)
    cos_dE = np.cos(dE)
    r = a + (r0 - a) * cos_dE + sigma0 * np.sqrt(a) * sin_dE
    f = 1.0 - (a / r0) * (1.0 - cos_dE)
    g = (Mr - dE + sin_dE) / n
    fdot = -np.sqrt(mu * a) * sin_dE / (r * r0)
    gdot = 1.0 - (a / r) * (1.0 - cos_dE)
    out = np.empty_like(states)
    out[:, :3] = f[:, None] * rv + g[:, None] * vv
    out[:, 3:] = fdot[:, None] * rv + gdot[:, None] * vv
    return out


def _kepler_bisect(Mr, c1, c2, dE, converged):
    """Bisection fallback for unconverged components; F is monotone in dE."""
    bad = ~converged
    idx = np.nonzero(bad)[0]
    for k in idx:
        lo, hi = Mr[k] - 3.0, Mr[k] + 3.0
        flo = lo - c1[k] * math.sin(lo) + c2[k] * (1.0 - math.cos(lo)) - Mr[k]
        fhi = hi - c1[k] * math.sin(hi) + c2[k] * (1.0 - math.cos(hi)) - Mr[k]
        if flo > 0.0 or fhi < 0.0:
            raise KeplerConvergenceError("bisection bracket failed")
        x = dE[k]
        for _ in range(200):
            x = 0.5 * (lo + hi)
            fx = x - c1[k] * math.sin(x) + c2[k] * (1.0 - math.cos(x)) - Mr[k]
            if fx > 0.0:
                hi = x
            else:
                lo = x
            if hi - lo < _KEPLER_TOL:
                break
        else:
            raise KeplerConvergenceError("Kepler bisection exceeded iteration cap")
        dE[k] = x
    return dE


def propagate_two_body(sv: StateVector, dt: float, mu: float = MU_EARTH) -> StateVector:
    """Propagate a single state by dt seconds along a two-body orbit."""
    out = propagate_states(sv.as_array()[None, :], dt, mu)
    return StateVector.from_array(out[0])


def _stumpff(psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stumpff functions c2, c3 for elliptic (psi>0) and hyperbolic (psi<0) arcs."""
    c2 = np.empty_like(psi)
    c3 = np.empty_like(psi)
    pos = psi > 1e-8
    neg = psi < -1e-8
    mid = ~(pos | neg)
    sp = np.sqrt(np.where(pos, psi, 1.0))
    c2[pos] = ((1.0 - np.cos(sp)) / psi)[pos]
    c3[pos] = ((sp - np.sin(sp)) / (sp * psi))[pos]
    sn = np.sqrt(np.where(neg, -psi, 1.0))
    c2[neg] = ((1.0 - np.cosh(sn)) / psi)[neg]
    c3[neg] = ((np.sinh(sn) - sn) / (sn * np.abs(psi)))[neg]
    # series expansion around zero
    c2[mid] = 0.5 - psi[mid] / 24.0 + psi[mid] ** 2 / 720.0
    c3[mid] = 1.0 / 6.0 - psi[mid] / 120.0 + psi[mid] ** 2 / 5040.0
    return c2, c3


def propagate_states_universal(states: np.ndarray, dt, mu: float = MU_EARTH) -> np.ndarray:
    """Two-body propagation for any conic via the universal-variable formulation.

    Slower than the elliptic path but accepts hyperbolic/parabolic states;
    used for sigma-point propagation, where samples may cross the escape
    boundary even when every physical hypothesis is elliptical.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (states.shape[0],)).copy()
    rv = states[:, :3]
    vv = states[:, 3:]
    r0 = np.linalg.norm(rv, axis=1)
    v2 = np.einsum("ij,ij->i", vv, vv)
    alpha = 2.0 / r0 - v2 / mu
    sqmu = math.sqrt(mu)
    sigma0 = np.einsum("ij,ij->i", rv, vv) / sqmu

    chi = np.where(
        np.abs(alpha) > 1e-12,
        sqmu * np.abs(dt) * np.abs(alpha) * np.sign(dt),
        np.sign(dt) * np.sqrt(r0),  # crude near-parabolic seed, refined below
    )
    # hyperbolic arcs converge poorly from the elliptic seed; use Vallado's
    hyp = alpha < -1e-12
    if np.any(hyp):
        a = 1.0 / alpha[hyp]
        num = -2.0 * mu * alpha[hyp] * dt[hyp]
        den = sigma0[hyp] * sqmu + np.sign(dt[hyp]) * np.sqrt(-mu * a) * (
            1.0 - r0[hyp] * alpha[hyp]
        )
        arg = np.maximum(num / den, 1e-12)
        chi[hyp] = np.sign(dt[hyp]) * np.sqrt(-a) * np.log(arg)

    converged = np.zeros(chi.shape, dtype=bool)
    r = r0.copy()
    for _ in range(80):
        psi = chi**2 * alpha
        c2, c3 = _stumpff(psi)
        r = chi**2 * c2 + sigma0 * chi * (1.0 - psi * c3) + r0 * (1.0 - psi * c2)
        F = (
            chi**3 * c3 + sigma0 * chi**2 * c2 + r0 * chi * (1.0 - psi * c3)
            - sqmu * dt
        )
        step = F / r
        # damp large Newton steps to keep hyperbolic iterates in basin
        step = np.clip(step, -np.abs(chi) * 0.5 - 10.0, np.abs(chi) * 0.5 + 10.0)
        chi = np.where(converged, chi, chi - step)
        converged |= np.abs(step) < 1e-10 * np.maximum(1.0, np.abs(chi))
        if np.all(converged):
            break
    if not np.all(converged):
        raise KeplerConvergenceError("universal Kepler iteration failed to converge")

    psi = chi**2 * alpha
    c2, c3 = _stumpff(psi)
    r = chi**2 * c2 + sigma0 * chi * (1.0 - psi * c3) + r0 * (1.0 - psi * c2)
    f = 1.0 - chi**2 * c2 / r0
    g = dt - chi**3 * c3 / sqmu
    gdot = 1.0 - chi**2 * c2 / r
    fdot = sqmu / (r * r0) * chi * (psi * c3 - 1.0)
    out = np.empty_like(states)
    out[:, :3] = f[:, None] * rv + g[:, None] * vv
    out[:, 3:] = fdot[:, None] * rv + gdot[:, None] * vv
    return out


def propagate_states_any(states: np.ndarray, dt, mu: float = MU_EARTH) -> np.ndarray:
    """Batch propagation routing elliptic rows to the fast path, the rest to
    the universal-variable solver."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0]
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (n,))
    r0 = np.linalg.norm(states[:, :3], axis=1)
    v2 = np.einsum("ij,ij->i", states[:, 3:], states[:, 3:])
    elliptic = 2.0 / r0 - v2 / mu > 1e-12
    if np.all(elliptic):
        return propagate_states(states, dt, mu)
    out = np.empty_like(states)
    if np.any(elliptic):
        out[elliptic] = propagate_states(states[elliptic], dt[elliptic], mu)
    rest = ~elliptic
    out[rest] = propagate_states_universal(states[rest], dt[rest], mu)
    return out


def site_state(site: ObserverSite, epoch: Epoch) -> StateVector:
    """Inertial state of a ground site on the rotating spherical Earth."""
    lat = math.radians(site.latitude)
    theta = math.radians(site.longitude) + OMEGA_EARTH * epoch.t
    rho = (R_EARTH + site.altitude) * math.cos(lat)
    z = (R_EARTH + site.altitude) * math.sin(lat)
    pos = np.array([rho * math.cos(theta), rho * math.sin(theta), z])
    vel = np.array([-OMEGA_EARTH * pos[1], OMEGA_EARTH * pos[0], 0.0])
    return StateVector(pos, vel)


def radec_from_relative(delta: np.ndarray) -> np.ndarray:
    """(ra, dec) of relative position vectors; delta is (..., 3), output (..., 2)."""
    delta = np.asarray(delta, dtype=float)
    rng = np.linalg.norm(delta, axis=-1)
    if np.any(rng <= 1e-9):
        raise DegenerateGeometry("zero-range line of sight")
    rho_xy = np.hypot(delta[..., 0], delta[..., 1])
    ra = np.where(rho_xy > 0.0, np.arctan2(delta[..., 1], delta[..., 0]), 0.0)
    dec = np.arcsin(np.clip(delta[..., 2] / rng, -1.0, 1.0))
    return np.stack([wrap_angle(ra), dec], axis=-1)


def measure_radec(target: StateVector, observer: StateVector) -> AngleMeasurement:
    """Topocentric right ascension/declination of target as seen by observer.

    At the poles (line of sight along +-z) ra is conventionally 0.
    """
    z = radec_from_relative(target.position - observer.position)
    return AngleMeasurement(ra=float(z[0]), dec=float(z[1]))


def measurement_jacobian(target: StateVector, observer: StateVector) -> np.ndarray:
    """2x6 Jacobian of (ra, dec) with respect to the target Cartesian state."""
    H = measurement_jacobians(
        (target.position - observer.position)[None, :]
    )
    return H[0]


def measurement_jacobians(delta: np.ndarray) -> np.ndarray:
    """Batched 2x6 measurement Jacobians from relative positions (n, 3)."""
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    n = delta.shape[0]
    dx, dy, dz = delta[:, 0], delta[:, 1], delta[:, 2]
    s2 = np.einsum("ij,ij->i", delta, delta)
    if np.any(s2 <= 1e-18):
        raise DegenerateGeometry("zero-range line of sight")
    rxy2 = dx**2 + dy**2
    rxy = np.sqrt(rxy2)
    H = np.zeros((n, 2, 6))
    ok = rxy2 > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        H[:, 0, 0] = np.where(ok, -dy / rxy2, 0.0)
        H[:, 0, 1] = np.where(ok, dx / rxy2, 0.0)
        H[:, 1, 0] = np.where(ok, -dz * dx / (s2 * rxy), 0.0)
        H[:, 1, 1] = np.where(ok, -dz * dy / (s2 * rxy), 0.0)
        H[:, 1, 2] = np.where(ok, rxy / s2, 0.0)
    return H


def measure_radec_many(positions: np.ndarray, observer_position: np.ndarray) -> np.ndarray:
    """(ra, dec) rows for an (n, 3) block of target positions."""
    return radec_from_relative(np.atleast_2d(positions) - np.asarray(observer_position))
