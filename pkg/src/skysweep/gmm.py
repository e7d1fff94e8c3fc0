"""Gaussian mixtures: unscented transform, FOV-aware splitting, and maintenance.

Mixtures are stored as parallel arrays (weights, means, covs) so per-component
work vectorizes. Splitting near a field-of-view boundary uses a whitened
point-to-edge distance trigger and a three-component univariate split library
applied along the principal axis most visible to the projected covariance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .astro import (
    StateVector,
    measure_radec_many,
    measurement_jacobians,
    wrap_angle,
    wrap_angle_diff,
)


class IllConditionedCovariance(ValueError):
    """Covariance could not be repaired to positive definite."""


class ComponentCapExceeded(RuntimeError):
    """Recursive splitting produced more components than the configured cap."""


@dataclass(frozen=True)
class GaussianComponent:
    w: float
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if self.w < 0.0:
            raise ValueError("component weight must be nonnegative")
        n = self.mu.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError("covariance shape mismatch")


class GaussianMixture:
    """Weighted Gaussian components with a shared dimension.

    weights: (n,), means: (n, d), covs: (n, d, d). An empty mixture keeps its
    dimension so downstream shape logic stays valid.
    """

    def __init__(self, weights, means, covs, dim: int | None = None):
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        self.means = np.asarray(means, dtype=float)
        self.covs = np.asarray(covs, dtype=float)
        n = self.weights.shape[0]
        if n == 0:
            if dim is None:
                dim = self.means.shape[1] if self.means.ndim == 2 else 0
            self.means = self.means.reshape(0, dim)
            self.covs = self.covs.reshape(0, dim, dim)
        if self.means.shape[0] != n or self.covs.shape[0] != n:
            raise ValueError("component count mismatch")
        d = self.means.shape[1]
        if self.covs.shape[1:] != (d, d):
            raise ValueError("covariance shape mismatch")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if not np.isfinite(self.weights).all():
            raise ValueError("weights must be finite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __len__(self) -> int:
        return self.weights.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def component(self, i: int) -> GaussianComponent:
        return GaussianComponent(float(self.weights[i]), self.means[i], self.covs[i])

    @staticmethod
    def from_components(comps: list[GaussianComponent]) -> "GaussianMixture":
        if not comps:
            raise ValueError("need at least one component (or construct empty arrays)")
        return GaussianMixture(
            np.array([c.w for c in comps]),
            np.stack([c.mu for c in comps]),
            np.stack([c.cov for c in comps]),
        )

    def scaled(self, factor: float) -> "GaussianMixture":
        return GaussianMixture(self.weights * factor, self.means, self.covs, dim=self.dim)

    def copy(self) -> "GaussianMixture":
        return GaussianMixture(
            self.weights.copy(), self.means.copy(), self.covs.copy(), dim=self.dim
        )


def empty_mixture(dim: int) -> GaussianMixture:
    return GaussianMixture(np.zeros(0), np.zeros((0, dim)), np.zeros((0, dim, dim)), dim=dim)


def spd_repair(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and clamp eigenvalues below 1e-12 * trace/n (batched)."""
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    n = sym.shape[-1]
    floor = 1e-12 * np.trace(sym, axis1=-2, axis2=-1) / n
    floor = np.maximum(floor, 1e-300)
    vals = np.maximum(vals, floor[..., None])
    return np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)


def _cholesky_with_repair(covs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        repaired = spd_repair(covs)
        try:
            return np.linalg.cholesky(repaired)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise IllConditionedCovariance("covariance not repairable") from exc


# Symmetric sigma-point set: kappa = 0, alpha = 1, beta = 2. Center-point mean
# weight is zero and all weights are nonnegative for any dimension.
def _sigma_weights(n: int) -> tuple[np.ndarray, np.ndarray]:
    wm = np.full(2 * n + 1, 1.0 / (2 * n))
    wc = np.full(2 * n + 1, 1.0 / (2 * n))
    wm[0] = 0.0
    wc[0] = 2.0
    return wm, wc


def unscented_transform_batch(means: np.ndarray, covs: np.ndarray, fn) -> tuple[np.ndarray, np.ndarray]:
    """Push (k, n) means with (k, n, n) covariances through fn.

    fn maps an (m, n) array of points to an (m, p) array. Returns transformed
    means (k, p) and SPD-repaired covariances (k, p, p).
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    covs = np.asarray(covs, dtype=float)
    k, n = means.shape
    L = _cholesky_with_repair(covs) * math.sqrt(n)
    # sigma points: center, +columns, -columns -> (k, 2n+1, n)
    pts = np.empty((k, 2 * n + 1, n))
    pts[:, 0] = means
    pts[:, 1 : n + 1] = means[:, None, :] + np.swapaxes(L, 1, 2)
    pts[:, n + 1 :] = means[:, None, :] - np.swapaxes(L, 1, 2)
    mapped = fn(pts.reshape(k * (2 * n + 1), n))
    mapped = np.asarray(mapped, dtype=float).reshape(k, 2 * n + 1, -1)
    wm, wc = _sigma_weights(n)
    out_mean = np.einsum("s,ksp->kp", wm, mapped)
    dev = mapped - out_mean[:, None, :]
    out_cov = np.einsum("s,ksp,ksq->kpq", wc, dev, dev)
    return out_mean, spd_repair(out_cov)


def unscented_transform(comp: GaussianComponent, fn) -> tuple[np.ndarray, np.ndarray]:
    """Sigma-point mean/covariance of fn applied to a single Gaussian."""
    m, P = unscented_transform_batch(comp.mu[None, :], comp.cov[None, :, :], fn)
    return m[0], P[0]


@dataclass(frozen=True)
class FovRect:
    """Rectangular field of view in (ra, dec), radians.

    Vertices are ordered counterclockwise starting from the lower-left corner.
    Right-ascension arithmetic is wrapped relative to the center.
    """

    center_ra: float
    center_dec: float
    half_width: float
    half_height: float

    def __post_init__(self):
        if self.half_width <= 0.0 or self.half_height <= 0.0:
            raise ValueError("FOV half-extents must be positive")

    def vertices(self) -> np.ndarray:
        """Absolute (ra, dec) corners, counterclockwise."""
        w, h = self.half_width, self.half_height
        rel = np.array([[-w, -h], [w, -h], [w, h], [-w, h]])
        out = rel + np.array([self.center_ra, self.center_dec])
        out[:, 0] = wrap_angle(out[:, 0])
        return out

    def relative_vertices(self) -> np.ndarray:
        w, h = self.half_width, self.half_height
        return np.array([[-w, -h], [w, -h], [w, h], [-w, h]])

    def contains(self, ra, dec) -> np.ndarray:
        dra = np.abs(wrap_angle_diff(np.asarray(ra) - self.center_ra))
        ddec = np.abs(np.asarray(dec) - self.center_dec)
        return (dra <= self.half_width) & (ddec <= self.half_height)


@dataclass(frozen=True)
class SplitLibrary:
    """Univariate standard-normal split: weights, means, common sigma."""

    alphas: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alphas", np.asarray(self.alphas, dtype=float))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "sigmas", np.asarray(self.sigmas, dtype=float))
        if abs(self.alphas.sum() - 1.0) > 1e-12:
            raise ValueError("split weights must sum to 1")
        if np.any(self.sigmas <= 0.0):
            raise ValueError("split sigmas must be positive")
        if abs(float(self.alphas @ self.means)) > 1e-12:
            raise ValueError("split library must be mean-symmetric about 0")


# Three-component library (beta = 2, regularization 0.001), symmetric about 0.
SPLIT_LIBRARY_3 = SplitLibrary(
    alphas=np.array([0.2252246249, 0.5495507502, 0.2252246249]),
    means=np.array([-1.0575154615, 0.0, 1.0575154615]),
    sigmas=np.array([0.6715662887, 0.6715662887, 0.6715662887]),
)


class RadecProjection:
    """Projection onto the field of regard via the angles-only measurement map."""

    def __init__(self, observer: StateVector):
        self.observer = observer

    def project(self, means: np.ndarray, covs: np.ndarray):
        """Returns (projected means (n, 2), covs (n, 2, 2), jacobians (n, 2, d))."""
        means = np.atleast_2d(means)
        delta = means[:, :3] - self.observer.position
        z = measure_radec_many(means[:, :3], self.observer.position)
        H = measurement_jacobians(delta)
        P2 = np.einsum("nij,njk,nlk->nil", H, covs, H)
        P2 = 0.5 * (P2 + np.swapaxes(P2, 1, 2))
        return z, P2, H


class LinearProjection:
    """Projection through a fixed linear map; useful when h is a coordinate pick."""

    def __init__(self, H: np.ndarray):
        self.H = np.asarray(H, dtype=float)

    def project(self, means: np.ndarray, covs: np.ndarray):
        means = np.atleast_2d(means)
        n = means.shape[0]
        z = means @ self.H.T
        P2 = np.einsum("ij,njk,lk->nil", self.H, covs, self.H)
        P2 = 0.5 * (P2 + np.swapaxes(P2, 1, 2))
        H = np.broadcast_to(self.H, (n,) + self.H.shape)
        return z, P2, H


def _as_projection(observer) -> "RadecProjection | LinearProjection":
    if isinstance(observer, StateVector):
        return RadecProjection(observer)
    return observer


def project_to_for(comp: GaussianComponent, observer) -> tuple[np.ndarray, np.ndarray]:
    """Project a component onto the field of regard: (h(mu), H P H^T).

    observer may be a StateVector (angles map) or a projection object.
    """
    proj = _as_projection(observer)
    mu2, P2, _ = proj.project(comp.mu[None, :], comp.cov[None, :, :])
    return mu2[0], P2[0]


def project_many(means: np.ndarray, covs: np.ndarray, observer):
    """Batched projection; observer as in project_to_for."""
    return _as_projection(observer).project(means, covs)


def mahalanobis_to_fov(mu_tilde: np.ndarray, P_tilde: np.ndarray, fov: FovRect) -> tuple[float, bool]:
    """Minimum whitened distance from a projected component to the FOV edges.

    Vertices are whitened by the projected covariance's eigendecomposition;
    the distance to each edge uses the standard three-case point-to-segment
    rule. Also reports whether the projected mean lies inside the rectangle.
    """
    d, inside = fov_split_metrics(mu_tilde[None, :], P_tilde[None, :, :], fov)
    return float(d[0]), bool(inside[0])


def fov_split_metrics(mu2: np.ndarray, P2: np.ndarray, fov: FovRect):
    """Batched whitened edge distances and inside flags for projected components."""
    mu2 = np.atleast_2d(mu2)
    n = mu2.shape[0]
    # center-relative coordinates with ra wrapping
    rel_mu = np.column_stack(
        [wrap_angle_diff(mu2[:, 0] - fov.center_ra), mu2[:, 1] - fov.center_dec]
    )
    verts = fov.relative_vertices()  # (4, 2)
    vals, vecs = np.linalg.eigh(P2)
    vals = np.maximum(vals, 1e-300)
    # b = diag(vals^-1/2) V^T (a - mu)
    diff = verts[None, :, :] - rel_mu[:, None, :]  # (n, 4, 2)
    b = np.einsum("nij,nkj->nki", np.swapaxes(vecs, 1, 2), diff) / np.sqrt(vals)[:, None, :]
    d = np.full(n, np.inf)
    for i in range(4):
        j = (i + 1) % 4
        bi, bj = b[:, i, :], b[:, j, :]
        bij = bj - bi
        denom = np.einsum("nk,nk->n", bij, bij)
        t = -np.einsum("nk,nk->n", bi, bij) / np.maximum(denom, 1e-300)
        o_perp = bi + t[:, None] * bij
        # inner product test: foot of the perpendicular between the endpoints
        use_perp = np.einsum("nk,nk->n", bi - o_perp, bj - o_perp) <= 0.0
        ni = np.linalg.norm(bi, axis=1)
        nj = np.linalg.norm(bj, axis=1)
        endpoint = np.where(ni < nj, ni, nj)
        dist = np.where(use_perp, np.linalg.norm(o_perp, axis=1), endpoint)
        d = np.minimum(d, dist)
    inside = (np.abs(rel_mu[:, 0]) <= fov.half_width) & (
        np.abs(rel_mu[:, 1]) <= fov.half_height
    )
    return d, inside


def select_split_direction(comp: GaussianComponent, H: np.ndarray):
    """Eigenpair of the covariance most visible to the projected top eigen-direction.

    Maximizes |sqrt(lambda_i) <v_max_projected, H v_i>|; ties break to the
    lowest index. Returns (eigvec, eigval, index).
    """
    vals, vecs = np.linalg.eigh(comp.cov)
    P2 = H @ comp.cov @ H.T
    vals2, vecs2 = np.linalg.eigh(0.5 * (P2 + P2.T))
    v_max = vecs2[:, np.argmax(vals2)]
    scores = np.abs(np.sqrt(np.maximum(vals, 0.0)) * (v_max @ (H @ vecs)))
    idx = int(np.flatnonzero(scores == scores.max())[0])
    return vecs[:, idx].copy(), float(vals[idx]), idx


def split_component(
    comp: GaussianComponent,
    direction: tuple[np.ndarray, float, int],
    lib: SplitLibrary = SPLIT_LIBRARY_3,
) -> GaussianMixture:
    """Replace one Gaussian by the library mixture along the chosen eigen-axis.

    Weight and mixture mean are preserved exactly; the variance along the
    split axis contracts by sum(alpha*(m^2 + sigma^2)).
    """
    v, lam, idx = direction
    vals, vecs = np.linalg.eigh(comp.cov)
    # use the caller's eigenpair index against this decomposition
    lam = float(vals[idx])
    n_split = lib.alphas.shape[0]
    d = comp.mu.shape[0]
    weights = lib.alphas * comp.w
    offsets = math.sqrt(max(lam, 0.0)) * lib.means
    means = comp.mu[None, :] + offsets[:, None] * vecs[:, idx][None, :]
    covs = np.empty((n_split, d, d))
    for s in range(n_split):
        scaled = vals.copy()
        scaled[idx] = lib.sigmas[s] ** 2 * lam
        covs[s] = (vecs * scaled) @ vecs.T
    return GaussianMixture(weights, means, covs)


def recursive_fov_split(
    mix: GaussianMixture,
    fov: FovRect,
    observer,
    d_m: float = 3.0,
    depth_cap: int = 6,
    component_cap: int = 10000,
    lib: SplitLibrary = SPLIT_LIBRARY_3,
) -> GaussianMixture:
    """Split components near the FOV boundary until all clear the distance trigger.

    A component is split when its minimum whitened distance to an FOV edge is
    at most d_m; children are re-tested up to depth_cap. Output order is
    parent order with children in library order. Total weight and mixture
    mean are preserved.
    """
    if d_m <= 0.0:
        raise ValueError("d_m must be positive")
    if len(mix) == 0:
        return mix
    proj = _as_projection(observer)
    z0, P0, _ = proj.project(mix.means, mix.covs)
    d, _ = fov_split_metrics(z0, P0, fov)
    if np.all(d > d_m):
        return mix

    out_w: list[float] = []
    out_m: list[np.ndarray] = []
    out_c: list[np.ndarray] = []
    # stack of (component, depth); children pushed in reverse library order so
    # they pop in library order
    stack = [(mix.component(i), 0) for i in range(len(mix) - 1, -1, -1)]
    n_emitted = 0
    while stack:
        comp, depth = stack.pop()
        mu2, P2, H = proj.project(comp.mu[None, :], comp.cov[None, :, :])
        dist, _ = fov_split_metrics(mu2, P2, fov)
        if depth >= depth_cap or dist[0] > d_m:
            out_w.append(comp.w)
            out_m.append(comp.mu)
            out_c.append(comp.cov)
            n_emitted += 1
            if n_emitted + len(stack) > component_cap:
                raise ComponentCapExceeded(
                    f"FOV splitting exceeded {component_cap} components; "
                    "d_m too aggressive for this mixture"
                )
            continue
        direction = select_split_direction(comp, H[0])
        children = split_component(comp, direction, lib)
        for s in range(len(children) - 1, -1, -1):
            stack.append((children.component(s), depth + 1))
        if len(stack) + n_emitted > component_cap:
            raise ComponentCapExceeded(
                f"FOV splitting exceeded {component_cap} components; "
                "d_m too aggressive for this mixture"
            )
    return GaussianMixture(np.array(out_w), np.stack(out_m), np.stack(out_c))


def gaussian_product_integral(m1, P1, m2, P2) -> float:
    """Integral of the product of two Gaussians: N(m1 - m2; 0, P1 + P2)."""
    diff = np.asarray(m1, float) - np.asarray(m2, float)
    S = np.asarray(P1, float) + np.asarray(P2, float)
    d = diff.shape[0]
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        raise IllConditionedCovariance("singular covariance sum")
    maha = float(diff @ np.linalg.solve(S, diff))
    return math.exp(-0.5 * (maha + logdet + d * math.log(2 * math.pi)))


def gmm_l2_distance(p: GaussianMixture, q: GaussianMixture) -> float:
    """Closed-form integral of (p - q)^2 via pairwise Gaussian product integrals."""
    if p.dim != q.dim:
        raise ValueError("mixtures must share a dimension")

    def cross(m1, w1, c1, m2, w2, c2):
        total = 0.0
        for i in range(len(w1)):
            for j in range(len(w2)):
                total += w1[i] * w2[j] * gaussian_product_integral(m1[i], c1[i], m2[j], c2[j])
        return total

    pp = cross(p.means, p.weights, p.covs, p.means, p.weights, p.covs)
    qq = cross(q.means, q.weights, q.covs, q.means, q.weights, q.covs)
    pq = cross(p.means, p.weights, p.covs, q.means, q.weights, q.covs)
    return max(pp + qq - 2.0 * pq, 0.0)


def prune_and_merge(
    mix: GaussianMixture,
    weight_floor: float = 1e-6,
    merge_mahalanobis: float = 0.1,
    cap: int = 10000,
) -> GaussianMixture:
    """Drop tiny components, merge near-duplicates, cap the count.

    Merging is the usual greedy moment-matched clustering led by the heaviest
    component; total weight is preserved by rescaling survivors to the
    pre-prune total.
    """
    if weight_floor < 0 or merge_mahalanobis < 0:
        raise ValueError("thresholds must be nonnegative")
    if len(mix) == 0:
        return mix
    total_before = mix.total_weight
    keep = mix.weights > weight_floor
    if not np.any(keep):
        return empty_mixture(mix.dim)
    w = mix.weights[keep]
    m = mix.means[keep]
    P = mix.covs[keep]

    order = np.argsort(-w, kind="stable")
    w, m, P = w[order], m[order], P[order]
    used = np.zeros(len(w), dtype=bool)
    out_w, out_m, out_P = [], [], []
    thresh2 = merge_mahalanobis**2
    for i in range(len(w)):
        if used[i]:
            continue
        used[i] = True
        cluster = [i]
        if thresh2 > 0:
            rest = np.flatnonzero(~used)
            if rest.size:
                diff = m[rest] - m[i]
                sol = np.linalg.solve(P[i], diff.T).T
                d2 = np.einsum("nj,nj->n", diff, sol)
                close = rest[d2 <= thresh2]
                for j in close:
                    used[j] = True
                    cluster.append(int(j))
        cw = w[cluster]
        wsum = cw.sum()
        mu = (cw[:, None] * m[cluster]).sum(axis=0) / wsum
        dev = m[cluster] - mu
        cov = (
            np.einsum("n,nij->ij", cw, P[cluster])
            + np.einsum("n,ni,nj->ij", cw, dev, dev)
        ) / wsum
        out_w.append(wsum)
        out_m.append(mu)
        out_P.append(cov)

    w = np.array(out_w)
    m = np.stack(out_m)
    P = np.stack(out_P)
    if len(w) > cap:
        top = np.argsort(-w, kind="stable")[:cap]
        top = np.sort(top)
        w, m, P = w[top], m[top], P[top]
    w = w * (total_before / w.sum())
    return GaussianMixture(w, m, P)


def sample_mixture(mix: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points: categorical over weights, then Gaussian per component."""
    if len(mix) == 0 or mix.total_weight <= 0.0:
        raise ValueError("cannot sample an empty or zero-weight mixture")
    probs = mix.weights / mix.total_weight
    counts = rng.multinomial(n, probs)
    chunks = []
    for i, c in enumerate(counts):
        if c == 0:
            continue
        L = _cholesky_with_repair(mix.covs[i][None, :, :])[0]
        chunks.append(mix.means[i] + rng.standard_normal((c, mix.dim)) @ L.T)
    return np.concatenate(chunks, axis=0)


def mixture_logpdf(mix: GaussianMixture, x: np.ndarray, normalized: bool = True) -> np.ndarray:
    """Log density of the (optionally unit-normalized) mixture at points x (k, d)."""
    x = np.atleast_2d(x)
    if len(mix) == 0:
        return np.full(x.shape[0], -np.inf)
    w = mix.weights / mix.total_weight if normalized else mix.weights
    logs = np.full((x.shape[0], len(mix)), -np.inf)
    valid = w > 0
    lw = np.full(len(mix), -np.inf)
    lw[valid] = np.log(w[valid])
    for i in range(len(mix)):
        if not valid[i]:
            continue
        logs[:, i] = lw[i] + gaussian_logpdf(x, mix.means[i], mix.covs[i])
    mx = logs.max(axis=1)
    out = np.where(
        np.isfinite(mx),
        mx + np.log(np.exp(logs - mx[:, None]).sum(axis=1)),
        -np.inf,
    )
    return out


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Multivariate normal log density at points x (k, d)."""
    x = np.atleast_2d(x)
    d = x.shape[1]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        cov = spd_repair(cov)
        sign, logdet = np.linalg.slogdet(cov)
    diff = x - np.asarray(mean)
    sol = np.linalg.solve(cov, diff.T).T
    maha = np.einsum("kj,kj->k", diff, sol)
    return -0.5 * (maha + logdet + d * math.log(2 * math.pi))
