"""Diagonal-covariance GMM universal background model trained by EM."""

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .binio import Reader, Writer, check_version, digest
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

UBM_MAGIC = b"IVXG"
UBM_VERSION = 1

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class DiagonalGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if m.shape != v.shape or m.shape[0] != w.size:
            raise DataError(f"inconsistent GMM shapes: weights {w.shape}, means {m.shape}, variances {v.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise DataError("GMM parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise DataError(f"GMM weights must be a probability vector (sum={w.sum()!r})")
        if np.any(v <= 0):
            raise DataError("GMM variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_bytes(self) -> bytes:
        w = Writer(UBM_MAGIC)
        w.u32(UBM_VERSION)
        w.u32(self.n_components)
        w.u32(self.dim)
        w.f64(self.weights)
        w.f64(self.means)
        w.f64(self.variances)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DiagonalGmm":
        r = Reader(data, UBM_MAGIC, "UBM file")
        check_version(r.u32(), UBM_VERSION, "UBM file")
        c, d = r.u32(), r.u32()
        weights, means, variances = r.f64(c), r.f64(c, d), r.f64(c, d)
        r.expect_end()
        return cls(weights, means, variances)

    def fingerprint(self) -> bytes:
        return digest(self.to_bytes())


def save_gmm(path, gmm: DiagonalGmm) -> None:
    with open(path, "wb") as fh:
        fh.write(gmm.to_bytes())


def load_gmm(path) -> DiagonalGmm:
    with open(path, "rb") as fh:
        return DiagonalGmm.from_bytes(fh.read())


def _as_frames(gmm: DiagonalGmm, frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.size == 0:
        return x.reshape(0, gmm.dim)
    x = np.atleast_2d(x)
    if x.shape[1] != gmm.dim:
        raise DataError(f"frame dimension {x.shape[1]} does not match GMM dimension {gmm.dim}")
    return x


def component_log_densities(gmm: DiagonalGmm, frames) -> np.ndarray:
    """T x C matrix of log w_c + log N(o_t; m_c, diag(v_c))."""
    x = _as_frames(gmm, frames)
    prec = 1.0 / gmm.variances
    const = np.log(gmm.weights) - 0.5 * (gmm.dim * LOG_2PI + np.sum(np.log(gmm.variances), axis=1)
                                         + np.sum(gmm.means**2 * prec, axis=1))
    # expanded quadratic form: one matmul for the cross term, one for the square term
    return const[None, :] + x @ (gmm.means * prec).T - 0.5 * (x**2) @ prec.T


def log_likelihood(gmm: DiagonalGmm, frames) -> float:
    x = _as_frames(gmm, frames)
    if x.shape[0] == 0:
        return 0.0
    return float(np.sum(logsumexp(component_log_densities(gmm, x), axis=1)))


def posterior_responsibilities(gmm: DiagonalGmm, frames) -> np.ndarray:
    """Rows of gamma_{c,t}; each row sums to one."""
    x = _as_frames(gmm, frames)
    lp = component_log_densities(gmm, x)
    gamma = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    return gamma / gamma.sum(axis=1, keepdims=True)


def default_var_floor(frames, factor: float = 1e-3) -> np.ndarray:
    return factor * np.var(np.atleast_2d(frames), axis=0)


def _floor(var_floor, dim: int) -> np.ndarray:
    floor = np.broadcast_to(np.asarray(var_floor, dtype=np.float64), (dim,)).copy()
    if np.any(floor <= 0):
        raise ConfigError("variance floor must be strictly positive")
    return floor


def kmeans_init(frames, n_components: int, seed: int = 0, max_iter: int = 20,
                var_floor=None) -> DiagonalGmm:
    """k-means++ seeding followed by up to ``max_iter`` Lloyd iterations."""
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    n, d = x.shape
    if n_components < 1:
        raise ConfigError("need at least one component")
    if n < n_components:
        raise DataError(f"{n} frames cannot seed {n_components} components")
    floor = _floor(default_var_floor(x) if var_floor is None else var_floor, d)
    floor = np.maximum(floor, 1e-12)
    rng = np.random.default_rng(seed)

    centers = np.empty((n_components, d))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for k in range(1, n_components):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[k] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[k]) ** 2, axis=1))

    x_sq = np.sum(x**2, axis=1)
    labels = None
    for _ in range(max_iter):
        dist = x_sq[:, None] - 2.0 * x @ centers.T + np.sum(centers**2, axis=1)[None, :]
        new_labels = np.argmin(dist, axis=1)
        counts = np.bincount(new_labels, minlength=n_components)
        while np.any(counts == 0):
            # re-seed an empty cluster at the point farthest from its center,
            # taken only from clusters that keep at least one member
            k = int(np.flatnonzero(counts == 0)[0])
            spread = np.where(counts[new_labels] > 1, dist[np.arange(n), new_labels], -np.inf)
            far = int(np.argmax(spread))
            centers[k] = x[far]
            new_labels[far] = k
            dist[far] = 0.0
            counts = np.bincount(new_labels, minlength=n_components)
        for k in range(n_components):
            centers[k] = x[new_labels == k].mean(axis=0)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels

    counts = np.bincount(labels, minlength=n_components).astype(np.float64)
    variances = np.empty((n_components, d))
    for k in range(n_components):
        variances[k] = np.maximum(np.var(x[labels == k], axis=0), floor)
    return DiagonalGmm(counts / counts.sum(), centers, variances)


def _m_step(x, gamma, floor, rng, weight_floor=1e-8):
    occ = gamma.sum(axis=0)
    total = occ.sum()
    weights = occ / total
    safe = np.maximum(occ, np.finfo(float).tiny)
    means = (gamma.T @ x) / safe[:, None]
    second = (gamma.T @ (x**2)) / safe[:, None]
    variances = np.maximum(second - means**2, floor)
    dead = np.flatnonzero(weights < weight_floor)
    if dead.size:
        warnings.warn(f"reinitializing starved GMM components {dead.tolist()}", RuntimeWarning, stacklevel=3)
        global_var = np.maximum(np.var(x, axis=0), floor)
        for c in dead:
            means[c] = x[rng.integers(x.shape[0])]
            variances[c] = global_var
            weights[c] = 1.0 / weights.size
        weights = weights / weights.sum()
    return DiagonalGmm(weights, means, variances)


def em_fit(init: DiagonalGmm, frames, iters: int = 25, var_floor=None, tol: float = 1e-5,
           seed: int = 0, block_size: int = 65536):
    """Run diagonal-GMM EM from ``init``.

    Returns ``(gmm, trace)`` where ``trace[i]`` is the total log-likelihood
    of the model after ``i`` updates (``trace[0]`` scores ``init``).
    Stops after ``iters`` updates or once the relative improvement drops
    below ``tol``.
    """
    x = _as_frames(init, frames)
    if x.shape[0] < init.n_components:
        raise DataError(f"{x.shape[0]} frames are too few for {init.n_components} components")
    floor = _floor(default_var_floor(x) if var_floor is None else var_floor, init.dim)
    rng = np.random.default_rng(seed)
    gmm = init
    trace = []

    def e_step(model):
        # fixed block order keeps the reduction deterministic
        ll = 0.0
        gammas = []
        for start in range(0, x.shape[0], block_size):
            lp = component_log_densities(model, x[start:start + block_size])
            norm = logsumexp(lp, axis=1, keepdims=True)
            ll += float(norm.sum())
            gammas.append(np.exp(lp - norm))
        return ll, np.vstack(gammas)

    ll, gamma = e_step(gmm)
    trace.append(ll)
    for it in range(iters):
        gmm = _m_step(x, gamma, floor, rng)
        ll, gamma = e_step(gmm)
        trace.append(ll)
        log.debug("EM iteration %d: log-likelihood %.6f", it + 1, ll)
        prev = trace[-2]
        if abs(prev) > 0 and (ll - prev) / abs(prev) < tol:
            break
    return gmm, np.asarray(trace)


def train_ubm(frames, n_components: int = 64, iters: int = 25, seed: int = 0,
              var_floor_factor: float = 1e-3, tol: float = 1e-5):
    """k-means++ initialization followed by EM; returns ``(gmm, trace)``."""
    x = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    floor = default_var_floor(x, var_floor_factor)
    init = kmeans_init(x, n_components, seed=seed, var_floor=floor)
    return em_fit(init, x, iters=iters, var_floor=floor, tol=tol, seed=seed)
