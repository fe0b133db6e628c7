"""LDA + WCCN + cosine scoring: the conventional i-vector back-end."""

import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .binio import Reader, Writer, check_version
from .errors import ConfigError, DataError

LDA_MAGIC = b"IVXL"
LDA_VERSION = 1
DEFAULT_LDA_DIM = 200


@dataclass(frozen=True, eq=False)
class LdaProjection:
    basis: np.ndarray  # R x K
    class_means_used: int
    mean: np.ndarray = None  # optional centering applied before the projection

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True, eq=False)
class WccnTransform:
    cholesky_factor: np.ndarray  # lower-triangular B with B B^T = W^-1


def _grouped(vectors, labels):
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise DataError(f"{x.shape[0]} vectors but {labels.shape[0]} labels")
    classes = sorted(set(labels.tolist()))
    return x, labels, classes


def scatter_matrices(vectors, labels):
    """Between- and within-class scatter, both normalized by sample count."""
    x, labels, classes = _grouped(vectors, labels)
    mu = x.mean(axis=0)
    dim = x.shape[1]
    s_b = np.zeros((dim, dim))
    s_w = np.zeros((dim, dim))
    for k in classes:
        xk = x[labels == k]
        d = xk.mean(axis=0) - mu
        s_b += xk.shape[0] * np.outer(d, d)
        centered = xk - xk.mean(axis=0)
        s_w += centered.T @ centered
    return s_b / x.shape[0], s_w / x.shape[0]


def within_class_covariance(vectors, labels) -> np.ndarray:
    return scatter_matrices(vectors, labels)[1]


def lda_fit(vectors, labels, out_dim: int = None) -> LdaProjection:
    """Fisher LDA by Cholesky reduction of the generalized eigenproblem."""
    x, labels, classes = _grouped(vectors, labels)
    if len(classes) < 2:
        raise DataError("LDA needs at least two classes")
    dim = x.shape[1]
    max_dim = min(len(classes) - 1, dim)
    if out_dim is None:
        out_dim = min(max_dim, DEFAULT_LDA_DIM)
    if not 1 <= out_dim <= max_dim:
        raise ConfigError(f"LDA output dim {out_dim} must lie in [1, {max_dim}]")
    s_b, s_w = scatter_matrices(x, labels)
    eps = 1e-6 * np.trace(s_w) / dim
    chol = np.linalg.cholesky(s_w + max(eps, 1e-300) * np.eye(dim))
    # L^-1 S_b L^-T, then map eigenvectors back with L^-T
    tmp = scipy.linalg.solve_triangular(chol, s_b, lower=True)
    reduced = scipy.linalg.solve_triangular(chol, tmp.T, lower=True)
    evals, evecs = np.linalg.eigh(0.5 * (reduced + reduced.T))
    order = np.argsort(evals)[::-1][:out_dim]
    basis = scipy.linalg.solve_triangular(chol.T, evecs[:, order], lower=False)
    return LdaProjection(basis, len(classes))


def lda_project(p: LdaProjection, v) -> np.ndarray:
    """``basis^T (v - mean)``; accepts one vector or rows of vectors."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != p.basis.shape[0]:
        raise DataError(f"vector length {v.shape[-1]} does not match LDA input dim {p.basis.shape[0]}")
    if p.mean is not None:
        v = v - p.mean
    return v @ p.basis


def wccn_fit(vectors, labels) -> WccnTransform:
    x, labels, classes = _grouped(vectors, labels)
    counts = [int(np.sum(labels == k)) for k in classes]
    if min(counts) < 2:
        raise DataError("WCCN needs at least two samples per class")
    w = within_class_covariance(x, labels)
    dim = w.shape[0]
    try:
        w_inv = np.linalg.inv(np.linalg.cholesky(w))
    except np.linalg.LinAlgError:
        eps = 1e-6 * np.trace(w) / dim
        warnings.warn(f"singular within-class covariance, adding ridge {eps:.3e}", RuntimeWarning, stacklevel=2)
        w_inv = np.linalg.inv(np.linalg.cholesky(w + max(eps, 1e-300) * np.eye(dim)))
    prec = w_inv.T @ w_inv
    b = np.linalg.cholesky(0.5 * (prec + prec.T))
    return WccnTransform(b)


def wccn_apply(t: WccnTransform, v) -> np.ndarray:
    """``B^T v``; accepts one vector or rows of vectors."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.cholesky_factor.shape[0]:
        raise DataError(f"vector length {v.shape[-1]} does not match WCCN dim {t.cholesky_factor.shape[0]}")
    return v @ t.cholesky_factor


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("cosine score of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class CosineBackend:
    """LDA -> WCCN -> per-class mean model, scored by cosine similarity."""

    def __init__(self, lda: LdaProjection, wccn: WccnTransform, classes, models):
        self.lda = lda
        self.wccn = wccn
        self.classes = list(classes)
        self.models = np.asarray(models)

    @classmethod
    def fit(cls, vectors, labels, out_dim: int = None) -> "CosineBackend":
        x, labels, classes = _grouped(vectors, labels)
        lda = replace(lda_fit(x, labels, out_dim), mean=x.mean(axis=0))
        projected = lda_project(lda, x)
        wccn = wccn_fit(projected, labels)
        z = _unit_rows(wccn_apply(wccn, projected))
        models = np.vstack([_unit_rows(z[labels == k].mean(axis=0, keepdims=True))[0] for k in classes])
        return cls(lda, wccn, classes, models)

    def transform(self, vectors) -> np.ndarray:
        return wccn_apply(self.wccn, lda_project(self.lda, vectors))

    def score(self, vectors) -> np.ndarray:
        """Cosine score of every vector against every class model (N x K)."""
        z = np.atleast_2d(self.transform(vectors))
        return np.array([[cosine_score(zi, m) for m in self.models] for zi in z])

    def predict(self, vectors) -> list:
        return [self.classes[i] for i in np.argmax(self.score(vectors), axis=1)]

    def to_bytes(self) -> bytes:
        return transform_to_bytes(self.lda, self.wccn)


def _unit_rows(z):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.where(norms == 0, 1.0, norms)


def transform_to_bytes(lda: LdaProjection, wccn: WccnTransform) -> bytes:
    w = Writer(LDA_MAGIC)
    w.u32(LDA_VERSION)
    r, k = lda.basis.shape
    w.u32(r)
    w.u32(k)
    w.u32(lda.class_means_used)
    w.f64(lda.mean if lda.mean is not None else np.zeros(r))
    w.f64(lda.basis)
    w.f64(wccn.cholesky_factor)
    return w.getvalue()


def transform_from_bytes(data: bytes):
    r = Reader(data, LDA_MAGIC, "LDA/WCCN file")
    check_version(r.u32(), LDA_VERSION, "LDA/WCCN file")
    rows, k, n_classes = r.u32(), r.u32(), r.u32()
    mean = r.f64(rows)
    basis = r.f64(rows, k)
    chol = r.f64(k, k)
    r.expect_end()
    return LdaProjection(basis, n_classes, mean), WccnTransform(chol)
