"""Baum-Welch statistics, total-variability training and i-vector extraction.

Supervectors are laid out component-major: block ``c`` of a C*D vector
occupies rows ``c*D .. c*D + D - 1``.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .binio import Reader, Writer, check_version
from .errors import ConfigError, DataError, FormatError, NumericError
from .frontend import FeatureSequence
from .gmm import DiagonalGmm, posterior_responsibilities

log = logging.getLogger(__name__)

TV_MAGIC = b"IVXT"
TV_VERSION = 1
IVEC_MAGIC = b"IVXV"
STATS_MAGIC = b"IVXS"
STATS_VERSION = 1

MSTEP_ML = "ml"
MSTEP_PAPER_LITERAL = "paper-literal"


@dataclass(frozen=True, eq=False)
class UtteranceStats:
    n: np.ndarray
    f: np.ndarray
    centered: bool = False
    utterance_id: str = ""
    speaker_id: str = ""
    channel_id: str = ""

    def __post_init__(self):
        n = np.asarray(self.n, dtype=np.float64).ravel()
        f = np.atleast_2d(np.asarray(self.f, dtype=np.float64))
        if f.shape[0] != n.size:
            raise DataError(f"first-order stats have {f.shape[0]} rows for {n.size} components")
        if np.any(n < 0) or not np.all(np.isfinite(n)) or not np.all(np.isfinite(f)):
            raise DataError("statistics must be finite with non-negative zero-order counts")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "f", f)

    @property
    def supervector(self) -> np.ndarray:
        return self.f.ravel()


@dataclass(frozen=True, eq=False)
class TotalVariabilityModel:
    t_matrix: np.ndarray
    ubm: DiagonalGmm
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.t_matrix, dtype=np.float64))
        rows = self.ubm.n_components * self.ubm.dim
        if t.shape[0] != rows or t.shape[1] < 1:
            raise DataError(f"T has shape {t.shape}; expected ({rows}, R>=1) for this UBM")
        if not np.all(np.isfinite(t)):
            raise NumericError("T contains non-finite entries")
        object.__setattr__(self, "t_matrix", t)

    @property
    def rank(self) -> int:
        return self.t_matrix.shape[1]

    @property
    def inv_sigma(self) -> np.ndarray:
        """Stacked diagonal of the UBM precision, length C*D."""
        return 1.0 / self.ubm.variances.ravel()

    @property
    def component_blocks(self) -> np.ndarray:
        """C x R x R stack of T_c^T Sigma_c^-1 T_c, computed once per model."""
        if "tst" not in self._cache:
            c, d = self.ubm.n_components, self.ubm.dim
            ts = (self.t_matrix * self.inv_sigma[:, None]).reshape(c, d, self.rank)
            tc = self.t_matrix.reshape(c, d, self.rank)
            self._cache["tst"] = np.einsum("cdi,cdj->cij", tc, ts)
        return self._cache["tst"]

    def to_bytes(self) -> bytes:
        w = Writer(TV_MAGIC)
        w.u32(TV_VERSION)
        w.u32(self.t_matrix.shape[0])
        w.u32(self.rank)
        w.f64(self.t_matrix)
        w.raw(self.ubm.fingerprint())
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, ubm: DiagonalGmm) -> "TotalVariabilityModel":
        r = Reader(data, TV_MAGIC, "TV file")
        check_version(r.u32(), TV_VERSION, "TV file")
        rows, rank = r.u32(), r.u32()
        t = r.f64(rows, rank)
        ref = r.raw(32)
        r.expect_end()
        if ref != ubm.fingerprint():
            raise FormatError("TV file was trained against a different UBM (hash mismatch)")
        return cls(t, ubm)


@dataclass(frozen=True, eq=False)
class IVector:
    w: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""
    channel_id: str = ""


def save_tv(path, model: TotalVariabilityModel) -> None:
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())


def load_tv(path, ubm: DiagonalGmm) -> TotalVariabilityModel:
    with open(path, "rb") as fh:
        return TotalVariabilityModel.from_bytes(fh.read(), ubm)


def ivectors_to_bytes(ivecs) -> bytes:
    ivecs = list(ivecs)
    dim = ivecs[0].w.size if ivecs else 0
    w = Writer(IVEC_MAGIC)
    w.u32(len(ivecs))
    w.u32(dim)
    for iv in ivecs:
        if iv.w.size != dim:
            raise DataError(f"{iv.utterance_id}: vector length {iv.w.size} != {dim}")
        w.text(iv.utterance_id)
        w.text(iv.speaker_id)
        w.text(iv.channel_id)
        w.f64(iv.w)
    return w.getvalue()


def ivectors_from_bytes(data: bytes) -> list:
    r = Reader(data, IVEC_MAGIC, "i-vector file")
    count, dim = r.u32(), r.u32()
    out = []
    for _ in range(count):
        utt, spk, chan = r.text(), r.text(), r.text()
        out.append(IVector(r.f64(dim), utt, spk, chan))
    r.expect_end()
    return out


def save_ivectors(path, ivecs) -> None:
    with open(path, "wb") as fh:
        fh.write(ivectors_to_bytes(ivecs))


def load_ivectors(path) -> list:
    with open(path, "rb") as fh:
        return ivectors_from_bytes(fh.read())


def stats_to_bytes(stats_list) -> bytes:
    """Pack per-utterance statistics: count, C, D, then per record ids, flag, N, F."""
    stats_list = list(stats_list)
    c, d = stats_list[0].f.shape if stats_list else (0, 0)
    w = Writer(STATS_MAGIC)
    w.u32(STATS_VERSION)
    w.u32(len(stats_list))
    w.u32(c)
    w.u32(d)
    for st in stats_list:
        if st.f.shape != (c, d):
            raise DataError(f"{st.utterance_id}: stats shape {st.f.shape} != {(c, d)}")
        w.text(st.utterance_id)
        w.text(st.speaker_id)
        w.text(st.channel_id)
        w.u32(int(st.centered))
        w.f64(st.n)
        w.f64(st.f)
    return w.getvalue()


def stats_from_bytes(data: bytes) -> list:
    r = Reader(data, STATS_MAGIC, "statistics file")
    check_version(r.u32(), STATS_VERSION, "statistics file")
    count, c, d = r.u32(), r.u32(), r.u32()
    out = []
    for _ in range(count):
        utt, spk, chan = r.text(), r.text(), r.text()
        centered = bool(r.u32())
        n = r.f64(c)
        out.append(UtteranceStats(n, r.f64(c, d), centered, utt, spk, chan))
    r.expect_end()
    return out


# -- statistics ------------------------------------------------------------

def accumulate_stats(gmm: DiagonalGmm, fs: FeatureSequence, utterance_id: str = "",
                     speaker_id: str = "", channel_id: str = "") -> UtteranceStats:
    """Zero- and first-order Baum-Welch statistics over the voiced frames."""
    if not fs.normalized:
        raise DataError(f"{fs.source_id or 'features'}: features must be CMVN-normalized first")
    if fs.dim != gmm.dim:
        raise DataError(f"feature dimension {fs.dim} does not match UBM dimension {gmm.dim}")
    x = fs.voiced
    if x.shape[0] == 0:
        raise DataError(f"{fs.source_id or 'features'}: no voiced frames")
    gamma = posterior_responsibilities(gmm, x)
    return UtteranceStats(gamma.sum(axis=0), gamma.T @ x, False,
                          utterance_id or fs.source_id, speaker_id, channel_id)


def center_stats(stats: UtteranceStats, gmm: DiagonalGmm) -> UtteranceStats:
    """Shift first-order stats to UBM-mean deviations: F_c - N_c m_c."""
    if stats.centered:
        raise DataError(f"{stats.utterance_id or 'stats'}: already centered")
    if stats.f.shape != gmm.means.shape:
        raise DataError(f"stats shape {stats.f.shape} does not match UBM {gmm.means.shape}")
    return replace(stats, f=stats.f - stats.n[:, None] * gmm.means, centered=True)


# -- E / M steps -----------------------------------------------------------

def _check_stats(model: TotalVariabilityModel, stats: UtteranceStats, allow_uncentered: bool):
    if stats.f.shape != model.ubm.means.shape:
        raise DataError(f"stats shape {stats.f.shape} does not match UBM {model.ubm.means.shape}")
    if not stats.centered and not allow_uncentered:
        raise DataError(f"{stats.utterance_id or 'stats'}: center statistics before the E-step")


def posterior_precision(model: TotalVariabilityModel, n: np.ndarray) -> np.ndarray:
    """I + T^T Sigma^-1 NN T for zero-order counts ``n``."""
    l_mat = np.eye(model.rank) + np.einsum("c,cij->ij", n, model.component_blocks)
    return 0.5 * (l_mat + l_mat.T)


def tv_e_step(model: TotalVariabilityModel, stats: UtteranceStats, allow_uncentered: bool = False):
    """Posterior precision ``l`` and mean ``y`` of the latent factor.

    Returns ``(l, y, l_inv)``.
    """
    _check_stats(model, stats, allow_uncentered)
    l_mat = posterior_precision(model, stats.n)
    try:
        factor = scipy.linalg.cho_factor(l_mat, lower=True)
    except np.linalg.LinAlgError as exc:
        eig = np.linalg.eigvalsh(l_mat)
        raise NumericError(
            f"{stats.utterance_id or 'utterance'}: posterior precision not SPD "
            f"(eigenvalues in [{eig.min():.3e}, {eig.max():.3e}])"
        ) from exc
    b = model.t_matrix.T @ (model.inv_sigma * stats.supervector)
    y = scipy.linalg.cho_solve(factor, b)
    l_inv = scipy.linalg.cho_solve(factor, np.eye(model.rank))
    return l_mat, y, 0.5 * (l_inv + l_inv.T)


def extract_ivector(model: TotalVariabilityModel, stats: UtteranceStats,
                    allow_uncentered: bool = False) -> IVector:
    _, y, _ = tv_e_step(model, stats, allow_uncentered)
    return IVector(y, stats.utterance_id, stats.speaker_id, stats.channel_id)


@dataclass
class TvAccumulators:
    """Sums over utterances: N_c, A_c and the first-order cross moment C."""

    n_sum: np.ndarray
    a: np.ndarray
    c: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n_components: int, dim: int, rank: int) -> "TvAccumulators":
        return cls(np.zeros(n_components), np.zeros((n_components, rank, rank)),
                   np.zeros((n_components * dim, rank)))

    def add(self, stats: UtteranceStats, y: np.ndarray, l_inv: np.ndarray, mstep: str = MSTEP_ML) -> None:
        if mstep == MSTEP_ML:
            second = l_inv + np.outer(y, y)
        elif mstep == MSTEP_PAPER_LITERAL:
            second = l_inv
        else:
            raise ConfigError(f"unknown M-step variant {mstep!r}")
        self.n_sum += stats.n
        self.a += stats.n[:, None, None] * second[None, :, :]
        self.c += np.outer(stats.supervector, y)
        self.count += 1


def tv_m_step(acc: TvAccumulators, dim: int) -> np.ndarray:
    """Solve T_c A_c = C_c for every component block."""
    n_comp, rank = acc.a.shape[0], acc.a.shape[1]
    t_new = np.empty((n_comp * dim, rank))
    for c in range(n_comp):
        a_c = 0.5 * (acc.a[c] + acc.a[c].T)
        rhs = acc.c[c * dim:(c + 1) * dim].T
        try:
            sol = scipy.linalg.solve(a_c, rhs, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
            lam = 1e-6 * max(np.trace(a_c), 1e-300) / rank
            warnings.warn(f"component {c}: singular M-step system, adding ridge {lam:.3e}", RuntimeWarning,
                          stacklevel=2)
            sol = scipy.linalg.solve(a_c + lam * np.eye(rank), rhs, assume_a="sym")
        t_new[c * dim:(c + 1) * dim] = sol.T
    return t_new


def init_t_matrix(ubm: DiagonalGmm, rank: int, seed: int = 0, scale: float = 0.1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, scale, size=(ubm.n_components * ubm.dim, rank))


def tv_objective(model: TotalVariabilityModel, stats_list) -> float:
    """T-dependent part of the marginal log-likelihood of all utterances.

    Sum of ``-0.5 log|l| + 0.5 b^T l^-1 b`` with ``b = T^T Sigma^-1 F``;
    nondecreasing under the maximum-likelihood M-step.
    """
    total = 0.0
    for st in stats_list:
        l_mat, y, _ = tv_e_step(model, st, allow_uncentered=True)
        b = model.t_matrix.T @ (model.inv_sigma * st.supervector)
        _, logdet = np.linalg.slogdet(l_mat)
        total += -0.5 * logdet + 0.5 * float(b @ y)
    return total


def proxy_objective(model: TotalVariabilityModel, stats_list) -> float:
    """Precision- and count-weighted residual of the supervector fit.

    Sum over utterances and components of
    ``(F_c - N_c T_c y)^T Sigma_c^-1 (F_c - N_c T_c y) / N_c``.
    """
    c, d = model.ubm.n_components, model.ubm.dim
    prec = 1.0 / model.ubm.variances
    total = 0.0
    for st in stats_list:
        _, y, _ = tv_e_step(model, st, allow_uncentered=True)
        resid = st.f - st.n[:, None] * (model.t_matrix @ y).reshape(c, d)
        keep = st.n > 0
        total += float(np.sum(np.sum(resid[keep] ** 2 * prec[keep], axis=1) / st.n[keep]))
    return total


def train_tv(ubm: DiagonalGmm, stats_list, rank: int = 400, iters: int = 5, seed: int = 0,
             mstep: str = MSTEP_ML, init: Optional[np.ndarray] = None, track_proxy: bool = False):
    """Alternate E-steps over all utterances with the M-step.

    ``stats_list`` must be consistently centered (or consistently
    uncentered, which is passed through for comparison runs). Returns
    ``(model, trace)``; ``trace["loglik"][i]`` is :func:`tv_objective` after
    ``i`` updates and ``trace["proxy"]`` the matching :func:`proxy_objective`
    when ``track_proxy`` is set.
    """
    stats_list = sorted(stats_list, key=lambda s: s.utterance_id)
    if len(stats_list) < 2:
        raise DataError("total-variability training needs at least 2 utterances")
    rows = ubm.n_components * ubm.dim
    if not 1 <= rank <= rows:
        raise ConfigError(f"rank {rank} must lie in [1, C*D={rows}]")
    if mstep not in (MSTEP_ML, MSTEP_PAPER_LITERAL):
        raise ConfigError(f"unknown M-step variant {mstep!r}")
    if len({s.centered for s in stats_list}) != 1:
        raise DataError("mixture of centered and uncentered statistics")
    model = TotalVariabilityModel(init_t_matrix(ubm, rank, seed) if init is None else init, ubm)
    trace = {"loglik": [], "proxy": []}

    for it in range(iters + 1):
        acc = TvAccumulators.zeros(ubm.n_components, ubm.dim, rank)
        objective = 0.0
        for st in stats_list:
            l_mat, y, l_inv = tv_e_step(model, st, allow_uncentered=True)
            b = model.t_matrix.T @ (model.inv_sigma * st.supervector)
            objective += -0.5 * np.linalg.slogdet(l_mat)[1] + 0.5 * float(b @ y)
            acc.add(st, y, l_inv, mstep)
        trace["loglik"].append(objective)
        if track_proxy:
            trace["proxy"].append(proxy_objective(model, stats_list))
        if it == iters:
            break
        model = TotalVariabilityModel(tv_m_step(acc, ubm.dim), ubm)
        log.info("TV iteration %d done (objective before update %.6f)", it + 1, objective)
    return model, trace
