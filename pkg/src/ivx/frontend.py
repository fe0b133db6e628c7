"""Audio front-end: WAV I/O, framing, MFCC, energy VAD and CMVN."""

import os
import warnings
import wave
from dataclasses import dataclass, field, replace

import numpy as np

from .binio import Reader, Writer, check_version
from .errors import ConfigError, DataError, FormatError, NumericError

FRAME_LEN = 256
FRAME_SHIFT = FRAME_LEN // 2
PREEMPHASIS = 0.97
N_MELS = 26
N_CEPS = 12
LOG_FLOOR = 1e-10
VAD_THRESHOLD_DB = 30.0

FEATURE_MAGIC = b"IVXF"
FEATURE_VERSION = 1


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError(f"{self.source_id or 'clip'}: samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)) or np.max(np.abs(samples)) > 1.0:
            raise DataError(f"{self.source_id or 'clip'}: samples must be finite and within [-1, 1]")
        if int(self.sample_rate_hz) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """T x D cepstral frames plus the VAD mask.

    Frames outside ``vad_mask`` are kept for bookkeeping only; statistics
    are accumulated over :attr:`voiced`.
    """

    frames: np.ndarray
    vad_mask: np.ndarray = None
    frame_length_samples: int = FRAME_LEN
    frame_shift_samples: int = FRAME_SHIFT
    normalized: bool = False
    source_id: str = field(default="", compare=False)

    def __post_init__(self):
        frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DataError(f"feature matrix must be at least 1x1, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise NumericError(f"{self.source_id or 'features'}: non-finite feature values")
        mask = np.ones(frames.shape[0], dtype=bool) if self.vad_mask is None else np.asarray(self.vad_mask, dtype=bool)
        if mask.shape != (frames.shape[0],):
            raise DataError(f"vad mask length {mask.shape} does not match {frames.shape[0]} frames")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "vad_mask", mask)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def voiced(self) -> np.ndarray:
        return self.frames[self.vad_mask]


# -- WAV -----------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Read 16-bit PCM mono RIFF/WAVE into an AudioClip scaled by 1/32768."""
    try:
        with wave.open(os.fspath(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV header ({exc})") from exc
    if channels != 1 or width != 2:
        raise FormatError(
            f"{path}: unsupported layout {channels} channel(s), {8 * width}-bit; need mono 16-bit PCM"
        )
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise FormatError(f"{path}: no audio samples")
    return AudioClip(samples, rate, source_id=os.path.splitext(os.path.basename(os.fspath(path)))[0])


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


# -- framing ---------------------------------------------------------------

def _raw_frames(x: np.ndarray, frame_len: int, frame_shift: int) -> np.ndarray:
    if frame_shift < 1 or frame_len < 1:
        raise ConfigError(f"frame_len and frame_shift must be >= 1, got {frame_len}, {frame_shift}")
    if x.size < frame_len:
        raise DataError(f"signal of {x.size} samples is shorter than one {frame_len}-sample frame")
    count = (x.size - frame_len) // frame_shift + 1
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(count)[:, None]
    return x[idx]


def frame_signal(clip: AudioClip, frame_len: int = FRAME_LEN, frame_shift: int = FRAME_SHIFT,
                 preemphasis: float = PREEMPHASIS) -> np.ndarray:
    """Split into overlapping frames, pre-emphasize each, apply a Hamming window.

    Pre-emphasis is applied within each frame (the first sample of a frame
    is passed through unchanged).
    """
    if not 0.0 <= preemphasis < 1.0:
        raise ConfigError(f"pre-emphasis coefficient must lie in [0, 1), got {preemphasis}")
    frames = _raw_frames(clip.samples, frame_len, frame_shift)
    emphasized = frames.copy()
    emphasized[:, 1:] -= preemphasis * frames[:, :-1]
    return emphasized * np.hamming(frame_len)


# -- MFCC ------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int):
    """Triangular filters on the rfft grid, spanning 0 Hz to Nyquist.

    Returns (weights [n_mels x n_fft//2+1], center frequencies in Hz).
    """
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) == 0.0)
    if empty.size:
        raise ConfigError(
            f"{n_mels} mel filters too many for a {n_fft}-point transform at {sample_rate_hz} Hz "
            f"(filters {empty.tolist()} cover no frequency bin)"
        )
    return weights, edges[1:-1]


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal type-II DCT basis rows 0..n_out-1."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    basis = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * np.sqrt(2.0 / n_in)
    basis[0] /= np.sqrt(2.0)
    return basis


def filterbank_energies(frames: np.ndarray, sample_rate_hz: int, n_mels: int = N_MELS) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if not np.all(np.isfinite(frames)):
        raise NumericError("non-finite samples in frames")
    n_fft = next_pow2(frames.shape[1])
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    weights, _ = mel_filterbank(n_mels, n_fft, sample_rate_hz)
    return power @ weights.T


def compute_mfcc(frames: np.ndarray, sample_rate_hz: int, n_mels: int = N_MELS, n_ceps: int = N_CEPS,
                 log_floor: float = LOG_FLOOR) -> FeatureSequence:
    """MFCC coefficients 1..n_ceps (c0 dropped) of already-windowed frames."""
    if not 1 <= n_ceps < n_mels:
        raise ConfigError(f"need 1 <= n_ceps < n_mels, got n_ceps={n_ceps}, n_mels={n_mels}")
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    energies = filterbank_energies(frames, sample_rate_hz, n_mels)
    log_e = np.log(np.maximum(energies, log_floor))
    ceps = log_e @ dct_matrix(n_ceps + 1, n_mels)[1:].T
    return FeatureSequence(ceps, frame_length_samples=frames.shape[1])


# -- VAD / CMVN ------------------------------------------------------------

def frame_log_energy_db(frames: np.ndarray) -> np.ndarray:
    frames = np.atleast_2d(frames)
    return 10.0 * np.log10(np.maximum(np.sum(frames**2, axis=1), LOG_FLOOR))


def energy_vad(features_or_clip, threshold_factor: float = VAD_THRESHOLD_DB,
               frame_len: int = FRAME_LEN, frame_shift: int = FRAME_SHIFT) -> np.ndarray:
    """Mark frames whose log energy lies within ``threshold_factor`` dB of the loudest.

    Accepts an AudioClip (framed with ``frame_len``/``frame_shift`` and no
    pre-emphasis or window) or an already-framed 2-D sample array.
    """
    if threshold_factor <= 0:
        raise ConfigError(f"VAD threshold must be positive, got {threshold_factor}")
    if isinstance(features_or_clip, AudioClip):
        frames = _raw_frames(features_or_clip.samples, frame_len, frame_shift)
    else:
        frames = np.atleast_2d(np.asarray(features_or_clip, dtype=np.float64))
    if frames.size == 0:
        raise DataError("VAD input is empty")
    energy = frame_log_energy_db(frames)
    return (energy.max() - energy) < threshold_factor


def cmvn_normalize(fs: FeatureSequence) -> FeatureSequence:
    """Per-utterance mean/variance normalization using voiced-frame statistics."""
    voiced = fs.voiced
    if voiced.shape[0] < 2:
        raise DataError(f"{fs.source_id or 'features'}: CMVN needs >= 2 voiced frames, got {voiced.shape[0]}")
    mean = voiced.mean(axis=0)
    std = voiced.std(axis=0)
    flat = std <= 1e-12
    if np.any(flat):
        warnings.warn(
            f"{fs.source_id or 'features'}: zero-variance coefficient(s) {np.flatnonzero(flat).tolist()}; "
            "dividing by 1",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.where(flat, 1.0, std)
    return replace(fs, frames=(fs.frames - mean) / std, normalized=True)


def fix_frame_count(fs: FeatureSequence, n_frames: int) -> FeatureSequence:
    """Truncate, or pad by cycling, to exactly ``n_frames`` frames."""
    idx = np.resize(np.arange(fs.frames.shape[0]), n_frames)
    return replace(fs, frames=fs.frames[idx], vad_mask=fs.vad_mask[idx])


def extract_features(clip: AudioClip, frame_len: int = FRAME_LEN, frame_shift: int = None,
                     preemphasis: float = PREEMPHASIS, n_mels: int = N_MELS, n_ceps: int = N_CEPS,
                     vad_threshold_db: float = VAD_THRESHOLD_DB, frames_per_utterance: int = 0,
                     normalize: bool = True) -> FeatureSequence:
    """Full front-end chain for one clip."""
    if frame_shift is None:
        frame_shift = frame_len // 2
    windowed = frame_signal(clip, frame_len, frame_shift, preemphasis)
    fs = compute_mfcc(windowed, clip.sample_rate_hz, n_mels, n_ceps)
    mask = energy_vad(clip, vad_threshold_db, frame_len, frame_shift)
    fs = replace(fs, vad_mask=mask, frame_shift_samples=frame_shift, source_id=clip.source_id)
    if frames_per_utterance:
        fs = fix_frame_count(fs, frames_per_utterance)
    return cmvn_normalize(fs) if normalize else fs


# -- feature files ---------------------------------------------------------

def features_to_bytes(fs: FeatureSequence) -> bytes:
    w = Writer(FEATURE_MAGIC)
    w.u32(FEATURE_VERSION)
    w.u32(fs.frames.shape[0])
    w.u32(fs.frames.shape[1])
    w.f64(fs.frames)
    w.raw(fs.vad_mask.astype(np.uint8).tobytes())
    return w.getvalue()


def features_from_bytes(data: bytes, normalized: bool = True, source_id: str = "") -> FeatureSequence:
    r = Reader(data, FEATURE_MAGIC, "feature file")
    check_version(r.u32(), FEATURE_VERSION, "feature file")
    t, d = r.u32(), r.u32()
    frames = r.f64(t, d)
    mask = np.frombuffer(r.raw(t), dtype=np.uint8)
    r.expect_end()
    if np.any(mask > 1):
        raise FormatError("feature file: VAD mask bytes must be 0 or 1")
    return FeatureSequence(frames, mask.astype(bool), normalized=normalized, source_id=source_id)


def save_features(path, fs: FeatureSequence) -> None:
    with open(path, "wb") as fh:
        fh.write(features_to_bytes(fs))


def load_features(path, normalized: bool = True) -> FeatureSequence:
    """Load an IVXF file.

    The format carries no normalization flag; files written by this
    package's ``features`` stage are post-CMVN, hence the default.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    sid = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return features_from_bytes(data, normalized=normalized, source_id=sid)
