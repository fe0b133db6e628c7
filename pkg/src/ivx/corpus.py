"""Synthetic source-filter speaker corpus with controllable channel mismatch.

Each utterance is a sequence of vowel-like syllables: a glottal pulse
train at the speaker's f0, spectrally tilted, passed through a cascade of
formant resonators scaled to the speaker's vocal tract, then through a
channel filter with additive white noise.
"""

import csv
import os
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DataError
from .frontend import AudioClip, write_wav

SAMPLE_RATE = 16000
MANIFEST_FIELDS = ["utterance_id", "speaker_id", "channel_id", "gender", "split", "path"]

# neutral-vowel formants of a reference male vocal tract (Hz)
MALE_FORMANTS = (500.0, 1500.0, 2500.0)
FEMALE_TRACT_SCALE = 1.17
# one-pole glottal source low-pass coefficients per gender
MALE_TILT = 0.84
FEMALE_TILT = 0.91
FORMANT_BANDWIDTHS = (80.0, 110.0, 160.0)
# per-vowel multipliers of the neutral formants
VOWELS = np.array([
    [1.50, 0.80, 1.00],  # a
    [0.56, 1.53, 1.20],  # i
    [0.60, 0.60, 0.90],  # u
    [0.90, 1.25, 1.05],  # e
    [1.00, 0.65, 0.95],  # o
    [1.00, 1.00, 1.00],  # schwa
])


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    gender: str
    f0_hz: float
    formants_hz: Tuple[float, float, float]
    jitter: float = 0.02
    tilt: float = 0.9  # one-pole glottal low-pass coefficient

    def __post_init__(self):
        if not 60.0 <= self.f0_hz <= 400.0:
            raise ConfigError(f"{self.speaker_id}: f0 {self.f0_hz:.1f} Hz outside [60, 400]")
        f = self.formants_hz
        if len(f) != 3 or not (0 < f[0] < f[1] < f[2]):
            raise ConfigError(f"{self.speaker_id}: formants must be three increasing frequencies, got {f}")
        if not 0.0 <= self.tilt < 1.0 or self.jitter < 0:
            raise ConfigError(f"{self.speaker_id}: invalid tilt/jitter")


@dataclass(frozen=True)
class ChannelProfile:
    channel_id: str
    b: Tuple[float, ...]
    a: Tuple[float, ...]
    noise_snr_db: float = 30.0

    def __post_init__(self):
        if self.noise_snr_db < 0:
            raise ConfigError(f"{self.channel_id}: SNR must be >= 0 dB")
        if not self.a or self.a[0] == 0:
            raise ConfigError(f"{self.channel_id}: leading denominator coefficient must be non-zero")
        poles = np.roots(self.a) if len(self.a) > 1 else np.array([])
        if poles.size and np.max(np.abs(poles)) >= 1.0:
            raise ConfigError(f"{self.channel_id}: unstable channel filter (pole radius {np.max(np.abs(poles)):.3f})")


@dataclass
class CorpusSpec:
    ubm_speakers: int = 10
    ubm_utts_per_speaker: int = 4
    task_speakers: int = 20
    train_utts_per_speaker: int = 10
    test_utts_per_speaker: int = 5
    duration_s: float = 3.0
    male_ratio: float = 0.5
    n_channels: int = 4
    cross_channel: bool = False
    sample_rate_hz: int = SAMPLE_RATE

    def validate(self) -> None:
        if self.task_speakers < 1:
            raise DataError("corpus needs at least one enrollment/test speaker")
        if self.train_utts_per_speaker < 1 or self.test_utts_per_speaker < 0 or self.ubm_speakers < 0:
            raise ConfigError("invalid utterance counts")
        if self.duration_s < 0.5:
            raise ConfigError("utterances must be at least 0.5 s long")
        if self.cross_channel and self.n_channels < 2:
            raise ConfigError("cross-channel mode needs at least two channels")
        if self.n_channels < 1:
            raise ConfigError("need at least one channel")


@dataclass(frozen=True)
class ManifestRecord:
    utterance_id: str
    speaker_id: str
    channel_id: str
    gender: str
    split: str
    path: str


@dataclass
class Manifest:
    records: List[ManifestRecord] = field(default_factory=list)
    seed: int = 0

    def split(self, name: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict:
        return {r.utterance_id: r for r in self.records}


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys]))


def sample_speakers(n: int, male_ratio: float = 0.5, seed: int = 0, prefix: str = "spk") -> List[SpeakerProfile]:
    """Gender-bimodal speaker profiles; the first round(n*male_ratio) are male."""
    if n < 1:
        raise ConfigError("need at least one speaker")
    if not 0.0 <= male_ratio <= 1.0:
        raise ConfigError("male_ratio must lie in [0, 1]")
    n_male = int(round(n * male_ratio))
    rng = _rng(seed, 1)
    out = []
    for i in range(n):
        male = i < n_male
        f0 = float(np.clip(rng.normal(120.0 if male else 210.0, 20.0), 70.0, 350.0))
        scale = (1.0 if male else FEMALE_TRACT_SCALE) * rng.normal(1.0, 0.03)
        offsets = rng.normal(1.0, 0.02, size=3)
        formants = np.array(MALE_FORMANTS) * scale * offsets
        formants = tuple(float(f) for f in np.maximum.accumulate(formants + np.array([0.0, 1.0, 2.0])))
        out.append(SpeakerProfile(
            speaker_id=f"{prefix}{i:03d}",
            gender="m" if male else "f",
            f0_hz=f0,
            formants_hz=formants,
            jitter=float(rng.uniform(0.01, 0.04)),
            tilt=float(np.clip(rng.normal(MALE_TILT if male else FEMALE_TILT, 0.015), 0.5, 0.98)),
        ))
    return out


def sample_channels(n: int, seed: int = 0, snr_db: float = 30.0) -> List[ChannelProfile]:
    """Second-order IIR channels with one random resonance/anti-resonance pair."""
    rng = _rng(seed, 2)
    out = []
    for i in range(n):
        pr, pa = rng.uniform(0.3, 0.8), rng.uniform(0.1, np.pi - 0.1)
        zr, za = rng.uniform(0.3, 0.8), rng.uniform(0.1, np.pi - 0.1)
        a = (1.0, -2.0 * pr * np.cos(pa), pr * pr)
        b = (1.0, -2.0 * zr * np.cos(za), zr * zr)
        out.append(ChannelProfile(f"ch{i:02d}", tuple(map(float, b)), tuple(map(float, a)),
                                  float(snr_db + rng.uniform(-5.0, 5.0))))
    return out


def _resonator(freq: float, bw: float, fs: int):
    r = np.exp(-np.pi * bw / fs)
    theta = 2.0 * np.pi * freq / fs
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    # unity gain at DC
    return [sum(a)], a


def _pulse_train(n: int, f0: float, fs: int, jitter_sd: float, rng) -> np.ndarray:
    """Unit impulses at glottal closures; each period perturbed by ``jitter_sd``."""
    out = np.zeros(n)
    t = float(rng.uniform(0, fs / f0))
    while t < n:
        out[int(t)] = 1.0
        t += fs / (f0 * (1.0 + jitter_sd * rng.standard_normal()))
    return out


def synth_utterance(sp: SpeakerProfile, ch: ChannelProfile, duration_s: float = 3.0, seed: int = 0,
                    sample_rate_hz: int = SAMPLE_RATE, source_id: str = "") -> AudioClip:
    if duration_s < 0.5:
        raise ConfigError("duration must be at least 0.5 s")
    fs = int(sample_rate_hz)
    if max(sp.formants_hz) * VOWELS[:, 2].max() >= fs / 2:
        raise ConfigError(f"{sp.speaker_id}: formants exceed Nyquist at {fs} Hz")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    voiced = np.zeros(n)
    f0_utt = sp.f0_hz * (1.0 + sp.jitter * rng.standard_normal())
    pos = int(rng.uniform(0.02, 0.08) * fs)
    # phonetically balanced content: every vowel once per shuffled cycle
    vowel_order = []
    while pos < n:
        if not vowel_order:
            vowel_order = list(rng.permutation(len(VOWELS)))
        seg_len = int(rng.uniform(0.12, 0.30) * fs)
        end = min(n, pos + seg_len)
        if end - pos > 32:
            seg_f0 = f0_utt * (1.0 + sp.jitter * rng.standard_normal())
            src = _pulse_train(end - pos, seg_f0, fs, 0.2 * sp.jitter, rng)
            src = lfilter([1.0 - sp.tilt], [1.0, -sp.tilt], src)
            src = lfilter([1.0 - sp.tilt], [1.0, -sp.tilt], src)
            # lip radiation: first difference removes the source's DC bump
            src = lfilter([1.0, -1.0], [1.0], src)
            vowel = VOWELS[vowel_order.pop()]
            formants = np.sort(np.array(sp.formants_hz) * vowel)
            for f, bw in zip(formants, FORMANT_BANDWIDTHS):
                b, a = _resonator(f, bw, fs)
                src = lfilter(b, a, src)
            env = np.hanning(end - pos) ** 0.5
            voiced[pos:end] += src * env * rng.uniform(0.6, 1.0)
        pos = end + int(rng.uniform(0.03, 0.12) * fs)
    shaped = lfilter(ch.b, ch.a, voiced)
    power = np.mean(shaped**2)
    noise_sd = np.sqrt(power / (10.0 ** (ch.noise_snr_db / 10.0))) if power > 0 else 1e-4
    signal = shaped + noise_sd * rng.standard_normal(n)
    peak = np.max(np.abs(signal))
    return AudioClip(0.9 * signal / peak if peak > 0 else signal, fs, source_id=source_id)


def _assign_channels(spec: CorpusSpec, channels):
    ids = [c.channel_id for c in channels]
    if not spec.cross_channel:
        return ids, ids, ids
    half = max(1, len(ids) // 2)
    return ids, ids[:half], ids[half:]


def generate_corpus(spec: CorpusSpec, out_dir, seed: int = 0) -> Manifest:
    """Write WAVs plus ``manifest.csv`` under ``out_dir``.

    UBM speakers are disjoint from task speakers. Task speakers get
    ``train`` and ``test`` utterances; in cross-channel mode the two splits
    draw from disjoint channel sets.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    channels = sample_channels(spec.n_channels, seed)
    ch_by_id = {c.channel_id: c for c in channels}
    ubm_spk = sample_speakers(spec.ubm_speakers, spec.male_ratio, seed + 1, prefix="ubm") if spec.ubm_speakers else []
    task_spk = sample_speakers(spec.task_speakers, spec.male_ratio, seed + 2, prefix="spk")
    if {s.speaker_id for s in ubm_spk} & {s.speaker_id for s in task_spk}:
        raise DataError("UBM and task speaker sets overlap")
    ubm_ch, train_ch, test_ch = _assign_channels(spec, channels)

    plan = []
    for sp in ubm_spk:
        plan += [(sp, "ubm", ubm_ch) for _ in range(spec.ubm_utts_per_speaker)]
    for sp in task_spk:
        plan += [(sp, "train", train_ch) for _ in range(spec.train_utts_per_speaker)]
        plan += [(sp, "test", test_ch) for _ in range(spec.test_utts_per_speaker)]

    manifest = Manifest(seed=seed)
    counters = {}
    for i, (sp, split, pool) in enumerate(plan):
        k = counters.get(sp.speaker_id, 0)
        counters[sp.speaker_id] = k + 1
        utt_id = f"{sp.speaker_id}_{k:03d}"
        rng = _rng(seed, 3, i)
        ch = ch_by_id[pool[int(rng.integers(len(pool)))]]
        clip = synth_utterance(sp, ch, spec.duration_s, int(rng.integers(2**31)), spec.sample_rate_hz, utt_id)
        rel = f"wav/{utt_id}.wav"
        os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
        write_wav(os.path.join(out_dir, rel), clip)
        manifest.records.append(ManifestRecord(utt_id, sp.speaker_id, ch.channel_id, sp.gender, split, rel))
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in manifest.records:
            w.writerow([r.utterance_id, r.speaker_id, r.channel_id, r.gender, r.split, r.path])


def read_manifest(path) -> Manifest:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(MANIFEST_FIELDS) - set(rows[0]):
        raise DataError(f"{path}: manifest missing columns {sorted(set(MANIFEST_FIELDS) - set(rows[0]))}")
    records = [ManifestRecord(*(r[k] for k in MANIFEST_FIELDS)) for r in rows]
    if len({r.utterance_id for r in records}) != len(records):
        raise DataError(f"{path}: duplicate utterance ids")
    return Manifest(records)
