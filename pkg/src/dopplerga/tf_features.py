"""Time-frequency features of Doppler audio.

Each 100 ms Hamming-windowed frame of the 4 kHz signal yields a
4-dimensional vector: RMS energy, instantaneous frequency (first spectral
moment), squared instantaneous bandwidth (centralized second moment), and
the Q-factor (frequency over bandwidth). Frames hop by 10 ms, producing a
100 Hz feature stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FeatureError, NonFiniteSignalError
from .signal_io import AudioRecording

# silence / degeneracy guards
ENERGY_EPS = 1e-12
BANDWIDTH_EPS = 1e-12
Q_CAP = 1e3

FEATURE_DIM = 4
FEATURE_NAMES = ("rms_energy", "inst_freq", "inst_bandwidth_sq", "q_factor")

CACHE_MAGIC = b"DGF1"


@dataclass
class WindowConfig:
    length_samples: int = 400
    hop_samples: int = 40
    window_kind: str = "hamming"

    def __post_init__(self):
        if self.length_samples < 2:
            raise ValueError("window length must be >= 2")
        if not 1 <= self.hop_samples <= self.length_samples:
            raise ValueError("hop must be in 1..length")
        if self.window_kind != "hamming":
            raise ValueError(f"unsupported window kind {self.window_kind!r}")


@dataclass(frozen=True)
class FeatureFrame:
    rms_energy: float
    inst_freq: float
    inst_bandwidth_sq: float
    q_factor: float
    valid: bool

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.rms_energy, self.inst_freq, self.inst_bandwidth_sq, self.q_factor]
        )


@dataclass
class FeatureSequence:
    """A 100 Hz stream of feature vectors with a validity mask."""

    features: np.ndarray  # (n_frames, 4) float64
    valid: np.ndarray  # (n_frames,) bool
    recording_id: str = ""
    start_offset_samples: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.features.ndim != 2 or self.features.shape[1] != FEATURE_DIM:
            raise FeatureError(f"features must be (n, {FEATURE_DIM})")
        if len(self.valid) != len(self.features):
            raise FeatureError("validity mask length mismatch")

    def __len__(self) -> int:
        return len(self.features)

    def frame(self, i: int) -> FeatureFrame:
        e, w, bw, q = self.features[i]
        return FeatureFrame(e, w, bw, q, bool(self.valid[i]))


@dataclass
class NormalizationStats:
    mean: np.ndarray  # (4,)
    std: np.ndarray  # (4,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (FEATURE_DIM,) or self.std.shape != (FEATURE_DIM,):
            raise FeatureError("stats must have one mean/std per feature")
        if not np.all(self.std > 0):
            raise FeatureError("zero-variance feature in normalization stats")


# ---------------------------------------------------------------------------
# Frame-level operations


def hamming_window(n: int) -> np.ndarray:
    """w_m = 0.54 - 0.46 cos(2 pi m / (n-1)), m = 0..n-1."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    m = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * m / (n - 1))


def windowed_spectrum(frame: np.ndarray, window: np.ndarray) -> np.ndarray:
    """One-sided DFT (N/2+1 bins) of the windowed frame."""
    frame = np.asarray(frame, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    if frame.shape != window.shape or frame.ndim != 1:
        raise FeatureError("frame and window must be 1-D of equal length")
    if len(frame) % 2 != 0:
        raise FeatureError("frame length must be even")
    if not np.all(np.isfinite(frame)):
        raise NonFiniteSignalError("non-finite value in frame")
    return np.fft.rfft(window * frame)


def _onesided_weights(n_bins: int) -> np.ndarray:
    """Bin weights making the one-sided power sum equal the two-sided one."""
    c = np.full(n_bins, 2.0)
    c[0] = 1.0
    c[-1] = 1.0
    return c


def frame_energy(spectrum: np.ndarray) -> float:
    """Frame energy via the one-sided Parseval sum.

    Equals the time-domain energy of the windowed frame to within
    rounding: (1/N) [ |S_0|^2 + 2 sum interior |S_k|^2 + |S_{N/2}|^2 ].
    """
    power = np.abs(spectrum) ** 2
    n = 2 * (len(spectrum) - 1)
    return float(np.sum(_onesided_weights(len(spectrum)) * power) / n)


def instantaneous_frequency(spectrum: np.ndarray, energy: float) -> float:
    """Energy-weighted mean bin frequency in radians/sample, in [0, pi]."""
    if energy <= ENERGY_EPS:
        raise FeatureError("degenerate frame: energy below threshold")
    power = _onesided_weights(len(spectrum)) * np.abs(spectrum) ** 2
    n = 2 * (len(spectrum) - 1)
    omega = 2.0 * np.pi * np.arange(len(spectrum)) / n
    return float(np.sum(omega * power) / np.sum(power))


def instantaneous_bandwidth_sq(
    spectrum: np.ndarray, inst_freq: float, energy: float
) -> float:
    """Energy-weighted variance of bin frequency around inst_freq."""
    if energy <= ENERGY_EPS:
        raise FeatureError("degenerate frame: energy below threshold")
    power = _onesided_weights(len(spectrum)) * np.abs(spectrum) ** 2
    n = 2 * (len(spectrum) - 1)
    omega = 2.0 * np.pi * np.arange(len(spectrum)) / n
    return float(np.sum((omega - inst_freq) ** 2 * power) / np.sum(power))


def q_factor(inst_freq: float, bandwidth_sq: float) -> float:
    """Q = inst_freq / sqrt(bandwidth_sq), capped for near-zero bandwidth."""
    if bandwidth_sq < 0:
        raise FeatureError("bandwidth_sq must be >= 0")
    if bandwidth_sq <= BANDWIDTH_EPS:
        return Q_CAP
    return min(float(inst_freq / np.sqrt(bandwidth_sq)), Q_CAP)


# ---------------------------------------------------------------------------
# Sequence-level operations


def extract_features(
    rec: AudioRecording, cfg: WindowConfig | None = None
) -> FeatureSequence:
    """Slide a Hamming window over the recording and compute all frames.

    One frame per hop; frame i covers samples [i*hop, i*hop + N). Frames
    whose energy falls below the silence threshold are marked invalid and
    zero-filled.
    """
    cfg = cfg or WindowConfig()
    x = rec.samples
    n = cfg.length_samples
    if len(x) < n:
        raise FeatureError(
            f"recording has {len(x)} samples, need at least one window of {n}"
        )
    if not np.all(np.isfinite(x)):
        raise NonFiniteSignalError("non-finite sample in recording")

    window = hamming_window(n)
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[:: cfg.hop_samples]
    spectra = np.fft.rfft(frames * window, axis=1)  # (F, N/2+1)

    power = np.abs(spectra) ** 2 * _onesided_weights(spectra.shape[1])
    omega = 2.0 * np.pi * np.arange(spectra.shape[1]) / n
    total = power.sum(axis=1)
    energy = total / n
    valid = energy > ENERGY_EPS

    feats = np.zeros((len(frames), FEATURE_DIM))
    if valid.any():
        tv = total[valid]
        w_mean = (power[valid] * omega).sum(axis=1) / tv
        w_var = (power[valid] * (omega - w_mean[:, None]) ** 2).sum(axis=1) / tv
        w_var = np.maximum(w_var, 0.0)
        q = np.where(
            w_var <= BANDWIDTH_EPS, Q_CAP, np.minimum(w_mean / np.sqrt(np.maximum(w_var, BANDWIDTH_EPS)), Q_CAP)
        )
        feats[valid, 0] = np.sqrt(energy[valid])
        feats[valid, 1] = w_mean
        feats[valid, 2] = w_var
        feats[valid, 3] = q

    return FeatureSequence(
        features=feats,
        valid=valid,
        recording_id=rec.recording_id,
        start_offset_samples=0,
    )


def compute_normalization_stats(
    sequences: list[FeatureSequence], min_valid_frames: int = 100
) -> NormalizationStats:
    """Per-feature mean / sample std over the valid frames of a training set."""
    stacks = [s.features[s.valid] for s in sequences]
    feats = np.concatenate(stacks) if stacks else np.empty((0, FEATURE_DIM))
    if len(feats) < min_valid_frames:
        raise FeatureError(
            f"need at least {min_valid_frames} valid frames, got {len(feats)}"
        )
    mean = feats.mean(axis=0)
    std = feats.std(axis=0, ddof=1)
    if not np.all(std > 0):
        dead = [FEATURE_NAMES[i] for i in np.flatnonzero(std == 0)]
        raise FeatureError(f"zero-variance feature(s): {', '.join(dead)}")
    return NormalizationStats(mean=mean, std=std)


def normalize_features(
    seq: FeatureSequence, stats: NormalizationStats
) -> FeatureSequence:
    """Z-score valid frames; invalid frames become all-zero vectors."""
    out = np.zeros_like(seq.features)
    out[seq.valid] = (seq.features[seq.valid] - stats.mean) / stats.std
    return FeatureSequence(
        features=out,
        valid=seq.valid.copy(),
        recording_id=seq.recording_id,
        start_offset_samples=seq.start_offset_samples,
    )


# ---------------------------------------------------------------------------
# Feature cache files (DGF1)


def write_feature_cache(path: str | Path, seq: FeatureSequence) -> None:
    """Binary cache: magic, u32 frame count, u32 dim, f64 LE features, validity bytes."""
    buf = bytearray()
    buf += CACHE_MAGIC
    buf += struct.pack("<II", len(seq), FEATURE_DIM)
    buf += np.ascontiguousarray(seq.features, dtype="<f8").tobytes()
    buf += seq.valid.astype(np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_feature_cache(path: str | Path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise FeatureError(f"{path}: bad feature cache magic")
    n, dim = struct.unpack_from("<II", data, 4)
    if dim != FEATURE_DIM:
        raise FeatureError(f"{path}: unexpected feature dim {dim}")
    offset = 12
    nbytes = n * dim * 8
    feats = np.frombuffer(data, dtype="<f8", count=n * dim, offset=offset)
    feats = feats.reshape(n, dim).astype(np.float64)
    valid = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset + nbytes)
    return FeatureSequence(
        features=feats, valid=valid.astype(bool), recording_id=Path(path).stem
    )
