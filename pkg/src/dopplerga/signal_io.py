"""Raw Doppler audio I/O and preprocessing.

Loading WAV recordings, truncation, polyphase resampling to the 4 kHz
processing rate, band-pass filtering (25-600 Hz), and dataset manifests.
"""

from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import (
    EmptyAudioError,
    FilterDesignError,
    ManifestError,
    MissingFileError,
    NonFiniteSignalError,
    ResampleError,
    WavFormatError,
)

# canonical rates of the pipeline
CAPTURE_RATE_HZ = 44100
PROCESS_RATE_HZ = 4000

# band of cardiac oscillations
BAND_LOW_HZ = 25.0
BAND_HIGH_HZ = 600.0

_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")
MANIFEST_HEADER = ["path", "patient_id", "visit_id", "ga_months"]


@dataclass
class AudioRecording:
    """A mono 1D Doppler ultrasound time series."""

    samples: np.ndarray  # float64, amplitude in [-1, 1]
    sample_rate_hz: int
    patient_id: str = ""
    visit_id: str = ""
    recording_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class ManifestEntry:
    file_path: str
    patient_id: str
    visit_id: str
    ga_months_lmp: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class BiquadSection:
    """Direct-form-II-transposed biquad, a0 normalized to 1."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    def is_stable(self) -> bool:
        poles = np.roots([1.0, self.a1, self.a2])
        return bool(np.all(np.abs(poles) < 1.0))


@dataclass(frozen=True)
class FilterCascade:
    sections: tuple[BiquadSection, ...]

    def as_sos(self) -> np.ndarray:
        return np.array(
            [[s.b0, s.b1, s.b2, 1.0, s.a1, s.a2] for s in self.sections],
            dtype=np.float64,
        )


# ---------------------------------------------------------------------------
# WAV I/O


def _read_chunks(data: bytes):
    """Yield (chunk_id, payload) pairs from a RIFF body."""
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        payload = data[pos + 8 : pos + 8 + size]
        if len(payload) < size:
            raise WavFormatError(f"chunk {cid!r} truncated ({len(payload)} of {size} bytes)")
        yield cid, payload
        pos += 8 + size + (size & 1)


def load_wav(path: str | Path) -> AudioRecording:
    """Load a RIFF/PCM WAV file as a normalized mono recording.

    Multi-channel files keep only the first channel. Samples are divided
    by the format's full-scale positive value, so full scale maps to +1.0.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, chunk in _read_chunks(data):
        if cid == b"fmt ":
            if len(chunk) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", chunk, 0)
        elif cid == b"data":
            payload = chunk
    if fmt is None or payload is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    audio_format, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise WavFormatError(f"{path}: invalid fmt fields")
    if audio_format == 1 and bits in (8, 16, 24):
        pass
    elif audio_format == 3 and bits == 32:
        pass
    else:
        raise WavFormatError(
            f"{path}: unsupported format (codec {audio_format}, {bits}-bit)"
        )

    bytes_per_sample = bits // 8
    frame_bytes = block_align if block_align else bytes_per_sample * channels
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise EmptyAudioError(f"{path}: zero-length payload")
    payload = payload[: n_frames * frame_bytes]

    raw = np.frombuffer(payload, dtype=np.uint8).reshape(n_frames, frame_bytes)
    first = raw[:, :bytes_per_sample]
    if bits == 8:
        samples = (first[:, 0].astype(np.float64) - 128.0) / 127.0
    elif bits == 16:
        samples = first.copy().view("<i2")[:, 0].astype(np.float64) / 32767.0
    elif bits == 24:
        # sign-extend 3-byte little-endian ints into int32
        ext = np.zeros((n_frames, 4), dtype=np.uint8)
        ext[:, :3] = first
        ext[:, 3] = np.where(first[:, 2] & 0x80, 0xFF, 0)
        samples = ext.view("<i4")[:, 0].astype(np.float64) / float(2**23 - 1)
    else:  # 32-bit IEEE float
        samples = first.copy().view("<f4")[:, 0].astype(np.float64)

    return AudioRecording(
        samples=samples,
        sample_rate_hz=int(rate),
        recording_id=path.stem,
    )


def write_wav(path: str | Path, samples: np.ndarray, sample_rate_hz: int) -> None:
    """Write mono 16-bit PCM. Input amplitudes are clipped to [-1, 1]."""
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, sample_rate_hz, sample_rate_hz * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data)


# ---------------------------------------------------------------------------
# Time-domain operations


def truncate_to_duration(rec: AudioRecording, seconds: float) -> AudioRecording:
    """Keep at most the first `seconds` of a recording."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    n = min(len(rec.samples), int(round(seconds * rec.sample_rate_hz)))
    return AudioRecording(
        samples=rec.samples[:n].copy(),
        sample_rate_hz=rec.sample_rate_hz,
        patient_id=rec.patient_id,
        visit_id=rec.visit_id,
        recording_id=rec.recording_id,
    )


def resample(rec: AudioRecording, target_rate_hz: int) -> AudioRecording:
    """Polyphase windowed-sinc resampling (Kaiser beta=8.6, 64 taps/phase).

    The anti-alias cutoff sits at 0.45x the smaller of the two rates.
    Targets below 1300 Hz would fold the 25-600 Hz band and are rejected.
    """
    if target_rate_hz < 1:
        raise ValueError("target rate must be positive")
    if target_rate_hz < 1300:
        raise ResampleError(
            f"target rate {target_rate_hz} Hz would alias the 25-600 Hz band"
        )
    src = rec.sample_rate_hz
    if target_rate_hz == src:
        return AudioRecording(
            samples=rec.samples.copy(),
            sample_rate_hz=src,
            patient_id=rec.patient_id,
            visit_id=rec.visit_id,
            recording_id=rec.recording_id,
        )

    g = math.gcd(src, target_rate_hz)
    up, down = target_rate_hz // g, src // g
    fs_up = src * up
    cutoff_hz = 0.45 * min(src, target_rate_hz)
    numtaps = 64 * up + 1
    taps = sps.firwin(numtaps, cutoff_hz, window=("kaiser", 8.6), fs=fs_up) * up

    y = sps.upfirdn(taps, rec.samples, up=up, down=down)
    delay = (numtaps - 1) // 2  # group delay in upsampled samples
    start = int(round(delay / down))
    out_len = int(round(len(rec.samples) * target_rate_hz / src))
    y = y[start : start + out_len]
    if len(y) < out_len:
        y = np.pad(y, (0, out_len - len(y)))

    return AudioRecording(
        samples=y,
        sample_rate_hz=int(target_rate_hz),
        patient_id=rec.patient_id,
        visit_id=rec.visit_id,
        recording_id=rec.recording_id,
    )


# ---------------------------------------------------------------------------
# Band-pass filter


def design_bandpass_butterworth(
    low_hz: float, high_hz: float, fs_hz: float
) -> FilterCascade:
    """Second-order band-pass Butterworth as a two-biquad cascade.

    Analog prototype order 2, band-pass transformed (4 poles) and mapped
    with the bilinear transform; band edges are pre-warped so the
    magnitude at each cutoff is -3 dB.
    """
    if not (0 < low_hz < high_hz < fs_hz / 2):
        raise FilterDesignError(
            f"need 0 < low < high < fs/2, got ({low_hz}, {high_hz}, fs={fs_hz})"
        )
    sos = sps.butter(2, [low_hz, high_hz], btype="bandpass", fs=fs_hz, output="sos")
    sections = []
    for b0, b1, b2, a0, a1, a2 in sos:
        sec = BiquadSection(b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0)
        if not sec.is_stable():
            raise FilterDesignError(
                f"unstable section for ({low_hz}, {high_hz}, fs={fs_hz})"
            )
        sections.append(sec)
    return FilterCascade(sections=tuple(sections))


def apply_filter(cascade: FilterCascade, rec: AudioRecording) -> AudioRecording:
    """Causal direct-form-II-transposed filtering with zero initial state."""
    finite = np.isfinite(rec.samples)
    if not finite.all():
        idx = int(np.argmin(finite))
        raise NonFiniteSignalError(f"non-finite sample at index {idx}")
    y = sps.sosfilt(cascade.as_sos(), rec.samples)
    return AudioRecording(
        samples=y,
        sample_rate_hz=rec.sample_rate_hz,
        patient_id=rec.patient_id,
        visit_id=rec.visit_id,
        recording_id=rec.recording_id,
    )


def preprocess(rec: AudioRecording, max_seconds: float = 300.0) -> AudioRecording:
    """Standard pipeline: truncate, resample to 4 kHz, band-pass 25-600 Hz."""
    rec = truncate_to_duration(rec, max_seconds)
    rec = resample(rec, PROCESS_RATE_HZ)
    cascade = design_bandpass_butterworth(BAND_LOW_HZ, BAND_HIGH_HZ, PROCESS_RATE_HZ)
    return apply_filter(cascade, rec)


# ---------------------------------------------------------------------------
# Manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a `path,patient_id,visit_id,ga_months` CSV manifest."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    entries: list[ManifestEntry] = []
    seen: set[tuple[str, str, str]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: bad header {header!r}, expected {MANIFEST_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            file_path, patient_id, visit_id, ga_raw = (f.strip() for f in row)
            if not file_path:
                raise ManifestError(f"{path}:{lineno}: empty file path")
            for name, value in (("patient_id", patient_id), ("visit_id", visit_id)):
                if not _ID_RE.match(value):
                    raise ManifestError(f"{path}:{lineno}: invalid {name} {value!r}")
            try:
                ga = int(ga_raw)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: ga_months not an integer: {ga_raw!r}"
                ) from None
            if not 5 <= ga <= 9:
                raise ManifestError(f"{path}:{lineno}: ga_months {ga} outside 5..9")
            key = (patient_id, visit_id, file_path)
            if key in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate entry {key}")
            seen.add(key)
            resolved = Path(file_path)
            if not resolved.is_absolute():
                # relative paths are relative to the manifest's directory
                resolved = Path(path).parent / resolved
            entries.append(ManifestEntry(str(resolved), patient_id, visit_id, ga))
    return DatasetManifest(entries=entries)


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.file_path, e.patient_id, e.visit_id, e.ga_months_lmp])
