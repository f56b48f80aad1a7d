"""Synthetic labeled Doppler recordings for end-to-end pipeline testing.

Each synthetic pregnancy encodes gestational age monotonically in the beat
train: baseline heart rate falls from 160 bpm at month 5 to 148 bpm at
month 9 while beat-to-beat variability grows from 2 ms to 10 ms. A beat
emits two valve-like noise bursts inside the 25-600 Hz analysis band. The
presumed label deviates from the true age by a per-pregnancy Gaussian
presumption error.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal_io import (
    AudioRecording,
    DatasetManifest,
    ManifestEntry,
    write_manifest,
    write_wav,
)

PAPER_MONTH_COUNTS = {5: 15, 6: 77, 7: 162, 8: 186, 9: 253}

# beat-train encoding of gestational age
FHR_BASE_BPM = 160.0
FHR_SLOPE_BPM_PER_MONTH = -3.0
RR_STD_BASE_MS = 2.0
RR_STD_SLOPE_MS_PER_MONTH = 2.0
AR_COEFF = 0.6  # first-order autoregressive RR jitter

# valve-like burst morphology
BURST_SPECS = (
    # (duration_s, center_hz, bandwidth_hz, amplitude)
    (0.030, 150.0, 100.0, 1.0),
    (0.020, 350.0, 150.0, 0.6),
)
SECOND_BURST_RR_FRACTION = 0.18

BAND_LOW_HZ = 25.0
BAND_HIGH_HZ = 600.0


@dataclass
class SynthConfig:
    ga_months: float
    duration_s: float = 300.0
    fs_hz: int = 4000
    snr_db: float | None = 6.0  # None means no added noise
    eta_std_months: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 5.0 <= self.ga_months <= 9.0:
            raise ValueError("ga_months must be in [5, 9]")
        if self.duration_s <= 1.0:
            raise ValueError("duration_s must exceed 1 s")
        if self.eta_std_months < 0:
            raise ValueError("eta_std_months must be >= 0")


@dataclass
class SynthRecording:
    audio: AudioRecording
    true_ga_months: float
    presumed_ga_months: int
    beat_times: np.ndarray


def mean_fhr_bpm(ga_months: float) -> float:
    return FHR_BASE_BPM + FHR_SLOPE_BPM_PER_MONTH * (ga_months - 5.0)


def rr_std_s(ga_months: float) -> float:
    return (RR_STD_BASE_MS + RR_STD_SLOPE_MS_PER_MONTH * (ga_months - 5.0)) / 1000.0


def generate_beat_train(cfg: SynthConfig) -> np.ndarray:
    """Beat times in seconds with AR(1) beat-to-beat jitter."""
    rng = np.random.default_rng([cfg.seed, 0])
    mean_rr = 60.0 / mean_fhr_bpm(cfg.ga_months)
    sigma = rr_std_s(cfg.ga_months)
    innovation = sigma * np.sqrt(1.0 - AR_COEFF**2)

    times = []
    t = rng.uniform(0.0, mean_rr)
    jitter = rng.normal(0.0, sigma)
    while t < cfg.duration_s:
        times.append(t)
        t += mean_rr + jitter
        jitter = AR_COEFF * jitter + rng.normal(0.0, innovation)
    return np.array(times)


@lru_cache(maxsize=None)
def _burst_sos(center_hz: float, bandwidth_hz: float, fs_hz: int) -> np.ndarray:
    low = max(center_hz - bandwidth_hz / 2.0, 1.0)
    high = min(center_hz + bandwidth_hz / 2.0, fs_hz / 2.0 - 1.0)
    return sps.butter(4, [low, high], btype="bandpass", fs=fs_hz, output="sos")


def _make_burst(
    rng: np.random.Generator, duration_s: float, center_hz: float,
    bandwidth_hz: float, amplitude: float, fs_hz: int,
) -> np.ndarray:
    """Hann-enveloped band-limited noise burst with unit-RMS core."""
    n = int(round(duration_s * fs_hz))
    preroll = 4 * int(round(fs_hz / bandwidth_hz))  # let the filter settle
    noise = rng.standard_normal(n + preroll)
    shaped = sps.sosfilt(_burst_sos(center_hz, bandwidth_hz, fs_hz), noise)[preroll:]
    rms = np.sqrt(np.mean(shaped**2))
    if rms > 0:
        shaped = shaped / rms
    return amplitude * np.hanning(n) * shaped


def synth_doppler(beats: np.ndarray, cfg: SynthConfig) -> AudioRecording:
    """Render a beat train as Doppler-like audio: two bursts per beat."""
    fs = cfg.fs_hz
    n_total = int(round(cfg.duration_s * fs))
    audio = np.zeros(n_total)
    rng = np.random.default_rng([cfg.seed, 1])
    mean_rr = 60.0 / mean_fhr_bpm(cfg.ga_months)

    for i, tb in enumerate(beats):
        rr = (beats[i + 1] - tb) if i + 1 < len(beats) else mean_rr
        offsets = (0.0, SECOND_BURST_RR_FRACTION * rr)
        for (dur, f0, bw, amp), off in zip(BURST_SPECS, offsets):
            start = int(round((tb + off) * fs))
            if start >= n_total:
                continue
            burst = _make_burst(rng, dur, f0, bw, amp, fs)
            stop = min(start + len(burst), n_total)
            audio[start:stop] += burst[: stop - start]

    return AudioRecording(samples=audio, sample_rate_hz=fs)


def _band_energy(x: np.ndarray, fs: int, low: float, high: float) -> float:
    spectrum = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), d=1.0 / fs)
    mask = (freqs >= low) & (freqs <= high)
    return float(np.sum(np.abs(spectrum[mask]) ** 2))


def add_noise(
    audio: AudioRecording, snr_db: float | None, rng: np.random.Generator
) -> AudioRecording:
    """Add white noise calibrated to the requested in-band (25-600 Hz) SNR."""
    if snr_db is None or np.isinf(snr_db):
        return AudioRecording(
            samples=audio.samples.copy(),
            sample_rate_hz=audio.sample_rate_hz,
            patient_id=audio.patient_id,
            visit_id=audio.visit_id,
            recording_id=audio.recording_id,
        )
    x = audio.samples
    signal_energy = float(np.sum(x**2))
    if signal_energy == 0.0:
        raise ValueError("cannot set an SNR on a silent signal")
    fs = audio.sample_rate_hz
    noise = rng.standard_normal(len(x))
    e_sig = _band_energy(x, fs, BAND_LOW_HZ, BAND_HIGH_HZ)
    e_noise = _band_energy(noise, fs, BAND_LOW_HZ, BAND_HIGH_HZ)
    scale = np.sqrt(e_sig / (e_noise * 10.0 ** (snr_db / 10.0)))
    return AudioRecording(
        samples=x + scale * noise,
        sample_rate_hz=fs,
        patient_id=audio.patient_id,
        visit_id=audio.visit_id,
        recording_id=audio.recording_id,
    )


def presumed_label(true_ga: float, eta_std: float, rng: np.random.Generator) -> int:
    """Reported whole-month label: true age plus the presumption error."""
    if not 5.0 <= true_ga <= 9.0:
        raise ValueError("true_ga must be in [5, 9]")
    eta = rng.normal(0.0, eta_std) if eta_std > 0 else 0.0
    return int(np.clip(np.floor(true_ga + eta + 0.5), 5, 9))


def _month_quota(n_patients: int, distribution: dict[int, float]) -> list[int]:
    """Largest-remainder apportionment of patients to months."""
    months = sorted(distribution)
    total = sum(distribution[m] for m in months)
    exact = {m: n_patients * distribution[m] / total for m in months}
    counts = {m: int(np.floor(exact[m])) for m in months}
    short = n_patients - sum(counts.values())
    by_remainder = sorted(months, key=lambda m: exact[m] - counts[m], reverse=True)
    for m in by_remainder[:short]:
        counts[m] += 1
    out = []
    for m in months:
        out.extend([m] * counts[m])
    return out


def generate_synth_recording(cfg: SynthConfig) -> SynthRecording:
    """One fully seeded synthetic recording with its truth."""
    rng = np.random.default_rng([cfg.seed, 2])
    beats = generate_beat_train(cfg)
    audio = synth_doppler(beats, cfg)
    audio = add_noise(audio, cfg.snr_db, rng)
    label_rng = np.random.default_rng([cfg.seed, 3])
    label = presumed_label(cfg.ga_months, cfg.eta_std_months, label_rng)
    return SynthRecording(
        audio=audio,
        true_ga_months=cfg.ga_months,
        presumed_ga_months=label,
        beat_times=beats,
    )


def generate_dataset(
    out_dir: str | Path,
    n_patients: int,
    month_distribution: dict[int, float] | None = None,
    base_seed: int = 0,
    duration_s: float = 300.0,
    snr_db: float | None = 6.0,
    eta_std_months: float = 0.25,
    max_recordings_per_visit: int = 2,
) -> DatasetManifest:
    """Write a labeled corpus: WAV files, manifest CSV, and a truth sidecar.

    Patients are apportioned to presumed months per the requested
    distribution; each patient has one visit with 1..max recordings. The
    per-pregnancy presumption error is constant across that patient's
    recordings. Fully deterministic in base_seed.
    """
    if n_patients < 10:
        raise ValueError("need at least 10 patients")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    distribution = month_distribution or {
        m: float(c) for m, c in PAPER_MONTH_COUNTS.items()
    }
    months = _month_quota(n_patients, distribution)

    entries: list[ManifestEntry] = []
    truth_rows: list[tuple[str, float, float]] = []
    for p_index, month in enumerate(months):
        rng = np.random.default_rng([base_seed, p_index])
        eta = rng.normal(0.0, eta_std_months) if eta_std_months > 0 else 0.0
        true_ga = float(np.clip(month - eta, 5.0, 9.0))
        label = int(np.clip(np.floor(true_ga + eta + 0.5), 5, 9))
        patient_id = f"p{p_index:04d}"
        visit_id = "v1"
        n_rec = int(rng.integers(1, max_recordings_per_visit + 1))
        truth_rows.append((patient_id, true_ga, eta))
        for r in range(n_rec):
            cfg = SynthConfig(
                ga_months=true_ga,
                duration_s=duration_s,
                fs_hz=4000,
                snr_db=snr_db,
                eta_std_months=eta_std_months,
                seed=int(rng.integers(0, 2**31)),
            )
            rec = generate_synth_recording(cfg)
            samples = rec.audio.samples
            peak = np.max(np.abs(samples))
            if peak > 0:
                samples = 0.9 * samples / peak
            fname = f"{patient_id}_{visit_id}_r{r}.wav"
            write_wav(out_dir / fname, samples, cfg.fs_hz)
            entries.append(ManifestEntry(fname, patient_id, visit_id, label))

    manifest = DatasetManifest(entries=entries)
    write_manifest(out_dir / "manifest.csv", manifest)
    with open(out_dir / "truth.csv", "w", encoding="utf-8") as fh:
        fh.write("patient_id,true_ga,eta\n")
        for pid, ga, eta in truth_rows:
            fh.write(f"{pid},{ga:.6f},{eta:.6f}\n")
    return manifest
