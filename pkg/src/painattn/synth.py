"""Synthetic heat-pain EDA recordings and the window dataset file format.

The waveform is a stand-in: a per-subject tonic level with slow sinusoidal
drift, one double-exponential skin-conductance response per stimulus whose
amplitude grows with stimulus temperature, and white Gaussian noise. The
only property callers may rely on is that response amplitude is monotone
in pain level.
"""
from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError

DATASET_MAGIC = b"PANEDA01"
NUM_LEVELS = 5
_RECORD_HEAD = struct.Struct("<HB")
_FILE_HEAD = struct.Struct("<III")


@dataclass(frozen=True)
class ProtocolConfig:
    baseline_temp: float = 32.0
    reps: int = 20
    stimulus_s: float = 4.0
    interval_s: tuple[float, float] = (8.0, 12.0)
    sample_rate: int = 512
    window_s: float = 5.5
    temp_mode: str = "verbatim"
    pain_threshold_range: tuple[float, float] = (40.0, 44.0)
    tolerance_span_range: tuple[float, float] = (4.0, 8.0)
    rise_tau: float = 0.75
    decay_tau: float = 2.0
    tonic_range: tuple[float, float] = (1.5, 2.5)
    drift_amplitude: float = 0.05

    def __post_init__(self):
        if self.temp_mode not in ("verbatim", "endpoint"):
            raise ConfigError(f"temp_mode must be 'verbatim' or 'endpoint', got {self.temp_mode!r}")
        if self.reps < 1 or self.sample_rate < 1 or self.window_s <= 0:
            raise ConfigError("reps, sample_rate and window_s must be positive")
        if self.pain_threshold_range[0] <= self.baseline_temp:
            raise ConfigError("pain threshold range must lie above the baseline temperature")
        if self.tolerance_span_range[0] <= 0:
            raise ConfigError("tolerance span must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))


@dataclass(frozen=True, eq=False)
class WindowRecord:
    subject_id: int
    level: int
    samples: np.ndarray  # float32

    def same_as(self, other: "WindowRecord") -> bool:
        return (self.subject_id == other.subject_id and self.level == other.level
                and self.samples.dtype == other.samples.dtype
                and np.array_equal(self.samples, other.samples))


def temperature_stages(pain_temp: float, tolerance_temp: float, mode: str = "verbatim",
                       baseline: float = 32.0) -> list[float]:
    """Stimulus temperatures ``[T0, T1, T2, T3, T4]``.

    ``verbatim`` steps by a quarter of the pain-to-tolerance range, so T4
    stops one step short of tolerance; ``endpoint`` steps by a third, so
    T4 equals the tolerance temperature. T0 is always the baseline.
    """
    if not pain_temp < tolerance_temp:
        raise DomainError(f"pain temperature {pain_temp} must be below tolerance {tolerance_temp}")
    if mode == "verbatim":
        step = (tolerance_temp - pain_temp) / 4.0
    elif mode == "endpoint":
        step = (tolerance_temp - pain_temp) / 3.0
    else:
        raise DomainError(f"unknown temperature mode {mode!r}")
    return [float(baseline)] + [pain_temp + i * step for i in range(4)]


def scr_kernel(t: np.ndarray, rise_tau: float, decay_tau: float) -> np.ndarray:
    """Double-exponential skin-conductance response with unit peak, zero for t < 0."""
    t_peak = np.log(decay_tau / rise_tau) * rise_tau * decay_tau / (decay_tau - rise_tau)
    peak = np.exp(-t_peak / decay_tau) - np.exp(-t_peak / rise_tau)
    out = (np.exp(-t / decay_tau) - np.exp(-t / rise_tau)) / peak
    return np.where(t >= 0, out, 0.0)


@dataclass(frozen=True)
class SubjectSession:
    """A continuous synthetic recording and its stimulus schedule."""

    subject_id: int
    trace: np.ndarray
    onsets: np.ndarray  # sample index of each stimulus onset
    levels: np.ndarray
    temperatures: list


def simulate_session(cfg: ProtocolConfig, seed: int, subject_id: int, noise: float = 0.05,
                     gain: float = 1.0, pain_temp: float | None = None,
                     tolerance_temp: float | None = None) -> SubjectSession:
    if noise < 0:
        raise DomainError(f"noise sigma must be >= 0, got {noise}")
    if gain <= 0:
        raise DomainError(f"gain must be > 0, got {gain}")
    rng = np.random.default_rng([int(seed), int(subject_id)])
    tp = rng.uniform(*cfg.pain_threshold_range) if pain_temp is None else pain_temp
    tt = tp + rng.uniform(*cfg.tolerance_span_range) if tolerance_temp is None else tolerance_temp
    if not cfg.baseline_temp < tp < tt:
        raise DomainError(f"need baseline {cfg.baseline_temp} < T_P {tp} < T_T {tt}")
    temps = temperature_stages(tp, tt, cfg.temp_mode, cfg.baseline_temp)

    levels = rng.permutation(np.repeat(np.arange(NUM_LEVELS), cfg.reps))
    gaps = rng.uniform(*cfg.interval_s, size=levels.size)
    lead_in = cfg.interval_s[1]
    onset_s = lead_in + np.concatenate([[0.0], np.cumsum(cfg.stimulus_s + gaps[:-1])])
    rate = cfg.sample_rate
    onsets = np.round(onset_s * rate).astype(np.int64)
    n = int(onsets[-1] + cfg.window_samples + lead_in * rate)
    t = np.arange(n) / rate

    tonic = rng.uniform(*cfg.tonic_range)
    period = rng.uniform(200.0, 400.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    trace = tonic + cfg.drift_amplitude * np.sin(2 * np.pi * t / period + phase)

    span = int(10 * cfg.decay_tau * rate)
    kernel = scr_kernel(np.arange(span) / rate, cfg.rise_tau, cfg.decay_tau)
    for onset, level in zip(onsets, levels):
        amp = gain * (temps[level] - cfg.baseline_temp) / (tt - cfg.baseline_temp)
        if amp:
            stop = min(n, onset + span)
            trace[onset:stop] += amp * kernel[: stop - onset]
    trace += noise * rng.standard_normal(n)
    return SubjectSession(int(subject_id), trace, onsets, levels, temps)


def generate_subject(cfg: ProtocolConfig, seed: int, subject_id: int, noise: float = 0.05,
                     gain: float = 1.0, **kwargs) -> list[WindowRecord]:
    """One window per stimulus, starting at stimulus onset, in schedule order."""
    s = simulate_session(cfg, seed, subject_id, noise, gain, **kwargs)
    w = cfg.window_samples
    return [WindowRecord(s.subject_id, int(level), s.trace[o:o + w].astype(np.float32))
            for o, level in zip(s.onsets, s.levels)]


def generate_cohort(cfg: ProtocolConfig, seed: int, subjects: int, noise: float = 0.05,
                    gain: float = 1.0) -> list[WindowRecord]:
    if subjects < 1:
        raise DomainError("need at least one subject")
    out: list[WindowRecord] = []
    for sid in range(subjects):
        out.extend(generate_subject(cfg, seed, sid, noise, gain))
    return out


# -- dataset files -----------------------------------------------------------

def dataset_bytes(records: list[WindowRecord], sample_rate: int = 512) -> bytes:
    """Encode records.

    Layout: ``PANEDA01`` | u32 count | u32 sample rate | u32 samples per
    window | count x (u16 subject, u8 level, float32 LE samples) | u32
    CRC32 over everything between the magic and the checksum.
    """
    if not records:
        raise DomainError("cannot write an empty dataset")
    spw = records[0].samples.size
    body = bytearray(_FILE_HEAD.pack(len(records), sample_rate, spw))
    for r in records:
        if r.samples.size != spw:
            raise DomainError("all records must have the same number of samples")
        if not 0 <= r.level < NUM_LEVELS or not 0 <= r.subject_id < 2 ** 16:
            raise DomainError(f"record out of range: subject {r.subject_id}, level {r.level}")
        body += _RECORD_HEAD.pack(r.subject_id, r.level)
        body += np.asarray(r.samples, dtype="<f4").tobytes()
    return DATASET_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def write_dataset(records: list[WindowRecord], path, sample_rate: int = 512):
    Path(path).write_bytes(dataset_bytes(records, sample_rate))


def parse_dataset(data: bytes) -> tuple[list[WindowRecord], dict]:
    """Decode a binary dataset; returns records and the header fields."""
    if data[:8] != DATASET_MAGIC:
        raise FormatError("not a dataset file: bad magic", 0)
    head_end = 8 + _FILE_HEAD.size
    if len(data) < head_end + 4:
        raise FormatError("dataset truncated inside header", len(data))
    count, rate, spw = _FILE_HEAD.unpack_from(data, 8)
    rec_size = _RECORD_HEAD.size + 4 * spw
    expected = head_end + count * rec_size + 4
    if len(data) != expected:
        at = min(len(data), expected)
        raise FormatError(f"dataset length {len(data)} does not match header ({expected} bytes "
                          f"for {count} records)", at)
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[8:expected - 4]) != crc:
        raise FormatError("dataset checksum mismatch", expected - 4)
    records = []
    pos = head_end
    for _ in range(count):
        sid, level = _RECORD_HEAD.unpack_from(data, pos)
        if level >= NUM_LEVELS:
            raise FormatError(f"invalid level {level}", pos)
        samples = np.frombuffer(data, dtype="<f4", count=spw, offset=pos + _RECORD_HEAD.size)
        records.append(WindowRecord(sid, level, samples.astype(np.float32)))
        pos += rec_size
    return records, {"count": count, "sample_rate": rate, "samples_per_window": spw}


def read_csv_dataset(path) -> list[WindowRecord]:
    """Rows of ``subject_id,level,s0,...,s{n-1}`` after a header line."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["subject_id", "level"]:
            raise FormatError("CSV header must start with subject_id,level", 0)
        width = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 2:
                raise FormatError(f"CSV line {lineno} has {len(row)} fields, expected {width + 2}")
            try:
                sid, level = int(row[0]), int(row[1])
                samples = np.array([float(v) for v in row[2:]], dtype=np.float32)
            except ValueError as exc:
                raise FormatError(f"CSV line {lineno}: {exc}") from exc
            if not 0 <= level < NUM_LEVELS:
                raise FormatError(f"CSV line {lineno}: level {level} outside 0..4")
            records.append(WindowRecord(sid, level, samples))
    return records


def write_csv_dataset(records: list[WindowRecord], path):
    spw = records[0].samples.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "level"] + [f"s{i}" for i in range(spw)])
        for r in records:
            w.writerow([r.subject_id, r.level] + [repr(float(v)) for v in r.samples])


def read_dataset(path) -> list[WindowRecord]:
    """Read a binary dataset, or a CSV export recognised by its header."""
    path = Path(path)
    with open(path, "rb") as fh:
        start = fh.read(10)
    if start.startswith(b"subject_id"):
        return read_csv_dataset(path)
    return parse_dataset(path.read_bytes())[0]
