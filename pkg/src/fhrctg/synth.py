"""Deterministic synthetic CTG generator.

Records carry exact ground truth by construction: a sinusoidal oscillation
encodes the periodic (cycles/min) and amplitude (bpm) variability labels,
transient accel/decel events ride on top with smooth 4-second ramps, and
every surviving event span is annotated. Event durations follow the normal
distributions observed for real accelerations (24 +- 6 s) and decelerations
(18 +- 5 s).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .types import (
    AMP_LABEL_MAX,
    AnnotationSpan,
    CPM_LABEL_MAX,
    FhrRecord,
    SAMPLE_RATE_HZ,
    SpanKind,
)

CLAMP_LO = 50
CLAMP_HI = 210
RAMP_SECONDS = 4.0

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SynthParams:
    baseline_bpm: int = 140
    cpm: int = 4
    amp_bpm: int = 12
    accel_rate: float = 2.5   # events per 10 minutes
    decel_rate: float = 3.0
    accel_dur_mean_s: float = 24.0
    accel_dur_sd_s: float = 6.0
    decel_dur_mean_s: float = 18.0
    decel_dur_sd_s: float = 5.0
    accel_rise_lo: int = 15
    accel_rise_hi: int = 30
    decel_drop_lo: int = 15
    decel_drop_hi: int = 40
    noise_sd: float = 2.0
    dropout_prob: float = 0.0
    minutes: int = 20

    def __post_init__(self):
        if not 0 <= self.cpm <= CPM_LABEL_MAX:
            raise ValueError(f"cpm must lie in [0, {CPM_LABEL_MAX}], got {self.cpm}")
        if not 0 <= self.amp_bpm <= AMP_LABEL_MAX:
            raise ValueError(f"amp_bpm must lie in [0, {AMP_LABEL_MAX}], got {self.amp_bpm}")
        if self.minutes not in (10, 20, 40):
            raise ValueError(f"minutes must be one of 10/20/40, got {self.minutes}")
        if self.noise_sd < 0 or not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("noise_sd must be >= 0 and dropout_prob in [0, 1)")


def _event_envelope(length: int) -> np.ndarray:
    """Flat-top envelope with raised-cosine ramps of up to 4 s on each side."""
    env = np.ones(length)
    ramp = min(int(RAMP_SECONDS * SAMPLE_RATE_HZ), length // 2)
    if ramp > 0:
        up = 0.5 * (1.0 - np.cos(np.pi * np.arange(1, ramp + 1) / ramp))
        env[:ramp] = up
        env[length - ramp :] = up[::-1]
    return env


def _place_events(rng, n, count, dur_mean_s, dur_sd_s, occupied) -> list[tuple[int, int]]:
    spans = []
    for _ in range(count):
        dur_s = rng.normal(dur_mean_s, dur_sd_s)
        while dur_s <= 0:
            dur_s = rng.normal(dur_mean_s, dur_sd_s)
        dur = max(1, int(round(dur_s * SAMPLE_RATE_HZ)))
        for _attempt in range(40):
            start = int(rng.integers(0, n))
            end = min(start + dur, n)  # clip to record bounds
            if end - start >= 1 and not occupied[start:end].any():
                occupied[start:end] = True
                spans.append((start, end))
                break
    return spans


def generate_record(params: SynthParams, seed, record_id: str | None = None) -> FhrRecord:
    """Build one record: baseline + oscillation + events + noise, rounded,
    clamped to [50, 210], then dropouts zeroed. Fully deterministic per seed."""
    rng = np.random.default_rng(seed)
    n = params.minutes * 60 * SAMPLE_RATE_HZ
    t = np.arange(n, dtype=np.float64)

    signal = params.baseline_bpm + (params.amp_bpm / 2.0) * np.sin(
        2.0 * np.pi * params.cpm * t / (60.0 * SAMPLE_RATE_HZ)
    )

    occupied = np.zeros(n, dtype=bool)
    n_accel = int(rng.poisson(params.accel_rate * params.minutes / 10.0))
    n_decel = int(rng.poisson(params.decel_rate * params.minutes / 10.0))
    accel_spans = _place_events(
        rng, n, n_accel, params.accel_dur_mean_s, params.accel_dur_sd_s, occupied
    )
    decel_spans = _place_events(
        rng, n, n_decel, params.decel_dur_mean_s, params.decel_dur_sd_s, occupied
    )

    annotations = []
    for start, end in accel_spans:
        rise = int(rng.integers(params.accel_rise_lo, params.accel_rise_hi + 1))
        signal[start:end] += rise * _event_envelope(end - start)
        annotations.append(AnnotationSpan(SpanKind.ACCEL, start, end))
    for start, end in decel_spans:
        drop = int(rng.integers(params.decel_drop_lo, params.decel_drop_hi + 1))
        signal[start:end] -= drop * _event_envelope(end - start)
        annotations.append(AnnotationSpan(SpanKind.DECEL, start, end))
    annotations.sort(key=lambda s: s.start)

    if params.noise_sd > 0:
        signal += rng.normal(0.0, params.noise_sd, size=n)

    samples = np.clip(np.rint(signal), CLAMP_LO, CLAMP_HI).astype(np.int64)
    if params.dropout_prob > 0:
        samples[rng.random(n) < params.dropout_prob] = 0

    return FhrRecord(
        id=record_id if record_id is not None else f"synth-{int(seed) & _MASK64:016x}",
        samples=samples,
        annotations=tuple(annotations),
        cpm_label=params.cpm,
        amp_label=params.amp_bpm,
    )


def _splitmix64(state: int):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64, state


_STRATIFY_CPM = list(range(1, 9))       # covers all three periodic buckets
_STRATIFY_AMP = list(range(4, 31))      # covers all three amplitude buckets


def generate_dataset(n: int, params: SynthParams, seed) -> list[FhrRecord]:
    """Generate n records with splitmix-derived per-record seeds.

    For n >= 32 the variability labels are stratified over cpm 1..8 and
    amplitude 4..30 so every Fischer bucket of both tasks is populated.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 records, got {n}")
    state = int(seed) & _MASK64
    records = []
    for i in range(n):
        child, state = _splitmix64(state)
        rec_params = params
        if n >= 32:
            rec_params = replace(
                params,
                cpm=_STRATIFY_CPM[i % len(_STRATIFY_CPM)],
                amp_bpm=_STRATIFY_AMP[i % len(_STRATIFY_AMP)],
            )
        records.append(generate_record(rec_params, child, record_id=f"synth-{i:04d}"))
    return records
