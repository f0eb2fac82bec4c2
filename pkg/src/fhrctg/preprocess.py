"""Four-branch feature extraction and the masked-span pretraining sampler.

The raw 4 Hz signal is summarized three ways: per-window mean and population
variance over non-overlapping 12-sample windows, a per-window z-score of every
sample, and a random 1-of-3 downsampling of both the raw and z-scored signal.
The two sampled branches fold 4:1 so all four branches align at one value set
per tagging step (12 raw samples).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import DROPOUT_VALUE, EngineConfig, FhrRecord, SAMPLES_PER_STEP

MASK_SPAN_MIN = 4
MASK_SPAN_MAX = 12
MASK_BUDGET_FRACTION = 0.15


@dataclass(frozen=True)
class FeatureBundle:
    """The four aligned preprocessing branches for one record."""

    sampled_raw: np.ndarray  # int, length n/3
    sampled_z: np.ndarray    # float, length n/3
    means: np.ndarray        # float, length n/12
    variances: np.ndarray    # float, length n/12

    def __post_init__(self):
        for name in ("sampled_raw", "sampled_z", "means", "variances"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (
            len(self.sampled_raw)
            == len(self.sampled_z)
            == 4 * len(self.means)
            == 4 * len(self.variances)
        ):
            raise ValueError("branch lengths violate the 1:4 fusion contract")
        if len(self.variances) and self.variances.min() < 0:
            raise ValueError("variances must be nonnegative")

    @property
    def fused_len(self) -> int:
        return int(len(self.means))


@dataclass(frozen=True)
class MaskSpec:
    """Disjoint masked spans of raw indices, each 4..12 samples long."""

    spans: tuple[tuple[int, int], ...]  # (start, length)

    @property
    def total_masked(self) -> int:
        return sum(length for _, length in self.spans)

    def positions(self) -> np.ndarray:
        idx = [
            start + k for start, length in self.spans for k in range(length)
        ]
        return np.asarray(idx, dtype=np.int64)


def canonicalize_samples(samples: np.ndarray) -> np.ndarray:
    """Right-trim a sample array to a multiple of 12 (never pad)."""
    samples = np.asarray(samples)
    n = len(samples) - len(samples) % SAMPLES_PER_STEP
    return samples[:n]


def canonicalize_record(record: FhrRecord) -> FhrRecord:
    if record.n_samples % SAMPLES_PER_STEP == 0:
        return record
    trimmed = canonicalize_samples(record.samples)
    spans = tuple(
        type(s)(kind=s.kind, start=s.start, end=min(s.end, len(trimmed)))
        for s in record.annotations
        if s.start < len(trimmed)
    )
    return FhrRecord(
        id=record.id,
        samples=trimmed,
        sample_rate_hz=record.sample_rate_hz,
        annotations=spans,
        cpm_label=record.cpm_label,
        amp_label=record.amp_label,
    )


def window_stats(x, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-window mean and population variance over half-open windows
    [i*w, (i+1)*w).

    Computed with exact integer sums, so the float results are the correctly
    rounded values of the true rational statistics.
    """
    x = np.asarray(x)
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    if len(x) % w != 0:
        raise ValueError(
            f"length {len(x)} is not a multiple of window {w}; "
            "canonicalize the record first"
        )
    xi = x.reshape(-1, w).astype(np.int64)
    s = xi.sum(axis=1)
    ss = (xi * xi).sum(axis=1)
    means = s / w
    variances = (w * ss - s * s) / (w * w)
    return means, variances


def zscore(x, means: np.ndarray, variances: np.ndarray, w: int) -> np.ndarray:
    """Standardize each sample against its own window; zero-variance windows
    map to 0 (the sample sits exactly at the window mean)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) != w * len(means) or len(means) != len(variances):
        raise ValueError("stats do not match the input length")
    mu = np.repeat(means, w)
    sd = np.sqrt(np.repeat(variances, w))
    z = np.zeros_like(x)
    ok = sd > 0
    z[ok] = (x[ok] - mu[ok]) / sd[ok]
    return z


def downsample_random(x, small_w: int, keep: int, seed) -> np.ndarray:
    """Keep `keep` uniformly chosen elements (without replacement, original
    order) from every window of `small_w`; deterministic given the seed."""
    x = np.asarray(x)
    if len(x) % small_w != 0:
        raise ValueError(f"length {len(x)} is not a multiple of {small_w}")
    if keep > small_w:
        raise ValueError(f"keep {keep} exceeds window {small_w}")
    m = len(x) // small_w
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((m, small_w)), axis=1)[:, :keep]
    picks.sort(axis=1)
    idx = picks + small_w * np.arange(m)[:, None]
    return x[idx.reshape(-1)]


def _sampling_positions(n: int, small_w: int, keep: int, seed) -> np.ndarray:
    m = n // small_w
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((m, small_w)), axis=1)[:, :keep]
    picks.sort(axis=1)
    return (picks + small_w * np.arange(m)[:, None]).reshape(-1)


def build_features(record: FhrRecord, cfg: EngineConfig, seed) -> FeatureBundle:
    """Run the full four-branch extraction on one record.

    The same sampled positions are used for the raw and z branches so the two
    stay aligned in time; only the sampling is stochastic, so the mean and
    variance branches are seed-independent.
    """
    x = canonicalize_samples(record.samples)
    if len(x) == 0:
        raise ValueError(f"record {record.id} has no complete window")
    means, variances = window_stats(x, cfg.big_window)
    z = zscore(x, means, variances, cfg.big_window)
    pos = _sampling_positions(len(x), cfg.small_window, cfg.keep_per_small_window, seed)
    return FeatureBundle(
        sampled_raw=x[pos],
        sampled_z=z[pos],
        means=means,
        variances=variances,
    )


def make_pretrain_sample(x, target_len: int, seed):
    """Cut a random contiguous slice and hide a few short spans inside it.

    Every masked span is 4..12 samples (1..3 seconds) long, spans are
    disjoint, and at most 15% of the slice is hidden. Masked samples are
    replaced by the dropout sentinel 0; `targets` keeps the original values
    so the recovery loss can be computed.

    Returns (truncated, MaskSpec, targets).
    """
    x = np.asarray(x)
    if target_len % SAMPLES_PER_STEP != 0:
        raise ValueError(f"target_len {target_len} is not a multiple of {SAMPLES_PER_STEP}")
    if len(x) < target_len:
        raise ValueError(f"sequence of {len(x)} is shorter than target {target_len}")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(x) - target_len + 1))
    sliced = np.array(x[start : start + target_len])

    budget = int(np.floor(MASK_BUDGET_FRACTION * target_len))
    occupied = np.zeros(target_len, dtype=bool)
    spans: list[tuple[int, int]] = []
    masked = 0
    for _ in range(200):
        if masked + MASK_SPAN_MIN > budget:
            break
        length = int(rng.integers(MASK_SPAN_MIN, MASK_SPAN_MAX + 1))
        if masked + length > budget:
            continue
        pos = int(rng.integers(0, target_len - length + 1))
        if occupied[pos : pos + length].any():
            continue
        occupied[pos : pos + length] = True
        spans.append((pos, length))
        masked += length

    spans.sort()
    mask = MaskSpec(spans=tuple(spans))
    positions = mask.positions()
    targets = np.array(sliced[positions])
    sliced[positions] = DROPOUT_VALUE
    return sliced, mask, targets


def unmask(truncated: np.ndarray, mask: MaskSpec, targets: np.ndarray) -> np.ndarray:
    """Write the hidden values back; inverse of the masking step."""
    out = np.array(truncated)
    out[mask.positions()] = targets
    return out
