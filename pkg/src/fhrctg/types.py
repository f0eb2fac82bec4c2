"""Core domain types: monitoring records, annotation spans, tag sequences,
and the engine configuration shared by every stage of the pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE_HZ = 4
BPM_MAX = 255
DROPOUT_VALUE = 0

# One tagging step covers this many raw samples (3 seconds at 4 Hz).
SAMPLES_PER_STEP = 12

TAG_NONE = 0
TAG_ACCEL = 1
TAG_DECEL = 2

CPM_LABEL_MAX = 9
AMP_LABEL_MAX = 40


class SpanKind(enum.Enum):
    ACCEL = "accel"
    DECEL = "decel"

    @property
    def tag(self) -> int:
        return TAG_ACCEL if self is SpanKind.ACCEL else TAG_DECEL

    @classmethod
    def from_tag(cls, tag: int) -> "SpanKind":
        if tag == TAG_ACCEL:
            return cls.ACCEL
        if tag == TAG_DECEL:
            return cls.DECEL
        raise ValueError(f"tag {tag} has no span kind")


@dataclass(frozen=True)
class AnnotationSpan:
    """Half-open run [start, end) of raw sample indices marked by an expert."""

    kind: SpanKind
    start: int
    end: int

    @property
    def duration_seconds(self) -> float:
        return (self.end - self.start) / SAMPLE_RATE_HZ


@dataclass(frozen=True, eq=False)
class FhrRecord:
    """One monitoring session: 4 Hz integer bpm samples plus optional labels.

    Sample value 0 denotes signal dropout. The array is frozen after
    construction so records can be shared freely between threads.
    """

    id: str
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ
    annotations: tuple[AnnotationSpan, ...] = ()
    cpm_label: int | None = None
    amp_label: int | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.samples, dtype=np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "annotations", tuple(self.annotations))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FhrRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.sample_rate_hz == other.sample_rate_hz
            and np.array_equal(self.samples, other.samples)
            and self.annotations == other.annotations
            and self.cpm_label == other.cpm_label
            and self.amp_label == other.amp_label
        )

    def __hash__(self):
        return hash((self.id, len(self.samples)))

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_minutes(self) -> float:
        return self.n_samples / (self.sample_rate_hz * 60.0)


@dataclass(frozen=True)
class EngineConfig:
    """Global knobs for preprocessing, the model, and evaluation."""

    big_window: int = 12
    small_window: int = 3
    keep_per_small_window: int = 1
    embed_dim: int = 64
    heads: int = 4
    decoder_layers: int = 2
    pe_base: float = 10000.0
    cpm_classes: int = 10
    bpm_classes: int = 41
    iol_threshold: float = 0.5
    min_accel_run: int = 8
    min_decel_run: int = 6
    seed: int = 0

    def __post_init__(self):
        counts = {
            "big_window": self.big_window,
            "small_window": self.small_window,
            "keep_per_small_window": self.keep_per_small_window,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "decoder_layers": self.decoder_layers,
            "cpm_classes": self.cpm_classes,
            "bpm_classes": self.bpm_classes,
            "min_accel_run": self.min_accel_run,
            "min_decel_run": self.min_decel_run,
        }
        for name, value in counts.items():
            if value <= 0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if self.big_window != 4 * self.small_window:
            raise ValueError(
                "big_window must be 4x small_window "
                f"(got {self.big_window}:{self.small_window})"
            )
        if not 0.0 < self.iol_threshold <= 1.0:
            raise ValueError(f"iol_threshold must lie in (0, 1], got {self.iol_threshold}")
        if self.pe_base <= 1.0:
            raise ValueError(f"pe_base must exceed 1, got {self.pe_base}")
        if self.embed_dim % 2 != 0:
            raise ValueError(f"embed_dim must be even, got {self.embed_dim}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def fold(self) -> int:
        return self.big_window // self.small_window

    def min_run_for(self, kind: SpanKind) -> int:
        return self.min_accel_run if kind is SpanKind.ACCEL else self.min_decel_run


def validate_record(record: FhrRecord) -> list[str]:
    """Check every record invariant and describe each violation.

    Returns an empty list for a fully valid record. Validation never raises;
    each entry names the offending field and the rule it breaks.
    """
    problems: list[str] = []
    if record.sample_rate_hz != SAMPLE_RATE_HZ:
        problems.append(
            f"sample_rate_hz: must be {SAMPLE_RATE_HZ}, got {record.sample_rate_hz}"
        )
    n = record.n_samples
    if n % SAMPLES_PER_STEP != 0:
        problems.append(
            f"samples: length {n} is not a multiple of {SAMPLES_PER_STEP}; "
            "canonicalize the record first"
        )
    if n and (record.samples.min() < 0 or record.samples.max() > BPM_MAX):
        problems.append(f"samples: values must lie in [0, {BPM_MAX}]")

    by_kind: dict[SpanKind, list[AnnotationSpan]] = {}
    for span in record.annotations:
        if not 0 <= span.start < span.end <= n:
            problems.append(
                f"annotations: span {span.kind.value}[{span.start},{span.end}) "
                f"out of bounds for {n} samples"
            )
        by_kind.setdefault(span.kind, []).append(span)
    for kind, spans in by_kind.items():
        spans = sorted(spans, key=lambda s: s.start)
        for prev, cur in zip(spans, spans[1:]):
            if cur.start < prev.end:
                problems.append(
                    f"annotations: overlapping {kind.value} spans "
                    f"[{prev.start},{prev.end}) and [{cur.start},{cur.end})"
                )
    if record.cpm_label is not None and not 0 <= record.cpm_label <= CPM_LABEL_MAX:
        problems.append(
            f"cpm_label: must lie in [0, {CPM_LABEL_MAX}], got {record.cpm_label}"
        )
    if record.amp_label is not None and not 0 <= record.amp_label <= AMP_LABEL_MAX:
        problems.append(
            f"amp_label: must lie in [0, {AMP_LABEL_MAX}], got {record.amp_label}"
        )
    return problems


def tags_from_annotations(record: FhrRecord) -> np.ndarray:
    """Project annotation spans onto the tagging grid (one step = 12 samples).

    A step takes a span's tag when the span covers at least half of the step;
    if both kinds qualify the larger overlap wins, ties go to Accel.
    """
    n_steps = record.n_samples // SAMPLES_PER_STEP
    tags = np.zeros(n_steps, dtype=np.int64)
    overlap = np.zeros((n_steps, 3), dtype=np.int64)
    for span in record.annotations:
        lo = max(0, span.start // SAMPLES_PER_STEP)
        hi = min(n_steps, -(-span.end // SAMPLES_PER_STEP))
        for i in range(lo, hi):
            step_lo, step_hi = i * SAMPLES_PER_STEP, (i + 1) * SAMPLES_PER_STEP
            cover = min(span.end, step_hi) - max(span.start, step_lo)
            if cover > 0:
                overlap[i, span.kind.tag] += cover
    half = SAMPLES_PER_STEP // 2
    for i in range(n_steps):
        a, d = overlap[i, TAG_ACCEL], overlap[i, TAG_DECEL]
        if a >= half and a >= d:
            tags[i] = TAG_ACCEL
        elif d >= half:
            tags[i] = TAG_DECEL
    return tags


def spans_from_tags(tags: np.ndarray) -> tuple[AnnotationSpan, ...]:
    """Convert maximal runs of Accel/Decel tags back to raw-sample spans."""
    spans = []
    tags = np.asarray(tags)
    i = 0
    while i < len(tags):
        if tags[i] == TAG_NONE:
            i += 1
            continue
        j = i
        while j < len(tags) and tags[j] == tags[i]:
            j += 1
        spans.append(
            AnnotationSpan(
                kind=SpanKind.from_tag(int(tags[i])),
                start=i * SAMPLES_PER_STEP,
                end=j * SAMPLES_PER_STEP,
            )
        )
        i = j
    return tuple(spans)
