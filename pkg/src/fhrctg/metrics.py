"""Interval-overlap evaluation and clinical bucketing metrics.

The timeline of tagging steps is first partitioned into alternating event /
non-event intervals from the truth tags (runs shorter than the per-kind
minimum are demoted to non-events). Each interval is then labeled positive
when the longest predicted run of the evaluated kind inside it covers more
than the IOL threshold fraction of the interval AND strictly exceeds the
minimum run length. Undefined ratios (empty denominators) are reported as
absent, never NaN or silent zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import EngineConfig, SpanKind, TAG_NONE

FISCHER_BUCKETS = 3


@dataclass(frozen=True)
class Interval:
    start: int
    end: int  # exclusive, in tagging steps
    truth: int  # 0 or 1
    kind: SpanKind

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class IntervalLabeling:
    """Algorithm-1 truth intervals plus the Algorithm-2 per-interval verdicts."""

    intervals: list[Interval]
    predicted: list[int] = field(default_factory=list)
    iol_values: list[float] = field(default_factory=list)


def _runs(tags: np.ndarray, value: int):
    """Maximal runs of `value` as (start, end) pairs."""
    out = []
    i = 0
    n = len(tags)
    while i < n:
        if tags[i] != value:
            i += 1
            continue
        j = i
        while j < n and tags[j] == value:
            j += 1
        out.append((i, j))
        i = j
    return out


def binarize_intervals(tags, kind: SpanKind, min_true_duration_steps: int) -> IntervalLabeling:
    """Partition the timeline into truth-1 intervals (maximal runs of `kind`
    strictly longer than the threshold) and the truth-0 intervals between
    them. The result always covers [0, len(tags)) with no gaps or overlaps."""
    tags = np.asarray(tags)
    n = len(tags)
    kept = [
        (s, e) for s, e in _runs(tags, kind.tag) if e - s > min_true_duration_steps
    ]
    intervals: list[Interval] = []
    cursor = 0
    for s, e in kept:
        if s > cursor:
            intervals.append(Interval(cursor, s, 0, kind))
        intervals.append(Interval(s, e, 1, kind))
        cursor = e
    if cursor < n or not intervals:
        intervals.append(Interval(cursor, n, 0, kind))
    return IntervalLabeling(intervals=intervals)


def _longest_run_inside(tags, start: int, end: int, tag_value: int) -> int:
    best = cur = 0
    for t in range(start, end):
        if tags[t] == tag_value:
            cur += 1
            best = max(best, cur)
        else:
            cur = 0
    return best


def iol_label(
    labeling: IntervalLabeling, predicted_tags, theta: float, min_run: int
) -> IntervalLabeling:
    """Label every interval from the predicted tags: positive iff the longest
    same-kind run inside it covers more than `theta` of the interval and
    strictly exceeds `min_run` steps. Applied identically to truth-1 and
    truth-0 intervals so specificity is well defined."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"IOL threshold must lie in (0, 1], got {theta}")
    predicted_tags = np.asarray(predicted_tags)
    predicted, iol_values = [], []
    for iv in labeling.intervals:
        run = _longest_run_inside(predicted_tags, iv.start, iv.end, iv.kind.tag)
        iol = run / iv.length
        iol_values.append(iol)
        predicted.append(1 if (iol > theta and run > min_run) else 0)
    return IntervalLabeling(
        intervals=list(labeling.intervals), predicted=predicted, iol_values=iol_values
    )


@dataclass
class BinaryCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add(self, truth: int, predicted: int):
        if truth and predicted:
            self.tp += 1
        elif truth and not predicted:
            self.fn += 1
        elif not truth and predicted:
            self.fp += 1
        else:
            self.tn += 1

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def sensitivity(self):
        return _ratio(self.tp, self.tp + self.fn)

    def specificity(self):
        return _ratio(self.tn, self.tn + self.fp)

    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    def accuracy(self):
        return _ratio(self.tp + self.tn, self.total)

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "sensitivity": self.sensitivity(),
            "specificity": self.specificity(),
            "precision": self.precision(),
            "accuracy": self.accuracy(),
        }


def _ratio(num: int, den: int):
    return None if den == 0 else num / den


def count_interval_outcomes(labelings: list[IntervalLabeling]) -> BinaryCounts:
    counts = BinaryCounts()
    for lab in labelings:
        for iv, pred in zip(lab.intervals, lab.predicted):
            counts.add(iv.truth, pred)
    return counts


def evaluate_tags(
    truth_tags_list, pred_tags_list, kind: SpanKind, theta: float, cfg: EngineConfig
) -> BinaryCounts:
    """Full Algorithm-1 + Algorithm-2 pipeline over a batch of records."""
    min_run = cfg.min_run_for(kind)
    labelings = []
    for truth, pred in zip(truth_tags_list, pred_tags_list):
        base = binarize_intervals(truth, kind, min_run)
        labelings.append(iol_label(base, pred, theta, min_run))
    return count_interval_outcomes(labelings)


def iol_sweep(truth_tags_list, pred_tags_list, kind: SpanKind, theta_grid, cfg: EngineConfig):
    """Recompute sensitivity/specificity at each threshold; the result is
    monotone (sensitivity never rises, specificity never falls) in theta."""
    theta_grid = list(theta_grid)
    if not theta_grid:
        raise ValueError("theta grid is empty")
    if any(b <= a for a, b in zip(theta_grid, theta_grid[1:])):
        raise ValueError("theta grid must be strictly ascending")
    rows = []
    for theta in theta_grid:
        counts = evaluate_tags(truth_tags_list, pred_tags_list, kind, theta, cfg)
        rows.append((theta, counts.sensitivity(), counts.specificity()))
    return rows


# ---------------------------------------------------------------------------
# Fischer bucketing
# ---------------------------------------------------------------------------

def fischer_cpm(cpm: int) -> int:
    """Bucket a periodic-variability count: 0 below 2, 1 for 2..5, 2 above 5."""
    if cpm < 0:
        raise ValueError(f"cpm must be nonnegative, got {cpm}")
    if cpm < 2:
        return 0
    if cpm <= 5:
        return 1
    return 2


def fischer_bpm(bpm: int) -> int:
    """Bucket an amplitude-variability value: 0 below 5, 1 for 5..9 or above
    30, 2 for 10..30."""
    if bpm < 0:
        raise ValueError(f"bpm must be nonnegative, got {bpm}")
    if bpm < 5:
        return 0
    if bpm <= 9 or bpm > 30:
        return 1
    return 2


# ---------------------------------------------------------------------------
# ROC / AUC and confusion matrices
# ---------------------------------------------------------------------------

def roc_auc(scored: list[tuple[float, bool]]):
    """ROC by descending-score sweep with tie grouping and trapezoidal AUC.

    Returns (points, auc) where points are (fpr, tpr) from (0,0) to (1,1).
    Requires at least one positive and one negative example.
    """
    n_pos = sum(1 for _, positive in scored if positive)
    n_neg = len(scored) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    ordered = sorted(scored, key=lambda sp: -sp[0])
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j][0] == ordered[i][0]:
            tp += ordered[j][1]
            fp += not ordered[j][1]
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return points, auc


def macro_ovr_auc(prob_rows: np.ndarray, true_classes, n_classes: int):
    """One-vs-rest AUC per class, macro-averaged over the classes that have
    both positives and negatives; absent when no class qualifies."""
    prob_rows = np.asarray(prob_rows, dtype=np.float64)
    true_classes = np.asarray(true_classes)
    aucs = []
    for c in range(n_classes):
        positives = true_classes == c
        if positives.all() or not positives.any():
            continue
        scored = [(float(prob_rows[i, c]), bool(positives[i])) for i in range(len(true_classes))]
        aucs.append(roc_auc(scored)[1])
    return float(np.mean(aucs)) if aucs else None


def confusion_matrix(pred, true, k: int) -> np.ndarray:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (true, pred), 1)
    return out


def confusion_and_prf(pred, true, k: int):
    """K-class confusion matrix with per-class precision/recall/F1 and
    support-weighted averages; undefined ratios stay absent."""
    matrix = confusion_matrix(pred, true, k)
    per_class = []
    for c in range(k):
        tp = int(matrix[c, c])
        support = int(matrix[c].sum())
        predicted = int(matrix[:, c].sum())
        precision = _ratio(tp, predicted)
        recall = _ratio(tp, support)
        if precision is None or recall is None or precision + recall == 0:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        per_class.append(
            {"precision": precision, "recall": recall, "f1": f1, "support": support}
        )
    total = int(matrix.sum())
    weighted = {}
    for key in ("precision", "recall", "f1"):
        acc = 0.0
        for row in per_class:
            if row["support"] and row[key] is not None:
                acc += row[key] * row["support"]
        weighted[key] = acc / total if total else None
    return matrix, per_class, weighted


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    interval_counts: dict          # kind name -> BinaryCounts dict
    fischer_confusion_cpm: np.ndarray
    fischer_confusion_bpm: np.ndarray
    fischer_cpm_per_class: list
    fischer_bpm_per_class: list
    fischer_cpm_weighted: dict
    fischer_bpm_weighted: dict
    auc_cpm: float | None
    auc_bpm: float | None
    roc_cpm: list
    roc_bpm: list

    def to_dict(self) -> dict:
        return {
            "intervals": self.interval_counts,
            "fischer": {
                "cpm": {
                    "confusion": self.fischer_confusion_cpm.tolist(),
                    "per_class": self.fischer_cpm_per_class,
                    "weighted": self.fischer_cpm_weighted,
                    "auc": self.auc_cpm,
                    "roc": self.roc_cpm,
                },
                "bpm": {
                    "confusion": self.fischer_confusion_bpm.tolist(),
                    "per_class": self.fischer_bpm_per_class,
                    "weighted": self.fischer_bpm_weighted,
                    "auc": self.auc_bpm,
                    "roc": self.roc_bpm,
                },
            },
        }


def _bucket_probs(probs: np.ndarray, bucket_of) -> np.ndarray:
    out = np.zeros(FISCHER_BUCKETS)
    for value, p in enumerate(probs):
        out[bucket_of(value)] += p
    return out


def build_report(truth_records, predictions, cfg: EngineConfig, theta: float) -> EvalReport:
    """Evaluate predictions against truth records: IOL interval metrics per
    kind plus Fischer-bucketed confusion/AUC for both variability tasks."""
    from .types import tags_from_annotations  # local import avoids a cycle

    truth_by_id = {r.id: r for r in truth_records}
    interval_counts = {}
    pairs = []
    for pred in predictions:
        truth = truth_by_id.get(pred.record.id)
        if truth is None:
            raise ValueError(f"no truth record with id {pred.record.id!r}")
        pairs.append((truth, pred))

    for kind in (SpanKind.ACCEL, SpanKind.DECEL):
        counts = evaluate_tags(
            [tags_from_annotations(t) for t, _ in pairs],
            [p.tags for _, p in pairs],
            kind,
            theta,
            cfg,
        )
        interval_counts[kind.value] = counts.as_dict()

    cpm_true, cpm_pred, cpm_scores = [], [], []
    bpm_true, bpm_pred, bpm_scores = [], [], []
    for truth, pred in pairs:
        if truth.cpm_label is not None:
            cpm_true.append(fischer_cpm(truth.cpm_label))
            cpm_pred.append(fischer_cpm(pred.cpm_pred))
            cpm_scores.append(_bucket_probs(pred.cpm_probs, fischer_cpm))
        if truth.amp_label is not None:
            bpm_true.append(fischer_bpm(truth.amp_label))
            bpm_pred.append(fischer_bpm(pred.bpm_pred))
            bpm_scores.append(_bucket_probs(pred.bpm_probs, fischer_bpm))

    def _task(true, predicted, scores):
        if not true:
            empty = np.zeros((FISCHER_BUCKETS, FISCHER_BUCKETS), dtype=np.int64)
            return empty, [], {}, None, []
        matrix, per_class, weighted = confusion_and_prf(
            predicted, true, FISCHER_BUCKETS
        )
        auc = macro_ovr_auc(np.asarray(scores), true, FISCHER_BUCKETS)
        roc = []
        for c in range(FISCHER_BUCKETS):
            positives = [t == c for t in true]
            if any(positives) and not all(positives):
                pts, _ = roc_auc(
                    [(float(s[c]), pos) for s, pos in zip(scores, positives)]
                )
                roc.append({"bucket": c, "points": [[x, y] for x, y in pts]})
        return matrix, per_class, weighted, auc, roc

    cpm_matrix, cpm_pc, cpm_w, cpm_auc, cpm_roc = _task(cpm_true, cpm_pred, cpm_scores)
    bpm_matrix, bpm_pc, bpm_w, bpm_auc, bpm_roc = _task(bpm_true, bpm_pred, bpm_scores)

    return EvalReport(
        interval_counts=interval_counts,
        fischer_confusion_cpm=cpm_matrix,
        fischer_confusion_bpm=bpm_matrix,
        fischer_cpm_per_class=cpm_pc,
        fischer_bpm_per_class=bpm_pc,
        fischer_cpm_weighted=cpm_w,
        fischer_bpm_weighted=bpm_w,
        auc_cpm=cpm_auc,
        auc_bpm=bpm_auc,
        roc_cpm=cpm_roc,
        roc_bpm=bpm_roc,
    )
