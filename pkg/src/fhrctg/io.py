"""JSON Lines wire formats: records, predictions, and feature files.

One object per line, streamable and diffable. Records carry
{id, sample_rate_hz, samples, annotations, cpm, amp} with the annotation list
always present and the labels omitted when unknown. Predictions reuse the
record schema (annotations are the model's spans) plus the predicted classes
and probability vectors, so the evaluator consumes both sides symmetrically.
"""

from __future__ import annotations

import json

import numpy as np

from .model import Prediction
from .preprocess import FeatureBundle
from .types import AnnotationSpan, FhrRecord, SpanKind, tags_from_annotations


class DataFormatError(ValueError):
    """Malformed input file or record object."""


def record_to_dict(record: FhrRecord) -> dict:
    out = {
        "id": record.id,
        "sample_rate_hz": record.sample_rate_hz,
        "samples": record.samples.tolist(),
        "annotations": [
            {"kind": s.kind.value, "start": s.start, "end": s.end}
            for s in record.annotations
        ],
    }
    if record.cpm_label is not None:
        out["cpm"] = record.cpm_label
    if record.amp_label is not None:
        out["amp"] = record.amp_label
    return out


def record_from_dict(obj: dict) -> FhrRecord:
    try:
        spans = tuple(
            AnnotationSpan(SpanKind(a["kind"]), int(a["start"]), int(a["end"]))
            for a in obj.get("annotations", [])
        )
        return FhrRecord(
            id=str(obj["id"]),
            samples=np.asarray(obj["samples"], dtype=np.int64),
            sample_rate_hz=int(obj.get("sample_rate_hz", 4)),
            annotations=spans,
            cpm_label=None if obj.get("cpm") is None else int(obj["cpm"]),
            amp_label=None if obj.get("amp") is None else int(obj["amp"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed record object: {exc}") from exc


def prediction_to_dict(pred: Prediction) -> dict:
    out = record_to_dict(pred.record)
    out["cpm_pred"] = pred.cpm_pred
    out["bpm_pred"] = pred.bpm_pred
    out["cpm_probs"] = [float(p) for p in pred.cpm_probs]
    out["bpm_probs"] = [float(p) for p in pred.bpm_probs]
    return out


def prediction_from_dict(obj: dict) -> Prediction:
    record = record_from_dict(obj)
    try:
        return Prediction(
            record=record,
            tags=tags_from_annotations(record),
            cpm_pred=int(obj["cpm_pred"]),
            bpm_pred=int(obj["bpm_pred"]),
            cpm_probs=np.asarray(obj["cpm_probs"], dtype=np.float64),
            bpm_probs=np.asarray(obj["bpm_probs"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed prediction object: {exc}") from exc


def bundle_to_dict(record_id: str, bundle: FeatureBundle) -> dict:
    return {
        "id": record_id,
        "fused_len": bundle.fused_len,
        "sampled_raw": bundle.sampled_raw.tolist(),
        "sampled_z": bundle.sampled_z.tolist(),
        "means": bundle.means.tolist(),
        "variances": bundle.variances.tolist(),
    }


def _write_jsonl(objs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj) + "\n")


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def write_records(records, path) -> None:
    _write_jsonl((record_to_dict(r) for r in records), path)


def read_records(path) -> list[FhrRecord]:
    return [record_from_dict(obj) for obj in _read_jsonl(path)]


def write_predictions(preds, path) -> None:
    _write_jsonl((prediction_to_dict(p) for p in preds), path)


def read_predictions(path) -> list[Prediction]:
    return [prediction_from_dict(obj) for obj in _read_jsonl(path)]


def write_report(report_dict: dict, path) -> None:
    """Stable key-sorted JSON document (byte-identical across reruns)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report_dict, sort_keys=True, indent=2) + "\n")


def convert_archive_row(obj: dict) -> FhrRecord:
    """Best-effort mapping from an externally published archive row.

    The archive's schema is unpublished; this converter assumes one JSON
    object per record with the signal under one of {samples, fhr, signal}
    (bpm values at 4 Hz) and optional event lists under {accelerations,
    decelerations} as [start, end] sample pairs. Anything else is rejected.
    """
    signal = None
    for key in ("samples", "fhr", "signal"):
        if key in obj:
            signal = obj[key]
            break
    if signal is None:
        raise DataFormatError(
            "archive row has none of the recognized signal keys (samples/fhr/signal)"
        )
    spans = []
    for key, kind in (("accelerations", SpanKind.ACCEL), ("decelerations", SpanKind.DECEL)):
        for pair in obj.get(key, []):
            spans.append(AnnotationSpan(kind, int(pair[0]), int(pair[1])))
    samples = np.clip(np.asarray(signal, dtype=np.float64), 0, 255).astype(np.int64)
    return FhrRecord(
        id=str(obj.get("id", "archive")),
        samples=samples,
        annotations=tuple(sorted(spans, key=lambda s: s.start)),
        cpm_label=None if obj.get("cpm") is None else int(obj["cpm"]),
        amp_label=None if obj.get("amp") is None else int(obj["amp"]),
    )
