"""Disparity evaluation metrics, aggregation, and run comparison.

EPE and D1-all follow the usual definitions: mean absolute disparity
error over valid pixels, and the percentage of valid pixels whose error
exceeds 3 px. Aggregation averages per sequence first and then over
sequences, so the dataset mean is independent of sequence lengths.

Sums use `math.fsum` so results are the correctly rounded values and
agree exactly with any per-pixel oracle computed the same way.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigError, ContractError, ShapeError, Tensor

D1_THRESHOLD_PX = 3.0


@dataclass(frozen=True)
class MetricsRecord:
    sequence_id: str
    frame_index: int
    epe: float
    d1_all: float
    valid_pixel_count: int


@dataclass
class AggregateReport:
    per_sequence: dict[str, tuple[float, float]]  # id -> (epe, d1_all)
    dataset_epe: float
    dataset_d1: float
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # (t, epe, d1)


def frame_metrics(pred, gt, valid: np.ndarray | None = None,
                  sequence_id: str = "", frame_index: int = 0) -> MetricsRecord:
    """EPE and D1-all of one frame over valid ground-truth pixels."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    p = p.reshape(-1)
    g_flat = g.reshape(-1)
    if p.shape != g_flat.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if valid is None:
        v = np.ones(p.shape, dtype=bool)
    else:
        v = np.asarray(valid, dtype=bool).reshape(-1)
        if v.shape != p.shape:
            raise ShapeError(f"valid mask shape {valid.shape} does not match {pred.shape}")
    count = int(v.sum())
    if count == 0:
        raise ContractError("frame metrics require at least one valid pixel")
    err = np.abs(p[v] - g_flat[v])
    epe = math.fsum(err.tolist()) / count
    bad = int(np.count_nonzero(err > D1_THRESHOLD_PX))
    return MetricsRecord(sequence_id, frame_index, epe, 100.0 * bad / count, count)


def aggregate(records: list[MetricsRecord]) -> AggregateReport:
    """Two-stage averaging: per sequence, then across sequences."""
    if not records:
        raise ContractError("aggregate requires at least one record")
    by_seq: dict[str, list[MetricsRecord]] = {}
    for r in records:
        by_seq.setdefault(r.sequence_id, []).append(r)
    per_sequence = {}
    for sid in sorted(by_seq):
        rs = by_seq[sid]
        epe = math.fsum(r.epe for r in rs) / len(rs)
        d1 = math.fsum(r.d1_all for r in rs) / len(rs)
        per_sequence[sid] = (epe, d1)
    n = len(per_sequence)
    dataset_epe = math.fsum(v[0] for v in per_sequence.values()) / n
    dataset_d1 = math.fsum(v[1] for v in per_sequence.values()) / n
    common = min(len(rs) for rs in by_seq.values())
    indexed = {sid: sorted(rs, key=lambda r: r.frame_index) for sid, rs in by_seq.items()}
    curve = []
    for t in range(common):
        epe_t = math.fsum(indexed[sid][t].epe for sid in sorted(indexed)) / len(indexed)
        d1_t = math.fsum(indexed[sid][t].d1_all for sid in sorted(indexed)) / len(indexed)
        curve.append((t, epe_t, d1_t))
    return AggregateReport(per_sequence, dataset_epe, dataset_d1, curve)


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    d1_all: float
    epe: float
    delta_d1: float
    delta_epe: float


def compare_runs(reports: dict[str, AggregateReport], baseline: str) -> list[ComparisonRow]:
    """Delta table against a named baseline run."""
    if baseline not in reports:
        raise ConfigError(f"unknown baseline run '{baseline}'; have {sorted(reports)}")
    base = reports[baseline]
    rows = []
    for name in reports:
        rep = reports[name]
        rows.append(ComparisonRow(
            method=name,
            d1_all=rep.dataset_d1,
            epe=rep.dataset_epe,
            delta_d1=rep.dataset_d1 - base.dataset_d1,
            delta_epe=rep.dataset_epe - base.dataset_epe,
        ))
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, records: list[MetricsRecord], run_id: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["run_id", "sequence", "frame", "epe", "d1_all", "valid_pixels"])
        for r in records:
            writer.writerow([run_id, r.sequence_id, r.frame_index,
                             _fmt(r.epe), _fmt(r.d1_all), r.valid_pixel_count])


def read_metrics_csv(path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(MetricsRecord(
                sequence_id=row["sequence"],
                frame_index=int(row["frame"]),
                epe=float(row["epe"]),
                d1_all=float(row["d1_all"]),
                valid_pixel_count=int(row["valid_pixels"]),
            ))
    return records


def write_curve_csv(path, report: AggregateReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "epe", "d1_all"])
        for t, epe, d1 in report.curve:
            writer.writerow([t, _fmt(epe), _fmt(d1)])


def write_report_csv(path, report: AggregateReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scope", "epe", "d1_all"])
        writer.writerow(["dataset", _fmt(report.dataset_epe), _fmt(report.dataset_d1)])
        for sid, (epe, d1) in report.per_sequence.items():
            writer.writerow([sid, _fmt(epe), _fmt(d1)])


def write_compare_csv(path, rows: list[ComparisonRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "d1_all", "epe", "delta_d1", "delta_epe"])
        for r in rows:
            writer.writerow([r.method, _fmt(r.d1_all), _fmt(r.epe),
                             _fmt(r.delta_d1), _fmt(r.delta_epe)])
