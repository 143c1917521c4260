"""Evaluation-side analyses of run logs: calibration error, data maps,
utilization curves, and per-subset pseudo-label accuracy.

Everything here is a pure function of logs plus (where noted) the hidden gold
labels; nothing writes back into training state. Tables round-trip through
the tab-separated format in ``write_table``/``read_table`` losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def ece(confidences, correct, bins: int = 15) -> float:
    """Expected calibration error: bin the confidences into `bins` equal-width
    bins over [0, 1] and take the sample-weighted mean absolute gap between
    per-bin accuracy and per-bin mean confidence."""
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("ece needs at least one sample")
    if conf.shape != hits.shape:
        raise ValueError("confidences and correctness are misaligned")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ValueError("confidences must lie in [0, 1]")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    total = 0.0
    n = conf.size
    for b in range(bins):
        member = idx == b
        count = int(member.sum())
        if count == 0:
            continue
        gap = abs(hits[member].mean() - conf[member].mean())
        total += (count / n) * gap
    return float(total)


@dataclass
class DataMapPoint:
    """Per-sample training-dynamics coordinates: mean and standard deviation
    of the probability assigned to the reference label across checkpoints,
    plus the mean count-gap."""

    sample_id: int
    confidence: float
    variability: float
    mean_gap: float


def data_map(records, min_checkpoints: int = 2) -> tuple[list[DataMapPoint], int]:
    """Build data-map points from snapshot records (dicts with at least
    ``id``, ``p_ref`` and ``gap``). Samples with fewer than `min_checkpoints`
    records are omitted; the count of omissions is returned alongside."""
    series: dict[int, list[tuple[float, float]]] = {}
    for rec in records:
        sid = int(rec["id"])
        series.setdefault(sid, []).append((float(rec["p_ref"]), float(rec["gap"])))
    points: list[DataMapPoint] = []
    omitted = 0
    for sid in sorted(series):
        rows = series[sid]
        if len(rows) < min_checkpoints:
            omitted += 1
            continue
        p = np.array([r[0] for r in rows])
        g = np.array([r[1] for r in rows])
        points.append(
            DataMapPoint(
                sample_id=sid,
                confidence=float(p.mean()),
                variability=float(p.std()),
                mean_gap=float(g.mean()),
            )
        )
    return points, omitted


def utilization_series(step_records) -> list[dict]:
    """Per-iteration counts of unlabeled samples contributing gradient.
    Requires a gap-free iteration range; rejects on the first missing one."""
    rows = sorted(step_records, key=lambda r: r["t"])
    if not rows:
        return []
    out = []
    prev_t = None
    for rec in rows:
        t = int(rec["t"])
        if prev_t is not None and t != prev_t + 1:
            raise ValueError(f"dynamics log has a gap: missing iteration {prev_t + 1}")
        prev_t = t
        n_easy = int(rec["n_easy"])
        n_ambiguous = int(rec["n_ambiguous"])
        batch = int(rec["batch_unlabeled"])
        out.append(
            {
                "iteration": t,
                "n_easy": n_easy,
                "n_ambiguous": n_ambiguous,
                "n_used": n_easy + n_ambiguous,
                "batch_unlabeled": batch,
                "used_ratio": (n_easy + n_ambiguous) / batch if batch else 0.0,
            }
        )
    return out


def subset_hits(part, predictions_by_id, gold_by_id) -> dict[str, tuple[int, int]]:
    """Count members and gold-correct predictions per subset of one partition.
    Easy/ambiguous use their attached pseudo-labels; hard samples are judged
    by their (unused) predictions."""
    out = {}
    for name, pairs in (("easy", part.easy), ("ambiguous", part.ambiguous)):
        n = len(pairs)
        n_correct = sum(1 for sid, label in pairs if gold_by_id[sid] == label)
        out[name] = (n, n_correct)
    hard_ids = part.hard
    n_correct = sum(1 for sid in hard_ids if gold_by_id[sid] == predictions_by_id[sid])
    out["hard"] = (len(hard_ids), n_correct)
    return out


def subset_accuracy(steps, gold_by_id) -> list[dict]:
    """Per-iteration, per-subset pseudo-label accuracy. `steps` yields
    (iteration, Partition, predictions_by_id) triples; gold labels are the
    evaluation-side reference. Empty subsets report an explicit None."""
    rows = []
    for t, part, preds in steps:
        hits = subset_hits(part, preds, gold_by_id)
        for name in ("easy", "ambiguous", "hard"):
            n, n_correct = hits[name]
            rows.append(
                {
                    "iteration": int(t),
                    "subset": name,
                    "n": n,
                    "n_correct": n_correct,
                    "accuracy": (n_correct / n) if n else None,
                }
            )
    return rows


def subset_table_from_steps(step_records) -> list[dict]:
    """Same table as ``subset_accuracy`` but read back from logged step
    records that already carry per-subset counts and correct counts."""
    rows = []
    for rec in sorted(step_records, key=lambda r: r["t"]):
        for name in ("easy", "ambiguous", "hard"):
            n = rec.get(f"n_{name}")
            n_correct = rec.get(f"{name}_correct")
            if n is None or n_correct is None:
                continue
            rows.append(
                {
                    "iteration": int(rec["t"]),
                    "subset": name,
                    "n": int(n),
                    "n_correct": int(n_correct),
                    "accuracy": (int(n_correct) / int(n)) if n else None,
                }
            )
    return rows


# --- delimited tables --------------------------------------------------------

_NA = "NA"


def _format_cell(value) -> str:
    if value is None:
        return _NA
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _parse_cell(text: str):
    if text == _NA:
        return None
    if text in ("True", "False"):
        return text == "True"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def write_table(path, columns: list[str], rows, meta: dict | None = None) -> None:
    """Tab-separated table with optional ``# key=value`` metadata lines.
    Floats are written with ``repr`` so a read-back is lossless."""
    path = Path(path)
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"# {key}={_format_cell(value)}")
    lines.append("\t".join(columns))
    for row in rows:
        if isinstance(row, dict):
            row = [row[c] for c in columns]
        lines.append("\t".join(_format_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_table(path) -> tuple[dict, list[str], list[dict]]:
    path = Path(path)
    meta: dict = {}
    columns: list[str] | None = None
    rows: list[dict] = []
    for line in path.read_text().splitlines():
        if not line:
            continue
        if line.startswith("# "):
            key, value = line[2:].split("=", 1)
            meta[key] = _parse_cell(value)
            continue
        cells = line.split("\t")
        if columns is None:
            columns = cells
            continue
        rows.append({c: _parse_cell(v) for c, v in zip(columns, cells)})
    if columns is None:
        raise ValueError(f"{path}: no header line")
    return meta, columns, rows


def export_data_map(points: list[DataMapPoint], path, omitted: int = 0) -> None:
    write_table(
        path,
        ["id", "confidence", "variability", "mean_gap"],
        ([p.sample_id, p.confidence, p.variability, p.mean_gap] for p in points),
        meta={"omitted_samples": omitted},
    )


def load_data_map(path) -> list[DataMapPoint]:
    _, _, rows = read_table(path)
    return [
        DataMapPoint(int(r["id"]), r["confidence"], r["variability"], r["mean_gap"])
        for r in rows
    ]


def read_jsonl(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
