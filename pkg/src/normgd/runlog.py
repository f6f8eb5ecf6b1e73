"""Structured run logs: CSV/JSONL sinks and a re-deriving validator.

One row per optimizer step.  ``loss`` is the loss at the step's starting
iterate, so the loss change of step t is row[t+1].loss - row[t].loss.  The
``threshold`` column is 2/eta in unnormalized mode and 2*dual_grad_norm/eta
per row in normalized mode; normalized_* columns divide by the dual gradient
norm.  Floats are written with shortest round-trip formatting, so identical
runs produce byte-identical files and the validator can recompute derived
columns exactly.
"""

from __future__ import annotations

import json

SCHEMA_VERSION = 1

RUN_COLUMNS = [
    "step", "loss", "dual_grad_norm", "dir_smoothness", "sharpness", "fw_gap",
    "threshold", "normalized_dir_smoothness", "normalized_sharpness", "diverged",
]

SHARPNESS_COLUMNS = ["step", "estimate", "fw_gap", "restarts", "wall_ms"]


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    v = float(value)
    if v != v:  # NaN
        return ""
    return repr(v)


def rows_from_records(records, mode: str, eta: float) -> list[dict]:
    """RunLogRow dicts from optimizer StepRecords."""
    rows = []
    for rec in records:
        g = rec.dual_grad_norm
        has_g = g == g and g > 0.0
        row = {
            "step": rec.step,
            "loss": rec.loss_before,
            "dual_grad_norm": g,
            "dir_smoothness": rec.dir_smoothness,
            "sharpness": rec.sharpness,
            "fw_gap": rec.sharp_fw_gap,
            "threshold": rec.threshold,
            "normalized_dir_smoothness":
                (rec.dir_smoothness / g) if (has_g and rec.dir_smoothness is not None) else None,
            "normalized_sharpness":
                (rec.sharpness / g) if (has_g and rec.sharpness is not None) else None,
            "diverged": bool(rec.diverged),
        }
        rows.append(row)
    return rows


def write_run_csv(path, rows) -> None:
    with open(str(path), "w", newline="") as fh:
        fh.write(",".join(RUN_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(fmt(row[c]) for c in RUN_COLUMNS) + "\n")


def write_run_jsonl(path, rows) -> None:
    with open(str(path), "w") as fh:
        for row in rows:
            clean = {}
            for c in RUN_COLUMNS:
                v = row[c]
                if isinstance(v, float) and v != v:
                    v = None
                clean[c] = v
            fh.write(json.dumps(clean) + "\n")


def write_sharpness_csv(path, records) -> None:
    """Cadence-only sharpness trace: (step, estimate, fw_gap, restarts, wall_ms)."""
    with open(str(path), "w", newline="") as fh:
        fh.write(",".join(SHARPNESS_COLUMNS) + "\n")
        for rec in records:
            if rec.sharpness is None:
                continue
            vals = [rec.step, rec.sharpness, rec.sharp_fw_gap, rec.sharp_restarts, rec.sharp_wall_ms]
            fh.write(",".join(fmt(v) for v in vals) + "\n")


def read_run_csv(path):
    """Returns (header, rows) with typed values; empty cells become None."""
    with open(str(path)) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            row = {}
            for key, raw in zip(header, parts):
                if raw == "":
                    row[key] = None
                elif key == "step":
                    row[key] = int(raw)
                elif key == "diverged":
                    row[key] = raw == "true"
                else:
                    row[key] = float(raw)
            rows.append(row)
    return header, rows


# -- row analytics (shared by the sweep command and the acceptance suite) ----

def column(rows, key):
    return [r[key] for r in rows if r.get(key) is not None]


def tail_rows(rows, frac: float = 0.25):
    k = max(1, int(len(rows) * frac))
    return rows[len(rows) - k:]


def band_occupancy(rows, key: str, center: float, lo: float = 0.8, hi: float = 1.2) -> float:
    """Fraction of non-null values of rows[key] inside [lo, hi] * center."""
    vals = column(rows, key)
    if not vals:
        return 0.0
    inside = sum(1 for v in vals if lo * center <= v <= hi * center)
    return inside / len(vals)


def median_ratio(rows, key: str, center: float) -> float:
    vals = sorted(column(rows, key))
    if not vals:
        return float("nan")
    mid = len(vals) // 2
    med = vals[mid] if len(vals) % 2 else 0.5 * (vals[mid - 1] + vals[mid])
    return med / center


def first_crossing(rows, key: str, level: float):
    """First step whose rows[key] reaches level, or None."""
    for r in rows:
        v = r.get(key)
        if v is not None and v >= level:
            return r["step"]
    return None


def _sign(x: float) -> int:
    if x > 0.0:
        return 1
    if x < 0.0:
        return -1
    return 0


def validate_run_csv(path, mode: str, eta: float, grad_floor: float = 1e-8) -> list[str]:
    """Re-derive every derived column and the descent sign law; return problems."""
    header, rows = read_run_csv(path)
    problems = []
    if header != RUN_COLUMNS:
        problems.append(f"header mismatch: {header}")
        return problems
    for i, row in enumerate(rows):
        g = row["dual_grad_norm"]
        if g is None:
            continue
        expected_thr = 2.0 / eta if mode == "unnormalized" else 2.0 * g / eta
        if row["threshold"] != expected_thr:
            problems.append(f"row {i}: threshold {row['threshold']} != {expected_thr}")
        if row["dir_smoothness"] is not None and g > 0.0:
            want = row["dir_smoothness"] / g
            if row["normalized_dir_smoothness"] != want:
                problems.append(f"row {i}: normalized_dir_smoothness mismatch")
        if row["sharpness"] is not None and g > 0.0:
            want = row["sharpness"] / g
            if row["normalized_sharpness"] != want:
                problems.append(f"row {i}: normalized_sharpness mismatch")
    # descent sign law between consecutive rows
    for i in range(len(rows) - 1):
        row, nxt = rows[i], rows[i + 1]
        g, D = row["dual_grad_norm"], row["dir_smoothness"]
        if g is None or D is None or g <= grad_floor:
            continue
        if row["diverged"] or nxt["loss"] is None or row["loss"] is None:
            continue
        delta = nxt["loss"] - row["loss"]
        if _sign(delta) != _sign(D - row["threshold"]):
            problems.append(
                f"row {i}: sign(dLoss)={_sign(delta)} but sign(D - threshold)="
                f"{_sign(D - row['threshold'])}")
    return problems
