"""Long-format CSV, grid augmentation and the JSON fit artifact."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import confidence_band
from .curves import CurveParams
from .kalman import ComponentSeries
from .models import GrowthModelSpec, NoiseParams
from .ssm import Dataset, ModelError, Record

COLUMNS = ("group", "replicate", "time", "value")
MISSING_TOKENS = {"", "na", "nan"}
ARTIFACT_VERSION = "1"


class DataFormatError(ModelError):
    """Malformed input file; messages carry the offending line."""


def read_long_csv(path) -> Dataset:
    """Read ``group,replicate,time,value`` rows; blank/NA values become missing."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"{path}: no such file")
    records, first_line = [], {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file (a header row is required)")
        names = [h.strip().lower() for h in header]
        missing = [c for c in COLUMNS if c not in names]
        if missing:
            raise DataFormatError(f"{path}: line 1: header lacks column(s) {', '.join(missing)}")
        col = {c: names.index(c) for c in COLUMNS}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(names):
                raise DataFormatError(f"{path}: line {line}: expected {len(names)} fields, got {len(row)}")
            group = row[col["group"]].strip()
            rep = row[col["replicate"]].strip()
            if not group or not rep:
                raise DataFormatError(f"{path}: line {line}: empty group or replicate")
            try:
                t = float(row[col["time"]])
            except ValueError:
                raise DataFormatError(f"{path}: line {line}: time {row[col['time']]!r} is not a number") from None
            if not math.isfinite(t):
                raise DataFormatError(f"{path}: line {line}: time must be finite")
            raw = row[col["value"]].strip()
            if raw.lower() in MISSING_TOKENS:
                v = None
            else:
                try:
                    v = float(raw)
                except ValueError:
                    raise DataFormatError(f"{path}: line {line}: value {raw!r} is not a number") from None
                if not math.isfinite(v):
                    raise DataFormatError(f"{path}: line {line}: value must be finite")
            key = (group, rep, t)
            if key in first_line:
                raise DataFormatError(f"{path}: line {line}: duplicate record group={group!r} "
                                      f"replicate={rep!r} time={t!r} (first on line {first_line[key]})")
            first_line[key] = line
            records.append(Record(group, rep, t, v))
    return Dataset(tuple(records))


def write_long_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in data.records:
            w.writerow([r.group, r.replicate, repr(r.time), "" if r.value is None else repr(r.value)])


def scale_values(data: Dataset, factor: float) -> Dataset:
    if not math.isfinite(factor) or factor <= 0:
        raise ModelError(f"scale must be a positive number, got {factor}")
    if factor == 1.0:
        return data
    return Dataset(tuple(Record(r.group, r.replicate, r.time, None if r.value is None else r.value * factor)
                         for r in data.records))


def augment_grid(data: Dataset, step: float) -> Dataset:
    """Insert missing records at multiples of ``step`` inside each replicate's time range."""
    if not step > 0:
        raise ModelError(f"grid step must be positive, got {step}")
    spans: dict = {}
    for r in data.records:
        spans.setdefault((r.group, r.replicate), []).append(r.time)
    extra = []
    for (g, rep), ts in spans.items():
        lo, hi = min(ts), max(ts)
        have = np.sort(np.array(ts))
        for k in range(math.ceil(lo / step - 1e-9), math.floor(hi / step + 1e-9) + 1):
            t = round(k * step, 12)
            i = np.searchsorted(have, t)
            near = [have[j] for j in (i - 1, i) if 0 <= j < have.size]
            if any(abs(x - t) <= 1e-9 * max(1.0, abs(t)) for x in near):
                continue
            extra.append(Record(g, rep, t, None))
    if not extra:
        return data
    return Dataset(data.records + tuple(extra))


# ---------------------------------------------------------------- artifacts

def _clean(x):
    """JSON-ready copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _series_doc(c: ComponentSeries, level: Optional[float] = None) -> dict:
    doc = {"name": c.name, "times": c.times, "estimate": c.estimate, "variance": c.variance}
    if level is not None:
        band = confidence_band(c, level)
        doc.update(lower=band.lower, upper=band.upper, level=level)
    return doc


def series_from_doc(doc: dict) -> ComponentSeries:
    return ComponentSeries(np.array(doc["times"], dtype=float), np.array(doc["estimate"], dtype=float),
                           np.array(doc["variance"], dtype=float), doc.get("name", "component"))


def fit_to_artifact(fit, data: Dataset, *, group: str, scale: float = 1.0, level: float = 0.95) -> dict:
    """Structured document for a :class:`~growthssm.estimation.FitResult`.

    ``data`` is the (already scaled) dataset the fit used; the group's
    records are embedded so ``predict`` can re-smooth without the CSV.
    """
    spec = fit.spec
    recs = [r for r in data.records if r.group == group]
    conv = fit.convergence
    doc = {
        "version": ARTIFACT_VERSION,
        "kind": "fit",
        "group": group,
        "scale": scale,
        "origin": fit.mean.times[0] if fit.smoother is None else fit.smoother.origin,
        "spec": {"family": spec.family.value, "mode": spec.mode.value, "deviations": spec.deviations.value,
                 "K": spec.K, "replicate_labels": list(spec.replicate_labels)},
        "estimates": fit.estimates,
        "free": list(fit.free),
        "k": fit.k,
        "loglik": fit.loglik,
        "bic": fit.bic,
        "n_used": fit.n_used,
        "d": fit.d,
        "objective": fit.objective,
        "constant_scale": None if fit.constant_scale is None else
        {"constant": fit.constant_scale[0], "scale": fit.constant_scale[1]},
        "convergence": {"converged": conv.converged, "iterations": conv.iterations,
                        "evaluations": conv.evaluations, "restarts": conv.restarts,
                        "final_size": conv.final_size, "message": conv.message,
                        "trace": list(conv.trace), "start_logliks": list(conv.start_logliks)},
        "mean": _series_doc(fit.mean, level),
        "deviations": [_series_doc(c) for c in fit.deviations],
        "data": {"replicate": [r.replicate for r in recs], "time": [r.time for r in recs],
                 "value": [r.value for r in recs]},
    }
    return _clean(doc)


def dumps_artifact(doc: dict) -> str:
    return json.dumps(_clean(doc), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_artifact(doc: dict, path) -> None:
    Path(path).write_text(dumps_artifact(doc), encoding="utf-8")


def read_artifact(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataFormatError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: line {exc.lineno}: not a valid artifact ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("version") != ARTIFACT_VERSION:
        raise DataFormatError(f"{path}: unsupported artifact version {doc.get('version') if isinstance(doc, dict) else None!r}")
    return doc


def spec_from_artifact(doc: dict) -> GrowthModelSpec:
    s, est = doc["spec"], doc["estimates"]
    curve = CurveParams(**{k: est[k] for k in ("phi", "rho", "nu") if k in est})
    noise = NoiseParams(**{k: est.get(k, 0.0) for k in ("sigma2_eps", "sigma2_eta", "sigma2_dev")})
    return GrowthModelSpec(s["family"], s["mode"], curve, noise, s["K"], s["deviations"],
                           tuple(s["replicate_labels"]))


def dataset_from_artifact(doc: dict) -> Dataset:
    d = doc["data"]
    return Dataset(tuple(Record(doc["group"], r, t, v)
                         for r, t, v in zip(d["replicate"], d["time"], d["value"])))
