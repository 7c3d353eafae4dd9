"""Command-line workflows: fit, select, predict, compare, simulate, plot.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure. Every
error goes to stderr as a single line starting with ``ERROR:``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import io
from .analysis import Band, confidence_band, curve_difference, growth_rate
from .curves import CurveFamily, CurveParams, eval_g
from .estimation import OptimizerConfig, candidate_specs, fit, select_model
from .kalman import diffuse_smoother, extract_component
from .models import Deviations, GrowthModelSpec, Mode, NoiseParams, build
from .plotting import plot_band
from .ssm import Dataset, ModelError, NumericalError, Record, simulate

EXIT_USAGE = 1
EXIT_NUMERICAL = 2
COMPONENT_COLUMNS = ("component", "time", "estimate", "variance", "lower", "upper")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ helpers

def _out_path(p) -> Path:
    p = Path(p)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load(args) -> Dataset:
    return io.scale_values(io.read_long_csv(args.data), args.scale)


def _group(data: Dataset, group):
    groups = data.groups
    if group is None:
        if len(groups) != 1:
            raise UsageError(f"data holds {len(groups)} groups; pass --group (one of {', '.join(groups)})")
        return groups[0]
    if group not in groups:
        raise UsageError(f"group {group!r} not in data (have {', '.join(groups)})")
    return group


def _cfg(args) -> OptimizerConfig:
    return OptimizerConfig(max_evals=args.max_evals, multistart=args.multistart, seed=args.seed,
                           objective=args.objective)


def _split(s) -> list:
    return [x.strip() for x in s.split(",") if x.strip()]


def _component_rows(named_series, level):
    rows = []
    for name, c in named_series:
        rows.append((name, c, confidence_band(c, level)))
    return rows


def _write_component_csv(rows, path):
    with _out_path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPONENT_COLUMNS)
        for name, c, band in rows:
            for i in range(len(c)):
                w.writerow([name] + [repr(float(x[i])) for x in
                                     (c.times, c.estimate, c.variance, band.lower, band.upper)])


def _read_component_csv(path):
    out: dict = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in COMPONENT_COLUMNS):
            raise io.DataFormatError(f"{path}: line 1: expected columns {', '.join(COMPONENT_COLUMNS)}")
        for row in reader:
            try:
                vals = [float(row[c]) for c in COMPONENT_COLUMNS[1:]]
            except (TypeError, ValueError):
                raise io.DataFormatError(f"{path}: line {reader.line_num}: non-numeric field") from None
            out.setdefault(row["component"], []).append(vals)
    if not out:
        raise io.DataFormatError(f"{path}: no rows")
    return {k: np.array(v) for k, v in out.items()}


def _smooth_doc(doc, data: Dataset):
    """Re-smooth an artifact's model on ``data`` keeping the fit's time origin."""
    spec = io.spec_from_artifact(doc)
    labels = list(spec.replicate_labels) or None
    series = data.series(doc["group"], replicates=labels, origin=doc["origin"])
    model = build(spec, series)
    sm = diffuse_smoother(model, series)
    w = np.zeros(model.state_dim)
    w[0] = 1.0
    mean = extract_component(sm, w, "mean")
    devs = []
    if spec.is_fme:
        for i, lab in enumerate(model.labels[2:]):
            w = np.zeros(model.state_dim)
            w[2 + i] = 1.0
            devs.append(extract_component(sm, w, lab))
    return spec, mean, devs


def _with_times(data: Dataset, group: str, times) -> Dataset:
    """Add missing records so every time in ``times`` is on the group's grid."""
    have = np.array(sorted({r.time for r in data.records if r.group == group}))
    rep = data.replicates(group)[0]
    extra = [Record(group, rep, float(t), None) for t in times
             if not np.any(np.abs(have - t) <= 1e-9 * max(1.0, abs(t)))]
    return Dataset(data.records + tuple(extra)) if extra else data


def _fit_summary(f, out):
    print(f"model={f.label}", file=out)
    print(f"loglik={f.loglik:.10g} bic={f.bic:.10g} k={f.k} n_used={f.n_used} d={f.d}", file=out)
    print(" ".join(f"{k}={v:.6g}" for k, v in f.estimates.items()), file=out)
    if f.constant_scale is not None:
        print(f"constant={f.constant_scale[0]:.6g} scale={f.constant_scale[1]:.6g}", file=out)
    c = f.convergence
    print(f"converged={c.converged} evaluations={c.evaluations}", file=out)


def _spec_for(family, mode, deviations, data, group):
    devs = Deviations.parse(deviations)
    labels = tuple(data.replicates(group)) if devs is Deviations.RANDOM_WALK else ()
    K = len(labels) if labels else 1
    return candidate_specs([family], [mode], devs, K, labels)[0]


# ----------------------------------------------------------------- commands

def cmd_fit(args, out) -> int:
    data = _load(args)
    group = _group(data, args.group)
    spec = _spec_for(args.family, args.mode, args.deviations, data, group)
    f = fit(spec, data, _cfg(args), group=group)
    doc = io.fit_to_artifact(f, data, group=group, scale=args.scale, level=args.level)
    io.write_artifact(doc, _out_path(args.out))
    _fit_summary(f, out)
    print(f"artifact={args.out}", file=out)
    if args.figure:
        _plot_artifact(doc, args.figure)
    return 0


def cmd_select(args, out) -> int:
    data = _load(args)
    group = _group(data, args.group)
    devs = Deviations.parse(args.deviations)
    labels = tuple(data.replicates(group)) if devs is Deviations.RANDOM_WALK else ()
    cands = candidate_specs(_split(args.families), _split(args.mode), devs, max(len(labels), 1), labels)
    sel = select_model(cands, data, _cfg(args), group=group, workers=args.workers)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rank, f in enumerate(sel.ranked, 1):
        name = f"{rank:02d}_{f.spec.family.value}_{f.spec.mode.value}.json"
        io.write_artifact(io.fit_to_artifact(f, data, group=group, scale=args.scale, level=args.level),
                          outdir / name)
        rows.append([rank, f.spec.family.value, f.spec.mode.value, f.spec.deviations.value, f.k,
                     repr(f.loglik), repr(f.bic), name])
    shutil.copyfile(outdir / rows[0][-1], outdir / "winner.json")
    with (outdir / "ranking.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "family", "mode", "deviations", "k", "loglik", "bic", "artifact"])
        w.writerows(rows)
    for r in rows:
        print(f"{r[0]:>2} {r[1]:<12}{r[2]:<15} k={r[4]} loglik={float(r[5]):.6f} bic={float(r[6]):.6f}",
              file=out)
    for spec, msg in sel.failures:
        print(f"failed {spec.family.value} {spec.mode.value}: {msg}", file=sys.stderr)
    print(f"winner={rows[0][-1]}", file=out)
    return 0


def cmd_predict(args, out) -> int:
    doc = io.read_artifact(args.artifact)
    data = io.augment_grid(io.dataset_from_artifact(doc), args.grid_step)
    spec, mean, devs = _smooth_doc(doc, data)
    rows = _component_rows([("mean", mean)] + [(d.name, d) for d in devs], args.level)
    _write_component_csv(rows, args.out)
    try:
        r = growth_rate(mean)
        print(f"max_rate_per_step={r.max_rate:.6g} time_of_max={r.time_of_max:.6g} step={r.step:.6g} "
              f"max_rate_per_time={r.max_rate_per_time:.6g}", file=out)
    except ModelError as exc:
        print(f"growth rate skipped: {exc}", file=out)
    print(f"components={args.out}", file=out)
    if args.figure:
        plot_band(rows[0][2], args.figure, title=f"{spec.family.value} {spec.mode.value}", label="mean",
                  points=_points(doc), ylabel="value (scaled)" if doc["scale"] != 1 else "value")
    return 0


def cmd_compare(args, out) -> int:
    docs = [io.read_artifact(p) for p in (args.first, args.second)]
    datas = [io.dataset_from_artifact(d) for d in docs]
    spans = [(min(r.time for r in ds.records), max(r.time for r in ds.records)) for ds in datas]
    lo, hi = max(s[0] for s in spans), min(s[1] for s in spans)
    if not lo < hi:
        raise UsageError("the two fits have no overlapping time range")
    step = args.grid_step
    times = np.array([round(k * step, 12) for k in range(math.ceil(lo / step - 1e-9),
                                                         math.floor(hi / step + 1e-9) + 1)])
    if times.size < 2:
        raise UsageError("grid step leaves fewer than two common times")
    means = []
    for doc, ds in zip(docs, datas):
        _, mean, _ = _smooth_doc(doc, _with_times(ds, doc["group"], times))
        means.append(mean.at(times))
    names = [f"{d['group']}:{d['spec']['family']}" for d in docs]
    a = type(means[0])(means[0].times, means[0].estimate, means[0].variance, names[0])
    b = type(means[1])(means[1].times, means[1].estimate, means[1].variance, names[1])
    diff = curve_difference(a, b, args.level)
    rows = [("difference", diff.series, diff.band)] + _component_rows([(names[0], a), (names[1], b)], args.level)
    _write_component_csv(rows, args.out)
    print(f"assumption={diff.assumption}", file=out)
    print(f"difference={args.out}", file=out)
    if args.figure:
        plot_band(diff.band, args.figure, title=f"{names[0]} minus {names[1]}", label="difference",
                  zero_line=True)
    return 0


def cmd_simulate(args, out) -> int:
    fam = CurveFamily.parse(args.family)
    curve = CurveParams(**{n: getattr(args, n) for n in fam.param_names})
    noise = NoiseParams(args.sigma2_eps, args.sigma2_eta, args.sigma2_dev)
    devs = Deviations.parse(args.deviations)
    K = args.replicates
    # without deviations the replicates share one curve and differ only by noise
    labels = tuple(str(i + 1) for i in range(K))
    spec = GrowthModelSpec(fam, args.mode, curve, noise, K if devs is Deviations.RANDOM_WALK else 1, devs,
                           labels if devs is Deviations.RANDOM_WALK else ())
    if args.end <= args.start:
        raise UsageError("--end must exceed --start")
    n = int(math.floor((args.end - args.start) / args.grid_step + 1e-9)) + 1
    times = [round(args.start + j * args.grid_step, 12) for j in range(n)]
    template = Dataset(tuple(Record(args.group, lab, t, None) for t in times for lab in labels))
    series = template.series(args.group, replicates=labels)
    model = build(spec, series)
    init = np.zeros(model.state_dim)
    init[1] = args.curve_scale
    init[0] = args.constant + args.curve_scale * eval_g(fam, curve, 0.0)
    sim = simulate(model, args.seed, series, initial_state=init)
    io.write_long_csv(sim, _out_path(args.out))
    print(f"records={len(sim)} data={args.out}", file=out)
    return 0


def _points(doc):
    d = doc["data"]
    pts = [(t, v) for t, v in zip(d["time"], d["value"]) if v is not None]
    return (np.array([p[0] for p in pts]), np.array([p[1] for p in pts])) if pts else None


def _plot_artifact(doc, path):
    mean = io.series_from_doc(doc["mean"])
    band = confidence_band(mean, doc["mean"].get("level", 0.95))
    s = doc["spec"]
    plot_band(band, path, title=f"{doc['group']}: {s['mode']} {s['family']}", label="mean",
              points=_points(doc))


def cmd_plot(args, out) -> int:
    src = Path(args.input)
    if src.suffix.lower() == ".json":
        _plot_artifact(io.read_artifact(src), _out_path(args.out))
    else:
        comps = _read_component_csv(src)
        names = list(comps)
        first = comps[names[0]]
        band = Band(first[:, 0], first[:, 1], first[:, 3], first[:, 4], args.level)
        extra = [(comps[k][:, 0], comps[k][:, 1], k) for k in names[1:]] if names[0] != "difference" else []
        plot_band(band, _out_path(args.out), title=src.stem, label=names[0], extra=extra,
                  zero_line=names[0] == "difference")
    print(f"figure={args.out}", file=out)
    return 0


# ------------------------------------------------------------------- parser

def _positive(kind):
    def conv(s):
        try:
            v = kind(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{s!r} is not a valid number") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"{s!r} must be positive")
        return v
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="growthssm", description="State space growth curve fitting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def fitting(sp, families=False):
        sp.add_argument("--data", required=True, help="long CSV with group,replicate,time,value")
        sp.add_argument("--group")
        if families:
            sp.add_argument("--families", "--family", dest="families", default="linear,logistic,gompertz,richards",
                            help="comma-separated curve families")
            sp.add_argument("--mode", default="parametric,semiparametric", help="comma-separated modes")
        else:
            sp.add_argument("--family", required=True)
            sp.add_argument("--mode", default="parametric")
        sp.add_argument("--deviations", default="none", help="none or random_walk")
        sp.add_argument("--scale", type=_positive(float), default=1.0, help="multiply values by this factor")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--max-evals", type=_positive(int), default=4000)
        sp.add_argument("--multistart", type=_positive(int), default=5)
        sp.add_argument("--objective", choices=("marginal", "innovations"), default="marginal")
        sp.add_argument("--level", type=float, default=0.95)

    sp = sub.add_parser("fit", help="fit one model")
    fitting(sp)
    sp.add_argument("--out", default="fit.json")
    sp.add_argument("--figure", help="optional SVG of the fitted mean curve")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("select", help="fit several models and rank by BIC")
    fitting(sp, families=True)
    sp.add_argument("--out", default="selection", help="output directory")
    sp.add_argument("--workers", type=_positive(int), default=None)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("predict", help="smooth a fitted model on a finer grid")
    sp.add_argument("artifact")
    sp.add_argument("--grid-step", type=_positive(float), required=True)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--out", default="components.csv")
    sp.add_argument("--figure")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("compare", help="difference of two fitted mean curves")
    sp.add_argument("first")
    sp.add_argument("second")
    sp.add_argument("--grid-step", type=_positive(float), default=0.5)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--out", default="difference.csv")
    sp.add_argument("--figure")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("simulate", help="draw a dataset from a model")
    sp.add_argument("--family", required=True)
    sp.add_argument("--mode", default="parametric")
    sp.add_argument("--deviations", default="none")
    sp.add_argument("--phi", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--nu", type=float)
    sp.add_argument("--constant", type=float, default=0.0)
    sp.add_argument("--curve-scale", type=float, default=1.0)
    sp.add_argument("--sigma2-eps", type=float, default=0.0)
    sp.add_argument("--sigma2-eta", type=float, default=0.0)
    sp.add_argument("--sigma2-dev", type=float, default=0.0)
    sp.add_argument("--replicates", type=_positive(int), default=1)
    sp.add_argument("--start", type=float, default=0.0)
    sp.add_argument("--end", type=float, default=23.0)
    sp.add_argument("--grid-step", type=_positive(float), default=0.5)
    sp.add_argument("--group", default="sim")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="simulated.csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("plot", help="SVG chart of an artifact or a component/difference CSV")
    sp.add_argument("input")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--out", default="figure.svg")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (fit, select, predict, compare, simulate, plot)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, out)
    except UsageError as exc:
        print(f"ERROR: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ERROR: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ModelError as exc:
        print(f"ERROR: input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ERROR: io: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"ERROR: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
