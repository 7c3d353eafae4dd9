import json

import numpy as np
import pytest

from growthssm import cli, io
from growthssm.curves import CurveParams
from growthssm.estimation import OptimizerConfig, fit
from growthssm.kalman import likelihood
from growthssm.models import GrowthModelSpec, NoiseParams, build
from growthssm.ssm import Dataset, ModelError, Record

from helpers import GRID, K12, logistic_dataset


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_counts_and_missing(tmp_path):
    rows = ["group,replicate,time,value"]
    rows += [f"M63,{r},{t},{0.1 * int(r) + t}" for t in GRID for r in K12]
    ds = io.read_long_csv(_write(tmp_path / "a.csv", "\n".join(rows) + "\n"))
    assert len(ds) == 564 and ds.n_observed == 564
    ds2 = io.read_long_csv(_write(tmp_path / "b.csv", "value,time,replicate,group\n1.5,0,1,g\n,0.5,1,g\nNA,1,1,g\n"))
    assert len(ds2) == 3 and ds2.n_observed == 1
    assert [r.time for r in ds2.records] == [0.0, 0.5, 1.0]  # input order kept


@pytest.mark.parametrize("body, match", [
    ("g,1,0,1\ng,1,0,2\n", "line 3: duplicate.*first on line 2"),
    ("g,1,0,1\ng,1,abc,2\n", "line 3: time"),
    ("g,1,0,1\ng,1,1,x\n", "line 3: value"),
    ("g,1,0,1\ng,1\n", "line 3: expected 4"),
    ("g,1,inf,1\n", "line 2: time must be finite"),
])
def test_read_errors_name_the_line(tmp_path, body, match):
    with pytest.raises(io.DataFormatError, match=match):
        io.read_long_csv(_write(tmp_path / "x.csv", "group,replicate,time,value\n" + body))


def test_read_header_and_file_errors(tmp_path):
    with pytest.raises(io.DataFormatError, match="value"):
        io.read_long_csv(_write(tmp_path / "h.csv", "group,replicate,time\ng,1,0\n"))
    with pytest.raises(io.DataFormatError, match="no such file"):
        io.read_long_csv(tmp_path / "missing.csv")


def test_write_read_round_trip(tmp_path):
    ds = Dataset((Record("g", "1", 0.1, 1 / 3), Record("g", "2", 0.1, None), Record("h", "1", 7.25, -2e-9)))
    io.write_long_csv(ds, tmp_path / "r.csv")
    assert io.read_long_csv(tmp_path / "r.csv") == ds


def test_augment_grid():
    ds = Dataset((Record("g", "1", 0.0, 1.0), Record("g", "1", 1.0, 2.0)))
    aug = io.augment_grid(ds, 0.5)
    assert len(aug) == 3 and aug.records[-1] == Record("g", "1", 0.5, None)
    assert io.augment_grid(aug, 0.5) == aug
    on_grid, _ = logistic_dataset(0)
    assert io.augment_grid(on_grid, 1.0) == on_grid
    tenths = io.augment_grid(Dataset((Record("g", "1", 0.0, 1.0), Record("g", "1", 0.7, 2.0))), 0.1)
    assert sorted(r.time for r in tenths.records) == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    with pytest.raises(ModelError):
        io.augment_grid(ds, 0.0)


def test_augmentation_leaves_the_fit_unchanged():
    ds, _ = logistic_dataset(3)
    spec = GrowthModelSpec("logistic", "semiparametric", CurveParams(1.4, 0.1), NoiseParams(3e-4, 20.0))
    a, b = ds.series(), io.augment_grid(ds, 0.25).series()
    la, lb = likelihood(build(spec, a), a), likelihood(build(spec, b), b)
    assert abs(la - lb) <= 1e-10 * abs(la)
    fa = fit(spec, ds, OptimizerConfig(multistart=2))
    fb = fit(spec, io.augment_grid(ds, 0.25), OptimizerConfig(multistart=2))
    assert abs(fa.loglik - fb.loglik) <= 1e-8 * abs(fa.loglik)


def test_artifact_round_trip_is_byte_identical(tmp_path):
    ds, _ = logistic_dataset(1)
    f = fit(GrowthModelSpec("logistic", "parametric", CurveParams(1.0, 1.0)), ds, OptimizerConfig(multistart=2))
    doc = io.fit_to_artifact(f, ds, group="g", scale=10.0)
    io.write_artifact(doc, tmp_path / "a.json")
    first = (tmp_path / "a.json").read_bytes()
    io.write_artifact(io.read_artifact(tmp_path / "a.json"), tmp_path / "b.json")
    assert (tmp_path / "b.json").read_bytes() == first
    back = io.read_artifact(tmp_path / "a.json")
    assert back["version"] == "1" and back["scale"] == 10.0
    assert back["estimates"] == f.estimates
    assert np.array_equal(io.series_from_doc(back["mean"]).estimate, f.mean.estimate)
    assert io.spec_from_artifact(back) == f.spec
    assert io.dataset_from_artifact(back) == ds
    _write(tmp_path / "bad.json", json.dumps({"version": "0"}))
    with pytest.raises(io.DataFormatError, match="version"):
        io.read_artifact(tmp_path / "bad.json")


# ------------------------------------------------------------------- CLI

def run(args, capsys):
    code = cli.main([str(a) for a in args])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture()
def logistic_csv(tmp_path):
    ds, _ = logistic_dataset(2, group="tractors")
    io.write_long_csv(ds, tmp_path / "data.csv")
    return tmp_path / "data.csv"


def test_cli_fit_predict_plot(tmp_path, logistic_csv, capsys):
    out = tmp_path / "fit.json"
    code, stdout, _ = run(["fit", "--data", logistic_csv, "--family", "logistic", "--mode", "parametric",
                           "--multistart", 2, "--out", out, "--figure", tmp_path / "fit.svg"], capsys)
    assert code == 0 and "constant=" in stdout
    doc = io.read_artifact(out)
    assert doc["spec"]["family"] == "logistic" and doc["group"] == "tractors"
    svg = (tmp_path / "fit.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg and "<path" in svg

    code, stdout, _ = run(["predict", out, "--grid-step", 0.5, "--out", tmp_path / "p.csv"], capsys)
    assert code == 0 and "max_rate_per_step=" in stdout
    rows = np.genfromtxt(tmp_path / "p.csv", delimiter=",", names=True, dtype=None, encoding="utf-8")
    assert set(rows["component"]) == {"mean"} and rows.size == 91
    # read-back consistency at the observed times
    fitted = io.series_from_doc(doc["mean"])
    idx = np.searchsorted(rows["time"], fitted.times)
    assert np.abs(rows["estimate"][idx] - fitted.estimate).max() <= 1e-8
    assert np.abs(rows["variance"][idx] - fitted.variance).max() <= 1e-8
    assert np.all(rows["lower"] <= rows["estimate"]) and np.all(rows["estimate"] <= rows["upper"])

    code, _, _ = run(["plot", tmp_path / "p.csv", "--out", tmp_path / "p.svg"], capsys)
    assert code == 0 and (tmp_path / "p.svg").stat().st_size > 1000


def test_cli_is_deterministic(tmp_path, logistic_csv, capsys):
    for name in ("a.json", "b.json"):
        run(["fit", "--data", logistic_csv, "--family", "gompertz", "--mode", "semiparametric", "--seed", 4,
             "--multistart", 2, "--out", tmp_path / name], capsys)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_cli_select_and_compare(tmp_path, logistic_csv, capsys):
    outdir = tmp_path / "sel"
    code, stdout, _ = run(["select", "--data", logistic_csv, "--families", "linear,logistic",
                           "--mode", "parametric", "--multistart", 2, "--out", outdir], capsys)
    assert code == 0 and "winner=" in stdout
    ranking = (outdir / "ranking.csv").read_text().splitlines()
    assert len(ranking) == 3
    first = ranking[1].split(",")
    assert (outdir / "winner.json").read_bytes() == (outdir / first[-1]).read_bytes()
    bics = [float(r.split(",")[6]) for r in ranking[1:]]
    assert bics == sorted(bics)

    other = tmp_path / "other.csv"
    ds, _ = logistic_dataset(9, scale=1.5, group="b")
    io.write_long_csv(ds, other)
    run(["fit", "--data", other, "--family", "logistic", "--multistart", 2, "--out", tmp_path / "b.json"], capsys)
    code, stdout, _ = run(["compare", outdir / "winner.json", tmp_path / "b.json", "--grid-step", 1.0,
                           "--out", tmp_path / "d.csv", "--figure", tmp_path / "d.svg"], capsys)
    assert code == 0 and "independent" in stdout
    rows = np.genfromtxt(tmp_path / "d.csv", delimiter=",", names=True, dtype=None, encoding="utf-8")
    diff = rows[rows["component"] == "difference"]
    assert diff.size == 46 and np.all(diff["estimate"][20:] > 0)  # group b saturates lower
    assert (tmp_path / "d.svg").exists()


def test_cli_simulate_then_fit_recovers(tmp_path, capsys):
    sim = tmp_path / "sim.csv"
    code, _, _ = run(["simulate", "--family", "logistic", "--phi", 1.398, "--rho", 0.104, "--constant", 3.605,
                      "--curve-scale", 1.844, "--sigma2-eps", 3e-4, "--start", 0, "--end", 45, "--grid-step", 1,
                      "--replicates", 3, "--seed", 1, "--out", sim], capsys)
    assert code == 0 and len(io.read_long_csv(sim)) == 138
    code, stdout, _ = run(["fit", "--data", sim, "--family", "logistic", "--out", tmp_path / "f.json"], capsys)
    assert code == 0
    est = io.read_artifact(tmp_path / "f.json")
    assert est["estimates"]["rho"] == pytest.approx(0.104, abs=0.01)
    assert est["constant_scale"]["scale"] == pytest.approx(1.844, rel=0.1)


def test_cli_fme_fit_writes_deviations(tmp_path, capsys):
    sim = tmp_path / "fme.csv"
    run(["simulate", "--family", "gompertz", "--mode", "semiparametric", "--deviations", "random_walk",
         "--phi", 20.91, "--rho", 0.46, "--sigma2-eta", 102.03, "--sigma2-dev", 0.034, "--sigma2-eps", 1.4e-4,
         "--constant", 0.003, "--curve-scale", 9.58, "--replicates", 4, "--out", sim], capsys)
    code, _, err = run(["fit", "--data", sim, "--family", "gompertz", "--mode", "semiparametric",
                        "--deviations", "random_walk", "--multistart", 2, "--out", tmp_path / "f.json"], capsys)
    assert code == 0, err
    doc = io.read_artifact(tmp_path / "f.json")
    assert len(doc["deviations"]) == 4 and doc["spec"]["K"] == 4
    code, _, _ = run(["predict", tmp_path / "f.json", "--grid-step", 0.25, "--out", tmp_path / "p.csv"], capsys)
    rows = np.genfromtxt(tmp_path / "p.csv", delimiter=",", names=True, dtype=None, encoding="utf-8")
    assert code == 0 and len(set(rows["component"])) == 5


def test_cli_scale_flag(tmp_path, logistic_csv, capsys):
    for name, scale in (("u.json", 1), ("s.json", 10)):
        run(["fit", "--data", logistic_csv, "--family", "logistic", "--scale", scale, "--multistart", 2,
             "--out", tmp_path / name], capsys)
    u, s = io.read_artifact(tmp_path / "u.json"), io.read_artifact(tmp_path / "s.json")
    assert s["scale"] == 10.0 and u["scale"] == 1.0
    assert s["data"]["value"][5] == pytest.approx(10 * u["data"]["value"][5], rel=1e-12)
    for key in ("constant", "scale"):
        assert s["constant_scale"][key] == pytest.approx(10 * u["constant_scale"][key], rel=1e-3)
    assert s["estimates"]["rho"] == pytest.approx(u["estimates"]["rho"], rel=1e-3)


@pytest.mark.parametrize("args, code, needle", [
    ([], 1, "subcommand"),
    (["fit", "--family", "logistic"], 1, "--data"),
    (["fit", "--data", "nope.csv", "--family", "logistic"], 1, "no such file"),
    (["fit", "--data", "{csv}", "--family", "weibull"], 1, "unknown curve family"),
    (["fit", "--data", "{csv}", "--family", "logistic", "--group", "zzz"], 1, "not in data"),
    (["fit", "--data", "{csv}", "--family", "logistic", "--max-evals", "-3"], 1, "positive"),
    (["predict", "{csv}", "--grid-step", "1"], 1, "not a valid artifact"),
    (["fit", "--data", "{tiny}", "--family", "logistic"], 1, "at least"),
])
def test_cli_errors(tmp_path, logistic_csv, capsys, args, code, needle):
    tiny = _write(tmp_path / "tiny.csv", "group,replicate,time,value\ng,1,0,1.0\n")
    args = [a.format(csv=logistic_csv, tiny=tiny) for a in args]
    got, _, err = run(args, capsys)
    assert got == code
    assert err.startswith("ERROR:") and needle in err


def test_cli_numerical_failure_exit_code(tmp_path, logistic_csv, capsys):
    run(["fit", "--data", logistic_csv, "--family", "logistic", "--multistart", 1, "--out", tmp_path / "f.json"],
        capsys)
    doc = io.read_artifact(tmp_path / "f.json")
    doc["data"]["value"] = [doc["data"]["value"][0]] + [None] * (len(doc["data"]["value"]) - 1)
    io.write_artifact(doc, tmp_path / "broken.json")
    code, _, err = run(["predict", tmp_path / "broken.json", "--grid-step", 1, "--out", tmp_path / "p.csv"], capsys)
    assert code == 2 and err.startswith("ERROR: numerical") and "1 of 2" in err
