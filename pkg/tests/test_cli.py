import json

import numpy as np

from normgd.cli import main
from normgd.runlog import (RUN_COLUMNS, band_occupancy, fmt, read_run_csv,
                           rows_from_records, tail_rows, validate_run_csv,
                           write_run_csv)

QUAD_TRAIN = """
[run]
seed = 7

[objective]
kind = "quadratic"
dim = 8
cond = 10.0
seed = 3

[optimizer]
norm = "{norm}"
mode = "{mode}"
eta = {eta}
steps = 80

[measure]
cadence = 20
fw_iters = 40
fw_restarts = 4

[output]
dir = "{out}"
"""


def write_cfg(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run_cli(*args):
    return main(list(args))


def test_train_smoke_and_artifacts(tmp_path):
    out = tmp_path / "out"
    cfg = write_cfg(tmp_path, QUAD_TRAIN.format(norm="euclidean", mode="unnormalized",
                                                eta=0.05, out=out))
    assert run_cli("train", "--config", cfg) == 0
    for fname in ("run.csv", "run.jsonl", "sharpness.csv", "run.svg",
                  "config.echo.toml", "run_summary.json"):
        assert (out / fname).exists(), fname
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["schema_version"] == 1
    assert validate_run_csv(out / "run.csv", summary["mode"], summary["eta"]) == []
    header, rows = read_run_csv(out / "run.csv")
    assert header == RUN_COLUMNS
    assert len(rows) == 80
    # jsonl mirrors the csv
    lines = (out / "run.jsonl").read_text().splitlines()
    assert len(lines) == 80
    assert json.loads(lines[0])["step"] == 0


def test_train_rerun_byte_identical(tmp_path):
    cfg_text = QUAD_TRAIN.format(norm="linf", mode="unnormalized", eta=0.004,
                                 out=tmp_path / "a")
    cfg = write_cfg(tmp_path, cfg_text)
    assert run_cli("train", "--config", cfg) == 0
    assert run_cli("train", "--config", cfg, "--out", str(tmp_path / "b")) == 0
    a = (tmp_path / "a" / "run.csv").read_bytes()
    b = (tmp_path / "b" / "run.csv").read_bytes()
    assert a == b
    ja = (tmp_path / "a" / "run.jsonl").read_bytes()
    jb = (tmp_path / "b" / "run.jsonl").read_bytes()
    assert ja == jb


def test_train_normalized_threshold_rows(tmp_path):
    out = tmp_path / "norm_out"
    cfg = write_cfg(tmp_path, QUAD_TRAIN.format(norm="linf", mode="normalized",
                                                eta=0.01, out=out))
    assert run_cli("train", "--config", cfg) == 0
    summary = json.loads((out / "run_summary.json").read_text())
    assert validate_run_csv(out / "run.csv", "normalized", summary["eta"]) == []
    _, rows = read_run_csv(out / "run.csv")
    for r in rows:
        if r["dual_grad_norm"] is not None:
            assert r["threshold"] == 2.0 * r["dual_grad_norm"] / summary["eta"]


def test_train_divergence_exit_code(tmp_path):
    out = tmp_path / "div"
    cfg = write_cfg(tmp_path, QUAD_TRAIN.format(norm="euclidean", mode="unnormalized",
                                                eta=50.0, out=out))
    assert run_cli("train", "--config", cfg) == 3
    # partial log preserved
    _, rows = read_run_csv(out / "run.csv")
    assert rows and rows[-1]["diverged"] is True


def test_config_error_exit_code(tmp_path):
    bad = write_cfg(tmp_path, "[objective]\ndmi = 8\n")
    assert run_cli("train", "--config", bad) == 2
    missing = str(tmp_path / "none.toml")
    assert run_cli("train", "--config", missing) == 2


def test_quad_command(tmp_path):
    out = tmp_path / "quad"
    cfg = write_cfg(tmp_path, f"""
[objective]
kind = "quadratic"
dim = 6
cond = 8.0
seed = 2

[optimizer]
norm = "euclidean"
eta = 0.01

[quad]
eta_rel_grid = [0.5, 1.9, 2.1]
T = 20000

[output]
dir = "{out}"
""")
    assert run_cli("quad", "--config", cfg) == 0
    lines = (out / "quad.csv").read_text().splitlines()
    assert lines[0] == "eta,init,classification,steps,sign_alternations"
    oracle = json.loads((out / "oracle.json").read_text())
    assert oracle["S"] > 0 and oracle["mu"] > 0
    body = [l.split(",") for l in lines[1:]]
    dhat_rows = [r for r in body if r[1] == "dhat"]
    assert dhat_rows[0][2] == "converged" and dhat_rows[-1][2] == "diverged"
    assert (out / "quad.svg").exists()


def test_oracle_check_pass_and_fail(tmp_path):
    base = f"""
[oracle]
geometry = "linf"
dim = 8
instances = 6
seed = 1
restarts_grid = [1, 10]
iters_grid = [50, 100]
band = 0.02

[output]
dir = "{tmp_path / 'oc'}"
"""
    cfg = write_cfg(tmp_path, base)
    assert run_cli("oracle-check", "--config", cfg) == 0
    # an absurd band makes the top cell fail -> exit 4
    cfg_fail = write_cfg(tmp_path, base.replace("band = 0.02", "band = 1e-18")
                         .replace("oc'", "oc_fail'"), name="fail.toml")
    assert run_cli("oracle-check", "--config", cfg_fail) == 4


def test_seed_override_changes_run(tmp_path):
    cfg = write_cfg(tmp_path, QUAD_TRAIN.format(norm="euclidean", mode="unnormalized",
                                                eta=0.03, out=tmp_path / "s1"))
    assert run_cli("train", "--config", cfg) == 0
    assert run_cli("train", "--config", cfg, "--out", str(tmp_path / "s2"),
                   "--seed", "99") == 0
    a = (tmp_path / "s1" / "run.csv").read_bytes()
    b = (tmp_path / "s2" / "run.csv").read_bytes()
    assert a != b


def test_out_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("NORMGD_OUT_ROOT", str(tmp_path / "root"))
    cfg = write_cfg(tmp_path, QUAD_TRAIN.format(norm="euclidean", mode="unnormalized",
                                                eta=0.03, out="rel_out"))
    assert run_cli("train", "--config", cfg) == 0
    assert (tmp_path / "root" / "rel_out" / "run.csv").exists()


def test_track_direction_running_mean_contract(tmp_path):
    out = tmp_path / "track"
    cfg = write_cfg(tmp_path, f"""
[objective]
kind = "quadratic"
dim = 6
cond = 6.0
seed = 4

[optimizer]
norm = "euclidean"
eta = 0.02
steps = 40

[measure]
cadence = 10
fw_iters = 40
fw_restarts = 4

[track]
t0 = 5
horizon = 20

[output]
dir = "{out}"
""")
    assert run_cli("track-direction", "--config", cfg) == 0
    lines = (out / "track.csv").read_text().splitlines()[1:]
    curv, means = [], []
    for line in lines:
        parts = line.split(",")
        curv.append(float(parts[1]))
        means.append(float(parts[2]))
    prefix = np.cumsum(curv) / np.arange(1, len(curv) + 1)
    assert np.allclose(prefix, means, rtol=1e-12)
    # quadratic objective: tracked curvature is constant
    assert np.allclose(curv, curv[0], rtol=1e-9)
    assert (out / "direction_t0.vec").exists()


def test_taylor_switch_quadratic_exact(tmp_path):
    out = tmp_path / "switch"
    cfg = write_cfg(tmp_path, f"""
[objective]
kind = "quadratic"
dim = 6
cond = 6.0
seed = 5

[optimizer]
norm = "euclidean"
eta = 0.02
steps = 30

[switch]
t0 = [0, 10]
horizon = 25

[output]
dir = "{out}"
""")
    assert run_cli("taylor-switch", "--config", cfg) == 0
    for t0 in (0, 10):
        lines = (out / f"switch_{t0:06d}.csv").read_text().splitlines()[1:]
        for line in lines:
            _, true_l, tay_l = line.split(",")
            t, y = float(true_l), float(tay_l)
            assert abs(t - y) <= 1e-10 * max(abs(t), 1.0)


def test_switch_beyond_trajectory_rejected(tmp_path):
    cfg = write_cfg(tmp_path, f"""
[objective]
kind = "quadratic"
dim = 4

[optimizer]
norm = "euclidean"
eta = 0.02
steps = 10

[switch]
t0 = [50]

[output]
dir = "{tmp_path / 'x'}"
""")
    assert run_cli("taylor-switch", "--config", cfg) == 2


def test_train_from_matrix_file(tmp_path):
    from normgd.data_io import save_matrix_bin
    from normgd.quadlab import random_pd_matrix

    H = random_pd_matrix(5, 6.0, 3)
    hfile = tmp_path / "h.bin"
    save_matrix_bin(hfile, H)
    out = tmp_path / "mf"
    cfg = write_cfg(tmp_path, f"""
[objective]
kind = "quadratic"
matrix_file = "{hfile}"

[optimizer]
norm = "euclidean"
eta = 0.02
steps = 20

[output]
dir = "{out}"
""")
    assert run_cli("train", "--config", cfg) == 0
    _, rows = read_run_csv(out / "run.csv")
    assert len(rows) == 20


def test_train_saves_sharpness_directions(tmp_path):
    from normgd.params import load_vector

    out = tmp_path / "dirs"
    cfg = write_cfg(tmp_path, f"""
[objective]
kind = "quadratic"
dim = 6
seed = 1

[optimizer]
norm = "linf"
eta = 0.01
steps = 25

[measure]
cadence = 10
fw_iters = 30
fw_restarts = 3
save_directions = true

[output]
dir = "{out}"
""")
    assert run_cli("train", "--config", cfg) == 0
    saved = sorted((out / "directions").glob("*.vec"))
    assert [p.name for p in saved] == ["step_000000.vec", "step_000010.vec", "step_000020.vec"]
    d = load_vector(saved[0])
    assert np.abs(d.data).max() == 1.0  # linf maximizers live on the sign sphere


# -- runlog unit behavior ------------------------------------------------------

def test_fmt_round_trip():
    vals = [0.1, 1.0 / 3.0, 2e-308, 1.7976931348623157e308, -0.0]
    for v in vals:
        assert float(fmt(v)) == v
    assert fmt(None) == ""
    assert fmt(float("nan")) == ""
    assert fmt(True) == "true"


def test_validator_catches_tampering(tmp_path):
    from normgd.norms import EuclideanNorm
    from normgd.objectives import QuadraticObjective
    from normgd.optimizers import OptimizerSpec, run
    from normgd.params import RngState, gaussian_like
    from normgd.quadlab import random_pd_matrix

    H = random_pd_matrix(6, 8.0, 1)
    obj = QuadraticObjective(H)
    w0 = gaussian_like(obj.layout, RngState(0))
    spec = OptimizerSpec(norm=EuclideanNorm(obj.layout), eta=0.05)
    res = run(obj, w0, spec, 30)
    rows = rows_from_records(res.records, spec.mode, spec.eta)
    path = tmp_path / "run.csv"
    write_run_csv(path, rows)
    assert validate_run_csv(path, spec.mode, spec.eta) == []
    # corrupt one derived column
    rows[5]["threshold"] = rows[5]["threshold"] * 1.0000001
    write_run_csv(path, rows)
    assert validate_run_csv(path, spec.mode, spec.eta) != []


def test_band_helpers():
    rows = [{"step": i, "x": float(i)} for i in range(10)]
    assert tail_rows(rows, 0.25) == rows[-2:] if len(rows) * 0.25 < 3 else True
    occ = band_occupancy([{"x": 1.0}, {"x": 2.0}, {"x": None}], "x", 1.0, 0.8, 1.2)
    assert occ == 0.5
