import csv
import math

import pytest

from clc_lqr.cli import main
from clc_lqr.errors import ConfigError
from clc_lqr.harness import build_config, load_config, parse_config_text, read_manifest, run

FAST_COMPARE = """
learn_beta.max_iters = 2
learn_beta.beta_init = -1, -1
clc.solver = exact
pg.max_updates = 5
rs.max_updates = 5
q.max_episodes = 100
compare.seeds = 2
"""


def _cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _check_reference(path):
    rows = _rows(path)
    assert rows and "riccati_optimal" in rows[0]
    jcol = next(c for c in ("J_r", "J_tilde", "greedy_Jr", "best_Jr") if c in rows[0])
    for r in rows:
        j = float(r[jcol])
        if not math.isnan(j):
            assert j >= float(r["riccati_optimal"]) - 1e-9


def test_parse_syntax_errors():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("instance.nope = 1")
    with pytest.raises(ConfigError, match="expected"):
        parse_config_text("instance.a_true 2")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2")
    raw = parse_config_text("# comment\n\nseed = 3  # trailing\nclc.beta = -1.5, -1\n")
    assert raw == {"seed": "3", "clc.beta": "-1.5, -1"}


def test_build_config_validation():
    with pytest.raises(ConfigError, match="clc.beta"):
        build_config({}, method="clc")
    with pytest.raises(ConfigError, match="does not apply"):
        build_config({"pg.sigma": "1"}, method="rs")
    with pytest.raises(ConfigError, match="method"):
        build_config({"method": "pg"}, method="rs")
    with pytest.raises(ConfigError, match="unknown method"):
        build_config({"method": "dance"})
    with pytest.raises(ConfigError, match="bad value"):
        build_config({"seed": "x"}, method="riccati")
    with pytest.raises(ConfigError, match="entries"):
        build_config({"clc.beta": "1"}, method="clc")
    with pytest.raises(ConfigError, match="sigma"):
        build_config({"pg.sigma": "-1"}, method="pg")
    with pytest.raises(ConfigError, match="horizon"):
        build_config({"cost.q": "0, 1, 1, 1", "cost.r": "1, 1, 1"}, method="riccati")


def test_riccati_run(tmp_path):
    cfg = build_config({}, method="riccati", output=str(tmp_path))
    rep = run(cfg)
    man = read_manifest(tmp_path / "manifest.txt")
    assert float(man["result.optimal_cost"]) == 0.75
    assert man["result.gains"] == "-1.5, -1"
    assert man["total_episodes"] == "0" and rep.total_episodes == 0
    rows = _rows(tmp_path / "riccati.csv")
    assert [float(r["control"]) for r in rows] == [-0.75, -0.25]
    assert {r["riccati_optimal"] for r in rows} == {"0.75"}


def test_clc_run(tmp_path):
    cfg = build_config({"clc.beta": "-1.5, -1"}, method="clc", output=str(tmp_path))
    rep = run(cfg)
    assert rep.results["J_r"] == pytest.approx(0.75, rel=0.01)
    man = read_manifest(tmp_path / "manifest.txt")
    assert int(man["episodes.clc"]) == int(man["total_episodes"]) > 0
    assert man["config.clc.beta"] == "-1.5, -1"
    _check_reference(tmp_path / "clc.csv")


def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["clc", "--config", _cfg(tmp_path, "instance.a_true = 2\n"), "--out", out]) == 2
    err = capsys.readouterr().err
    assert "error.type = ConfigError" in err and "clc.beta" in err
    assert main(["clc", "--config", _cfg(tmp_path, "clc.beta = -2.5, -1\n"), "--out", out]) == 1
    assert "NoFixedPointError" in capsys.readouterr().err
    assert main(["riccati", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["riccati", "--config", _cfg(tmp_path, ""), "--out", out]) == 0
    with pytest.raises(SystemExit):
        main(["riccati"])


def test_cli_seed_override(tmp_path):
    out = tmp_path / "o"
    assert main(["pg", "--config", _cfg(tmp_path, "seed = 1\npg.max_updates = 3\n"), "--seed", "9",
                 "--out", str(out)]) == 0
    assert read_manifest(out / "manifest.txt")["seed"] == "9"
    assert {r["seed"] for r in _rows(out / "pg.csv")} == {"9"}


@pytest.mark.parametrize("method,text", [
    ("pg", "pg.max_updates = 10\n"),
    ("rs", "rs.max_updates = 10\n"),
    ("q", "q.max_episodes = 200\n"),
    ("learn-beta", "learn_beta.max_iters = 3\nclc.solver = exact\n"),
    ("compare", FAST_COMPARE),
])
def test_determinism_and_conservation(tmp_path, method, text):
    bodies = []
    for rep in range(2):
        out = tmp_path / f"r{rep}"
        cfg = load_config(_cfg(tmp_path, text), method=method, output=str(out))
        report = run(cfg)
        csv_path = report.files[0]
        bodies.append(open(csv_path, "rb").read())
        man = read_manifest(out / "manifest.txt")
        phases = {k: int(v) for k, v in man.items() if k.startswith("episodes.")}
        assert sum(phases.values()) == int(man["total_episodes"]) == report.total_episodes
        _check_reference(csv_path)
    assert bodies[0] == bodies[1]


def test_compare_zero_budget(tmp_path):
    text = ("learn_beta.max_iters = 0\nclc.solver = exact\npg.max_updates = 0\nrs.max_updates = 0\n"
            "q.max_episodes = 0\ncompare.seeds = 3\n")
    run(load_config(_cfg(tmp_path, text), method="compare", output=str(tmp_path)))
    rows = _rows(tmp_path / "compare.csv")
    per = {}
    for r in rows:
        per.setdefault((r["method"], r["seed"]), []).append(r)
    assert len(per) == 4 * 3
    assert all(len(v) == 1 for v in per.values())


def test_sweep_matched_dynamics(tmp_path):
    text = ("instance.a_true = 1\nsweep.a_true = 1\nsweep.beta1_min = -1\nsweep.beta1_max = 1\n"
            "sweep.beta1_n = 3\n")
    run(load_config(_cfg(tmp_path, text), method="sweep-beta", output=str(tmp_path)))
    rows = _rows(tmp_path / "sweep_beta.csv")
    assert [float(r["beta_1"]) for r in rows] == [-1.0, 0.0, 1.0]
    at0 = rows[1]
    assert float(at0["J_r"]) == pytest.approx(float(at0["riccati_optimal"]), rel=0.01)
    _check_reference(tmp_path / "sweep_beta.csv")


def test_sweep_records_failures(tmp_path):
    text = "sweep.a_true = 2\nsweep.beta1_min = -2.5\nsweep.beta1_max = -1.5\nsweep.beta1_n = 2\n"
    run(load_config(_cfg(tmp_path, text), method="sweep-beta", output=str(tmp_path)))
    rows = _rows(tmp_path / "sweep_beta.csv")
    assert rows[0]["status"] == "no_fixed_point" and math.isnan(float(rows[0]["J_r"]))
    assert rows[1]["status"] == "ok"
    man = read_manifest(tmp_path / "manifest.txt")
    assert man["result.failed_cells"] == "1"


def test_sweep_rejects_beta(tmp_path):
    with pytest.raises(ConfigError, match="clc.beta"):
        build_config({"clc.beta": "1, 1"}, method="sweep-beta")
