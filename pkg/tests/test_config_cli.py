import csv
import json
import re

import pytest

from relent.cli import dispatch, initial_state, main, run_dir
from relent.config import config_schema, emit_config, load_config, parse_config, run_hash
from relent.errors import ConfigError
from relent.snapshot import read_checkpoint


def _cfg(**sections):
    return parse_config(json.dumps(sections))


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults():
    cfg = _cfg()
    assert cfg.params.gamma == 2.0 and cfg.params.a == 1.0
    assert cfg.stepper.cfl == 0.4
    assert cfg.noise.K == 8
    assert cfg.experiment.kind == "energy"


@pytest.mark.parametrize(
    "data, message",
    [
        ({"params": {"gamma": 1.2}}, "gamma > 3/2"),
        ({"params": {"gamma": 2.0, "bogus": 1}}, "unknown key"),
        ({"unknown": 1}, "unknown key"),
        ({"noise": {"K": 2, "F": [1.0]}}, "K=2"),
        ({"experiment": {"kind": "twin", "refine": 4}}, "odd"),
        ({"experiment": {"kind": "energy"}, "params": {"mu": 0.0}}, "mu > 0"),
    ],
)
def test_rejections(data, message):
    with pytest.raises(ConfigError, match=re.escape(message)):
        parse_config(json.dumps(data))


def test_relaxed_gamma_accepted():
    assert _cfg(params={"gamma": 1.2, "relax_gamma": True}).params.gamma == 1.2


@pytest.mark.parametrize("text", ["{", "[1, 2]", "null"])
def test_malformed_json(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_emit_parse_round_trip():
    cfg = _cfg(
        experiment={"kind": "twin", "n_members": 4, "E0": 1e-4},
        grid={"dim": 2, "n": 16},
        noise={"K": 2, "F": [0.1, 0.2], "H": [0.0, 0.05]},
    )
    text = emit_config(cfg)
    assert parse_config(text) == cfg
    assert emit_config(parse_config(text)) == text


def test_run_hash():
    a = _cfg(output_dir="x")
    b = _cfg(output_dir="y")
    assert run_hash(a) == run_hash(b)
    assert re.fullmatch(r"[0-9a-f]{12}", run_hash(a))
    assert run_hash(a) != run_hash(a.with_seed(1))


def test_schema_lists_sections():
    props = config_schema()["properties"]
    assert {"experiment", "grid", "params", "stepper", "noise", "initial"} <= set(props)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


@pytest.mark.parametrize("dim", [1, 2])
def test_initial_state_positive(dim):
    cfg = _cfg(grid={"dim": dim, "n": 16})
    s = initial_state(cfg.grid.build(), cfg)
    assert s.rho.min() > 0 and s.mom.shape == (dim,) + s.rho.shape


ENERGY_EQ = {
    "experiment": {"kind": "energy", "n_members": 2, "t_end": 0.05},
    "grid": {"n": 16},
    "noise": {"K": 0},
    "initial": {"kind": "equilibrium"},
}


def test_cli_energy_equilibrium(tmp_path, capsys):
    p = _write(tmp_path, ENERGY_EQ)
    assert main(["energy", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    out = run_dir(load_config(p), tmp_path / "o")
    rows = _rows(out / "member_0000.csv")
    assert len(rows) > 2
    for key in ("mass", "kinetic", "potential", "total"):
        assert len({r[key] for r in rows}) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "pass"
    assert parse_config((out / "config.json").read_text()) == load_config(p)
    assert json.loads(capsys.readouterr().out)["status"] == "pass"


def test_plot_script_references_produced_files(tmp_path):
    cfg = parse_config(json.dumps(ENERGY_EQ))
    assert dispatch(cfg, root=tmp_path) == 0
    out = run_dir(cfg, tmp_path)
    script = (out / "plot.gp").read_text()
    names = re.findall(r"plot '([^']+)'", script)
    assert names
    assert all((out / n).is_file() for n in names)


TWIN = {
    "experiment": {"kind": "twin", "n_members": 2, "t_end": 0.05, "variant": "a"},
    "grid": {"n": 16},
    "noise": {"K": 2, "F": [0.1, 0.05], "H": [0.05, 0.02]},
}


def test_cli_twin_variant_a(tmp_path):
    p = _write(tmp_path, TWIN)
    assert main(["twin", "--config", str(p), "--out", str(tmp_path)]) == 0
    out = run_dir(load_config(p), tmp_path)
    rows = _rows(out / "twin_stats.csv")
    assert max(float(r["rel_energy_mean"]) for r in rows) <= 1e-10


def test_cli_decoupled_twin_fails_verdict(tmp_path):
    data = json.loads(json.dumps(TWIN))
    data["experiment"]["variant"] = "decoupled"
    p = _write(tmp_path, data)
    assert main(["twin", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_cli_huge_noise_is_numerical_failure(tmp_path):
    data = {
        "experiment": {"kind": "energy", "n_members": 1, "t_end": 0.5},
        "grid": {"n": 16},
        "noise": {"K": 1, "F": [500.0], "H": [0.0]},
    }
    p = _write(tmp_path, data)
    assert main(["energy", "--config", str(p), "--out", str(tmp_path)]) == 3
    out = run_dir(load_config(p), tmp_path)
    assert json.loads((out / "summary.json").read_text())["status"] == "numerical_failure"
    grid, state, meta = read_checkpoint(out / "last_good")
    assert state.rho.min() > 0
    assert "step" in meta


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["energy", "--config", str(tmp_path / "absent.json")]) == 1
    p = _write(tmp_path, ENERGY_EQ)
    assert main(["twin", "--config", str(p)]) == 1
    assert main(["energy", "--config", str(p), "--jobs", "0"]) == 1
    bad = _write(tmp_path, {"params": {"gamma": 1.2}}, "bad.json")
    assert main(["energy", "--config", str(bad)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense", "--config", str(p)])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["energy"])
    assert exc.value.code == 1
    capsys.readouterr()


def _seed_used(tmp_path):
    (d,) = [p for p in tmp_path.glob("o/energy-*") if p.is_dir()]
    return json.loads((d / "config.json").read_text())["experiment"]["seed"], d


def test_seed_precedence(tmp_path, monkeypatch, capsys):
    p = _write(tmp_path, ENERGY_EQ)
    monkeypatch.setenv("RELENT_SEED", "17")
    assert main(["energy", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    seed, d = _seed_used(tmp_path)
    assert seed == 17
    for f in d.iterdir():
        f.unlink()
    d.rmdir()
    assert main(["energy", "--config", str(p), "--out", str(tmp_path / "o"), "--seed", "5"]) == 0
    assert _seed_used(tmp_path)[0] == 5
    monkeypatch.setenv("RELENT_SEED", "x")
    assert main(["energy", "--config", str(p)]) == 1
    capsys.readouterr()
