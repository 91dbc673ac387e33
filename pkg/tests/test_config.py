from __future__ import annotations

import json
from pathlib import Path

import pytest

from quantile_mfg.config import ConfigError, load_run_config, parse_run_config
from tests.conftest import MEAN_VARIANCE


def _doc(**sections) -> dict:
    doc = {"schema_version": 1, "model": dict(MEAN_VARIANCE), "solver": {"n_steps": 400}}
    doc.update(sections)
    return doc


def _text(doc: dict) -> str:
    return json.dumps(doc, indent=2)


def _line_of(text: str, needle: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    raise AssertionError(needle)


def test_defaults():
    cfg = parse_run_config(_text(_doc()))
    assert cfg.model.q == 0.45
    assert cfg.solver.grid.n_steps == 400
    assert cfg.solver.picard_tol == 1e-10 and cfg.solver.max_iters == 200
    assert cfg.solver.coupling == "mean_variance" and cfg.solver.adaptive_damping
    assert cfg.simulation is None and cfg.study is None
    assert cfg.seed == 20240601
    assert cfg.output_dir == Path("out")
    assert cfg.emit == {"paths_csv", "summary_json", "gap_csv", "plotdata"}
    assert len(cfg.check.m_values()) == 500


def test_sections_and_flag_overrides(tmp_path):
    doc = _doc(
        simulation={"n_agents": 20, "n_trials": 3, "seed": 9, "substeps": 2},
        study={"n_list": [5, 50], "trials": 4},
        check={"m": 3},
        emit=["paths_csv"],
        output_dir="results",
    )
    path = tmp_path / "run.json"
    path.write_text(_text(doc), encoding="utf-8")
    cfg = load_run_config(path, ["model.q=0.5", "solver.coupling=constant"], output_dir=tmp_path / "o", seed=42, workers=3)
    assert cfg.model.q == 0.5
    assert cfg.solver.coupling == "constant"
    assert cfg.simulation is not None
    assert cfg.simulation.seed == 42 and cfg.seed == 42
    assert cfg.simulation.workers == 3 and cfg.simulation.substeps == 2
    assert cfg.simulation.grid == cfg.solver.grid
    assert cfg.study is not None and cfg.study.n_list == (5, 50)
    assert cfg.check.m_values() == [3.0]
    assert cfg.output_dir == tmp_path / "o"
    assert cfg.emit == {"paths_csv"}
    assert cfg.source == str(path)


def test_invalid_model_value_is_line_anchored():
    doc = _doc()
    doc["model"]["b"] = 0
    text = _text(doc)
    with pytest.raises(ConfigError) as ei:
        parse_run_config(text, source="run.json")
    msg = str(ei.value)
    line = _line_of(text, '"b"')
    assert msg.startswith(f"run.json:{line}: model.b: ")
    assert "b != 0" in msg


def test_override_errors_are_anchored_to_the_flag():
    with pytest.raises(ConfigError) as ei:
        parse_run_config(_text(_doc()), overrides=["model.r=-1"])
    assert str(ei.value).startswith("<--set model.r=-1>: model.r: ")
    with pytest.raises(ConfigError):
        parse_run_config(_text(_doc()), overrides=["model.r"])


@pytest.mark.parametrize(
    "mutate,key",
    [
        (lambda d: d.update(schema_version=2), "schema_version"),
        (lambda d: d.pop("schema_version"), "schema_version"),
        (lambda d: d.pop("model"), "model"),
        (lambda d: d["model"].pop("alpha"), "model.alpha"),
        (lambda d: d["model"].update(alpha="high"), "model.alpha"),
        (lambda d: d["model"].update(extra=1), "model.extra"),
        (lambda d: d.update(bogus=1), "bogus"),
        (lambda d: d["solver"].update(n_steps=1), "solver.n_steps"),
        (lambda d: d["solver"].update(coupling="median"), "solver.coupling"),
        (lambda d: d["solver"].update(damping=1.5), "solver.damping"),
        (lambda d: d.update(simulation={"n_agents": 1}), "simulation.n_agents"),
        (lambda d: d.update(simulation={"n_agents": 5, "n_trials": 0}), "simulation.n_trials"),
        (lambda d: d.update(study={"n_list": [], "trials": 1}), "study.n_list"),
        (lambda d: d.update(study={"n_list": [50, 5], "trials": 1}), "study.n_list"),
        (lambda d: d.update(check={"m": 1, "m_grid": {"start": 1, "stop": 2, "step": 1}}), "check.m"),
        (lambda d: d.update(check={"m_grid": {"start": 1, "stop": 2}}), "check.m_grid"),
        (lambda d: d.update(emit=["pictures"]), "emit"),
    ],
)
def test_validation_names_the_key(mutate, key):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ConfigError) as ei:
        parse_run_config(_text(doc), source="c.json")
    assert f": {key}: " in str(ei.value)


def test_json_syntax_error_reports_line():
    with pytest.raises(ConfigError) as ei:
        parse_run_config('{\n  "schema_version": 1,\n  "model": {,}\n}', source="bad.json")
    assert str(ei.value).startswith("bad.json:3: <json>: ")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "nope.json")
