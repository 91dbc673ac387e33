"""
Run configuration: a versioned JSON file plus command-line overrides.

Every validation failure surfaces as ConfigError with a message of the form
``<file>:<line>: <dotted.key>: <reason>``, where the line is the one holding the
offending key. Values coming from ``--set key=value`` are anchored as
``<--set key=value>`` instead.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .conditions import m_grid
from .core_math import ParameterError, TimeGrid
from .simulator import DEFAULT_SEED, SimulationConfig
from .solver import COUPLINGS, DEFAULT_MAX_ITERS, DEFAULT_N_STEPS, DEFAULT_PICARD_TOL, ModelParams, SolverConfig

SCHEMA_VERSION = 1
EMIT_KINDS: frozenset[str] = frozenset({"paths_csv", "summary_json", "gap_csv", "plotdata"})
DEFAULT_M_GRID = (0.1, 50.0, 0.1)

_MODEL_KEYS = ("a", "b", "r", "sigma", "q", "alpha", "mu0", "V0", "T")
_SOLVER_KEYS = ("n_steps", "picard_tol", "max_iters", "damping", "adaptive_damping", "coupling")
_SIMULATION_KEYS = ("n_agents", "n_trials", "seed", "substeps", "workers", "memory_budget")
_STUDY_KEYS = ("n_list", "trials", "profile_agents")
_CHECK_KEYS = ("m", "m_grid")
_TOP_KEYS = ("schema_version", "model", "solver", "simulation", "study", "check", "output_dir", "emit")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    n_list: tuple[int, ...]
    trials: int
    profile_agents: int = 0


@dataclass(frozen=True)
class CheckConfig:
    m: float | None = None
    grid: tuple[float, float, float] = DEFAULT_M_GRID

    def m_values(self) -> list[float]:
        if self.m is not None:
            return [self.m]
        return m_grid(*self.grid)


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    solver: SolverConfig
    simulation: SimulationConfig | None
    study: StudyConfig | None
    check: CheckConfig
    output_dir: Path
    emit: frozenset[str]
    memory_budget: int | None = None
    seed: int = DEFAULT_SEED
    workers: int = 1
    substeps: int = 1
    source: str = "<config>"


class _Anchors:
    """Maps dotted keys to a printable location in the config source."""

    def __init__(self, source: str, text: str):
        self.source = source
        self.text = text
        self.overrides: dict[str, str] = {}

    def _line_of(self, dotted: str) -> int | None:
        pos = 0
        found = None
        for part in dotted.split("."):
            m = re.compile(r'"' + re.escape(part) + r'"\s*:').search(self.text, pos)
            if m is None:
                break
            pos = m.end()
            found = self.text.count("\n", 0, m.start()) + 1
        return found

    def where(self, dotted: str) -> str:
        for key, raw in self.overrides.items():
            if dotted == key or dotted.startswith(key + "."):
                return f"<--set {raw}>"
        line = self._line_of(dotted)
        return f"{self.source}:{line if line is not None else 1}"

    def error(self, dotted: str, reason: str) -> ConfigError:
        return ConfigError(f"{self.where(dotted)}: {dotted}: {reason}")


def _parse_override(raw: str) -> tuple[list[str], Any]:
    if "=" not in raw:
        raise ConfigError(f"<--set {raw}>: {raw}: expected key=value")
    key, _, value = raw.partition("=")
    parts = [p.strip() for p in key.strip().split(".")]
    if not all(parts):
        raise ConfigError(f"<--set {raw}>: {key}: empty path component")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return parts, parsed


def _apply_override(doc: dict[str, Any], parts: list[str], value: Any, raw: str) -> None:
    node = doc
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = {}
            node[p] = nxt
        if not isinstance(nxt, dict):
            raise ConfigError(f"<--set {raw}>: {'.'.join(parts)}: `{p}` is not a section")
        node = nxt
    node[parts[-1]] = value


class _Reader:
    def __init__(self, anchors: _Anchors):
        self.anchors = anchors

    def section(self, doc: Mapping[str, Any], name: str, allowed: Iterable[str], required: bool) -> dict[str, Any] | None:
        sec = doc.get(name)
        if sec is None:
            if required:
                raise self.anchors.error(name, "missing required section")
            return None
        if not isinstance(sec, dict):
            raise self.anchors.error(name, "must be an object")
        allowed = tuple(allowed)
        for k in sec:
            if k not in allowed:
                raise self.anchors.error(f"{name}.{k}", f"unknown key (allowed: {', '.join(allowed)})")
        return sec

    def number(self, sec: Mapping[str, Any], dotted: str, default: float | None = None) -> float:
        key = dotted.rsplit(".", 1)[-1]
        if key not in sec:
            if default is None:
                raise self.anchors.error(dotted, "missing required value")
            return default
        v = sec[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.anchors.error(dotted, f"expected a number, got {v!r}")
        if not math.isfinite(float(v)):
            raise self.anchors.error(dotted, f"must be finite, got {v!r}")
        return float(v)

    def integer(self, sec: Mapping[str, Any], dotted: str, default: int | None = None) -> int:
        key = dotted.rsplit(".", 1)[-1]
        if key not in sec:
            if default is None:
                raise self.anchors.error(dotted, "missing required value")
            return default
        v = sec[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or float(v) != int(v):
            raise self.anchors.error(dotted, f"expected an integer, got {v!r}")
        return int(v)

    def flag(self, sec: Mapping[str, Any], dotted: str, default: bool) -> bool:
        key = dotted.rsplit(".", 1)[-1]
        if key not in sec:
            return default
        v = sec[key]
        if not isinstance(v, bool):
            raise self.anchors.error(dotted, f"expected true or false, got {v!r}")
        return v


def _build(section: str, anchors: _Anchors, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ParameterError as e:
        msg = str(e)
        reason = msg.split(": ", 1)[1] if ": " in msg else msg
        # The grid horizon is the model's T.
        if e.field == "T":
            section = "model"
        raise anchors.error(f"{section}.{e.field}", reason) from None


def load_run_config(
    path: Path | str,
    overrides: Iterable[str] = (),
    *,
    output_dir: Path | str | None = None,
    seed: int | None = None,
    workers: int | None = None,
    default_workers: int = 1,
) -> RunConfig:
    path = Path(path)
    source = str(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{source}:1: <file>: cannot read config ({e.strerror or e})") from None
    return parse_run_config(
        text,
        source=source,
        overrides=overrides,
        output_dir=output_dir,
        seed=seed,
        workers=workers,
        default_workers=default_workers,
    )


def parse_run_config(
    text: str,
    *,
    source: str = "<config>",
    overrides: Iterable[str] = (),
    output_dir: Path | str | None = None,
    seed: int | None = None,
    workers: int | None = None,
    default_workers: int = 1,
) -> RunConfig:
    anchors = _Anchors(source, text)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}: <json>: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: <root>: config must be a JSON object")

    for raw in overrides:
        parts, value = _parse_override(raw)
        _apply_override(doc, parts, value, raw)
        anchors.overrides[".".join(parts)] = raw

    rd = _Reader(anchors)
    for k in doc:
        if k not in _TOP_KEYS:
            raise anchors.error(k, f"unknown key (allowed: {', '.join(_TOP_KEYS)})")

    version = doc.get("schema_version")
    if version is None:
        raise anchors.error("schema_version", "missing required value")
    if version != SCHEMA_VERSION:
        raise anchors.error("schema_version", f"unsupported version {version!r}, expected {SCHEMA_VERSION}")

    msec = rd.section(doc, "model", _MODEL_KEYS, required=True)
    assert msec is not None
    model = _build("model", anchors, ModelParams, **{k: rd.number(msec, f"model.{k}") for k in _MODEL_KEYS})

    ssec = rd.section(doc, "solver", _SOLVER_KEYS, required=False) or {}
    coupling = ssec.get("coupling", "mean_variance")
    if coupling not in COUPLINGS:
        raise anchors.error("solver.coupling", f"must be one of {', '.join(COUPLINGS)}, got {coupling!r}")
    n_steps = rd.integer(ssec, "solver.n_steps", DEFAULT_N_STEPS)
    grid = _build("solver", anchors, TimeGrid, t1=model.T, n_steps=n_steps)
    solver = _build(
        "solver",
        anchors,
        SolverConfig,
        grid=grid,
        picard_tol=rd.number(ssec, "solver.picard_tol", DEFAULT_PICARD_TOL),
        max_iters=rd.integer(ssec, "solver.max_iters", DEFAULT_MAX_ITERS),
        damping=rd.number(ssec, "solver.damping", 0.0),
        adaptive_damping=rd.flag(ssec, "solver.adaptive_damping", True),
        coupling=coupling,
    )

    simulation = None
    memory_budget = None
    simsec = rd.section(doc, "simulation", _SIMULATION_KEYS, required=False)
    sim_values = simsec or {}
    run_seed = int(seed) if seed is not None else rd.integer(sim_values, "simulation.seed", DEFAULT_SEED)
    run_workers = int(workers) if workers is not None else rd.integer(sim_values, "simulation.workers", default_workers)
    substeps = rd.integer(sim_values, "simulation.substeps", 1)
    if not (0 <= run_seed < 2**64):
        raise anchors.error("simulation.seed", f"need an unsigned 64-bit integer, got {run_seed}")
    if run_workers < 1:
        raise anchors.error("simulation.workers", f"must be >= 1, got {run_workers}")
    if substeps < 1:
        raise anchors.error("simulation.substeps", f"must be >= 1, got {substeps}")
    if simsec is not None:
        if "memory_budget" in simsec:
            memory_budget = rd.integer(simsec, "simulation.memory_budget")
            if memory_budget < 1:
                raise anchors.error("simulation.memory_budget", f"must be >= 1, got {memory_budget}")
        simulation = _build(
            "simulation",
            anchors,
            SimulationConfig,
            n_agents=rd.integer(simsec, "simulation.n_agents"),
            grid=grid,
            seed=run_seed,
            n_trials=rd.integer(simsec, "simulation.n_trials", 1),
            substeps=substeps,
            workers=run_workers,
        )

    study = None
    stsec = rd.section(doc, "study", _STUDY_KEYS, required=False)
    if stsec is not None:
        n_list = stsec.get("n_list")
        if not isinstance(n_list, list) or not n_list:
            raise anchors.error("study.n_list", "must be a nonempty list of population sizes")
        if any(isinstance(n, bool) or not isinstance(n, int) for n in n_list):
            raise anchors.error("study.n_list", f"entries must be integers, got {n_list!r}")
        if any(n < 2 for n in n_list) or any(b <= a for a, b in zip(n_list, n_list[1:])):
            raise anchors.error("study.n_list", f"must be strictly increasing with every n >= 2, got {n_list!r}")
        trials = rd.integer(stsec, "study.trials", 1)
        if trials < 1:
            raise anchors.error("study.trials", f"must be >= 1, got {trials}")
        profile = rd.integer(stsec, "study.profile_agents", 0)
        if profile != 0 and profile < 2:
            raise anchors.error("study.profile_agents", f"must be 0 (off) or >= 2, got {profile}")
        study = StudyConfig(n_list=tuple(n_list), trials=trials, profile_agents=profile)

    csec = rd.section(doc, "check", _CHECK_KEYS, required=False) or {}
    check = CheckConfig()
    if "m" in csec and "m_grid" in csec:
        raise anchors.error("check.m", "give either m or m_grid, not both")
    if "m" in csec:
        m = rd.number(csec, "check.m")
        if m < 0.0:
            raise anchors.error("check.m", f"must be >= 0, got {m!r}")
        check = CheckConfig(m=m)
    elif "m_grid" in csec:
        gsec = csec["m_grid"]
        if not isinstance(gsec, dict) or set(gsec) != {"start", "stop", "step"}:
            raise anchors.error("check.m_grid", "must be an object with exactly start, stop and step")
        g = tuple(rd.number(gsec, f"check.m_grid.{k}") for k in ("start", "stop", "step"))
        try:
            m_grid(*g)
        except ValueError as e:
            raise anchors.error("check.m_grid", str(e)) from None
        check = CheckConfig(grid=g)  # type: ignore[arg-type]

    emit_raw = doc.get("emit", sorted(EMIT_KINDS))
    if not isinstance(emit_raw, list) or any(not isinstance(x, str) for x in emit_raw):
        raise anchors.error("emit", "must be a list of names")
    unknown = sorted(set(emit_raw) - EMIT_KINDS)
    if unknown:
        raise anchors.error("emit", f"unknown kinds {unknown} (allowed: {', '.join(sorted(EMIT_KINDS))})")

    out = output_dir if output_dir is not None else doc.get("output_dir", "out")
    if not isinstance(out, (str, Path)) or not str(out):
        raise anchors.error("output_dir", "must be a nonempty path string")

    return RunConfig(
        model=model,
        solver=solver,
        simulation=simulation,
        study=study,
        check=check,
        output_dir=Path(out),
        emit=frozenset(emit_raw),
        memory_budget=memory_budget,
        seed=run_seed,
        workers=run_workers,
        substeps=substeps,
        source=source,
    )
