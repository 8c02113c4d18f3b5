"""
Experiment configuration: one JSON document parsed into frozen dataclasses.

Every documented default lives in a module constant below. Validation walks
the whole document and collects every violation (unknown keys included) with
its dotted path before raising a single ConfigError, so a typo and a bad
parameter show up in the same report. Relative file paths resolve against
the directory of the configuration file.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import pandas as pd

from melsim.emissions import DEFAULT_COEFFS, DEFAULT_SUBSTEPS, rate_is_nonnegative
from melsim.errors import ConfigError, ConfigIssue
from melsim.migration import (
    DEFAULT_BETA,
    DEFAULT_COOLDOWN,
    DEFAULT_MAX_PER_BOUNDARY,
    DEFAULT_THETA,
    DEFAULT_WINDOW,
    MigrationParams,
)
from melsim.micro import DEFAULT_P_BRAKE, DEFAULT_VMAX
from melsim.multilevel import AUTOMATIC, CONTINUOUS, LEVEL_KINDS, MANUAL, MAX_LEVELS, TIME_STEPPED, as_fraction
from melsim.partition import STRATEGIES
from melsim.roadgraph import CELL_LENGTH_M, FORMATS
from melsim.traffic_model import DEFAULT_FREE_FLOW_MPS
from melsim.v2v import DEFAULT_RANGE_M

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0
DEFAULT_N_LPS = 1
DEFAULT_PARTITION = "round-robin"
# Coarse, fine and continuous step sizes (seconds)
DEFAULT_LEVELS = ((Fraction(3), TIME_STEPPED), (Fraction(1), TIME_STEPPED), (Fraction(1), CONTINUOUS))
# Automatic trigger: vehicles on a watched link that open a session
DEFAULT_DENSITY_THRESHOLD = 8
# Automatic trigger: number of top-betweenness nodes watched
DEFAULT_WATCH_TOP_K = 5
# Coarse steps an automatically triggered session lasts
DEFAULT_MIN_SESSION_STEPS = 10
DEFAULT_OUTPUT_DIR = "out"
# LP counts compared against the sequential oracle by `verify`
DEFAULT_VERIFY_LPS = (1, 2, 4, 8)

GENERATORS = ("ring", "grid")
DEMAND_COLUMNS = ("step", "origin", "dest", "count")


@dataclass(frozen=True)
class MigrationConfig:
    window: int = DEFAULT_WINDOW
    theta: float = DEFAULT_THETA
    beta: float = DEFAULT_BETA
    cooldown: int = DEFAULT_COOLDOWN
    max_per_boundary: int = DEFAULT_MAX_PER_BOUNDARY

    def params(self) -> MigrationParams:
        return MigrationParams(self.window, self.theta, self.beta, self.cooldown, self.max_per_boundary)


@dataclass(frozen=True)
class LevelConfig:
    step_size: Fraction
    kind: str = TIME_STEPPED


@dataclass(frozen=True)
class GraphSource:
    """Either a graph file (native or OSM extract) or a synthetic generator."""

    path: Path | None = None
    format: str = "native"
    generator: str | None = None
    nodes: int = 0  # ring
    rows: int = 0  # grid
    cols: int = 0  # grid
    length_m: float = 75.0
    oneway: bool = True
    lanes: int = 1
    capacity_per_step: int | None = None


@dataclass(frozen=True)
class ManualSession:
    s0: int
    s1: int
    node: Any = None  # region = arcs incident to this node id
    arcs: tuple[int, ...] = ()


@dataclass(frozen=True)
class TriggerConfig:
    mode: str = MANUAL
    sessions: tuple[ManualSession, ...] = ()
    density_threshold: int = DEFAULT_DENSITY_THRESHOLD
    top_k: int = DEFAULT_WATCH_TOP_K
    min_session_steps: int = DEFAULT_MIN_SESSION_STEPS


@dataclass(frozen=True)
class NaschConfig:
    vmax: int = DEFAULT_VMAX
    p_brake: float = DEFAULT_P_BRAKE


@dataclass(frozen=True)
class EmissionsConfig:
    coeffs: tuple[float, float, float, float] = DEFAULT_COEFFS
    substeps: int = DEFAULT_SUBSTEPS


@dataclass(frozen=True)
class V2VConfig:
    range_m: float = DEFAULT_RANGE_M


@dataclass(frozen=True)
class PopulationConfig:
    vehicles: int = 0
    roam: bool = True


@dataclass(frozen=True)
class DemandRow:
    """count vehicles entering at node `origin` at coarse step `step`; dest None roams."""

    step: int
    origin: Any
    count: int
    dest: Any = None


@dataclass(frozen=True)
class ScenarioConfig:
    graph: GraphSource
    population: PopulationConfig = field(default_factory=PopulationConfig)
    demand: tuple[DemandRow, ...] = ()
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    nasch: NaschConfig = field(default_factory=NaschConfig)
    emissions: EmissionsConfig = field(default_factory=EmissionsConfig)
    v2v: V2VConfig = field(default_factory=V2VConfig)
    free_flow_mps: float = DEFAULT_FREE_FLOW_MPS
    cell_length_m: float = CELL_LENGTH_M


@dataclass(frozen=True)
class OutputConfig:
    dir: Path = Path(DEFAULT_OUTPUT_DIR)
    top_k: int | None = None  # critical points listed by `analyze`; None lists every node


@dataclass(frozen=True)
class VerifyConfig:
    lps: tuple[int, ...] = DEFAULT_VERIFY_LPS
    fault_step: int | None = None  # test hook: corrupt draws on fault_lp at this step
    fault_lp: int = 1


@dataclass(frozen=True)
class Config:
    horizon: int
    scenario: ScenarioConfig
    seed: int = DEFAULT_SEED
    n_lps: int = DEFAULT_N_LPS
    partition: str = DEFAULT_PARTITION
    migration: MigrationConfig | None = None
    levels: tuple[LevelConfig, ...] = tuple(LevelConfig(s, k) for s, k in DEFAULT_LEVELS)
    jitter_ms: float = 0.0
    output: OutputConfig = field(default_factory=OutputConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    source: Path | None = None

    @property
    def ratio(self) -> int:
        """Coarse / fine step ratio (1 when only one level is configured)."""
        if len(self.levels) < 2 or self.levels[1].kind != TIME_STEPPED:
            return 1
        return int(self.levels[0].step_size / self.levels[1].step_size)

    @property
    def coarse_step_s(self) -> float:
        return float(self.levels[0].step_size)


_MISSING = object()


class _Section:
    """Typed access to one JSON object, recording issues under its dotted path."""

    def __init__(self, doc: Any, path: str, issues: list[ConfigIssue], allowed: tuple[str, ...]) -> None:
        self.path = path
        self.issues = issues
        if not isinstance(doc, dict):
            self.issue("", "must be an object")
            doc = {}
        self.doc = doc
        for key in sorted(set(doc) - set(allowed)):
            self.issue(key, "unknown key")

    def where(self, key: str) -> str:
        if not key:
            return self.path or "<root>"
        if key.startswith("["):
            return f"{self.path}{key}"
        return f"{self.path}.{key}" if self.path else key

    def issue(self, key: str, message: str) -> None:
        self.issues.append(ConfigIssue(self.where(key), message))

    def has(self, key: str) -> bool:
        return key in self.doc

    def raw(self, key: str, default: Any = _MISSING) -> Any:
        if key not in self.doc:
            if default is _MISSING:
                self.issue(key, "required")
                return None
            return default
        return self.doc[key]

    def integer(self, key: str, default: Any = _MISSING, minimum: int | None = None) -> int | None:
        value = self.raw(key, default)
        if value is None or value is default:
            return value
        if isinstance(value, bool) or not isinstance(value, int):
            self.issue(key, f"must be an integer, got {value!r}")
            return default if default is not _MISSING else None
        if minimum is not None and value < minimum:
            self.issue(key, f"must be >= {minimum}, got {value}")
        return value

    def number(self, key: str, default: Any = _MISSING) -> float | None:
        value = self.raw(key, default)
        if value is None or value is default:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.issue(key, f"must be a number, got {value!r}")
            return default if default is not _MISSING else None
        return float(value)

    def flag(self, key: str, default: bool) -> bool:
        value = self.raw(key, default)
        if not isinstance(value, bool):
            self.issue(key, f"must be true or false, got {value!r}")
            return default
        return value

    def choice(self, key: str, options: tuple[str, ...], default: Any = _MISSING) -> str | None:
        value = self.raw(key, default)
        if value is None or value is default:
            return value
        if value not in options:
            self.issue(key, f"unknown value {value!r}; expected one of {', '.join(options)}")
            return default if default is not _MISSING else None
        return value

    def section(self, key: str, allowed: tuple[str, ...]) -> "_Section":
        return _Section(self.doc.get(key, {}), self.where(key), self.issues, allowed)

    def items(self, key: str) -> list[tuple[str, Any]]:
        value = self.raw(key, [])
        if not isinstance(value, list):
            self.issue(key, "must be a list")
            return []
        return [(self.where(f"{key}[{i}]"), item) for i, item in enumerate(value)]


def _migration(root: _Section) -> MigrationConfig | None:
    if not root.has("migration") or root.doc["migration"] is None:
        return None
    sec = root.section("migration", ("enabled", "window", "theta", "beta", "cooldown", "max_per_boundary"))
    enabled = sec.flag("enabled", True)
    window = sec.integer("window", DEFAULT_WINDOW, minimum=1)
    theta = sec.number("theta", DEFAULT_THETA)
    beta = sec.number("beta", DEFAULT_BETA)
    cooldown = sec.integer("cooldown", DEFAULT_COOLDOWN, minimum=0)
    max_per_boundary = sec.integer("max_per_boundary", DEFAULT_MAX_PER_BOUNDARY, minimum=0)
    if theta is not None and not 0.5 < theta <= 1.0:
        sec.issue("theta", f"must satisfy 0.5 < theta <= 1 (a strict external majority), got {theta}")
    if beta is not None and beta < 0:
        sec.issue("beta", f"must be >= 0, got {beta}")
    if not enabled:
        return None
    return MigrationConfig(window, theta, beta, cooldown, max_per_boundary)


def _levels(root: _Section) -> tuple[LevelConfig, ...]:
    if not root.has("levels"):
        return tuple(LevelConfig(s, k) for s, k in DEFAULT_LEVELS)
    entries = root.items("levels")
    if not 1 <= len(entries) <= MAX_LEVELS:
        root.issue("levels", f"must list 1 to {MAX_LEVELS} levels, got {len(entries)}")
    levels: list[LevelConfig] = []
    for i, (path, item) in enumerate(entries):
        sec = _Section(item, path, root.issues, ("step_size", "kind"))
        kind = sec.choice("kind", LEVEL_KINDS, TIME_STEPPED)
        raw = sec.raw("step_size")
        try:
            step = as_fraction(raw) if raw is not None and not isinstance(raw, bool) else None
        except (TypeError, ValueError):
            step = None
        if raw is not None and step is None:
            sec.issue("step_size", f"must be a number, got {raw!r}")
            continue
        if step is None:
            continue
        if step <= 0:
            sec.issue("step_size", f"must be positive, got {raw}")
            continue
        if i == 0 and kind != TIME_STEPPED:
            sec.issue("kind", "level 0 must be time-stepped")
        if levels and kind == TIME_STEPPED and levels[-1].kind == TIME_STEPPED:
            exact = levels[-1].step_size / step
            if exact.denominator != 1:
                sec.issue(
                    "step_size",
                    f"{step} s does not divide the parent step {levels[-1].step_size} s into an integer ratio",
                )
        if levels and levels[-1].kind == CONTINUOUS:
            sec.issue("kind", "no level may follow a continuous level")
        levels.append(LevelConfig(step, kind))
    return tuple(levels)


def _graph(sec: _Section, base_dir: Path) -> GraphSource:
    g = sec.section(
        "graph",
        ("path", "format", "generator", "nodes", "rows", "cols", "length_m", "oneway", "lanes", "capacity_per_step"),
    )
    has_path = g.has("path")
    has_gen = g.has("generator")
    if has_path == has_gen:
        g.issue("", "set exactly one of 'path' or 'generator'")
    path = None
    if has_path:
        raw = g.raw("path")
        if not isinstance(raw, str):
            g.issue("path", "must be a string")
        else:
            path = Path(raw)
            if not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                g.issue("path", f"file not found: {path}")
    fmt = g.choice("format", FORMATS, "native")
    generator = g.choice("generator", GENERATORS, None)
    nodes = g.integer("nodes", 0, minimum=0)
    rows = g.integer("rows", 0, minimum=0)
    cols = g.integer("cols", 0, minimum=0)
    if generator == "ring" and nodes < 2:
        g.issue("nodes", "a ring needs at least 2 nodes")
    if generator == "grid" and rows * cols < 2:
        g.issue("rows", "a grid needs at least 2 nodes (rows x cols)")
    length = g.number("length_m", 75.0 if generator != "grid" else 150.0)
    if length is not None and length <= 0:
        g.issue("length_m", f"must be positive, got {length}")
    capacity = g.integer("capacity_per_step", None, minimum=1)
    return GraphSource(
        path=path,
        format=fmt,
        generator=generator,
        nodes=nodes,
        rows=rows,
        cols=cols,
        length_m=length,
        oneway=g.flag("oneway", generator != "grid"),
        lanes=g.integer("lanes", 1, minimum=1),
        capacity_per_step=capacity,
    )


def _demand_row(path: str, item: Any, issues: list[ConfigIssue]) -> DemandRow | None:
    sec = _Section(item, path, issues, DEMAND_COLUMNS)
    before = len(issues)
    step = sec.integer("step", minimum=0)
    count = sec.integer("count", minimum=0)
    origin = sec.raw("origin")
    dest = sec.raw("dest", None)
    if len(issues) != before:
        return None
    return DemandRow(step=step, origin=origin, count=count, dest=dest)


def _csv_value(text: str) -> Any:
    text = text.strip()
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return text


def read_demand_csv(path: Path, issues: list[ConfigIssue], where: str = "scenario.demand") -> list[DemandRow]:
    """Rows of a `step,origin,dest,count` CSV; an empty dest roams."""
    rows: list[DemandRow] = []
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        issues.append(ConfigIssue(where, f"cannot read {path}: {exc}"))
        return rows
    if set(df.columns) != set(DEMAND_COLUMNS):
        issues.append(ConfigIssue(where, f"{path}: header must be {','.join(DEMAND_COLUMNS)}"))
        return rows
    for i, record in enumerate(df.to_dict("records")):
        item = {key: _csv_value(value) for key, value in record.items()}
        if item["dest"] is None:
            del item["dest"]
        row = _demand_row(f"{where}[{i}]", item, issues)
        if row is not None:
            rows.append(row)
    return rows


def _demand(sec: _Section, base_dir: Path) -> tuple[DemandRow, ...]:
    value = sec.raw("demand", [])
    if isinstance(value, str):
        path = Path(value)
        if not path.is_absolute():
            path = base_dir / path
        return tuple(read_demand_csv(path, sec.issues, sec.where("demand")))
    rows = []
    for path, item in sec.items("demand"):
        row = _demand_row(path, item, sec.issues)
        if row is not None:
            rows.append(row)
    return tuple(rows)


def _trigger(sec: _Section, horizon: int | None) -> TriggerConfig:
    t = sec.section("trigger", ("mode", "sessions", "density_threshold", "top_k", "min_session_steps"))
    mode = t.choice("mode", (MANUAL, AUTOMATIC), MANUAL)
    sessions = []
    for path, item in t.items("sessions"):
        s = _Section(item, path, t.issues, ("s0", "s1", "node", "arcs"))
        s0 = s.integer("s0", minimum=0)
        s1 = s.integer("s1", minimum=1)
        if s0 is not None and s1 is not None and s0 >= s1:
            s.issue("s1", f"must be greater than s0={s0}, got {s1}")
        if s1 is not None and horizon is not None and s1 > horizon:
            s.issue("s1", f"lies beyond the horizon {horizon}")
        node = s.raw("node", None)
        arcs = s.raw("arcs", [])
        if not isinstance(arcs, list) or any(isinstance(a, bool) or not isinstance(a, int) for a in arcs):
            s.issue("arcs", "must be a list of arc indices")
            arcs = []
        if (node is None) == (not arcs):
            s.issue("", "set exactly one of 'node' or 'arcs'")
        if s0 is not None and s1 is not None:
            sessions.append(ManualSession(s0, s1, node, tuple(arcs)))
    return TriggerConfig(
        mode=mode,
        sessions=tuple(sessions),
        density_threshold=t.integer("density_threshold", DEFAULT_DENSITY_THRESHOLD, minimum=1),
        top_k=t.integer("top_k", DEFAULT_WATCH_TOP_K, minimum=0),
        min_session_steps=t.integer("min_session_steps", DEFAULT_MIN_SESSION_STEPS, minimum=1),
    )


def _scenario(root: _Section, base_dir: Path, horizon: int | None, fine_step: Fraction | None) -> ScenarioConfig:
    sec = root.section(
        "scenario",
        ("graph", "population", "demand", "trigger", "nasch", "emissions", "v2v", "free_flow_mps", "cell_length_m"),
    )
    if not root.has("scenario"):
        root.issue("scenario", "required")
    graph = _graph(sec, base_dir)

    p = sec.section("population", ("vehicles", "roam"))
    population = PopulationConfig(p.integer("vehicles", 0, minimum=0), p.flag("roam", True))

    n = sec.section("nasch", ("vmax", "p_brake"))
    vmax = n.integer("vmax", DEFAULT_VMAX, minimum=1)
    p_brake = n.number("p_brake", DEFAULT_P_BRAKE)
    if p_brake is not None and not 0.0 <= p_brake <= 1.0:
        n.issue("p_brake", f"must lie in [0, 1], got {p_brake}")

    cell_length = sec.number("cell_length_m", CELL_LENGTH_M)
    if cell_length is not None and cell_length <= 0:
        sec.issue("cell_length_m", f"must be positive, got {cell_length}")

    e = sec.section("emissions", ("coeffs", "substeps"))
    coeffs = e.raw("coeffs", list(DEFAULT_COEFFS))
    if (
        not isinstance(coeffs, list)
        or len(coeffs) != 4
        or any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in coeffs)
    ):
        e.issue("coeffs", "must be a list of 4 numbers (a, b, c, d)")
        coeffs = list(DEFAULT_COEFFS)
    coeffs = tuple(float(c) for c in coeffs)
    if fine_step and vmax and cell_length and cell_length > 0:
        v_top = vmax * cell_length / float(fine_step)
        if not rate_is_nonnegative(coeffs, v_top):
            e.issue("coeffs", f"emission rate turns negative within [0, {v_top:g}] m/s")
    emissions = EmissionsConfig(coeffs, e.integer("substeps", DEFAULT_SUBSTEPS, minimum=1))

    v = sec.section("v2v", ("range_m",))
    range_m = v.number("range_m", DEFAULT_RANGE_M)
    if range_m is not None and range_m <= 0:
        v.issue("range_m", f"must be positive, got {range_m}")

    free_flow = sec.number("free_flow_mps", DEFAULT_FREE_FLOW_MPS)
    if free_flow is not None and free_flow <= 0:
        sec.issue("free_flow_mps", f"must be positive, got {free_flow}")

    return ScenarioConfig(
        graph=graph,
        population=population,
        demand=_demand(sec, base_dir),
        trigger=_trigger(sec, horizon),
        nasch=NaschConfig(vmax, p_brake),
        emissions=emissions,
        v2v=V2VConfig(range_m),
        free_flow_mps=free_flow,
        cell_length_m=cell_length,
    )


def _output(root: _Section) -> OutputConfig:
    sec = root.section("output", ("dir", "top_k"))
    raw = sec.raw("dir", DEFAULT_OUTPUT_DIR)
    if not isinstance(raw, str):
        sec.issue("dir", "must be a string")
        raw = DEFAULT_OUTPUT_DIR
    return OutputConfig(Path(raw), sec.integer("top_k", None, minimum=0))


def _verify(root: _Section) -> VerifyConfig:
    sec = root.section("verify", ("lps", "fault_step", "fault_lp"))
    lps = sec.raw("lps", list(DEFAULT_VERIFY_LPS))
    if not isinstance(lps, list) or not lps or any(isinstance(n, bool) or not isinstance(n, int) or n < 1 for n in lps):
        sec.issue("lps", "must be a non-empty list of integers >= 1")
        lps = list(DEFAULT_VERIFY_LPS)
    return VerifyConfig(
        lps=tuple(lps),
        fault_step=sec.integer("fault_step", None, minimum=0),
        fault_lp=sec.integer("fault_lp", 1, minimum=0),
    )


def parse_config(document: dict[str, Any] | str | bytes, base_dir: str | Path = ".", source: Path | None = None) -> Config:
    """
    Validate a configuration document and return a Config with defaults applied.

    Raises ConfigError listing every violation found, each with its field path.
    """
    issues: list[ConfigIssue] = []
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError([ConfigIssue("<root>", f"not valid JSON: {exc}")]) from exc
    base_dir = Path(base_dir)
    root = _Section(
        document,
        "",
        issues,
        ("seed", "horizon", "n_lps", "partition", "migration", "levels", "jitter_ms", "scenario", "output", "verify"),
    )
    seed = root.integer("seed", DEFAULT_SEED, minimum=0)
    horizon = root.integer("horizon", minimum=0)
    n_lps = root.integer("n_lps", DEFAULT_N_LPS, minimum=1)
    partition = root.choice("partition", STRATEGIES, DEFAULT_PARTITION)
    jitter_ms = root.number("jitter_ms", 0.0)
    if jitter_ms is not None and jitter_ms < 0:
        root.issue("jitter_ms", f"must be >= 0, got {jitter_ms}")
    migration = _migration(root)
    levels = _levels(root)
    fine_step = levels[1].step_size if len(levels) > 1 and levels[1].kind == TIME_STEPPED else (
        levels[0].step_size if levels else None
    )
    scenario = _scenario(root, base_dir, horizon, fine_step)
    output = _output(root)
    verify = _verify(root)
    if issues:
        for item in issues:
            logger.error("Config: %s", item)
        raise ConfigError(issues)
    return Config(
        horizon=horizon,
        scenario=scenario,
        seed=seed,
        n_lps=n_lps,
        partition=partition,
        migration=migration,
        levels=levels,
        jitter_ms=jitter_ms,
        output=output,
        verify=verify,
        source=source,
    )


def load_config(path: str | Path) -> Config:
    """Read and validate a configuration file; relative paths inside resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([ConfigIssue("<file>", f"cannot read {path}: {exc.strerror}")]) from exc
    config = parse_config(text, base_dir=path.resolve().parent, source=path)
    logger.info("Loaded config %s (horizon %s, %s LPs)", path, config.horizon, config.n_lps)
    return config
