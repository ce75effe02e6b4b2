"""Scenario configuration, presets, batch sweeps, and file outputs.

A scenario bundles everything one control run needs: parameters, an initial
condition rule, an output grid, the set of active control channels with
their bounds and cost weights, iteration settings, and a seed. Scenarios
are described by plain data (YAML trees with a ``schema_version``), either
shipped as named presets or supplied by the user, so every run can be
reproduced from its manifest file alone.

Outputs are CSV only: states, controls, and costates on the output grid,
plus a YAML summary (final infected counts, objective, days to 90%
reduction, per-channel activity) and the manifest. Sweeps run one scenario
per swept value (compliance fraction or rodent starting prevalence), keep
going past per-value failures, and assemble a long-format CSV across
values. ``emit_plot_data`` reshapes bundles into the fixed plot-data files
(fig2_states.csv .. fig7_integrated.csv) with gnuplot stubs.
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .control import (
    ControlBounds,
    ControlWeights,
    SweepConfig,
    SweepResult,
    forward_backward_sweep,
)
from .equilibria import EquilibriumError, dfe2, endemic_equilibrium, r0
from .integrate import TimeGrid
from .model import (
    ModelParams,
    SpeciesParams,
    State,
    default_params,
    params_from_dict,
    params_to_dict,
)
from .simulate import _HAVE_FAST

__all__ = [
    "SCHEMA_VERSION",
    "PRESET_NAMES",
    "RodentConfig",
    "ScenarioBundle",
    "ScenarioConfig",
    "ScenarioError",
    "SweepBundle",
    "SweepSpec",
    "TreatmentChannel",
    "Channel",
    "config_from_dict",
    "config_from_file",
    "config_to_dict",
    "emit_plot_data",
    "list_presets",
    "load_preset",
    "read_table",
    "replay_manifest",
    "run_scenario",
    "run_sweep",
    "write_table",
]

SCHEMA_VERSION = 1

PRESET_NAMES = ("treatment-only", "aquatic-only", "mechanical-only",
                "integrated", "rodents")

# canonical channel names used in configs, summaries, and long CSVs
CH_AQUATIC = "aquatic"
CH_SNAIL = "snail_kill"
CH_CAPACITY = "capacity"

# a channel counts as active at a node when its level exceeds this fraction
# of its (effective) bound; the capacity channel measures the deviation u-1
ACTIVITY_FRACTION = 0.01


class ScenarioError(RuntimeError):
    """A scenario cannot be resolved or run as configured."""


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------

@dataclass
class Channel:
    """One control channel: activity flag, upper bound, cost weight."""

    active: bool = False
    max: float = 0.0
    weight: float = 1.0


@dataclass
class TreatmentChannel(Channel):
    """Treatment channel for one named controlled species."""

    species: str = ""


@dataclass
class RodentConfig:
    """Optional uncontrolled species appended to the parameter set.

    The species copies the demography and infection block of
    ``base_species`` with its contact and oviposition rates scaled down;
    its shipped values are placeholders, stated in the preset file, because
    no field estimates exist for this block. ``prevalence`` sets the
    infected fraction of the appended pool at t0.
    """

    enabled: bool = False
    prevalence: float = 0.2
    omega_scale: float = 0.1
    theta_scale: float = 0.1
    base_species: str = "bovine"
    name: str = "rodent"

    def validate(self) -> None:
        if not 0.0 <= self.prevalence < 1.0:
            raise ScenarioError(
                f"rodent prevalence must lie in [0, 1), got {self.prevalence}")
        if self.omega_scale < 0.0 or self.theta_scale < 0.0:
            raise ScenarioError("rodent parameter scales must be >= 0")


@dataclass
class ScenarioConfig:
    """Everything one control run needs, as plain data."""

    name: str
    params: ModelParams
    initial_mode: str = "endemic"            # endemic | dfe2_seed | state
    seed_fraction: float = 0.1               # dfe2_seed only
    initial_state: tuple[float, ...] | None = None   # state only
    rodents: RodentConfig | None = None
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 365.0, 0.25))
    aquatic: Channel = field(default_factory=Channel)
    snail_kill: Channel = field(default_factory=Channel)
    capacity: Channel = field(default_factory=lambda: Channel(max=1.0))
    treatment: tuple[TreatmentChannel, ...] = ()
    sweep: SweepConfig = field(default_factory=SweepConfig)
    engine: str = "auto"
    substeps: str | int = "auto"
    seed: int = 0
    out: str | None = None
    description: str = ""

    def validate(self) -> None:
        self.params.validate()
        if self.initial_mode not in ("endemic", "dfe2_seed", "state"):
            raise ScenarioError(
                f"unknown initial mode {self.initial_mode!r}; choose "
                "'endemic', 'dfe2_seed', or 'state'")
        if self.initial_mode == "state":
            if self.initial_state is None:
                raise ScenarioError("initial mode 'state' needs an explicit "
                                    "state vector")
        if self.initial_mode == "dfe2_seed":
            if not 0.0 <= self.seed_fraction < 1.0:
                raise ScenarioError(
                    f"seed_fraction must lie in [0, 1), got {self.seed_fraction}")
        if self.rodents is not None:
            self.rodents.validate()
        for label, ch in ((CH_AQUATIC, self.aquatic), (CH_SNAIL, self.snail_kill)):
            if ch.active and ch.max <= 0.0:
                raise ScenarioError(f"active channel {label} needs a positive bound")
            if ch.weight <= 0.0:
                raise ScenarioError(f"channel {label} needs a positive weight")
        if self.capacity.active and self.capacity.max <= 1.0:
            raise ScenarioError("active capacity channel needs a bound > 1")
        if self.capacity.weight <= 0.0:
            raise ScenarioError("channel capacity needs a positive weight")
        seen = set()
        for t in self.treatment:
            if t.species in seen:
                raise ScenarioError(f"duplicate treatment entry for {t.species!r}")
            seen.add(t.species)
            if t.active and t.max <= 0.0:
                raise ScenarioError(
                    f"active treatment channel for {t.species!r} needs a "
                    "positive bound")
            if t.weight <= 0.0:
                raise ScenarioError(
                    f"treatment channel for {t.species!r} needs a positive weight")
        species_names = {s.name for s in self.params.species}
        unknown = seen - species_names
        if unknown:
            raise ScenarioError(
                f"treatment entries for unknown species: {sorted(unknown)}")


@dataclass
class SweepSpec:
    """A batch of scenario runs over one swept quantity."""

    kind: str                       # compliance | rodent_prevalence
    values: tuple[float, ...]
    base: ScenarioConfig
    # compliance only: which bounds to scale; a canonical channel name,
    # the "treatment" group (default, both treatment bounds), or "all"
    channel: str = "treatment"

    def validate(self) -> None:
        if self.kind not in ("compliance", "rodent_prevalence"):
            raise ScenarioError(
                f"unknown sweep kind {self.kind!r}; choose 'compliance' or "
                "'rodent_prevalence'")
        if self.kind == "compliance":
            for v in self.values:
                if not 0.0 < v <= 1.0:
                    raise ScenarioError(
                        f"compliance fractions must lie in (0, 1], got {v}")
            known = {CH_AQUATIC, CH_SNAIL, CH_CAPACITY, "treatment", "all"}
            known.update(f"treatment_{t.species}" for t in self.base.treatment)
            if self.channel not in known:
                raise ScenarioError(
                    f"unknown sweep channel {self.channel!r}; "
                    f"choose one of {sorted(known)}")
        else:
            for v in self.values:
                if not 0.0 <= v < 1.0:
                    raise ScenarioError(
                        f"rodent prevalence must lie in [0, 1), got {v}")
            if self.base.rodents is None or not self.base.rodents.enabled:
                raise ScenarioError(
                    "a rodent-prevalence sweep needs a base scenario with "
                    "the rodents block enabled")
        self.base.validate()


# ---------------------------------------------------------------------------
# config (de)serialization
# ---------------------------------------------------------------------------

def _reject_unknown(tree: dict, known: set, label: str) -> None:
    extra = set(tree) - known
    if extra:
        raise ScenarioError(f"{label}: unknown keys {sorted(extra)}")


def _channel_from_tree(tree, label: str) -> Channel:
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ScenarioError(f"channel {label} must be a mapping")
    _reject_unknown(tree, {"active", "max", "weight"}, f"channel {label}")
    return Channel(active=bool(tree.get("active", False)),
                   max=float(tree.get("max", 0.0)),
                   weight=float(tree.get("weight", 1.0)))


def _params_from_source(source, base_dir: Path | None) -> ModelParams:
    if source == "defaults" or source is None:
        return default_params()
    if isinstance(source, dict) and set(source) == {"file"}:
        path = Path(source["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ScenarioError(f"parameter file does not exist: {path}")
        return params_from_dict(yaml.safe_load(path.read_text()))
    if isinstance(source, dict):
        return params_from_dict(source)
    raise ScenarioError(
        "params must be 'defaults', an inline parameter tree, or "
        "{file: <path>}")


def config_from_dict(tree: dict, *, base_dir: Path | None = None,
                     name: str = "") -> ScenarioConfig:
    """Build and validate a ScenarioConfig from a parsed config tree."""
    if not isinstance(tree, dict):
        raise ScenarioError("a scenario config must be a mapping")
    version = tree.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(
            f"unsupported schema_version {version!r}; this build reads "
            f"version {SCHEMA_VERSION}")
    known = {"schema_version", "name", "description", "params", "initial",
             "rodents", "grid", "channels", "sweep", "engine", "substeps",
             "seed", "out", "sweep_spec"}
    extra = set(tree) - known
    if extra:
        raise ScenarioError(f"unknown config keys: {sorted(extra)}")

    params = _params_from_source(tree.get("params"), base_dir)

    init = tree.get("initial") or {"mode": "endemic"}
    _reject_unknown(init, {"mode", "seed_fraction", "state"}, "initial")
    mode = init.get("mode", "endemic")
    initial_state = None
    if "state" in init:
        initial_state = tuple(float(v) for v in init["state"])

    rodents = None
    if "rodents" in tree and tree["rodents"] is not None:
        r = tree["rodents"]
        _reject_unknown(r, {"enabled", "prevalence", "omega_scale",
                            "theta_scale", "base_species", "name"}, "rodents")
        rodents = RodentConfig(
            enabled=bool(r.get("enabled", False)),
            prevalence=float(r.get("prevalence", 0.2)),
            omega_scale=float(r.get("omega_scale", 0.1)),
            theta_scale=float(r.get("theta_scale", 0.1)),
            base_species=str(r.get("base_species", "bovine")),
            name=str(r.get("name", "rodent")))

    g = tree.get("grid") or {}
    _reject_unknown(g, {"t0", "t_end", "dt"}, "grid")
    grid = TimeGrid(t0=float(g.get("t0", 0.0)),
                    t_end=float(g.get("t_end", 365.0)),
                    dt=float(g.get("dt", 0.25)))

    ch = tree.get("channels") or {}
    _reject_unknown(ch, {CH_AQUATIC, CH_SNAIL, CH_CAPACITY, "treatment"},
                    "channels")
    treatment = []
    for entry in ch.get("treatment", ()):
        if "species" not in entry:
            raise ScenarioError("every treatment entry needs a species name")
        _reject_unknown(entry, {"species", "active", "max", "weight"},
                        "treatment entry")
        treatment.append(TreatmentChannel(
            species=str(entry["species"]),
            active=bool(entry.get("active", False)),
            max=float(entry.get("max", 0.0)),
            weight=float(entry.get("weight", 1.0))))

    sw = tree.get("sweep") or {}
    _reject_unknown(sw, {"rho", "tol", "max_iterations"}, "sweep")
    sweep = SweepConfig(rho=float(sw.get("rho", 0.5)),
                        tol=float(sw.get("tol", 1e-4)),
                        max_iterations=int(sw.get("max_iterations", 500)))

    config = ScenarioConfig(
        name=str(tree.get("name", name or "scenario")),
        params=params,
        initial_mode=str(mode),
        seed_fraction=float(init.get("seed_fraction", 0.1)),
        initial_state=initial_state,
        rodents=rodents,
        grid=grid,
        aquatic=_channel_from_tree(ch.get(CH_AQUATIC), CH_AQUATIC),
        snail_kill=_channel_from_tree(ch.get(CH_SNAIL), CH_SNAIL),
        capacity=_channel_from_tree(ch.get(CH_CAPACITY), CH_CAPACITY),
        treatment=tuple(treatment),
        sweep=sweep,
        engine=str(tree.get("engine", "auto")),
        substeps=tree.get("substeps", "auto"),
        seed=int(tree.get("seed", 0)),
        out=tree.get("out"),
        description=str(tree.get("description", "")))
    config.validate()
    return config


def config_to_dict(config: ScenarioConfig) -> dict:
    """Serialize a config back to its tree form (inverse of config_from_dict)."""
    tree = {
        "schema_version": SCHEMA_VERSION,
        "name": config.name,
        "description": config.description,
        "params": params_to_dict(config.params),
        "initial": {"mode": config.initial_mode},
        "grid": {"t0": config.grid.t0, "t_end": config.grid.t_end,
                 "dt": config.grid.dt},
        "channels": {
            CH_AQUATIC: {"active": config.aquatic.active,
                         "max": config.aquatic.max,
                         "weight": config.aquatic.weight},
            CH_SNAIL: {"active": config.snail_kill.active,
                       "max": config.snail_kill.max,
                       "weight": config.snail_kill.weight},
            CH_CAPACITY: {"active": config.capacity.active,
                          "max": config.capacity.max,
                          "weight": config.capacity.weight},
            "treatment": [
                {"species": t.species, "active": t.active, "max": t.max,
                 "weight": t.weight} for t in config.treatment],
        },
        "sweep": {"rho": config.sweep.rho, "tol": config.sweep.tol,
                  "max_iterations": config.sweep.max_iterations},
        "engine": config.engine,
        "substeps": config.substeps,
        "seed": config.seed,
    }
    if config.initial_mode == "dfe2_seed":
        tree["initial"]["seed_fraction"] = config.seed_fraction
    if config.initial_state is not None:
        tree["initial"]["state"] = [float(v) for v in config.initial_state]
    if config.rodents is not None:
        tree["rodents"] = {
            "enabled": config.rodents.enabled,
            "prevalence": config.rodents.prevalence,
            "omega_scale": config.rodents.omega_scale,
            "theta_scale": config.rodents.theta_scale,
            "base_species": config.rodents.base_species,
            "name": config.rodents.name,
        }
    if config.out is not None:
        tree["out"] = config.out
    return tree


def config_from_file(path) -> ScenarioConfig:
    """Load a scenario config from a YAML file."""
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"config file does not exist: {path}")
    tree = yaml.safe_load(path.read_text())
    return config_from_dict(tree, base_dir=path.parent, name=path.stem)


def _preset_dir() -> Path:
    return Path(__file__).resolve().parent / "presets"


def list_presets() -> list[str]:
    """Names of the shipped scenario presets."""
    return sorted(p.stem for p in _preset_dir().glob("*.yaml"))


def load_preset(name: str) -> ScenarioConfig:
    """Load one shipped preset by name."""
    path = _preset_dir() / f"{name}.yaml"
    if not path.exists():
        raise ScenarioError(
            f"unknown preset {name!r}; shipped presets: {', '.join(list_presets())}")
    return config_from_file(path)


# ---------------------------------------------------------------------------
# resolution: params, initial state, weights, bounds
# ---------------------------------------------------------------------------

def resolve_params(config: ScenarioConfig) -> ModelParams:
    """The parameter set actually simulated (rodent block appended if on)."""
    params = copy.deepcopy(config.params)
    if config.rodents is None or not config.rodents.enabled:
        return params
    r = config.rodents
    base = next((s for s in params.species if s.name == r.base_species), None)
    if base is None:
        raise ScenarioError(
            f"rodent block copies species {r.base_species!r}, which the "
            "parameter set does not define")
    if any(s.name == r.name for s in params.species):
        raise ScenarioError(f"species {r.name!r} already exists")
    rodent = SpeciesParams(name=r.name, alpha=base.alpha, mu=base.mu,
                           theta=base.theta * r.theta_scale,
                           gamma=base.gamma, beta=base.beta,
                           omega=base.omega * r.omega_scale,
                           controlled=False)
    params.species = params.species + (rodent,)
    return params


def resolve_initial(config: ScenarioConfig) -> np.ndarray:
    """The full starting vector for the resolved parameter set."""
    base = config.params
    if config.initial_mode == "state":
        x0 = np.asarray(config.initial_state, dtype=float)
        expected = resolve_params(config).dim
        if x0.size == expected:
            return x0
        if x0.size != base.dim:
            raise ScenarioError(
                f"explicit state has {x0.size} entries; expected {base.dim} "
                f"(base system) or {expected} (with rodents)")
    elif config.initial_mode == "endemic":
        rep = r0(base)
        if rep.r0 <= 1.0:
            raise ScenarioError(
                f"an endemic start was requested but the reproduction number "
                f"is {rep.r0:.6g} <= 1, so no endemic state exists; start "
                "from 'dfe2_seed' or supply an explicit 'state' instead")
        try:
            x0 = endemic_equilibrium(base).state.to_vector()
        except EquilibriumError as exc:
            raise ScenarioError(
                f"an endemic start was requested but none could be resolved "
                f"({exc}); start from 'dfe2_seed' or supply an explicit "
                "'state' instead") from exc
    else:   # dfe2_seed
        st = dfe2(base).state
        f = config.seed_fraction
        m_s = tuple((1.0 - f) * v for v in st.m_s)
        m_i = tuple(f * v for v in st.m_s)
        x0 = State(e=st.e, s_s=st.s_s, s_i=st.s_i, l=st.l,
                   m_s=m_s, m_i=m_i).to_vector()

    if config.rodents is not None and config.rodents.enabled:
        r = config.rodents
        params = resolve_params(config)
        rodent = params.species[-1]
        total = rodent.alpha / rodent.mu if rodent.mu > 0 else 0.0
        x0 = np.concatenate([x0, [(1.0 - r.prevalence) * total,
                                  r.prevalence * total]])
    return x0


def build_weights_bounds(config: ScenarioConfig,
                         params: ModelParams) -> tuple[ControlWeights, ControlBounds]:
    """Map channel configs onto the sweep's weight/bound structures."""
    controlled = [params.species[j].name for j in params.controlled_indices()]
    by_name = {t.species: t for t in config.treatment}
    unknown = set(by_name) - set(controlled)
    if unknown:
        raise ScenarioError(
            f"treatment entries for uncontrolled or unknown species: "
            f"{sorted(unknown)}")
    entries = [by_name.get(nm, TreatmentChannel(species=nm)) for nm in controlled]
    weights = ControlWeights(
        a_a=config.aquatic.weight,
        a_s=config.snail_kill.weight,
        a_k=config.capacity.weight,
        a_m=tuple(t.weight for t in entries))
    bounds = ControlBounds(
        u_a_max=config.aquatic.max if config.aquatic.active else 0.0,
        u_s_max=config.snail_kill.max if config.snail_kill.active else 0.0,
        u_k_max=config.capacity.max if config.capacity.active else 1.0,
        u_m_max=tuple(t.max if t.active else 0.0 for t in entries),
        active_a=config.aquatic.active,
        active_s=config.snail_kill.active,
        active_k=config.capacity.active,
        active_m=tuple(t.active for t in entries))
    weights.validate_for(params)
    bounds.validate_for(params)
    return weights, bounds


def _channel_layout(config: ScenarioConfig,
                    params: ModelParams) -> list[tuple[str, int, float, bool]]:
    """(name, column, effective bound, active) per channel, in column order."""
    rows = [(CH_AQUATIC, 0, config.aquatic.max, config.aquatic.active),
            (CH_SNAIL, 1, config.snail_kill.max, config.snail_kill.active),
            (CH_CAPACITY, 2, config.capacity.max, config.capacity.active)]
    by_name = {t.species: t for t in config.treatment}
    for j, s in enumerate(params.species):
        if not s.controlled:
            continue
        t = by_name.get(s.name, TreatmentChannel(species=s.name))
        rows.append((f"treatment_{s.name}", 3 + j, t.max, t.active))
    return rows


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def write_table(path, header: list[str], rows) -> None:
    """Write a CSV table: comma delimiter, LF endings, 17-digit reals."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_table(path) -> tuple[list[str], list[tuple]]:
    """Read a CSV written by write_table; numeric fields come back as floats."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path} is empty")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(f"{path}: row width {len(parts)} != header "
                             f"width {len(header)}")
        row = []
        for tok in parts:
            try:
                row.append(float(tok))
            except ValueError:
                row.append(tok)
        rows.append(tuple(row))
    return header, rows


def _plain(value):
    """Recursively convert numpy scalars/arrays for YAML dumping."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _dump_yaml(tree: dict, path: Path) -> None:
    path.write_text(yaml.safe_dump(_plain(tree), sort_keys=False,
                                   default_flow_style=False), newline="\n")


# ---------------------------------------------------------------------------
# scenario runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioBundle:
    """One finished scenario run and where its files live."""

    kind: str               # "scenario"
    name: str
    out_dir: Path
    result: SweepResult
    params: ModelParams
    config: ScenarioConfig
    summary: dict
    manifest: dict
    files: tuple[str, ...]


@dataclass(frozen=True)
class SweepBundle:
    """One finished sweep: ordered per-value rows plus their run bundles."""

    kind: str               # "sweep"
    sweep_kind: str         # compliance | rodent_prevalence
    name: str
    out_dir: Path
    values: tuple[float, ...]
    rows: tuple[dict, ...]
    bundles: tuple           # ScenarioBundle | None per value
    files: tuple[str, ...]

    @property
    def any_errors(self) -> bool:
        return any(r.get("error") for r in self.rows)


def _days_to_reduction(times: np.ndarray, series: np.ndarray,
                       fraction: float = 0.1):
    """First time the series falls to ``fraction`` of its starting value."""
    start = series[0]
    if start <= 0.0:
        return None
    hits = np.flatnonzero(series <= fraction * start)
    return float(times[hits[0]]) if hits.size else None


def _channel_activity(times: np.ndarray, level: np.ndarray, bound: float,
                      neutral: float, dt: float) -> dict:
    """Activity stats for one channel: duration, last active day, average."""
    scale = bound - neutral
    if scale <= 0.0:
        dev = np.zeros_like(level)
        thr = np.inf
    else:
        dev = level - neutral
        thr = ACTIVITY_FRACTION * scale
    active = dev > thr
    days = float(dt * np.count_nonzero(active[:-1]))
    last = float(times[np.flatnonzero(active)[-1]]) if active.any() else None
    avg = float(np.trapezoid(level, dx=dt) / (times[-1] - times[0]))
    return {"days_active": days, "last_active_day": last,
            "time_average": avg, "bound": float(bound)}


def _build_summary(config: ScenarioConfig, params: ModelParams,
                   result: SweepResult) -> dict:
    times = config.grid.points()
    X = result.state.values
    U = result.controls.values
    dt = config.grid.dt
    per_species = {}
    for j, s in enumerate(params.species):
        col = X[:, 5 + 2 * j]
        per_species[s.name] = {
            "initial_infected": float(col[0]),
            "final_infected": float(col[-1]),
            "days_to_90pct_reduction": _days_to_reduction(times, col),
        }
    channels = {}
    for name, col, bound, active in _channel_layout(config, params):
        if not active:
            continue
        neutral = 1.0 if col == 2 else 0.0
        channels[name] = _channel_activity(times, U[:, col], bound, neutral, dt)
    return {
        "name": config.name,
        "objective": float(result.objective_history[-1]),
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "final_change": float(result.final_change),
        "species": per_species,
        "channels": channels,
        "final_total_infected": float(sum(
            v["final_infected"] for v in per_species.values())),
    }


def _build_manifest(config: ScenarioConfig, params: ModelParams,
                    x0: np.ndarray, engine: str, summary: dict,
                    files: tuple[str, ...]) -> dict:
    resolved = copy.deepcopy(config)
    resolved.params = params
    resolved.initial_mode = "state"
    resolved.initial_state = tuple(float(v) for v in x0)
    resolved.rodents = None
    resolved.engine = engine
    tree = config_to_dict(resolved)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "scenario",
        "config": tree,
        "outputs": list(files),
        "run": {"converged": summary["converged"],
                "iterations": summary["iterations"],
                "objective": summary["objective"]},
    }


def run_scenario(config: ScenarioConfig, out_dir=None) -> ScenarioBundle:
    """Resolve, run, and write one scenario.

    Writes state.csv, controls.csv, adjoint.csv, summary.yaml, and
    manifest.yaml into the output directory. Nonconvergence is flagged in
    the summary and manifest, not raised.
    """
    config.validate()
    out = Path(out_dir) if out_dir is not None else Path(config.out or f"runs/{config.name}")
    out.mkdir(parents=True, exist_ok=True)

    params = resolve_params(config)
    x0 = resolve_initial(config)
    weights, bounds = build_weights_bounds(config, params)
    engine = config.engine
    if engine == "auto":
        engine = "fast" if _HAVE_FAST else "reference"
    sweep_cfg = SweepConfig(rho=config.sweep.rho, tol=config.sweep.tol,
                            max_iterations=config.sweep.max_iterations,
                            engine=engine, substeps=config.substeps)
    result = forward_backward_sweep(params, x0, config.grid, weights, bounds,
                                    sweep_cfg)

    times = config.grid.points()
    files = ("state.csv", "controls.csv", "adjoint.csv", "summary.yaml",
             "manifest.yaml")
    state_header = ["t"] + params.state_names()
    write_table(out / "state.csv", state_header,
                np.column_stack([times, result.state.values]))
    write_table(out / "controls.csv", ["t"] + list(result.controls.names),
                np.column_stack([times, result.controls.values]))
    adj_header = ["t"] + [f"lam_{n}" for n in params.state_names()]
    write_table(out / "adjoint.csv", adj_header,
                np.column_stack([times, result.adjoint.values]))

    summary = _build_summary(config, params, result)
    manifest = _build_manifest(config, params, x0, engine, summary, files)
    _dump_yaml(summary, out / "summary.yaml")
    _dump_yaml(manifest, out / "manifest.yaml")
    return ScenarioBundle(kind="scenario", name=config.name, out_dir=out,
                          result=result, params=params, config=config,
                          summary=summary, manifest=manifest, files=files)


def replay_manifest(manifest_path, out_dir) -> ScenarioBundle:
    """Re-run a scenario exactly as recorded in its manifest."""
    path = Path(manifest_path)
    if not path.exists():
        raise ScenarioError(f"manifest does not exist: {path}")
    tree = yaml.safe_load(path.read_text())
    if not isinstance(tree, dict) or tree.get("kind") != "scenario":
        raise ScenarioError(f"{path} is not a scenario manifest")
    config = config_from_dict(tree["config"], base_dir=path.parent)
    return run_scenario(config, out_dir)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _scaled_bound(channel: Channel, fraction: float, *, capacity: bool) -> None:
    if not channel.active:
        return
    if capacity:
        channel.max = 1.0 + fraction * (channel.max - 1.0)
    else:
        channel.max = fraction * channel.max


def derive_config(spec: SweepSpec, value: float) -> ScenarioConfig:
    """The scenario for one swept value."""
    config = copy.deepcopy(spec.base)
    config.name = f"{spec.base.name}-{spec.kind}-{value:g}"
    config.out = None
    if spec.kind == "compliance":
        # selector: "all", the "treatment" group, or one canonical channel name
        targets = {spec.channel} if spec.channel not in ("all",) else None

        def wants(name: str, group: str = "") -> bool:
            return targets is None or name in targets or (group and group in targets)

        if wants(CH_AQUATIC):
            _scaled_bound(config.aquatic, value, capacity=False)
        if wants(CH_SNAIL):
            _scaled_bound(config.snail_kill, value, capacity=False)
        if wants(CH_CAPACITY):
            _scaled_bound(config.capacity, value, capacity=True)
        for t in config.treatment:
            if wants(f"treatment_{t.species}", group="treatment") and t.active:
                t.max = value * t.max
    else:
        config.rodents = copy.deepcopy(spec.base.rodents)
        config.rodents.prevalence = value
    return config


def _sweep_row(value: float, bundle: ScenarioBundle) -> dict:
    row = {"value": float(value), "error": "",
           "converged": bundle.summary["converged"],
           "iterations": bundle.summary["iterations"],
           "objective": bundle.summary["objective"],
           "final_total_infected": bundle.summary["final_total_infected"],
           "species": bundle.summary["species"],
           "channels": bundle.summary["channels"]}
    return row


def run_sweep(spec: SweepSpec, out_dir=None, *, workers: int = 1) -> SweepBundle:
    """Run one scenario per swept value and assemble the comparison tables.

    Per-value failures are recorded in their summary row and the sweep
    continues. Values may run concurrently (``workers`` > 1); each run
    writes only its own subdirectory and rows are merged in value order, so
    the outputs do not depend on the worker count.
    """
    spec.validate()
    base_name = f"{spec.base.name}-{spec.kind}"
    out = Path(out_dir) if out_dir is not None else Path(spec.base.out or f"runs/{base_name}")
    out.mkdir(parents=True, exist_ok=True)

    def one(value: float):
        sub = out / f"{spec.kind}_{value:g}"
        try:
            bundle = run_scenario(derive_config(spec, value), sub)
            return _sweep_row(value, bundle), bundle
        except (ScenarioError, ValueError, RuntimeError) as exc:
            return {"value": float(value), "error": str(exc)}, None

    if workers > 1 and len(spec.values) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, spec.values))
    else:
        outcomes = [one(v) for v in spec.values]
    rows = tuple(row for row, _ in outcomes)
    bundles = tuple(b for _, b in outcomes)

    long_header, long_rows = _long_table(spec, bundles)
    write_table(out / "sweep_long.csv", long_header, long_rows)
    sum_header, sum_rows = _summary_table(spec, rows)
    write_table(out / "sweep_summary.csv", sum_header, sum_rows)
    files = ("sweep_long.csv", "sweep_summary.csv")
    return SweepBundle(kind="sweep", sweep_kind=spec.kind,
                       name=base_name, out_dir=out, values=tuple(spec.values),
                       rows=rows, bundles=bundles, files=files)


def _long_table(spec: SweepSpec, bundles) -> tuple[list[str], list[tuple]]:
    """Long format: one row per (value, time, active channel)."""
    species_names: list[str] = []
    for b in bundles:
        if b is not None:
            species_names = [s.name for s in b.params.species]
            break
    header = (["value", "t", "channel", "level"]
              + [f"infected_{n}" for n in species_names])
    rows: list[tuple] = []
    for value, b in zip(spec.values, bundles):
        if b is None:
            continue
        times = b.config.grid.points()
        X = b.result.state.values
        U = b.result.controls.values
        infected = [X[:, 5 + 2 * j] for j in range(b.params.m)]
        for name, col, _bound, active in _channel_layout(b.config, b.params):
            if not active:
                continue
            for k in range(times.size):
                rows.append((float(value), float(times[k]), name,
                             float(U[k, col]),
                             *(float(c[k]) for c in infected)))
    return header, rows


def _summary_table(spec: SweepSpec, rows) -> tuple[list[str], list[tuple]]:
    channel_names: list[str] = []
    species_names: list[str] = []
    for r in rows:
        if not r.get("error"):
            channel_names = list(r["channels"].keys())
            species_names = list(r["species"].keys())
            break
    header = ["value", "error", "converged", "iterations", "objective",
              "final_total_infected"]
    header += [f"final_infected_{n}" for n in species_names]
    for c in channel_names:
        header += [f"days_active_{c}", f"last_active_{c}", f"time_average_{c}"]
    out_rows = []
    for r in rows:
        if r.get("error"):
            # the table format is unquoted, so the message must not carry
            # the delimiter or line breaks
            err = r["error"].replace(",", ";").replace("\n", " ")
            row = [r["value"], err, "", "", "", ""]
            row += [""] * (len(species_names) + 3 * len(channel_names))
            out_rows.append(tuple(row))
            continue
        row = [r["value"], "", float(r["converged"]), r["iterations"],
               r["objective"], r["final_total_infected"]]
        row += [r["species"][n]["final_infected"] for n in species_names]
        for c in channel_names:
            ch = r["channels"][c]
            last = ch["last_active_day"]
            row += [ch["days_active"], -1.0 if last is None else last,
                    ch["time_average"]]
        out_rows.append(tuple(row))
    return header, out_rows


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

_GNUPLOT_STUB = """\
# gnuplot stub for {csv}
set datafile separator ','
set key autotitle columnhead outside
set xlabel '{xlabel}'
plot for [i={first}:{last}] '{csv}' using 1:i with lines
"""


def _write_stub(csv_path: Path, n_columns: int, xlabel: str) -> Path:
    stub = csv_path.with_suffix(".gp")
    stub.write_text(_GNUPLOT_STUB.format(csv=csv_path.name, first=2,
                                         last=n_columns, xlabel=xlabel),
                    newline="\n")
    return stub


def emit_plot_data(bundle, out_dir=None) -> list[Path]:
    """Reshape a bundle into fixed-name plot CSVs plus gnuplot stubs.

    Scenario bundles produce fig2_states.csv and fig3_controls.csv (the
    ``rodents`` preset produces fig5_rodents_states.csv instead, and
    ``integrated`` produces the merged fig7_integrated.csv). Compliance
    sweeps produce fig4_compliance.csv; rodent-prevalence sweeps produce
    fig6_rodents_controls.csv.
    """
    out = Path(out_dir) if out_dir is not None else bundle.out_dir
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, header: list[str], rows, xlabel="time (days)") -> None:
        path = out / name
        write_table(path, header, rows)
        written.append(path)
        written.append(_write_stub(path, len(header), xlabel))

    if bundle.kind == "scenario":
        times = bundle.config.grid.points()
        X = bundle.result.state.values
        U = bundle.result.controls.values
        state_header = ["t"] + bundle.params.state_names()
        active = [(n, c) for n, c, _b, a in
                  _channel_layout(bundle.config, bundle.params) if a]
        ctrl_header = ["t"] + [n for n, _ in active]
        ctrl_cols = np.column_stack([times] + [U[:, c] for _, c in active]) \
            if active else np.column_stack([times])
        if bundle.name == "rodents":
            emit("fig5_rodents_states.csv", state_header,
                 np.column_stack([times, X]))
        elif bundle.name == "integrated":
            emit("fig7_integrated.csv", state_header + ctrl_header[1:],
                 np.column_stack([times, X] + [U[:, c] for _, c in active]))
        else:
            emit("fig2_states.csv", state_header, np.column_stack([times, X]))
            emit("fig3_controls.csv", ctrl_header, ctrl_cols)
    elif bundle.kind == "sweep":
        header, rows = read_table(bundle.out_dir / "sweep_long.csv")
        name = ("fig4_compliance.csv" if bundle.sweep_kind == "compliance"
                else "fig6_rodents_controls.csv")
        emit(name, header, rows)
    else:
        raise ScenarioError(f"cannot emit plot data for bundle kind "
                            f"{bundle.kind!r}")
    return written
