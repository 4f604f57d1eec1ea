"""Experiment configuration, orchestration and artifact writing.

A run config is a TOML document::

    name = "chain"
    seeds = [0, 1]
    total_steps = 200000

    [env]
    kind = "chain_dense"

    [ppo]
    epochs = [1, 4, 16]     # a list makes a grid axis

Any scalar under ``[network]`` or ``[ppo]`` may be given as a list; the
experiment runs the cartesian product of all such lists for every seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
import sys
import traceback
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, TextIO

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .capacity import CapacityBudget
from .diagnostics import DiagnosticsRecord, read_records, window_aggregate
from .environments import EnvConfig
from .errors import ConfigurationError
from .networks import ActorCritic
from .ppo import PpoConfig, TrainConfig, train

SUMMARY_WINDOW = 0.05
RATIO_KEYS = ("excess_ratio",)
NON_METRIC_KEYS = ("step", "batch", "diverged")


@dataclass(frozen=True)
class NetworkConfig:
    hidden_widths: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    shared_trunk: bool = False

    def __post_init__(self):
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError("network.hidden_widths must be a non-empty list of positive ints")
        if self.activation not in ("relu", "tanh"):
            raise ConfigurationError("network.activation must be 'relu' or 'tanh'")


@dataclass(frozen=True)
class LoggingConfig:
    log_every: int = 1
    capacity_every: float = 0.025
    rank_delta: float = 0.01
    feature_rank_delta: float = 0.01
    checkpoints: bool = True

    def __post_init__(self):
        if self.log_every < 1:
            raise ConfigurationError("logging.log_every must be >= 1")
        if not 0.0 <= self.capacity_every <= 1.0:
            raise ConfigurationError("logging.capacity_every must be in [0, 1]")


SECTIONS: dict[str, type] = {
    "env": EnvConfig,
    "network": NetworkConfig,
    "ppo": PpoConfig,
    "logging": LoggingConfig,
    "capacity": CapacityBudget,
}
GRID_SECTIONS = ("network", "ppo")
TOP_LEVEL = ("name", "seeds", "out_dir", "total_steps")
# shared_trunk lives under [network] in files but on PpoConfig in the trainer
_HIDDEN = {"ppo": ("shared_trunk",), "env": ("seed",)}


def _section_fields(section: str) -> dict[str, dataclasses.Field]:
    hidden = _HIDDEN.get(section, ())
    return {f.name: f for f in fields(SECTIONS[section]) if f.name not in hidden}


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Check a scalar against the type of its default, naming ``key`` on failure."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        value = tuple(value) if ok else value
    else:  # optional fields: accept scalars
        ok = isinstance(value, (bool, int, float, str))
    if not ok:
        raise ConfigurationError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
    return value


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"
    total_steps: int | None = None
    env: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    logging: dict = field(default_factory=dict)
    capacity: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        for key in raw:
            if key not in TOP_LEVEL and key not in SECTIONS:
                raise ConfigurationError(f"unknown config key {key!r}")
        resolved: dict[str, Any] = {}
        for section in SECTIONS:
            given = raw.get(section, {})
            if not isinstance(given, dict):
                raise ConfigurationError(f"config key {section!r} must be a table")
            known = _section_fields(section)
            for key in given:
                if key not in known:
                    raise ConfigurationError(f"unknown config key '{section}.{key}'")
            out = {}
            for name, f in known.items():
                default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
                value = given.get(name, default)
                dotted = f"{section}.{name}"
                if section in GRID_SECTIONS and isinstance(value, list) and not isinstance(default, tuple):
                    if not value:
                        raise ConfigurationError(f"config key {dotted!r}: empty grid list")
                    value = [_coerce(dotted, v, default) for v in value]
                elif (section in GRID_SECTIONS and isinstance(default, tuple) and isinstance(value, list)
                      and value and isinstance(value[0], list)):
                    value = [_coerce(dotted, v, default) for v in value]
                elif value is not None or default is not None:
                    value = _coerce(dotted, value, default if default is not None else value)
                out[name] = value
            resolved[section] = out
        name = raw.get("name", "run")
        if not isinstance(name, str) or not name or "/" in name:
            raise ConfigurationError("config key 'name' must be a non-empty string without '/'")
        seeds = raw.get("seeds", [0])
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            seeds = [seeds]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigurationError("config key 'seeds' must be a non-empty list of non-negative ints")
        out_dir = raw.get("out_dir", "runs")
        if not isinstance(out_dir, str):
            raise ConfigurationError("config key 'out_dir' must be a string")
        env = EnvConfig(**resolved["env"])
        total = raw.get("total_steps", 200_000 if env.discrete else 300_000)
        if not isinstance(total, int) or isinstance(total, bool) or total < 1:
            raise ConfigurationError("config key 'total_steps' must be a positive int")
        resolved["env"] = env.to_dict()
        resolved["env"].pop("seed")
        cfg = cls(name=name, seeds=tuple(seeds), out_dir=out_dir, total_steps=total, **resolved)
        cfg.variants()  # validate every grid point now
        return cfg

    def to_dict(self) -> dict:
        d = {"name": self.name, "seeds": list(self.seeds), "out_dir": self.out_dir, "total_steps": self.total_steps}
        for section in SECTIONS:
            d[section] = {k: _to_plain(v) for k, v in getattr(self, section).items() if v is not None}
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def grid_axes(self) -> dict[str, list]:
        axes = {}
        for section in GRID_SECTIONS:
            for key, value in getattr(self, section).items():
                if isinstance(value, list):
                    axes[f"{section}.{key}"] = value
        return axes

    def variants(self) -> list[tuple[str, dict[str, Any], TrainConfig]]:
        """All grid points as ``(label, assignment, TrainConfig-without-seed)``."""
        axes = self.grid_axes()
        keys = list(axes)
        out = []
        for combo in itertools.product(*(axes[k] for k in keys)):
            assign = dict(zip(keys, combo))
            sections = {s: dict(getattr(self, s)) for s in GRID_SECTIONS}
            for dotted, value in assign.items():
                s, k = dotted.split(".", 1)
                sections[s][k] = value
            net = NetworkConfig(**sections["network"])
            ppo = PpoConfig(**sections["ppo"], shared_trunk=net.shared_trunk)
            logging = LoggingConfig(**self.logging)
            tc = TrainConfig(
                env=EnvConfig(**self.env), ppo=ppo, hidden_widths=net.hidden_widths,
                activation=net.activation, total_steps=self.total_steps, log_every=logging.log_every,
                capacity_every=logging.capacity_every, capacity=CapacityBudget(**self.capacity),
                rank_delta=logging.rank_delta, feature_rank_delta=logging.feature_rank_delta,
            )
            out.append((variant_label(assign), assign, tc))
        return out


def _to_plain(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, list):
        return [_to_plain(x) for x in v]
    return v


def variant_label(assign: dict[str, Any]) -> str:
    if not assign:
        return "base"
    parts = []
    for dotted, value in assign.items():
        if isinstance(value, (list, tuple)):
            value = "x".join(str(v) for v in value)
        parts.append(f"{dotted.split('.', 1)[1]}={value}")
    return ",".join(parts)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is read as a TOML literal, else as a bare string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"override {text!r} has an empty key")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {text!r}: {part!r} is not a table")
        node[path[-1]] = value
    return raw


def load_config_text(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def load_config(path, overrides: Iterable[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {str(path)!r} does not exist")
    return load_config_text(path.read_text(encoding="utf-8"), overrides)


# -- artifacts -----------------------------------------------------------------------


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def emit_metrics(records: Iterable[DiagnosticsRecord], sink: TextIO) -> list[dict]:
    """Append one JSON line per record; flushes after every line."""
    written = []
    for rec in records:
        line = rec.to_json()
        sink.write(line + "\n")
        sink.flush()
        written.append(json.loads(line))
    return written


def metric_keys(records: list[dict]) -> list[str]:
    keys = sorted({k for r in records for k in r} - set(NON_METRIC_KEYS))
    return keys


def summarize_records(records: list[dict], run_length: float | None = None,
                      window_frac: float = SUMMARY_WINDOW) -> dict:
    """Window means of every logged metric.

    Most metrics use the trailing window of training progress; the excess
    ratio uses the window ending at its last present value.
    """
    summary: dict[str, Any] = {"n_records": len(records), "window_frac": window_frac, "metrics": {}}
    if not records:
        return summary
    steps = [r["step"] for r in records]
    run_length = float(run_length if run_length is not None else max(steps))
    summary["run_length"] = run_length
    summary["diverged"] = any(r.get("diverged") for r in records)
    for key in metric_keys(records):
        values = [r.get(key) for r in records]
        if all(v is None for v in values):
            summary["metrics"][key] = None
            continue
        mode = "last_nontrivial_ratio" if key in RATIO_KEYS else "tail"
        summary["metrics"][key] = window_aggregate(
            [float("nan") if v is None else float(v) for v in values], steps, run_length, window_frac, mode)
    return summary


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class RunManifest:
    config: dict
    seeds: list[int]
    code_version: str
    runs: list[dict]
    status: str = "running"
    failures: list[dict] = field(default_factory=list)

    def write(self, path: Path) -> None:
        _write_json(path, dataclasses.asdict(self))


def run_single(tc: TrainConfig, run_dir: Path, checkpoints: bool = True) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"

    def save(step: int, agent: ActorCritic) -> None:
        ckpt_dir.mkdir(exist_ok=True)
        agent.save(ckpt_dir / f"step_{step:09d}.bin", {"step": step, "seed": tc.seed})

    metrics_path = run_dir / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as sink:
        records = emit_metrics(train(tc, save if checkpoints else None), sink)
    run_length = tc.n_batches * tc.ppo.batch_size
    summary = summarize_records(records, run_length)
    _write_json(run_dir / "summary.json", summary)
    return summary


def run_experiment(cfg: RunConfig, out_dir: str | os.PathLike | None = None,
                   log: TextIO | None = None) -> tuple[int, Path]:
    """Run every (grid point, seed); returns (exit status, experiment dir)."""
    root = Path(out_dir if out_dir is not None else cfg.out_dir) / cfg.name
    root.mkdir(parents=True, exist_ok=True)
    variants = cfg.variants()
    runs = []
    for label, assign, _ in variants:
        for seed in cfg.seeds:
            rel = Path(label) / f"seed_{seed}"
            runs.append({"variant": label, "assignment": assign, "seed": seed,
                         "metrics": str(rel / "metrics.jsonl"), "summary": str(rel / "summary.json"),
                         "checkpoints": str(rel / "checkpoints")})
    manifest = RunManifest(cfg.to_dict(), list(cfg.seeds), code_version(), runs)
    manifest_path = root / "manifest.json"
    (root / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    manifest.write(manifest_path)
    checkpoints = LoggingConfig(**cfg.logging).checkpoints
    status = 0
    i = 0
    for label, assign, tc in variants:
        for seed in cfg.seeds:
            entry = runs[i]
            i += 1
            try:
                summary = run_single(dataclasses.replace(tc, seed=seed), root / entry["metrics"].rsplit("/", 1)[0],
                                     checkpoints)
                entry["status"] = "diverged" if summary.get("diverged") else "completed"
                if log is not None:
                    ret = summary["metrics"].get("episode_return_mean")
                    print(f"[{label} seed={seed}] {entry['status']}: tail return {ret}", file=log)
            except Exception as exc:  # record and stop; the partial manifest stays on disk
                entry["status"] = "failed"
                manifest.failures.append({"variant": label, "seed": seed, "error": repr(exc),
                                          "traceback": traceback.format_exc()})
                manifest.status = "failed"
                manifest.write(manifest_path)
                if log is not None:
                    print(f"[{label} seed={seed}] failed: {exc!r}", file=log)
                return 1, root
            manifest.write(manifest_path)
    manifest.status = "completed"
    manifest.write(manifest_path)
    return status, root


def resummarize(run_dir) -> dict:
    """Recompute ``summary.json`` of a run directory from its ``metrics.jsonl``."""
    run_dir = Path(run_dir)
    records = read_records(run_dir / "metrics.jsonl")
    old = run_dir / "summary.json"
    run_length = None
    if old.is_file():
        run_length = json.loads(old.read_text(encoding="utf-8")).get("run_length")
    return summarize_records(records, run_length)
