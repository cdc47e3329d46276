"""
Run configuration: one JSON5 document covering every stage of a pipeline.

The document is validated against the section dataclasses below. Unknown
keys and wrongly typed values are rejected with the dotted path of the
offending key. Environment variables of the form HRN_<SECTION>__<KEY>
override file values.
"""

import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import json5

from hrn_physics.errors import ConfigError, HrnError
from hrn_physics.files import _ensure_parent
from hrn_physics.graph import HierarchyConfig
from hrn_physics.model import ModelConfig
from hrn_physics.scenarios import COMMON_DEFAULTS, SCENARIOS, ShapeSpec
from hrn_physics.sim import SimConfig
from hrn_physics.training import LOSS_PRESETS, LossConfig, OptimConfig
from hrn_physics.utils import detect_indentation, show_diff_and_confirm

ENV_PREFIX = "HRN_"
# Variables under the prefix that are not config keys.
RESERVED_ENV = frozenset({"HRN_ACCEPTANCE"})
BASELINE_NAMES = ("oracle", "identity")

# Fields computed at run time rather than configured.
_EXCLUDED_FIELDS = {"stats", "n_particles"}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "throw-one"
    n_trajectories: int = 4
    n_frames: int = 200
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ConfigError(
                f"unknown scenario {self.name!r} (expected one of {', '.join(SCENARIOS)})",
                "scenario.name",
            )
        if self.n_trajectories < 0:
            raise ConfigError("must be >= 0", "scenario.n_trajectories")
        if self.n_frames < 2:
            raise ConfigError("must be >= 2", "scenario.n_frames")
        for key in self.overrides:
            if key not in COMMON_DEFAULTS:
                raise ConfigError("unknown scenario override", f"scenario.overrides.{key}")
        for i, shape in enumerate(self.overrides.get("shapes") or ()):
            try:
                ShapeSpec(**shape)
            except (TypeError, HrnError) as e:
                raise ConfigError(str(e), f"scenario.overrides.shapes.{i}") from e


@dataclass(frozen=True)
class EvalConfig:
    horizon: int = 9
    stride: int = 5
    rollout_steps: int = 50
    baselines: tuple[str, ...] = ("identity",)

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("must be >= 1", "eval.horizon")
        if self.stride < 1:
            raise ConfigError("must be >= 1", "eval.stride")
        if self.rollout_steps < 0:
            raise ConfigError("must be >= 0", "eval.rollout_steps")
        for name in self.baselines:
            if name not in BASELINE_NAMES:
                raise ConfigError(f"unknown baseline {name!r}", "eval.baselines")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data/train"
    test_dir: str = "data/test"
    checkpoint: str = "runs/hrn"
    reports: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


# Named model variants of the ablation suite: model field and loss preset changes.
VARIANTS: dict[str, tuple[dict[str, Any], str]] = {
    "hrn": ({}, "hrn"),
    "no-phi-f": ({"ablations": ("no-phi-f",)}, "hrn"),
    "no-phi-c": ({"ablations": ("no-phi-c",)}, "hrn"),
    "no-phi-h": ({"ablations": ("no-phi-h",)}, "hrn"),
    "single-frame": ({"history": 1}, "hrn"),
    "flat-graph": ({"ablations": ("flat-graph",)}, "hrn"),
    "sparse-graph": ({"ablations": ("sparse-graph",)}, "hrn"),
    "mlp-baseline": ({"ablations": ("mlp-baseline",)}, "hrn"),
    "local-loss-only": ({}, "local-loss-only"),
    "no-preservation-loss": ({}, "no-preservation-loss"),
    "global-loss-only": ({}, "global-loss-only"),
}


def apply_variant(cfg: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r} (expected one of {', '.join(VARIANTS)})")
    model_changes, preset = VARIANTS[name]
    if "ablations" in model_changes:
        model_changes = {
            **model_changes,
            "ablations": tuple(cfg.model.ablations) + model_changes["ablations"],
        }
    return replace(
        cfg,
        model=replace(cfg.model, **model_changes),
        loss=replace(cfg.loss, **LOSS_PRESETS[preset]),
    )


def _is_json_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(value: Any, annotation: Any, key_path: str) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)

    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key_path)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key_path)
        return value
    if annotation is int:
        if not _is_json_number(value) or int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", key_path)
        return int(value)
    if annotation is float:
        if not _is_json_number(value):
            raise ConfigError(f"expected a number, got {value!r}", key_path)
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key_path)
        return value
    if annotation is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected an object, got {value!r}", key_path)
        return dict(value)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", key_path)
        if len(args) == 2 and args[1] is Ellipsis:
            item_types = [args[0]] * len(value)
        else:
            if len(value) != len(args):
                raise ConfigError(f"expected {len(args)} values, got {len(value)}", key_path)
            item_types = list(args)
        return tuple(
            _coerce(item, t, f"{key_path}.{i}")
            for i, (item, t) in enumerate(zip(value, item_types))
        )
    if is_dataclass(annotation):
        return _build(annotation, value, key_path)
    raise ConfigError(f"unsupported config type {annotation!r}", key_path)


def _build(cls: type, data: Any, prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {data!r}", prefix)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.name not in _EXCLUDED_FIELDS}
    for key in data:
        if key not in known:
            raise ConfigError("unknown key", f"{prefix}.{key}" if prefix else key)
    kwargs = {
        key: _coerce(value, hints[key], f"{prefix}.{key}" if prefix else key)
        for key, value in data.items()
    }
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (HrnError, ValueError) as e:
        raise ConfigError(str(e), prefix) from e


def _plain(value: Any) -> Any:
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    """Plain JSON-ready form with every configurable field explicit."""
    out: dict[str, Any] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if is_dataclass(value):
            section = asdict(value)
            for name in _EXCLUDED_FIELDS:
                section.pop(name, None)
            out[f.name] = _plain(section)
        else:
            out[f.name] = _plain(value)
    return out


def _merge(base: dict, update: Mapping) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Validate a (partial) document; missing keys keep their defaults."""
    if not isinstance(data, Mapping):
        raise ConfigError("the config document must be an object")
    return _build(RunConfig, _merge(config_to_dict(RunConfig()), data), "")


def _parse_env_value(raw: str) -> Any:
    try:
        return json5.loads(raw)
    except ValueError:
        return raw


def env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    """Nested overrides from HRN_SECTION__KEY variables (HRN_SEED for top-level keys)."""
    overrides: dict[str, Any] = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX) or name in RESERVED_ENV:
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX) :].split("__")]
        if not all(parts):
            raise ConfigError(f"malformed override variable {name}")
        node = overrides
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"conflicting override variable {name}", ".".join(parts))
            node = child
        node[parts[-1]] = _parse_env_value(environ[name])
    return overrides


def load_config(
    path: str | Path | None = None, environ: Mapping[str, str] | None = None
) -> RunConfig:
    """Defaults, then the JSON5 file at `path`, then HRN_ environment overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path).expanduser()
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            data = json5.loads(text) if text.strip() else {}
        except ValueError as e:
            raise ConfigError(f"could not parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a JSON object")
    overrides = env_overrides(os.environ if environ is None else environ)
    return config_from_dict(_merge(data, overrides))


def reference_config_text(cfg: RunConfig | None = None, indent: int = 2) -> str:
    return json.dumps(config_to_dict(cfg or RunConfig()), indent=indent) + "\n"


def write_reference_config(
    path: str | Path,
    cfg: RunConfig | None = None,
    input_fn: Callable[[str], str] = input,
    print_fn: Callable[..., None] = print,
    assume_yes: bool = False,
) -> str:
    """Write the reference config; an existing file is diffed and confirmed first.

    Returns 'created', 'unchanged', 'apply' or 'cancel'.
    """
    path = Path(path).expanduser()
    if not path.exists():
        _ensure_parent(path)
        path.write_text(reference_config_text(cfg), encoding="utf-8")
        return "created"
    old = path.read_text(encoding="utf-8")
    new = reference_config_text(cfg, indent=detect_indentation(old))
    if assume_yes:
        status = "unchanged" if old == new else "apply"
    else:
        status = show_diff_and_confirm(old, new, str(path), input_fn=input_fn, print_fn=print_fn)
    if status == "apply":
        path.write_text(new, encoding="utf-8")
    return status

