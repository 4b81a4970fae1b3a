"""TOML experiment configuration: sections per module, dotted overrides, strict keys.

Layout::

    [experiment]   name, seeds, out
    [simengine]    scheduler, classifier, traffic_aware, episodes, tick, nhd_reservation_frac
    [netmodel]     topology, capacity_profile
    [workload] [dypr] [trafficclass] [adsch] [placement]
    [[variant]]    name plus any of the sections above, applied on top (compare only)
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigInvalid
from .simengine import PipelineConfig

# keys of PipelineConfig exposed through the [simengine] and [netmodel] sections
_PIPELINE_KEYS = ("scheduler", "classifier", "traffic_aware", "episodes", "tick", "nhd_reservation_frac")
_NET_KEYS = ("topology", "capacity_profile")
_NESTED = ("workload", "dypr", "trafficclass", "adsch", "placement")
# the classifier preset is chosen at pipeline level
_HIDDEN = {"trafficclass": {"preset"}}


@dataclass
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    variants: list[Variant] = field(default_factory=list)

    def with_seed(self, seed: int) -> PipelineConfig:
        cfg = copy.deepcopy(self.pipeline)
        cfg.seed = int(seed)
        return cfg

    def variant_pipeline(self, variant: Variant) -> PipelineConfig:
        cfg = copy.deepcopy(self.pipeline)
        apply_sections(cfg, variant.overrides, where=f"variant {variant.name!r}")
        cfg.validate()
        return cfg


# -- value coercion ------------------------------------------------------------------

def _coerce(current: Any, value: Any, where: str) -> Any:
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigInvalid(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(f"{where}: expected a list, got {value!r}")
        if current:
            if len(value) == 0:
                raise ConfigInvalid(f"{where}: list must not be empty")
            return tuple(_coerce(current[0], v, where) for v in value)
        return tuple(value)
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise ConfigInvalid(f"{where}: expected a table, got {value!r}")
        out = dict(current)
        for k, v in value.items():
            if k not in current:
                raise ConfigInvalid(f"{where}: unknown key {k!r}")
            out[k] = _coerce(current[k], v, f"{where}.{k}")
        return out
    if dataclasses.is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigInvalid(f"{where}: expected a table, got {value!r}")
        _apply_dataclass(current, value, where)
        return current
    raise ConfigInvalid(f"{where}: cannot be configured")


def _apply_dataclass(obj: Any, table: dict, where: str, allowed=None, hidden=()) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in table.items():
        if key not in names or key in hidden or (allowed is not None and key not in allowed):
            raise ConfigInvalid(f"{where}: unknown key {key!r}")
        setattr(obj, key, _coerce(getattr(obj, key), value, f"{where}.{key}"))


def apply_sections(cfg: PipelineConfig, doc: dict, where: str = "config") -> None:
    """Apply module-named sections onto ``cfg`` in place; unknown keys raise."""
    for section, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigInvalid(f"{where}: section {section!r} must be a table")
        loc = f"{where}: [{section}]"
        if section == "simengine":
            _apply_dataclass(cfg, table, loc, allowed=_PIPELINE_KEYS)
        elif section == "netmodel":
            _apply_dataclass(cfg, table, loc, allowed=_NET_KEYS)
        elif section in _NESTED:
            _apply_dataclass(getattr(cfg, section), table, loc, hidden=_HIDDEN.get(section, ()))
        else:
            raise ConfigInvalid(f"{where}: unknown section {section!r}")


# -- documents ------------------------------------------------------------------------

def parse_document(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    exp = ExperimentConfig()
    meta = doc.pop("experiment", {})
    if not isinstance(meta, dict):
        raise ConfigInvalid("[experiment] must be a table")
    for key, value in meta.items():
        if key == "name":
            exp.name = _coerce("", value, "experiment.name")
        elif key == "seeds":
            if not isinstance(value, list) or not value:
                raise ConfigInvalid("experiment.seeds must be a non-empty list of integers")
            exp.seeds = [_coerce(0, v, "experiment.seeds") for v in value]
        elif key == "out":
            exp.out = _coerce("", value, "experiment.out")
        else:
            raise ConfigInvalid(f"[experiment]: unknown key {key!r}")
    variants = doc.pop("variant", [])
    if not isinstance(variants, list):
        raise ConfigInvalid("variants must be written as [[variant]] tables")
    apply_sections(exp.pipeline, doc)
    for i, v in enumerate(variants):
        v = dict(v)
        name = v.pop("name", None)
        if not isinstance(name, str) or not name:
            raise ConfigInvalid(f"variant #{i + 1} needs a name")
        # dry-run to surface bad keys before anything runs
        apply_sections(copy.deepcopy(exp.pipeline), v, where=f"variant {name!r}")
        exp.variants.append(Variant(name, v))
    names = [v.name for v in exp.variants]
    if len(set(names)) != len(names):
        raise ConfigInvalid("variant names must be unique")
    exp.pipeline.validate()
    return exp


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key[.sub]=value``; the value is read as a TOML literal, else as a bare string."""
    if "=" not in text:
        raise ConfigInvalid(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    path = [p.strip() for p in key.strip().split(".")]
    if len(path) < 2 or not all(path):
        raise ConfigInvalid(f"override key {key!r} must be section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def _nest(path: list[str], value: Any) -> dict:
    out: Any = value
    for p in reversed(path):
        out = {p: out}
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    """Read a TOML file (or start from defaults when ``path`` is None) and apply overrides."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc.strerror or exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(f"malformed config {path}: {exc}") from None
    for text in overrides:
        doc = _merge(doc, _nest(*parse_override(text)))
    return parse_document(doc)


def config_dict(cfg: PipelineConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=str))


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest of the resolved configuration, seed excluded."""
    d = config_dict(cfg)
    d.pop("seed", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
