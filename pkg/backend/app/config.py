"""
Run configuration: INI files validated into RunConfig, window presets, config hashing
and named random substreams.

Values are parsed as JSON where possible (numbers, lists, true/false), otherwise kept
as strings. Window clusters are written in diffusion time t (T = noisiest) under
`clusters`; preset files use sampling-step indices (0 = noisiest) under
`clusters_sampling`, converted with t = T - index.
"""
import configparser
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from .errors import ConfigError
from .models import RunConfig

load_dotenv()
logger = logging.getLogger(__name__)

PRESETS_DIR = Path(os.environ.get("HRF_PRESETS_DIR", Path(__file__).resolve().parents[1] / "presets"))
SECTIONS = ("run", "dataset", "schedule", "model", "pretrain", "optimizer", "reward", "mdp",
            "windows", "finetune", "eval", "inject")
STREAMS = ("data", "pretrain", "embedder", "rollout", "inject")


def _parse_value(raw: str) -> Any:
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_ini(path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}; expected a subset of {list(SECTIONS)}")
    return {s: {k: _parse_value(v) for k, v in parser.items(s)} for s in parser.sections()}


def available_presets() -> List[str]:
    if not PRESETS_DIR.is_dir():
        return []
    return sorted(p.stem for p in PRESETS_DIR.glob("*.ini"))


def preset_path(name: str) -> Path:
    path = PRESETS_DIR / f"{name}.ini"
    if not path.exists():
        raise ConfigError(f"Unknown preset '{name}'; available: {available_presets()}")
    return path


def preset_clusters(name: str) -> List[Tuple[int, int]]:
    """The preset's windows exactly as listed in the file (sampling-step indices)."""
    windows = read_ini(preset_path(name)).get("windows", {})
    return [tuple(c) for c in windows.get("clusters_sampling") or []]


def sampling_to_diffusion(clusters: List[List[int]], T: int) -> List[Tuple[int, int]]:
    converted = []
    for lo_idx, hi_idx in clusters:
        lo, hi = T - int(hi_idx), T - int(lo_idx)
        if lo < 1 or hi > T or lo > hi:
            raise ConfigError(f"Sampling window ({lo_idx}, {hi_idx}) does not map into [1, {T}]")
        converted.append((lo, hi))
    return converted


def _merge(base: Dict[str, Dict[str, Any]], extra: Dict[str, Dict[str, Any]]) -> None:
    for section, values in extra.items():
        base.setdefault(section, {}).update(values)


def _resolve_windows(raw: Dict[str, Dict[str, Any]]) -> None:
    windows = raw.setdefault("windows", {})
    T = int(raw.get("schedule", {}).get("T", 40))
    counts = windows.pop("iterations_per_cluster", None)
    sampling = windows.pop("clusters_sampling", None)
    clusters = windows.pop("clusters", None)
    if sampling is not None:
        clusters = sampling_to_diffusion(sampling, T)
    if clusters is None:
        return
    if counts is None:
        counts = [8] * len(clusters)
    if len(counts) != len(clusters):
        raise ConfigError(f"{len(clusters)} clusters but {len(counts)} iteration counts")
    windows["clusters"] = [{"lo": lo, "hi": hi, "iterations": k} for (lo, hi), k in zip(clusters, counts)]


def load_run_config(path: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
                    out_dir: Optional[str] = None, preset: Optional[str] = None,
                    method: Optional[str] = None, pretrained_dir: Optional[str] = None) -> RunConfig:
    """
    Defaults < config file < preset file < explicit arguments. A preset named in the
    file's [finetune] section is applied the same way as one passed here.
    """
    raw: Dict[str, Dict[str, Any]] = read_ini(path) if path is not None else {}
    preset = preset or raw.get("finetune", {}).get("preset")
    if preset:
        _merge(raw, read_ini(preset_path(preset)))
        raw.setdefault("finetune", {})["preset"] = preset
    if seed is not None:
        raw.setdefault("run", {})["seed"] = seed
    if out_dir is not None:
        raw.setdefault("run", {})["out_dir"] = out_dir
    if method is not None:
        raw.setdefault("finetune", {})["method"] = method
    if pretrained_dir is not None:
        raw.setdefault("finetune", {})["pretrained_dir"] = pretrained_dir
    _resolve_windows(raw)
    try:
        config = RunConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration{f' in {path}' if path else ''}: {e}") from e
    logger.debug(f"CONFIG LOADED: path={path}, preset={preset}, hash={config.config_hash()[:12]}")
    return config


def write_config_ini(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved configuration; re-loading it yields the same config hash."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    dump = config.model_dump(mode="json")
    for section in SECTIONS:
        values = dict(dump[section])
        if section == "windows":
            clusters = values.pop("clusters")
            values["clusters"] = [[c["lo"], c["hi"]] for c in clusters]
            values["iterations_per_cluster"] = [c["iterations"] for c in clusters]
        parser[section] = {k: json.dumps(v) for k, v in values.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        parser.write(fh)
    return path


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the master seed."""
    if name not in STREAMS:
        raise ConfigError(f"Unknown random stream '{name}'; expected one of {STREAMS}")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS.index(name),)))


def eval_stream(config: RunConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.eval.eval_seed))
