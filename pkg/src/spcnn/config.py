"""Run configuration files: ``[section] key = value`` text.

Sections: ``[run]`` (profile, output_dir), ``[network]`` (see
:class:`spcnn.spnet.NetworkSpec`), ``[train]`` (fields of
:class:`spcnn.trainer.TrainConfig`), ``[data]`` (manifest, canonical_size)
and ``[eval]`` (video_aggregate).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import spnet
from .errors import ConfigurationError
from .trainer import TrainConfig

PROFILES = ("paper", "desk")

_TRAIN_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_SECTIONS = {
    "run": {"profile", "output_dir"},
    "network": spnet._NETWORK_KEYS,
    "train": set(_TRAIN_TYPES),
    "data": {"manifest", "canonical_size"},
    "eval": {"video_aggregate"},
}


def profile_network(profile: str, class_count: int = 8) -> spnet.NetworkSpec:
    if profile == "paper":
        return spnet.paper_spec(class_count)
    if profile == "desk":
        return spnet.desk_spec(class_count)
    raise ConfigurationError(f"unknown profile {profile!r} (expected paper or desk)")


def profile_train(profile: str) -> TrainConfig:
    if profile == "desk":
        return TrainConfig(batch_size=32, iterations=2000, eval_interval=500)
    return TrainConfig()


@dataclass
class RunConfig:
    profile: str = "desk"
    network: spnet.NetworkSpec = field(default_factory=spnet.desk_spec)
    train: TrainConfig = field(default_factory=lambda: profile_train("desk"))
    manifest: Optional[Path] = None
    output_dir: Optional[Path] = None
    video_aggregate: str = "mean"
    # whether class_count was set explicitly (otherwise taken from the manifest)
    class_count_explicit: bool = False


def _coerce(name: str, value: str):
    kind = _TRAIN_TYPES[name]
    try:
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
        if kind in ("bool", bool):
            return spnet._parse_bool(value)
    except ValueError as exc:
        raise ConfigurationError(f"[train] {name}: {exc}") from None
    return value.strip()


def parse_config(text: str, base_dir=".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config: {exc}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - _SECTIONS[section]
        if unknown:
            raise ConfigurationError(
                f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    get = lambda sec: dict(parser[sec]) if parser.has_section(sec) else {}  # noqa: E731
    run, net, tr, dat, ev = (get(s) for s in ("run", "network", "train", "data", "eval"))

    profile = run.get("profile", "desk").strip()
    network_section = dict(net)
    if "canonical_size" in dat:
        if "canonical_size" in net and net["canonical_size"] != dat["canonical_size"]:
            raise ConfigurationError("[data] and [network] disagree on canonical_size")
        network_section["canonical_size"] = dat["canonical_size"]
    network = spnet.NetworkSpec.from_section(network_section, profile_network(profile))

    train_kw = {k: _coerce(k, v) for k, v in tr.items()}
    train = dataclasses.replace(profile_train(profile), **train_kw)

    base = Path(base_dir)
    aggregate = ev.get("video_aggregate", "mean").strip()
    if aggregate not in ("mean", "vote"):
        raise ConfigurationError(f"[eval] video_aggregate must be mean or vote, got {aggregate!r}")
    return RunConfig(
        profile=profile,
        network=network,
        train=train,
        manifest=base / dat["manifest"].strip() if "manifest" in dat else None,
        output_dir=base / run["output_dir"].strip() if "output_dir" in run else None,
        video_aggregate=aggregate,
        class_count_explicit="class_count" in net,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)
