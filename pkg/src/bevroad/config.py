"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Grid axes take comma-separated
lists. Unknown keys are rejected so typos never pass silently.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Callable, Mapping

from .bev_raster import RasterConfig
from .camera_warp import GroundPlaneModel
from .errors import ConfigError
from .model_zoo import PROFILES, ScaleProfile
from .train_engine import HyperParams


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _str_list(text: str) -> list[str]:
    return [t.strip().lower() for t in text.split(",") if t.strip()]


def _profile(text: str) -> str:
    name = text.strip().lower()
    if name not in PROFILES:
        raise ValueError(f"profile must be one of {sorted(PROFILES)}")
    return name


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "roi.x_min": (float, 6.0),
    "roi.x_max": (float, 46.0),
    "roi.y_min": (float, -10.0),
    "roi.y_max": (float, 10.0),
    "raster.resolution": (float, 0.25),  # follows model.profile unless set
    "raster.z_low": (float, -1.8),
    "raster.z_high": (float, -1.2),
    "warp.z_plane": (float, -1.73),
    "model.profile": (_profile, "desk"),
    "train.optimizer": (str.lower, "adam"),
    "train.lr": (float, 1e-3),
    "train.loss": (str.lower, "bce"),
    "train.dropout": (float, 0.2),
    "train.val_split": (float, 0.1),
    "train.aug_rate": (float, 1.0),
    "train.batch": (int, 2),
    "train.epochs": (int, 50),
    "train.seed": (int, 0),
    "grid.optimizer": (_str_list, ["adam", "sgd"]),
    "grid.lr": (_float_list, [1e-2, 1e-3, 1e-4]),
    "grid.loss": (_str_list, ["bce", "dice"]),
    "grid.dropout": (_float_list, [0.2, 0.35, 0.5]),
    "grid.val_split": (_float_list, [0.1, 0.2, 0.3, 0.4, 0.5]),
    "grid.aug_rate": (_float_list, [0.0, 0.5, 1.0]),
}

_GRID_TO_HP = {
    "grid.optimizer": "optimizer",
    "grid.lr": "learning_rate",
    "grid.loss": "loss",
    "grid.dropout": "dropout_rate",
    "grid.val_split": "val_split",
    "grid.aug_rate": "aug_rate",
}


class Config(dict):
    """Validated settings; build domain objects with the accessor methods."""

    def raster(self) -> RasterConfig:
        return RasterConfig(
            self["roi.x_min"],
            self["roi.x_max"],
            self["roi.y_min"],
            self["roi.y_max"],
            self["raster.resolution"],
            self["raster.z_low"],
            self["raster.z_high"],
        )

    def plane(self) -> GroundPlaneModel:
        return GroundPlaneModel(self["warp.z_plane"])

    def profile(self) -> ScaleProfile:
        return PROFILES[self["model.profile"]]

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            optimizer=self["train.optimizer"],
            learning_rate=self["train.lr"],
            loss=self["train.loss"],
            dropout_rate=self["train.dropout"],
            val_split=self["train.val_split"],
            aug_rate=self["train.aug_rate"],
            batch_size=self["train.batch"],
            max_epochs=self["train.epochs"],
            seed=self["train.seed"],
        )

    def grid(self) -> dict[str, list]:
        return {hp: list(self[key]) for key, hp in _GRID_TO_HP.items()}

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            value = self[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def load_config(
    path: str | os.PathLike | None = None, overrides: Mapping[str, str] | None = None
) -> Config:
    """Defaults, then the file, then ``overrides``; everything validated up front."""
    raw: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        raw.update(parse_pairs(text.splitlines(), str(path)))
    raw.update(overrides or {})

    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = Config({k: default for k, (_, default) in SCHEMA.items()})
    for key, text in raw.items():
        parser = SCHEMA[key][0]
        try:
            cfg[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None

    if "raster.resolution" not in raw:
        # default grid fits the chosen model input exactly
        cfg["raster.resolution"] = (cfg["roi.x_max"] - cfg["roi.x_min"]) / cfg.profile().input_h

    # building the domain objects runs their own range checks
    try:
        cfg.raster()
        cfg.plane()
        cfg.hyperparams()
        for axis, values in cfg.grid().items():
            if not values:
                raise ValueError(f"grid axis {axis} is empty")
            for v in values:
                HyperParams(**{axis: v})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
