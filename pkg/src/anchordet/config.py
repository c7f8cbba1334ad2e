"""Run configuration: a flat `key = value` file with profile defaults,
command-line overrides, and an echo of the fully resolved config.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import GridConfig
from .decoder import DecoderConfig
from .errors import ConfigError
from .scene import ClassSpec, SceneConfig
from .training import TrainConfig

# key -> (type tag, desk-profile default)
_SCHEMA: dict[str, tuple[str, object]] = {
    # scene generation
    "extent": ("floats4", (-50.0, 50.0, -50.0, 50.0)),
    "objects_min": ("int", 2),
    "objects_max": ("int", 6),
    "class_specs": ("str", "2.0:4.5:1.6:0.1"),  # w:l:h:jitter per class, ';'-separated
    "surface_density": ("float", 6.0),
    "clutter_points": ("int", 300),
    "min_points_per_box": ("int", 10),
    "velocity_max": ("float", 0.0),
    # backbone grid
    "cell_size": ("float", 3.125),
    "max_points_per_pillar": ("int", 16),
    # decoder
    "d": ("int", 64),
    "heads": ("int", 4),
    "k_layers": ("int", 4),
    "m_queries": ("int", 25),
    "ffn_hidden": ("int", 0),
    "mask_empty_cells": ("bool", False),
    "refine": ("str", "none"),  # comma list of layer indices, or 'none'
    # training
    "epochs_stage1": ("int", 80),
    "epochs_aam": ("int", 20),
    "epochs_stage2": ("int", 80),
    "lr": ("float", 1e-4),
    "lr_decay_factor": ("float", 10.0),
    "lr_decay_period": ("int", 200),
    "batch_size": ("int", 10),
    "lambda_reg": ("float", 1.0),
    "lambda_cls": ("float", 1.0),
    "noobject_weight": ("float", 0.1),
    # run
    "seed": ("int", 0),
}

# Matches the reported experiment shape (N=16384, M=100, d=256, K=6); meant
# for forward-pass checks, not for desk training.
_PAPER_SHAPE_OVERRIDES = {
    "cell_size": 0.78125,  # 128 x 128 = 16384 cells over 100 m
    "d": 256,
    "heads": 8,
    "k_layers": 6,
    "m_queries": 100,
}

PROFILES = ("desk", "paper-shape")


def _parse_value(key: str, raw: str):
    kind, _ = _SCHEMA[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {raw}")
        if kind == "floats4":
            vals = tuple(float(v) for v in raw.split(","))
            if len(vals) != 4:
                raise ValueError("expected 4 comma-separated numbers")
            return vals
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {e}") from None


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def from_sources(
        cls,
        profile: str = "desk",
        config_path: str | None = None,
        overrides: dict[str, str] | None = None,
    ) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile '{profile}' (choose from {PROFILES})")
        values = {k: default for k, (_, default) in _SCHEMA.items()}
        if profile == "paper-shape":
            values.update(_PAPER_SHAPE_OVERRIDES)
        if config_path is not None:
            for key, raw in _read_config_file(config_path).items():
                if key not in _SCHEMA:
                    raise ConfigError(f"unknown config key '{key}'")
                values[key] = _parse_value(key, raw)
        for key, raw in (overrides or {}).items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = _parse_value(key, raw)
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def scene_config(self) -> SceneConfig:
        classes = []
        for part in str(self.values["class_specs"]).split(";"):
            fields = part.split(":")
            if len(fields) != 4:
                raise ConfigError(
                    "class_specs entries must be 'width:length:height:jitter'"
                )
            w, l, h, j = (float(v) for v in fields)
            classes.append(ClassSpec(w, l, h, j))
        return SceneConfig(
            extent=self.values["extent"],
            n_objects=(self.values["objects_min"], self.values["objects_max"]),
            classes=tuple(classes),
            surface_density=self.values["surface_density"],
            clutter_points=self.values["clutter_points"],
            min_points_per_box=self.values["min_points_per_box"],
            velocity_max=self.values["velocity_max"],
        )

    def grid_config(self) -> GridConfig:
        return GridConfig(
            extent=self.values["extent"],
            cell_size=self.values["cell_size"],
            d=self.values["d"],
            max_points_per_pillar=self.values["max_points_per_pillar"],
        )

    def refine_layers(self) -> frozenset[int]:
        raw = str(self.values["refine"]).strip()
        if raw in ("", "none"):
            return frozenset()
        return frozenset(int(i) for i in raw.split(","))

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            k_layers=self.values["k_layers"],
            d=self.values["d"],
            heads=self.values["heads"],
            m_queries=self.values["m_queries"],
            refine_layers=self.refine_layers(),
            num_classes=len(str(self.values["class_specs"]).split(";")),
            ffn_hidden=self.values["ffn_hidden"],
            mask_empty_cells=self.values["mask_empty_cells"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs_stage1=v["epochs_stage1"],
            epochs_aam=v["epochs_aam"],
            epochs_stage2=v["epochs_stage2"],
            lr=v["lr"],
            lr_decay_factor=v["lr_decay_factor"],
            lr_decay_period=v["lr_decay_period"],
            batch_size=v["batch_size"],
            lambda_reg=v["lambda_reg"],
            lambda_cls=v["lambda_cls"],
            noobject_weight=v["noobject_weight"],
            seed=v["seed"],
        )

    def echo(self, path) -> None:
        """Write the fully resolved config; the echo re-parses to itself."""
        with open(path, "w") as fh:
            for key in _SCHEMA:
                fh.write(f"{key} = {_format_value(key, self.values[key])}\n")


def _format_value(key: str, value) -> str:
    kind, _ = _SCHEMA[key]
    if kind == "floats4":
        return ",".join(f"{v:g}" for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return f"{value:g}"
    return str(value)


def _read_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{i}: expected 'key = value'")
            key, raw = line.split("=", 1)
            out[key.strip()] = raw.strip()
    return out
