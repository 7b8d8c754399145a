"""Run configuration: one flat JSON namespace merged over preset defaults.

Keys are the fields of ``SimConfig`` plus the training, model, controller and
run options listed below. Later sources win: default < file < flag. The source
of every key is kept in ``RunConfig.provenance``. A run's ``manifest.json`` can
be passed back as the config file to repeat the run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .control import ControllerConfig
from .model import ModelConfig
from .sim import ConfigError, SimConfig, preset
from .train import TrainConfig

MODEL_KEYS = ("sigma_x", "sigma_g", "decoder_std", "transition", "log_std_min", "log_std_max",
              "latent_scale", "goal_latent_scale", "decoder_hidden", "share_goal_decoder",
              "goal_shared_std", "goal_log_std_max")
TRAIN_KEYS = ("learning_rate", "beta1", "beta2", "adam_eps", "batch_size", "epochs",
              "lambda_x", "lambda_z", "lambda_reg", "goal_warmup_epochs", "lr_decay_epochs",
              "lr_final_scale")
CTRL_KEYS = ("gain", "stop_eps", "max_steps")
RUN_DEFAULTS: Dict[str, Any] = {
    "preset": "wide",
    "seed": 0,
    "n_episodes": 60,
    "T": 20,
    "collect_stages": [1],
    "n_trials": 50,
    "n_pack_trials": 10,
    "n_stages": 4,
    "grid": 15,
    "walk_half": 0.02,
    "conditional": False,
}
SIM_KEYS = tuple(f.name for f in dataclasses.fields(SimConfig))


class ConfigParseError(ConfigError):
    pass


def _defaults(preset_name: str) -> Dict[str, Any]:
    sim = preset(preset_name).to_dict()
    model = ModelConfig().to_dict()
    train = TrainConfig().to_dict()
    ctrl = ControllerConfig().to_dict()
    out = dict(RUN_DEFAULTS, preset=preset_name)
    out.update(sim)
    out.update({k: model[k] for k in MODEL_KEYS})
    out.update({k: train[k] for k in TRAIN_KEYS})
    out.update({k: ctrl[k] for k in CTRL_KEYS})
    return out


def known_keys():
    return set(_defaults("wide"))


@dataclass
class RunConfig:
    values: Dict[str, Any]
    provenance: Dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def sim_config(self) -> SimConfig:
        base = preset(self.values["preset"])
        changed = {k: self.values[k] for k in SIM_KEYS if self.provenance.get(k) != "default"}
        return SimConfig.from_dict(changed, base=base)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(dict({k: self.values[k] for k in MODEL_KEYS}, dt=self.values["dt"]))

    def train_config(self) -> TrainConfig:
        d = {k: self.values[k] for k in TRAIN_KEYS}
        d["seed"] = int(self.values["seed"])
        return TrainConfig.from_dict(d, base=TrainConfig(model=self.model_config()))

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(gain=float(self.values["gain"]), u_max=float(self.values["u_max"]),
                                stop_eps=float(self.values["stop_eps"]),
                                max_steps=int(self.values["max_steps"]))

    def to_dict(self) -> dict:
        return {"values": self.values, "provenance": self.provenance}


def parse_json_text(text: str, source: str = "<config>") -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{source}: malformed JSON at line {exc.lineno}, "
                               f"column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigParseError(f"{source}: top level must be a JSON object")
    return data


def load_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve defaults, then the JSON file at ``path``, then ``overrides`` (flags).

    A run manifest is accepted as the file: its ``resolved`` block is used.
    """
    file_values = parse_json_text(Path(path).read_text(), str(path)) if path else {}
    if "resolved" in file_values and "command" in file_values:
        file_values = file_values["resolved"]
    overrides = dict(overrides or {})
    keys = known_keys()
    for source in (file_values, overrides):
        for k in source:
            if k not in keys:
                raise ConfigError(f"unknown config key: {k!r}")
    preset_name = overrides.get("preset", file_values.get("preset", "wide"))
    values = _defaults(preset_name)
    provenance = {k: "default" for k in values}
    for source, tag in ((file_values, "file"), (overrides, "flag")):
        for k, v in source.items():
            if k in ("hand_cam", "inhand_cam"):
                merged = dict(values[k])
                merged.update(v)
                v = merged
            values[k] = v
            provenance[k] = tag
    rc = RunConfig(values, provenance)
    # validate eagerly so bad values surface as config errors
    try:
        rc.sim_config()
        rc.train_config()
        rc.controller_config()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return rc
