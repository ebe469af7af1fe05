"""Run configuration: one JSON file with per-stage sections.

Files are deep-merged over the library defaults, then dotted CLI overrides
(`--set section.key=value`) are applied; the fully resolved dict is what
manifests embed and hash. The diffusion schedule defaults (T=500,
beta_1=4e-5, beta_T=5e-3) and lr=1e-4 stay overridable for toy runs.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .checkpoint import config_hash
from .condition import CondEncoderConfig
from .dataset import DatasetConfig
from .dit import DitConfig
from .training import TrainBudget
from .vae import VaeConfig

ENV_RUN_ROOT = "BEAMCKM_RUN_ROOT"


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "run_root": None,
    "paths": {
        "dataset": "dataset",
        "vae": "vae_ckpt",
        "dit": "dit_ckpt",
        "eval": "eval",
        "infer": "infer",
    },
    "dataset": {
        "seed": 0,
        "n_scenes": 4,
        "train_tx_per_scene": 3,
        "heldout_tx_per_scene": 1,
        "train_beams_per_tx": 6,
        "heldout_beams_per_tx": 2,
        "height_px": 64,
        "width_px": 64,
        "resolution_m": 1.0,
        "n_antennas": 8,
        "spacing_ratio": 0.5,
        "power_budget": 1.0,
        "n_buildings": [2, 4],
        "building_size": [5, 12],
        "tx_margin_px": 8,
        "beam_theta_deg": 80.0,
        "beam_perturb_sigma": 0.1,
        "ceiling_db": 0.0,
        "write_png": False,
        "channel": {
            "path_loss_exponent": 3.0,
            "reference_distance_m": 1.0,
            "shadow_penalty_db": 25.0,
            "reflection_enabled": True,
            "reflection_loss_db": 10.0,
            "noise_floor_db": None,
            "floor_db": -150.0,
            "element_gain_exponent": 1.0,
            "carrier_ghz": 2.4,
        },
    },
    "vae": {
        "model": {
            "downsample_factor": 8,
            "latent_channels": 4,
            "channel_schedule": [16, 32, 64],
            "kl_weight": 1e-6,
            "gn_groups": 8,
        },
        "train": {"steps": 1500, "batch_size": 8, "lr": 1e-4, "seed": 0},
    },
    "cond": {
        "cond_channels": 16,
        "channel_schedule": [8, 16, 32],
        "gn_groups": 8,
        "use_distance_channel": False,
    },
    "dit": {
        "model": {
            "depth": 4,
            "heads": 4,
            "hidden": 128,
            "patch": 2,
            "mlp_ratio": 4,
            "beam_conditioning": True,
        },
        "train": {"steps": 2000, "batch_size": 16, "lr": 1e-4, "seed": 0},
    },
    "schedule": {"T": 500, "beta_1": 4e-5, "beta_T": 5e-3},
    "sampling": {"seed": 0},
    "eval": {"write_pngs": True},
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _apply_override(cfg: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} is not of the form key.path=value")
    key, raw = dotted.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override path {key!r} does not exist")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"override path {key!r} does not exist")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw  # bare strings allowed


@dataclass
class RunConfig:
    resolved: dict[str, Any]

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = ()) -> "RunConfig":
        merged = copy.deepcopy(DEFAULTS)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} does not exist")
            try:
                file_cfg = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
            merged = _deep_merge(merged, file_cfg)
        for item in overrides or ():
            _apply_override(merged, item)
        try:
            cfg = cls(resolved=merged)
            cfg.dataset_config()  # validate eagerly
            cfg.vae_config()
            cfg.cond_config()
            cfg.schedule_params()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    # -- sections ------------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    def run_root(self) -> Path:
        root = self.resolved.get("run_root") or os.environ.get(ENV_RUN_ROOT) or "runs"
        return Path(root)

    def path(self, key: str) -> Path:
        rel = Path(self.resolved["paths"][key])
        return rel if rel.is_absolute() else self.run_root() / rel

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig.from_dict(self.resolved["dataset"])

    def vae_config(self) -> VaeConfig:
        return VaeConfig.from_dict(self.resolved["vae"]["model"])

    def cond_config(self) -> CondEncoderConfig:
        return CondEncoderConfig.from_dict(self.resolved["cond"])

    def dit_config(self) -> DitConfig:
        ds = self.resolved["dataset"]
        vae = self.vae_config()
        cond = self.cond_config()
        if cond.downsample_factor != vae.downsample_factor:
            raise ConfigError("condition encoder and VAE downsample factors differ")
        return DitConfig(latent_channels=vae.latent_channels,
                         cond_channels=cond.cond_channels,
                         latent_h=ds["height_px"] // vae.downsample_factor,
                         latent_w=ds["width_px"] // vae.downsample_factor,
                         n_antennas=ds["n_antennas"],
                         t_max=self.resolved["schedule"]["T"],
                         **self.resolved["dit"]["model"])

    def schedule_params(self) -> tuple[int, float, float]:
        s = self.resolved["schedule"]
        if not (0.0 < s["beta_1"] < s["beta_T"] < 1.0) or s["T"] < 1:
            raise ConfigError(f"invalid schedule parameters {s}")
        return s["T"], s["beta_1"], s["beta_T"]

    def budget(self, section: str) -> TrainBudget:
        t = self.resolved[section]["train"]
        return TrainBudget(steps=t["steps"], batch_size=t["batch_size"],
                           lr=t["lr"], seed=t["seed"])

    def hash(self) -> str:
        return config_hash(self.resolved)
