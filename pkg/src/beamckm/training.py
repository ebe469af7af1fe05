"""Training loops for the VAE and the conditioned diffusion transformer.

Reproducibility: every step derives its own Generator from (seed, step), so
losses, checkpoints and resumed runs are bit-identical for a given config.
Loss logs are plain `step,loss` CSV without timestamps.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .condition import CondEncoderConfig, ConditionEncoder
from .dataset import Dataset
from .diffusion import NoiseSchedule, training_loss
from .dit import BeamDit, DitConfig
from .optim import AdamState, adam_step, zero_grads
from .tensor import TensorNode
from .vae import Vae, VaeConfig


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


@dataclass
class TrainBudget:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0  # 0: only at the end


class LossLog:
    def __init__(self, path: Path, resume: bool):
        self.path = path
        if not resume:
            path.write_text("step,loss\n")

    def append(self, step: int, loss: float) -> None:
        with self.path.open("a") as f:
            f.write(f"{step},{loss:.10g}\n")


def _stack_train_maps(data: Dataset) -> np.ndarray:
    ids = data.splits["train"]
    maps = [data.record(r).map_unit(data.floor_db, data.ceiling_db) for r in ids]
    return np.stack(maps)[:, None]  # [R,1,H,W]


def _model_tensors(models: dict[str, "object"]) -> dict[str, np.ndarray]:
    out = {}
    for tag, model in models.items():
        for name, arr in model.state_arrays().items():
            out[f"{tag}/{name}"] = arr
    return out


def _save_train_checkpoint(out_dir: Path, models: dict, opt: AdamState,
                           opt_names: list[str], step: int, extra: dict) -> None:
    tensors = _model_tensors(models)
    for name, m, v in zip(opt_names, opt.m, opt.v):
        tensors[f"opt.m/{name}"] = m
        tensors[f"opt.v/{name}"] = v
    meta = {"step": step,
            "optimizer": {"step_count": opt.step_count, "lr": opt.lr,
                          "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}}
    meta.update(extra)
    save_checkpoint(out_dir, tensors, meta)


def _load_train_checkpoint(out_dir: Path, models: dict, opt: AdamState,
                           opt_names: list[str]) -> int:
    tensors, manifest = load_checkpoint(out_dir)
    for tag, model in models.items():
        state = {name[len(tag) + 1:]: arr for name, arr in tensors.items()
                 if name.startswith(tag + "/")}
        model.load_state(state)
    for i, name in enumerate(opt_names):
        opt.m[i] = tensors[f"opt.m/{name}"].astype(opt.m[i].dtype)
        opt.v[i] = tensors[f"opt.v/{name}"].astype(opt.v[i].dtype)
    opt.step_count = manifest["optimizer"]["step_count"]
    return manifest["step"]


# ---------------------------------------------------------------------------
# VAE pretraining


def vae_recon_mse(vae: Vae, maps_unit: np.ndarray, batch: int = 16) -> float:
    """Deterministic reconstruction error decode(mu) vs input, over all maps."""
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(maps_unit), batch):
            x = maps_unit[i:i + batch].astype(vae.dtype)
            recon = vae.decode(vae.encode(x).mu).values
            total += float(((recon - x) ** 2).sum())
            count += x.size
    return total / count


def train_vae(data: Dataset, cfg: VaeConfig, budget: TrainBudget,
              out_dir: str | Path, resume: bool = False,
              dtype=np.float32) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = _stack_train_maps(data)
    vae = Vae(cfg, np.random.default_rng(budget.seed), dtype=dtype)
    params = vae.param_list()
    opt = AdamState.for_params(params, lr=budget.lr)
    names = list(vae.params.keys())

    start = 0
    if resume:
        start = _load_train_checkpoint(out, {"vae": vae}, opt, names)
    log = LossLog(out / "loss.csv", resume=resume)
    mse_init = vae_recon_mse(vae, maps)

    for step in range(start, budget.steps):
        rng = step_rng(budget.seed, step)
        idx = rng.integers(len(maps), size=budget.batch_size)
        x = maps[idx].astype(dtype)
        dist_shape = (budget.batch_size, cfg.latent_channels,
                      maps.shape[2] // cfg.downsample_factor,
                      maps.shape[3] // cfg.downsample_factor)
        noise = rng.standard_normal(dist_shape).astype(dtype)
        total, mse, kl = vae.loss(x, noise)
        zero_grads(params)
        T.backward(total)
        adam_step(params, opt)
        if (step + 1) % budget.log_every == 0:
            log.append(step + 1, float(total.values))
        if budget.checkpoint_every and (step + 1) % budget.checkpoint_every == 0:
            _save_train_checkpoint(out, {"vae": vae}, opt, names, step + 1,
                                   _vae_meta(cfg, budget, data, frozen=False))

    mse_final = vae_recon_mse(vae, maps)
    _save_train_checkpoint(out, {"vae": vae}, opt, names, budget.steps,
                           _vae_meta(cfg, budget, data, frozen=True,
                                     mse_init=mse_init, mse_final=mse_final))
    return {"mse_init": mse_init, "mse_final": mse_final, "vae": vae}


def _vae_meta(cfg: VaeConfig, budget: TrainBudget, data: Dataset,
              frozen: bool, **metrics) -> dict:
    resolved = {"vae": cfg.to_dict(),
                "budget": {"steps": budget.steps, "batch_size": budget.batch_size,
                           "lr": budget.lr, "seed": budget.seed},
                "dataset_hash": data.manifest["config_hash"]}
    meta = {"frozen": frozen, "config": resolved, "config_hash": config_hash(resolved)}
    if metrics:
        meta["metrics"] = {k: float(v) for k, v in metrics.items()}
    return meta


def load_vae(ckpt_dir: str | Path, dtype=np.float32) -> tuple[Vae, dict]:
    tensors, manifest = load_checkpoint(ckpt_dir)
    cfg = VaeConfig.from_dict(manifest["config"]["vae"])
    vae = Vae(cfg, np.random.default_rng(0), dtype=dtype)
    vae.load_state({n[len("vae/"):]: a for n, a in tensors.items()
                    if n.startswith("vae/")})
    return vae, manifest


# ---------------------------------------------------------------------------
# DiT + condition encoder training


def encode_dataset_latents(vae: Vae, data: Dataset) -> dict[str, np.ndarray]:
    """Frozen-VAE posterior means for every train record."""
    out = {}
    with T.no_grad():
        for rid in data.splits["train"]:
            x = data.record(rid).map_unit(data.floor_db, data.ceiling_db)
            out[rid] = vae.encode(x[None, None].astype(vae.dtype)).mu.values[0]
    return out


def train_dit(data: Dataset, vae: Vae, dit_cfg: DitConfig,
              cond_cfg: CondEncoderConfig, sched: NoiseSchedule,
              budget: TrainBudget, out_dir: str | Path,
              resume: bool = False, dtype=np.float32) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng0 = np.random.default_rng(budget.seed)
    dit = BeamDit(dit_cfg, rng0, dtype=dtype)
    cond = ConditionEncoder(cond_cfg, rng0, dtype=dtype)
    models = {"dit": dit, "cond": cond}
    params = dit.param_list() + cond.param_list()
    names = [f"dit/{n}" for n in dit.params] + [f"cond/{n}" for n in cond.params]
    opt = AdamState.for_params(params, lr=budget.lr)

    ids = data.splits["train"]
    latents = encode_dataset_latents(vae, data)
    z0_all = np.stack([latents[r] for r in ids]).astype(np.float64)
    records = [data.record(r) for r in ids]
    beams = np.stack([r.beam_interleaved() for r in records]).astype(np.float64)
    # records share few (scene, tx) pairs: embed each unique pair once per
    # step and gather rows into the batch
    group_keys = [(data.manifest["records"][r]["scene"],
                   data.manifest["records"][r]["tx"]) for r in ids]
    uniq = sorted(set(group_keys))
    group_of = np.array([uniq.index(k) for k in group_keys])
    first = [group_keys.index(k) for k in uniq]
    blds = np.stack([records[i].buildings for i in first])[:, None].astype(dtype)
    txs = np.stack([records[i].tx_onehot for i in first])[:, None].astype(dtype)

    start = 0
    if resume:
        start = _load_train_checkpoint(out, models, opt, names)
    log = LossLog(out / "loss.csv", resume=resume)

    meta = _dit_meta(dit_cfg, cond_cfg, sched, budget, data)
    final_loss = None
    for step in range(start, budget.steps):
        rng = step_rng(budget.seed, step)
        idx = rng.integers(len(ids), size=budget.batch_size)
        t = rng.integers(1, sched.T + 1, size=budget.batch_size)
        eps = rng.standard_normal(z0_all[idx].shape)
        c_groups = cond.encode(blds, txs)
        c_env = T.gather_rows(c_groups, group_of[idx])
        loss = training_loss(dit, z0_all[idx], c_env, beams[idx], t, eps, sched)
        zero_grads(params)
        T.backward(loss)
        adam_step(params, opt)
        final_loss = float(loss.values)
        if (step + 1) % budget.log_every == 0:
            log.append(step + 1, final_loss)
        if budget.checkpoint_every and (step + 1) % budget.checkpoint_every == 0:
            _save_train_checkpoint(out, models, opt, names, step + 1, meta)

    _save_train_checkpoint(out, models, opt, names, budget.steps, meta)
    return {"final_loss": final_loss, "dit": dit, "cond": cond}


def _dit_meta(dit_cfg: DitConfig, cond_cfg: CondEncoderConfig,
              sched: NoiseSchedule, budget: TrainBudget, data: Dataset) -> dict:
    resolved = {"dit": dit_cfg.to_dict(), "cond": cond_cfg.to_dict(),
                "schedule": {"T": sched.T, "beta_1": float(sched.beta[0]),
                             "beta_T": float(sched.beta[-1])},
                "budget": {"steps": budget.steps, "batch_size": budget.batch_size,
                           "lr": budget.lr, "seed": budget.seed},
                "dataset_hash": data.manifest["config_hash"]}
    return {"config": resolved, "config_hash": config_hash(resolved)}


def load_dit(ckpt_dir: str | Path, dtype=np.float32) -> tuple[BeamDit, ConditionEncoder, dict]:
    tensors, manifest = load_checkpoint(ckpt_dir)
    dit_cfg = DitConfig.from_dict(manifest["config"]["dit"])
    cond_cfg = CondEncoderConfig.from_dict(manifest["config"]["cond"])
    dit = BeamDit(dit_cfg, np.random.default_rng(0), dtype=dtype)
    cond = ConditionEncoder(cond_cfg, np.random.default_rng(0), dtype=dtype)
    dit.load_state({n[len("dit/"):]: a for n, a in tensors.items()
                    if n.startswith("dit/")})
    cond.load_state({n[len("cond/"):]: a for n, a in tensors.items()
                     if n.startswith("cond/")})
    return dit, cond, manifest
