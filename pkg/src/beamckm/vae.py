"""Perceptual compressor: convolutional VAE over normalized channel maps.

Encoder: stem conv -> [strided-conv downsample -> ResNet block] per stage ->
conv emitting 2*D_lat channels split into (mu, log_var). Decoder mirrors it
with nearest-neighbor upsampling, halving widths per stage, and a final
conv + sigmoid so outputs live in (0,1). Pre-trained on map reconstruction,
then frozen while the diffusion stages train.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import TensorNode


@dataclass
class VaeConfig:
    downsample_factor: int = 8
    latent_channels: int = 4
    channel_schedule: tuple[int, ...] = (32, 64, 128)
    kl_weight: float = 1e-6
    gn_groups: int = 8

    def __post_init__(self):
        self.channel_schedule = tuple(self.channel_schedule)
        if self.downsample_factor != 2 ** len(self.channel_schedule):
            raise ValueError("downsample_factor must be 2**len(channel_schedule)")

    def to_dict(self) -> dict:
        return {"downsample_factor": self.downsample_factor,
                "latent_channels": self.latent_channels,
                "channel_schedule": list(self.channel_schedule),
                "kl_weight": self.kl_weight,
                "gn_groups": self.gn_groups}

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        return cls(**{**d, "channel_schedule": tuple(d["channel_schedule"])})


PAPER_SCALE = VaeConfig(downsample_factor=8, latent_channels=8,
                        channel_schedule=(64, 128, 256))


@dataclass
class LatentDistribution:
    mu: TensorNode
    log_var: TensorNode


def _groups(channels: int, preferred: int) -> int:
    return preferred if channels >= preferred else channels


class ResNetBlock:
    """GroupNorm -> SiLU -> conv, twice, plus a (1x1-projected) skip."""

    def __init__(self, owner: nn.Module, prefix: str, c_in: int, c_out: int,
                 gn_groups: int, rng: np.random.Generator, dtype):
        self.c_in, self.c_out = c_in, c_out
        self.g1 = _groups(c_in, gn_groups)
        self.g2 = _groups(c_out, gn_groups)
        add = owner.add_param
        self.gn1_g = add(f"{prefix}.gn1.gamma", nn.ones_param((c_in,), dtype))
        self.gn1_b = add(f"{prefix}.gn1.beta", nn.zeros_param((c_in,), dtype))
        self.conv1_w = add(f"{prefix}.conv1.weight",
                           nn.uniform_param(rng, (c_out, c_in, 3, 3), c_in * 9, dtype))
        self.conv1_b = add(f"{prefix}.conv1.bias", nn.zeros_param((c_out,), dtype))
        self.gn2_g = add(f"{prefix}.gn2.gamma", nn.ones_param((c_out,), dtype))
        self.gn2_b = add(f"{prefix}.gn2.beta", nn.zeros_param((c_out,), dtype))
        self.conv2_w = add(f"{prefix}.conv2.weight",
                           nn.uniform_param(rng, (c_out, c_out, 3, 3), c_out * 9, dtype))
        self.conv2_b = add(f"{prefix}.conv2.bias", nn.zeros_param((c_out,), dtype))
        if c_in != c_out:
            self.skip_w = add(f"{prefix}.skip.weight",
                              nn.uniform_param(rng, (c_out, c_in, 1, 1), c_in, dtype))
        else:
            self.skip_w = None

    def __call__(self, x: TensorNode) -> TensorNode:
        h = nn.group_norm(x, self.gn1_g, self.gn1_b, self.g1)
        h = nn.conv2d(nn.silu(h), self.conv1_w, self.conv1_b, padding=1)
        h = nn.group_norm(h, self.gn2_g, self.gn2_b, self.g2)
        h = nn.conv2d(nn.silu(h), self.conv2_w, self.conv2_b, padding=1)
        skip = x if self.skip_w is None else nn.conv2d(x, self.skip_w)
        return h + skip


class Vae(nn.Module):
    def __init__(self, cfg: VaeConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        sched = cfg.channel_schedule
        d_lat = cfg.latent_channels

        self.enc_stem_w = self.add_param(
            "enc.stem.weight", nn.uniform_param(rng, (sched[0], 1, 3, 3), 9, dtype))
        self.enc_stem_b = self.add_param("enc.stem.bias", nn.zeros_param((sched[0],), dtype))
        self.enc_down = []
        self.enc_res = []
        prev = sched[0]
        for i, c in enumerate(sched):
            w = self.add_param(f"enc.down{i}.weight",
                               nn.uniform_param(rng, (c, prev, 3, 3), prev * 9, dtype))
            b = self.add_param(f"enc.down{i}.bias", nn.zeros_param((c,), dtype))
            self.enc_down.append((w, b))
            self.enc_res.append(ResNetBlock(self, f"enc.res{i}", c, c,
                                            cfg.gn_groups, rng, dtype))
            prev = c
        self.enc_out_w = self.add_param(
            "enc.out.weight", nn.uniform_param(rng, (2 * d_lat, prev, 3, 3), prev * 9, dtype))
        self.enc_out_b = self.add_param("enc.out.bias", nn.zeros_param((2 * d_lat,), dtype))

        dec_chain = [sched[-1]]
        for _ in sched:
            dec_chain.append(max(dec_chain[-1] // 2, 4))
        self.dec_stem_w = self.add_param(
            "dec.stem.weight", nn.uniform_param(rng, (dec_chain[0], d_lat, 3, 3),
                                                d_lat * 9, dtype))
        self.dec_stem_b = self.add_param("dec.stem.bias",
                                         nn.zeros_param((dec_chain[0],), dtype))
        self.dec_res = []
        self.dec_up = []
        for i in range(len(sched)):
            c, c_next = dec_chain[i], dec_chain[i + 1]
            self.dec_res.append(ResNetBlock(self, f"dec.res{i}", c, c,
                                            cfg.gn_groups, rng, dtype))
            w = self.add_param(f"dec.up{i}.weight",
                               nn.uniform_param(rng, (c_next, c, 3, 3), c * 9, dtype))
            b = self.add_param(f"dec.up{i}.bias", nn.zeros_param((c_next,), dtype))
            self.dec_up.append((w, b))
        self.dec_out_w = self.add_param(
            "dec.out.weight", nn.uniform_param(rng, (1, dec_chain[-1], 3, 3),
                                               dec_chain[-1] * 9, dtype))
        self.dec_out_b = self.add_param("dec.out.bias", nn.zeros_param((1,), dtype))

    # -- public surface ------------------------------------------------------

    def encode(self, map_norm) -> LatentDistribution:
        x = map_norm if isinstance(map_norm, TensorNode) else TensorNode(
            np.asarray(map_norm, dtype=self.dtype))
        h, w = x.shape[-2], x.shape[-1]
        f = self.cfg.downsample_factor
        if h % f or w % f:
            raise ValueError(f"spatial dims {h}x{w} not divisible by factor {f}")
        y = nn.conv2d(x, self.enc_stem_w, self.enc_stem_b, padding=1)
        for (dw, db), res in zip(self.enc_down, self.enc_res):
            y = nn.conv2d(y, dw, db, stride=2, padding=1)
            y = res(y)
        y = nn.conv2d(y, self.enc_out_w, self.enc_out_b, padding=1)
        ch_axis = y.ndim - 3
        d = self.cfg.latent_channels
        mu = T.slice_axis(y, ch_axis, 0, d)
        log_var = T.clamp(T.slice_axis(y, ch_axis, d, 2 * d), -30.0, 20.0)
        return LatentDistribution(mu=mu, log_var=log_var)

    def sample_latent(self, dist: LatentDistribution, noise) -> TensorNode:
        eps = noise if isinstance(noise, TensorNode) else TensorNode(
            np.asarray(noise, dtype=self.dtype))
        if eps.shape != dist.mu.shape:
            raise ValueError(f"noise shape {eps.shape} != mu shape {dist.mu.shape}")
        return dist.mu + T.exp(dist.log_var * 0.5) * eps

    def decode(self, z) -> TensorNode:
        zt = z if isinstance(z, TensorNode) else TensorNode(np.asarray(z, dtype=self.dtype))
        ch_axis = zt.ndim - 3
        if zt.shape[ch_axis] != self.cfg.latent_channels:
            raise ValueError(f"latent has {zt.shape[ch_axis]} channels, "
                             f"expected {self.cfg.latent_channels}")
        y = nn.conv2d(zt, self.dec_stem_w, self.dec_stem_b, padding=1)
        for res, (uw, ub) in zip(self.dec_res, self.dec_up):
            y = res(y)
            y = nn.upsample_nearest2(y)
            y = nn.conv2d(y, uw, ub, padding=1)
        y = nn.conv2d(y, self.dec_out_w, self.dec_out_b, padding=1)
        return nn.sigmoid(y)

    def loss(self, map_norm, noise) -> tuple[TensorNode, TensorNode, TensorNode]:
        """ELBO pieces: (total, reconstruction MSE, KL); recon is mean over
        pixels, KL is the summed Gaussian divergence averaged over the batch."""
        x = map_norm if isinstance(map_norm, TensorNode) else TensorNode(
            np.asarray(map_norm, dtype=self.dtype))
        dist = self.encode(x)
        z = self.sample_latent(dist, noise)
        recon = self.decode(z)
        mse = T.tmean((recon - x) ** 2)
        kl_terms = T.exp(dist.log_var) + dist.mu * dist.mu - dist.log_var - 1.0
        batch = x.shape[0] if x.ndim == 4 else 1
        kl = T.tsum(kl_terms) * (0.5 / batch)
        return mse + kl * self.cfg.kl_weight, mse, kl

    def latent_hw(self, h: int, w: int) -> tuple[int, int]:
        f = self.cfg.downsample_factor
        return h // f, w // f
