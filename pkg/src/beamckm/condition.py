"""Spatial condition encoder: building grid + tx one-hot -> latent-resolution embedding.

Fully convolutional (head conv, then ResNet block + strided downsample per
stage) with a zero-initialized output conv, so the embedding is identically
zero before training. Trained end-to-end with the diffusion transformer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import TensorNode, concat
from .vae import ResNetBlock


@dataclass
class CondEncoderConfig:
    cond_channels: int = 16
    channel_schedule: tuple[int, ...] = (16, 32, 64)
    gn_groups: int = 8
    use_distance_channel: bool = False  # optional third input channel

    def __post_init__(self):
        self.channel_schedule = tuple(self.channel_schedule)

    def to_dict(self) -> dict:
        return {"cond_channels": self.cond_channels,
                "channel_schedule": list(self.channel_schedule),
                "gn_groups": self.gn_groups,
                "use_distance_channel": self.use_distance_channel}

    @classmethod
    def from_dict(cls, d: dict) -> "CondEncoderConfig":
        return cls(**{**d, "channel_schedule": tuple(d["channel_schedule"])})

    @property
    def in_channels(self) -> int:
        return 3 if self.use_distance_channel else 2

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.channel_schedule)


PAPER_SCALE = CondEncoderConfig(cond_channels=32, channel_schedule=(32, 64, 128))


class ConditionEncoder(nn.Module):
    def __init__(self, cfg: CondEncoderConfig, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        sched = cfg.channel_schedule
        cin = cfg.in_channels
        self.head_w = self.add_param(
            "head.weight", nn.uniform_param(rng, (sched[0], cin, 3, 3), cin * 9, dtype))
        self.head_b = self.add_param("head.bias", nn.zeros_param((sched[0],), dtype))
        self.res = []
        self.down = []
        prev = sched[0]
        for i, c in enumerate(sched):
            self.res.append(ResNetBlock(self, f"res{i}", prev, c,
                                        cfg.gn_groups, rng, dtype))
            w = self.add_param(f"down{i}.weight",
                               nn.uniform_param(rng, (c, c, 3, 3), c * 9, dtype))
            b = self.add_param(f"down{i}.bias", nn.zeros_param((c,), dtype))
            self.down.append((w, b))
            prev = c
        # zero-init projection: embedding starts identically zero
        self.out_w = self.add_param(
            "out.weight", nn.zeros_param((cfg.cond_channels, prev, 3, 3), dtype))
        self.out_b = self.add_param("out.bias", nn.zeros_param((cfg.cond_channels,), dtype))

    def encode(self, buildings, tx_onehot) -> TensorNode:
        b = buildings if isinstance(buildings, TensorNode) else TensorNode(
            np.asarray(buildings, dtype=self.dtype))
        t = tx_onehot if isinstance(tx_onehot, TensorNode) else TensorNode(
            np.asarray(tx_onehot, dtype=self.dtype))
        if b.shape != t.shape:
            raise ValueError(f"building grid {b.shape} and tx grid {t.shape} differ")
        ch_axis = b.ndim - 3
        chans = [b, t]
        if self.cfg.use_distance_channel:
            chans.append(TensorNode(self._distance_channel(t.values)))
        x = concat(chans, axis=ch_axis)
        y = nn.conv2d(x, self.head_w, self.head_b, padding=1)
        for res, (dw, db) in zip(self.res, self.down):
            y = res(y)
            y = nn.conv2d(y, dw, db, stride=2, padding=1)
        return nn.conv2d(y, self.out_w, self.out_b, padding=1)

    def _distance_channel(self, tx: np.ndarray) -> np.ndarray:
        """Per-sample Euclidean distance to the tx pixel, normalized by the diagonal."""
        batched = tx.ndim == 4
        grids = tx if batched else tx[None]
        out = np.empty_like(grids)
        h, w = grids.shape[-2:]
        diag = np.hypot(h - 1.0, w - 1.0)
        rr, cc = np.mgrid[0:h, 0:w]
        for i, g in enumerate(grids):
            r0, c0 = np.unravel_index(np.argmax(g[0]), (h, w))
            out[i, 0] = np.hypot(rr - r0, cc - c0) / diag
        return out.astype(self.dtype) if batched else out[0].astype(self.dtype)
