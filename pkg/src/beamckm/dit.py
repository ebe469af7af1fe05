"""Noise-prediction transformer with beam-aware adaptive layer normalization.

The noisy latent and the spatial condition embedding are concatenated,
patch-tokenized and position-embedded. Diffusion step and beamforming vector
are embedded by two-layer MLPs and summed into one global token; per block
(pre-attention and pre-MLP sites) and at the final layer, a zero-initialized
linear head regresses [gamma, beta] from SiLU(global token) and modulates the
layer-normalized features as (1+gamma)*LN(f)+beta. Residual branch outputs
(attention out-projection, MLP second linear) and the final linear are
zero-initialized, so at init every block is the identity and the predicted
noise is exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import TensorNode


@dataclass
class DitConfig:
    depth: int = 4
    heads: int = 4
    hidden: int = 128
    patch: int = 2
    latent_channels: int = 4
    cond_channels: int = 16
    latent_h: int = 8
    latent_w: int = 8
    n_antennas: int = 8
    mlp_ratio: int = 4
    t_max: int = 500
    beam_conditioning: bool = True  # False trains the beam-blind ablation

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.latent_h % self.patch or self.latent_w % self.patch:
            raise ValueError("latent dims must be divisible by patch size")

    @property
    def n_tokens(self) -> int:
        return (self.latent_h // self.patch) * (self.latent_w // self.patch)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "depth", "heads", "hidden", "patch", "latent_channels", "cond_channels",
            "latent_h", "latent_w", "n_antennas", "mlp_ratio", "t_max",
            "beam_conditioning")}

    @classmethod
    def from_dict(cls, d: dict) -> "DitConfig":
        return cls(**d)


PAPER_SCALE = DitConfig(depth=12, heads=8, hidden=512, patch=2,
                        latent_channels=8, cond_channels=32,
                        latent_h=32, latent_w=32, n_antennas=16)


class BeamDit(nn.Module):
    def __init__(self, cfg: DitConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.hidden
        c_in = cfg.latent_channels + cfg.cond_channels
        p = cfg.patch

        # patch embedding as reshape+linear, identical to a pxp stride-p conv
        self.x_emb_w = self.add_param(
            "x_emb.weight", nn.uniform_param(rng, (c_in * p * p, d), c_in * p * p, dtype))
        self.x_emb_b = self.add_param("x_emb.bias", nn.zeros_param((d,), dtype))
        self.pos_emb = self.add_param(
            "pos_emb", TensorNode((rng.standard_normal((cfg.n_tokens, d)) * 0.02)
                                  .astype(dtype), requires_grad=True))

        for tag, d_in in (("t_emb", d), ("w_emb", 2 * cfg.n_antennas)):
            self.add_param(f"{tag}.fc1.weight", nn.uniform_param(rng, (d_in, d), d_in, dtype))
            self.add_param(f"{tag}.fc1.bias", nn.zeros_param((d,), dtype))
            self.add_param(f"{tag}.fc2.weight", nn.uniform_param(rng, (d, d), d, dtype))
            self.add_param(f"{tag}.fc2.bias", nn.zeros_param((d,), dtype))

        dm = d * cfg.mlp_ratio
        for i in range(cfg.depth):
            pre = f"block{i}"
            for site in ("ada_attn", "ada_mlp"):
                self.add_param(f"{pre}.{site}.weight", nn.zeros_param((d, 2 * d), dtype))
                self.add_param(f"{pre}.{site}.bias", nn.zeros_param((2 * d,), dtype))
            for w in ("wq", "wk", "wv"):
                self.add_param(f"{pre}.attn.{w}", nn.uniform_param(rng, (d, d), d, dtype))
            self.add_param(f"{pre}.attn.wo", nn.zeros_param((d, d), dtype))
            self.add_param(f"{pre}.mlp.fc1.weight", nn.uniform_param(rng, (d, dm), d, dtype))
            self.add_param(f"{pre}.mlp.fc1.bias", nn.zeros_param((dm,), dtype))
            self.add_param(f"{pre}.mlp.fc2.weight", nn.zeros_param((dm, d), dtype))
            self.add_param(f"{pre}.mlp.fc2.bias", nn.zeros_param((d,), dtype))

        self.add_param("final.ada.weight", nn.zeros_param((d, 2 * d), dtype))
        self.add_param("final.ada.bias", nn.zeros_param((2 * d,), dtype))
        out_dim = p * p * cfg.latent_channels
        self.add_param("final.linear.weight", nn.zeros_param((d, out_dim), dtype))
        self.add_param("final.linear.bias", nn.zeros_param((out_dim,), dtype))

    # -- embeddings ----------------------------------------------------------

    def embed_timestep(self, t) -> TensorNode:
        tv = np.atleast_1d(np.asarray(t))
        if tv.min() < 0 or tv.max() > self.cfg.t_max:
            raise ValueError(f"timestep outside [0, {self.cfg.t_max}]")
        enc = TensorNode(nn.timestep_encoding(tv, self.cfg.hidden, dtype=self.dtype))
        return self._mlp("t_emb", enc)

    def embed_beam(self, w_flat) -> TensorNode:
        """w_flat: [2*N_t] or [N, 2*N_t] interleaved real/imag beam weights."""
        wv = np.atleast_2d(np.asarray(w_flat, dtype=self.dtype))
        if wv.shape[-1] != 2 * self.cfg.n_antennas:
            raise ValueError(f"beam vector carries {wv.shape[-1]} floats, "
                             f"expected {2 * self.cfg.n_antennas}")
        emb = self._mlp("w_emb", TensorNode(wv))
        if not self.cfg.beam_conditioning:
            emb = emb * 0.0
        return emb

    def _mlp(self, tag: str, x: TensorNode) -> TensorNode:
        p = self.params
        h = nn.silu(nn.linear(x, p[f"{tag}.fc1.weight"], p[f"{tag}.fc1.bias"]))
        return nn.linear(h, p[f"{tag}.fc2.weight"], p[f"{tag}.fc2.bias"])

    def global_token(self, t, w_flat) -> TensorNode:
        return self.embed_timestep(t) + self.embed_beam(w_flat)

    # -- adaLN ---------------------------------------------------------------

    def adaln_modulate(self, c_emb: TensorNode, site: str) -> tuple[TensorNode, TensorNode]:
        """[gamma, beta] = A_mod @ SiLU(c_emb) + b_mod for the named site."""
        w = self.params[f"{site}.weight"]
        b = self.params[f"{site}.bias"]
        gb = nn.linear(nn.silu(c_emb), w, b)
        d = self.cfg.hidden
        axis = gb.ndim - 1
        return T.slice_axis(gb, axis, 0, d), T.slice_axis(gb, axis, d, 2 * d)

    @staticmethod
    def adaln_apply(f_in: TensorNode, gamma: TensorNode, beta: TensorNode,
                    eps: float = 1e-5) -> TensorNode:
        """(1 + gamma) * LN(f_in) + beta with affine-free LN over features."""
        ln = nn.layer_norm(f_in, None, None, eps=eps)
        if gamma.ndim == f_in.ndim - 1:  # broadcast per-sample vectors over tokens
            gamma = T.reshape(gamma, gamma.shape[:-1] + (1,) + gamma.shape[-1:])
            beta = T.reshape(beta, beta.shape[:-1] + (1,) + beta.shape[-1:])
        return ln * (gamma + 1.0) + beta

    # -- spatial path --------------------------------------------------------

    def fuse_spatial(self, z_t: TensorNode, c_env: TensorNode) -> TensorNode:
        if z_t.shape[-2:] != c_env.shape[-2:]:
            raise ValueError(f"latent {z_t.shape} and condition {c_env.shape} "
                             "spatial dims differ")
        return T.concat([z_t, c_env], axis=z_t.ndim - 3)

    def tokenize(self, fused: TensorNode) -> TensorNode:
        p = self.cfg.patch
        squeeze = fused.ndim == 3
        n, c, h, w = ((1,) + fused.shape) if squeeze else fused.shape
        if h % p or w % p:
            raise ValueError(f"spatial dims {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        patches = T.reshape(fused, (n, c, gh, p, gw, p))
        patches = T.transpose(patches, (0, 2, 4, 1, 3, 5))  # [N,gh,gw,C,p,p]
        patches = T.reshape(patches, (n, gh * gw, c * p * p))
        tokens = nn.linear(patches, self.x_emb_w, self.x_emb_b) + self.pos_emb
        d = self.cfg.hidden
        return T.reshape(tokens, (gh * gw, d)) if squeeze else tokens

    def _unpatchify(self, tokens: TensorNode) -> TensorNode:
        cfg = self.cfg
        p, dl = cfg.patch, cfg.latent_channels
        gh, gw = cfg.latent_h // p, cfg.latent_w // p
        n = tokens.shape[0]
        y = T.reshape(tokens, (n, gh, gw, dl, p, p))
        y = T.transpose(y, (0, 3, 1, 4, 2, 5))
        return T.reshape(y, (n, dl, cfg.latent_h, cfg.latent_w))

    # -- full model ----------------------------------------------------------

    def forward(self, z_t, c_env: TensorNode, t, w_flat,
                capture: dict | None = None) -> TensorNode:
        """Predict the added noise; output shape equals z_t's.

        z_t may be a numpy array or TensorNode [N,D_lat,h,w] (or unbatched);
        c_env comes from the condition encoder; t is int or [N] ints; w_flat
        holds interleaved beam weights. `capture`, when given, records the
        global token and per-site modulation arrays for inspection.
        """
        zt = z_t if isinstance(z_t, TensorNode) else TensorNode(
            np.asarray(z_t, dtype=self.dtype))
        squeeze = zt.ndim == 3
        if squeeze:
            zt = T.reshape(zt, (1,) + zt.shape)
            if c_env.ndim == 3:
                c_env = T.reshape(c_env, (1,) + c_env.shape)
        if zt.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"latent has {zt.shape[1]} channels, "
                             f"expected {self.cfg.latent_channels}")

        c_emb = self.global_token(t, w_flat)
        if c_emb.ndim == 1:
            c_emb = T.reshape(c_emb, (1, -1))
        if capture is not None:
            capture["c_emb"] = c_emb.values.copy()

        x = self.tokenize(self.fuse_spatial(zt, c_env))
        pp = self.params
        for i in range(self.cfg.depth):
            pre = f"block{i}"
            gamma, beta = self.adaln_modulate(c_emb, f"{pre}.ada_attn")
            if capture is not None:
                capture[f"{pre}.ada_attn"] = (gamma.values.copy(), beta.values.copy())
            h = self.adaln_apply(x, gamma, beta)
            h = nn.multihead_attention(h, pp[f"{pre}.attn.wq"], pp[f"{pre}.attn.wk"],
                                       pp[f"{pre}.attn.wv"], pp[f"{pre}.attn.wo"],
                                       self.cfg.heads)
            x = x + h
            gamma, beta = self.adaln_modulate(c_emb, f"{pre}.ada_mlp")
            if capture is not None:
                capture[f"{pre}.ada_mlp"] = (gamma.values.copy(), beta.values.copy())
            h = self.adaln_apply(x, gamma, beta)
            h = nn.linear(h, pp[f"{pre}.mlp.fc1.weight"], pp[f"{pre}.mlp.fc1.bias"])
            h = nn.linear(nn.gelu(h), pp[f"{pre}.mlp.fc2.weight"], pp[f"{pre}.mlp.fc2.bias"])
            x = x + h

        gamma, beta = self.adaln_modulate(c_emb, "final.ada")
        if capture is not None:
            capture["final.ada"] = (gamma.values.copy(), beta.values.copy())
        x = self.adaln_apply(x, gamma, beta)
        out = nn.linear(x, pp["final.linear.weight"], pp["final.linear.bias"])
        eps = self._unpatchify(out)
        return T.reshape(eps, eps.shape[1:]) if squeeze else eps
