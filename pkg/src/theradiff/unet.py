"""Small conditional U-Net noise predictor.

Architecture (fixed given ``DenoiserConfig``; ch_l = base_channels * 2**l,
E = time_embed_dim, K = cond_dim, D = depth, cin = in_channels):

    time_mlp.fc1   Linear E -> E (bias)            E*E + E
    time_mlp.fc2   Linear E -> E (bias)            E*E + E
    stem           Conv3x3 cin -> ch_0             ch_0*cin*9 + ch_0
    enc{l}  (l = 0..D-1, input ch_{l-1}, where ch_{-1} := ch_0):
        conv1      Conv3x3 ch_{l-1} -> ch_l        ch_l*ch_{l-1}*9 + ch_l
        gn1        GroupNorm(4, ch_l)              2*ch_l
        tproj      Linear E -> ch_l (bias)         E*ch_l + ch_l
        cproj      Linear K -> ch_l (no bias)      K*ch_l
        conv2      Conv3x3 ch_l -> ch_l            ch_l*ch_l*9 + ch_l
        gn2        GroupNorm(4, ch_l)              2*ch_l
    dec{l}  (l = D-2..0):
        upconv     Conv3x3 ch_{l+1} -> ch_l        ch_l*ch_{l+1}*9 + ch_l
        conv1      Conv3x3 2*ch_l -> ch_l          ch_l*2*ch_l*9 + ch_l
        gn1/tproj/cproj/conv2/gn2                  as in enc at width ch_l
    head.gn        GroupNorm(4, ch_0)              2*ch_0
    head.conv      Conv3x3 ch_0 -> cin             cin*ch_0*9 + cin

Forward: timestep t is embedded sinusoidally, passed through time_mlp
(SiLU between the two layers). Each block computes
``h = silu(gn1(conv1(x)))``, adds ``tproj(t_emb)`` and (when a condition
vector is supplied) ``cproj(cond)`` broadcast over space, then
``h = silu(gn2(conv2(h)))``. Encoder levels are separated by 2x average
pooling; decoder levels upsample (nearest x2), apply upconv, concatenate
the matching encoder skip, and run the block body. Decoder block outputs
are the "upblock" feature taps, ordered deepest first.

``cproj`` has no bias, so a zero condition vector is exactly equivalent
to passing no condition at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError
from .layers import Conv2d, GroupNorm, Linear, Module


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    time_embed_dim: int = 32
    cond_dim: int = 64

    def validate(self):
        if self.depth < 2:
            raise ConfigurationError("denoiser depth must be >= 2")
        if self.base_channels < 4:
            raise ConfigurationError("denoiser base_channels must be >= 4")
        if self.base_channels % 4:
            raise ConfigurationError("denoiser base_channels must be a multiple of 4")
        h, w = self.image_size
        div = 2 ** (self.depth - 1)
        if h % div or w % div:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by 2^(depth-1) = {div}"
            )

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.depth)]


class _Block(Module):
    """conv1 -> gn1 -> silu -> (+t, +cond) -> conv2 -> gn2 -> silu."""

    def __init__(self, c_in, c_out, time_dim, cond_dim, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype=dtype)
        self.gn1 = GroupNorm(4, c_out, dtype=dtype)
        self.tproj = Linear(time_dim, c_out, rng, dtype=dtype)
        self.cproj = Linear(cond_dim, c_out, rng, bias=False, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype=dtype)
        self.gn2 = GroupNorm(4, c_out, dtype=dtype)

    def __call__(self, x, t_emb, cond):
        h = ad.silu(self.gn1(self.conv1(x)))
        n, c = h.shape[0], h.shape[1]
        tb = ad.reshape(self.tproj(t_emb), (n, c, 1, 1))
        h = ad.add(h, tb)
        if cond is not None:
            cb = ad.reshape(self.cproj(cond), (n, c, 1, 1))
            h = ad.add(h, cb)
        return ad.silu(self.gn2(self.conv2(h)))


class _Decoder(Module):
    def __init__(self, c_up, c_out, time_dim, cond_dim, rng, dtype):
        self.upconv = Conv2d(c_up, c_out, 3, rng, dtype=dtype)
        self.block = _Block(2 * c_out, c_out, time_dim, cond_dim, rng, dtype)

    def __call__(self, x, skip, t_emb, cond):
        x = self.upconv(ad.upsample_nearest2(x))
        x = ad.concat([x, skip], axis=1)
        return self.block(x, t_emb, cond)


class _TimeMLP(Module):
    def __init__(self, dim, rng, dtype):
        self.fc1 = Linear(dim, dim, rng, dtype=dtype)
        self.fc2 = Linear(dim, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(ad.silu(self.fc1(x)))


class Denoiser(Module):
    """U-Net predicting the noise component of its input."""

    def __init__(self, config: DenoiserConfig, rng_seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng([int(rng_seed), 0x0D1F])
        ch = config.channels
        e, k = config.time_embed_dim, config.cond_dim
        self.time_mlp = _TimeMLP(e, rng, dtype)
        self.stem = Conv2d(config.in_channels, ch[0], 3, rng, dtype=dtype)
        self.enc = [
            _Block(ch[max(l - 1, 0)], ch[l], e, k, rng, dtype)
            for l in range(config.depth)
        ]
        self.dec = [
            _Decoder(ch[l + 1], ch[l], e, k, rng, dtype)
            for l in range(config.depth - 2, -1, -1)
        ]
        self.head_gn = GroupNorm(4, ch[0], dtype=dtype)
        self.head_conv = Conv2d(ch[0], config.in_channels, 3, rng, dtype=dtype)

    # -- forward pieces (the control branch reuses the encoder half) --

    def embed_time(self, t) -> Tensor:
        emb = ad.sinusoidal_embedding(t, self.config.time_embed_dim, dtype=self.dtype)
        return self.time_mlp(Tensor(emb))

    def encode(self, x: Tensor, t_emb: Tensor, cond):
        """Run stem + encoder: returns (skip features, bottom feature)."""
        h = self.stem(x)
        skips = []
        for l, block in enumerate(self.enc):
            h = block(h, t_emb, cond)
            if l < self.config.depth - 1:
                skips.append(h)
                h = ad.avg_pool2d(h, 2)
        return skips, h

    def decode(self, skips, bottom, t_emb: Tensor, cond):
        """Run decoder + head: returns (eps prediction, upblock taps)."""
        h = bottom
        taps = []
        for i, dec in enumerate(self.dec):
            skip = skips[self.config.depth - 2 - i]
            h = dec(h, skip, t_emb, cond)
            taps.append(h)
        out = self.head_conv(ad.silu(self.head_gn(h)))
        return out, taps

    def __call__(self, x: Tensor, t, cond=None):
        eps, _ = self.forward_with_features(x, t, cond)
        return eps

    def forward_with_features(self, x: Tensor, t, cond=None):
        if x.ndim != 4:
            raise ContractError("denoiser input must be (N, C, H, W)")
        n, c, h, w = x.shape
        if c != self.config.in_channels or (h, w) != tuple(self.config.image_size):
            raise ContractError(
                f"input shape {(c, h, w)} does not match config "
                f"{(self.config.in_channels, *self.config.image_size)}"
            )
        if cond is not None:
            cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=self.dtype))
            if cond.ndim == 1:
                cond = ad.reshape(cond, (1, cond.shape[0]))
            if cond.shape[0] == 1 and n > 1:
                cond = ad.concat([cond] * n, axis=0)
            if cond.shape != (n, self.config.cond_dim):
                raise ContractError(
                    f"condition shape {cond.shape} does not match (batch, {self.config.cond_dim})"
                )
        t_arr = np.atleast_1d(np.asarray(t))
        if t_arr.shape[0] == 1 and n > 1:
            t_arr = np.repeat(t_arr, n)
        if np.any(t_arr < 0):
            raise ContractError("timestep indices must be non-negative")
        t_emb = self.embed_time(t_arr)
        skips, bottom = self.encode(x, t_emb, cond)
        return self.decode(skips, bottom, t_emb, cond)


def init_denoiser(config: DenoiserConfig, rng_seed: int, dtype=np.float32) -> Denoiser:
    return Denoiser(config, rng_seed, dtype=dtype)


def denoise(model: Denoiser, x_t: Tensor, t, cond=None, pool_features: bool = True):
    """Predict noise; also return per-decoder-block features.

    With ``pool_features`` the taps are spatially averaged to per-channel
    vectors (N, ch_l); otherwise the raw (N, ch_l, H, W) maps are returned.
    """
    eps, taps = model.forward_with_features(x_t, t, cond)
    if pool_features:
        taps = [ad.tmean(tap, axis=(2, 3)) for tap in taps]
    return eps, taps


def count_parameters(model: Module) -> int:
    return sum(p.data.size for p in model.parameters().values())
