"""Locked-base denoiser with a trainable control branch.

The branch is a copy of the base encoder half (stem + encoder blocks,
initialized from the locked weights). Its skip-level and bottom features
pass through zero-initialized 1x1 convolutions and are added to the
corresponding base features before the locked decoder runs, so at
initialization the controlled model is exactly the base model.

The control vector enters only the branch: anatomy control is
``control_proj(c_a)`` where ``c_a = concat(vessel projection, lobe
projection)`` from the frozen contrastive encoders; the stage-2 fused
condition is fed directly (it already has the branch conditioning width).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import diffusion
from .contrastive import VLEncoders, encode_mask, project
from .errors import ConfigurationError, ContractError
from .layers import Conv2d, Linear, Module
from .optim import Adam
from .unet import Denoiser, _Block


def make_anatomy_control(vl: VLEncoders, vessel_mask, lobe_mask) -> np.ndarray:
    """c_a = concat(g_v(f_v(vessel)), g_l(f_l(lobe))), detached."""
    with ad.no_grad():
        zv = project(vl.g_v, encode_mask(vl.f_v, vessel_mask))
        zl = project(vl.g_l, encode_mask(vl.f_l, lobe_mask))
        c_a = ad.concat([zv, zl], axis=1)
    out = c_a.data
    return out[0] if out.shape[0] == 1 else out


class _Branch(Module):
    """Copy of the base encoder half with its own parameters."""

    def __init__(self, base: Denoiser):
        rng = np.random.default_rng(0)  # throwaway init, state copied below
        cfg = base.config
        self.stem = Conv2d(cfg.in_channels, cfg.channels[0], 3, rng, dtype=base.dtype)
        self.enc = [
            _Block(cfg.channels[max(l - 1, 0)], cfg.channels[l],
                   cfg.time_embed_dim, cfg.cond_dim, rng, base.dtype)
            for l in range(cfg.depth)
        ]
        self.config = cfg
        state = {}
        base_state = base.state_dict()
        for name in self.parameters():
            state[name] = base_state[name]
        self.load_state(state)

    def __call__(self, x, t_emb, cond):
        h = self.stem(x)
        skips = []
        for l, block in enumerate(self.enc):
            h = block(h, t_emb, cond)
            if l < self.config.depth - 1:
                skips.append(h)
                h = ad.avg_pool2d(h, 2)
        return skips, h


class ControlledDenoiser(Module):
    def __init__(self, base: Denoiser, control_width: int, rng_seed: int = 0):
        base.set_trainable(False)
        self.base = base
        self.branch = _Branch(base)
        cfg = base.config
        rng = np.random.default_rng([int(rng_seed), 0xC0DE])
        self.zero_convs = [
            Conv2d(cfg.channels[l], cfg.channels[l], 1, rng, zero_init=True, dtype=base.dtype)
            for l in range(cfg.depth - 1)
        ]
        self.zero_bottom = Conv2d(cfg.channels[-1], cfg.channels[-1], 1, rng,
                                  zero_init=True, dtype=base.dtype)
        self.control_proj = Linear(control_width, cfg.cond_dim, rng, bias=False,
                                   dtype=base.dtype)
        self.control_width = control_width

    def branch_condition(self, c_a) -> Tensor:
        """Project anatomy control c_a into the branch conditioning space."""
        c = c_a if isinstance(c_a, Tensor) else Tensor(np.asarray(c_a, dtype=self.base.dtype))
        if c.ndim == 1:
            c = ad.reshape(c, (1, c.shape[0]))
        if c.shape[1] != self.control_width:
            raise ContractError(
                f"anatomy control width {c.shape[1]} != expected {self.control_width}"
            )
        return self.control_proj(c)

    def __call__(self, x_t: Tensor, t, control=None):
        eps, _ = self.forward_with_features(x_t, t, control)
        return eps

    def forward_with_features(self, x_t: Tensor, t, control=None):
        """Controlled prediction: base + zero-conv(branch) feature fusion.

        ``control`` is a (N, cond_dim) vector already in branch space
        (stage-1 callers build it with :meth:`branch_condition`).
        """
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.base.dtype))
        n = x_t.shape[0]
        if control is not None:
            control = control if isinstance(control, Tensor) else Tensor(
                np.asarray(control, dtype=self.base.dtype))
            if control.ndim == 1:
                control = ad.reshape(control, (1, control.shape[0]))
            if control.shape[0] == 1 and n > 1:
                control = ad.concat([control] * n, axis=0)
            if control.shape != (n, self.base.config.cond_dim):
                raise ContractError(
                    f"control shape {control.shape} != (batch, {self.base.config.cond_dim})"
                )
        t_arr = np.atleast_1d(np.asarray(t))
        if t_arr.shape[0] == 1 and n > 1:
            t_arr = np.repeat(t_arr, n)
        t_emb = self.base.embed_time(t_arr)
        base_skips, base_bottom = self.base.encode(x_t, t_emb, None)
        br_skips, br_bottom = self.branch(x_t, t_emb, control)
        fused_skips = [
            ad.add(bs, zc(br)) for bs, zc, br in zip(base_skips, self.zero_convs, br_skips)
        ]
        fused_bottom = ad.add(base_bottom, self.zero_bottom(br_bottom))
        return self.base.decode(fused_skips, fused_bottom, t_emb, None)


def controlled_denoise(cd: ControlledDenoiser, x_t, t, c_a) -> Tensor:
    """Stage-1 style call: anatomy control through the projection layer."""
    control = cd.branch_condition(c_a) if c_a is not None else None
    return cd(x_t, t, control)


def train_stage1(cd: ControlledDenoiser, schedule, cases, vl: VLEncoders,
                 steps: int, lr: float, seed: int, batch_size: int = 8,
                 eval_every: int = 50):
    """Train branch + connections + control projection on (image, c_a) pairs.

    Base and contrastive-encoder parameters stay untouched. Returns
    (train curve, eval curve) with the same convention as train_ddpm.
    """
    if not cases:
        raise ConfigurationError("stage-1 training needs a non-empty dataset")
    vl.set_trainable(False)
    images = np.stack([c.pre_image for c in cases])[:, None].astype(np.float32)
    controls = np.stack([
        make_anatomy_control(vl, c.vessel_mask, c.lobe_mask) for c in cases
    ]).astype(np.float32)
    n = len(cases)
    rng = np.random.default_rng([int(seed), 0x57A1])
    params = cd.trainable_parameters()
    opt = Adam(params, lr=lr)

    e_n = min(n, 16)
    e_idx = rng.choice(n, size=e_n, replace=False)
    e_t = rng.integers(0, schedule.T, size=e_n)
    e_eps = rng.standard_normal(images[e_idx].shape).astype(np.float32)

    def eval_loss() -> float:
        with ad.no_grad():
            x_t = diffusion.forward_diffuse(Tensor(images[e_idx]), e_t, Tensor(e_eps), schedule)
            pred = controlled_denoise(cd, x_t, e_t, controls[e_idx])
            return float(diffusion.ddpm_loss(Tensor(e_eps), pred).data)

    train_curve = []
    eval_curve = [eval_loss()]
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        t = rng.integers(0, schedule.T, size=batch_size)
        eps = rng.standard_normal(images[idx].shape).astype(np.float32)
        x_t = diffusion.forward_diffuse(Tensor(images[idx]), t, Tensor(eps), schedule)
        pred = controlled_denoise(cd, x_t, t, controls[idx])
        loss = diffusion.ddpm_loss(Tensor(eps), pred)
        cd.zero_grad()
        ad.backprop(loss)
        opt.step(ad.collect_grads(params))
        train_curve.append(float(loss.data))
        if (step + 1) % eval_every == 0 and step + 1 < steps:
            eval_curve.append(eval_loss())
    eval_curve.append(eval_loss())
    return np.asarray(train_curve), np.asarray(eval_curve)
