"""Vessel/lobe encoder pretraining with a one-directional InfoNCE loss.

Each mask encoder is three 3x3 conv + ReLU + 2x average-pool stages
followed by a global average pool (embedding width d); the projection
head is the bias-free composition W2 @ relu(W1 @ h). The loss anchors on
vessel projections: the positive for vessel i is lobe i, the negatives
are the other cases' lobes, similarities are cosine, and the softmax
denominator includes the positive term itself. A symmetric variant
(averaging the lobe-anchored direction) sits behind a flag and is off by
default.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError
from .layers import Conv2d, Linear, Module
from .optim import Adam

DEFAULT_TAU = 0.5


class MaskEncoder(Module):
    """3 conv blocks + global average pool -> embedding of width d."""

    def __init__(self, d: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(1, 16, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(16, 32, 3, rng, dtype=dtype)
        self.conv3 = Conv2d(32, d, 3, rng, dtype=dtype)
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.avg_pool2d(ad.relu(self.conv1(x)), 2)
        h = ad.avg_pool2d(ad.relu(self.conv2(h)), 2)
        h = ad.relu(self.conv3(h))
        return ad.tmean(h, axis=(2, 3))


class ProjectionHead(Module):
    """z = W2 @ relu(W1 @ h), no biases."""

    def __init__(self, d: int, proj_dim: int, rng, dtype=np.float32):
        self.fc1 = Linear(d, d, rng, bias=False, dtype=dtype)
        self.fc2 = Linear(d, proj_dim, rng, bias=False, dtype=dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(h)))


class VLEncoders(Module):
    def __init__(self, d: int = 128, proj_dim: int = 64, tau: float = DEFAULT_TAU,
                 rng_seed: int = 0, dtype=np.float32):
        if tau <= 0:
            raise ConfigurationError("temperature tau must be positive")
        rng = np.random.default_rng([int(rng_seed), 0x71E5])
        self.f_v = MaskEncoder(d, rng, dtype)
        self.f_l = MaskEncoder(d, rng, dtype)
        self.g_v = ProjectionHead(d, proj_dim, rng, dtype)
        self.g_l = ProjectionHead(d, proj_dim, rng, dtype)
        self.d = d
        self.proj_dim = proj_dim
        self.tau = tau


def encode_mask(encoder: MaskEncoder, mask) -> Tensor:
    """Embed one (H, W) or batched (N, H, W) binary mask."""
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractError("mask must be (H, W) or (N, H, W)")
    x = Tensor(arr.astype(np.float32)[:, None, :, :])
    return encoder(x)


def project(head: ProjectionHead, h: Tensor) -> Tensor:
    if h.ndim == 1:
        h = ad.reshape(h, (1, h.shape[0]))
    if h.shape[1] != head.fc1.w.shape[0]:
        raise ContractError(f"embedding width {h.shape[1]} does not match head ({head.fc1.w.shape[0]})")
    return head(h)


def _l2_normalize(z: Tensor) -> Tensor:
    sq = ad.tsum(ad.mul(z, z), axis=1, keepdims=True)
    norms = np.sqrt(sq.data)
    if np.any(norms <= 0) or not np.all(np.isfinite(norms)):
        raise ContractError("cosine similarity undefined for zero-norm embedding")
    return ad.div(z, ad.tsqrt(sq))


def nt_xent_vl(zv: Tensor, zl: Tensor, tau: float = DEFAULT_TAU,
               symmetric: bool = False) -> Tensor:
    """(1/N) sum_i -log softmax_k(cos(zv_i, zl_k)/tau)[k=i]."""
    if zv.shape != zl.shape:
        raise ContractError(f"paired embeddings must share shape, got {zv.shape} vs {zl.shape}")
    if zv.ndim != 2 or zv.shape[0] < 1:
        raise ContractError("nt_xent_vl expects (N, proj_dim) with N >= 1")
    if tau <= 0:
        raise ContractError("temperature must be positive")
    n = zv.shape[0]
    zv_n = _l2_normalize(zv)
    zl_n = _l2_normalize(zl)
    sim = ad.matmul(zv_n, ad.transpose(zl_n, (1, 0)))  # (N, N), rows anchor on v
    logits = ad.mul(sim, 1.0 / tau)
    lse = ad.logsumexp(logits, axis=1)
    eye = Tensor(np.eye(n, dtype=zv.data.dtype))
    pos = ad.tsum(ad.mul(logits, eye), axis=1)
    loss = ad.tmean(ad.sub(lse, pos))
    if symmetric:
        logits_t = ad.transpose(logits, (1, 0))  # rows anchor on l
        lse_t = ad.logsumexp(logits_t, axis=1)
        pos_t = ad.tsum(ad.mul(logits_t, eye), axis=1)
        loss = ad.mul(ad.add(loss, ad.tmean(ad.sub(lse_t, pos_t))), 0.5)
    return loss


def vl_forward(vl: VLEncoders, vessel_masks, lobe_masks) -> tuple[Tensor, Tensor]:
    zv = project(vl.g_v, encode_mask(vl.f_v, vessel_masks))
    zl = project(vl.g_l, encode_mask(vl.f_l, lobe_masks))
    return zv, zl


def pretrain_vl(cases, vl: VLEncoders, epochs: int, lr: float, seed: int,
                batch_size: int | None = None, symmetric: bool = False) -> np.ndarray:
    """Train the encoders; returns the loss curve (epochs + 1 entries).

    With ``batch_size=None`` every epoch is one full-batch step and
    curve[e] is the loss before update e; otherwise the cases are
    reshuffled each epoch from ``seed`` and curve[e] is the epoch's mean
    batch loss. The final entry is the post-training full-batch loss.
    """
    if len(cases) < 2:
        raise ConfigurationError("contrastive pretraining needs at least 2 cases")
    vessel = np.stack([c.vessel_mask for c in cases]).astype(np.float32)
    lobe = np.stack([c.lobe_mask for c in cases]).astype(np.float32)
    rng = np.random.default_rng([int(seed), 0x71E5])
    params = vl.trainable_parameters()
    opt = Adam(params, lr=lr)

    def step(v_batch, l_batch) -> float:
        zv, zl = vl_forward(vl, v_batch, l_batch)
        loss = nt_xent_vl(zv, zl, vl.tau, symmetric=symmetric)
        vl.zero_grad()
        ad.backprop(loss)
        opt.step(ad.collect_grads(params))
        return float(loss.data)

    curve = []
    for _ in range(epochs):
        if batch_size is None:
            curve.append(step(vessel, lobe))
        else:
            order = rng.permutation(len(cases))
            losses = [
                step(vessel[order[i:i + batch_size]], lobe[order[i:i + batch_size]])
                for i in range(0, len(cases), batch_size)
                if len(order[i:i + batch_size]) >= 2
            ]
            curve.append(float(np.mean(losses)))
    with ad.no_grad():
        zv, zl = vl_forward(vl, vessel, lobe)
        curve.append(float(nt_xent_vl(zv, zl, vl.tau, symmetric=symmetric).data))
    return np.asarray(curve)
