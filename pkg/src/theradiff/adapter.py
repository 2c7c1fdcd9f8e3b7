"""Clinical conditioning for post-treatment image generation.

Three clinical token embeddings (demographics, blood panel, PD-L1
status), a pre-treatment image embedding, rotary position encoding,
joint attention across the token set, and the fused condition

    c_hat = z_img_hat + lambda * (z_C_hat + z_B_hat + z_I_hat)

which drives the stage-2 fine-tune of the controlled denoiser.

Raw token features (normalization statistics come from the training
split only):

    demographics: [zscore(age), one-hot sex, one-hot race]      -> 6 dims
    blood:        zscores of (cea, anc, alc, nlr, aec, amc)     -> 6 dims
    pd-l1:        one-hot over the three expression bands       -> 3 dims

Each raw vector passes through its own bias-free linear map to the token
width. Attention: token order is (demographics, blood, pdl1, image) at
positions 0..3 (row index; the column position of the rotary grid is
fixed at 0). Every token has its own query/key/value maps; modality i's
output attends its rotary query against the rotary keys of all tokens.
Rotary encoding is applied to queries, keys, and values by default; a
conventional mode (queries and keys only) sits behind a flag, as do the
"literal product over modalities" attention reading and a variant that
keeps the image embedding out of the token set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffusion
from .autodiff import Tensor
from .control import ControlledDenoiser
from .errors import ConfigurationError, ContractError, EncodingError
from .layers import Conv2d, Linear, Module
from .optim import Adam
from .phantoms import ClinicalRecord, PDL1_LEVELS, RACE_LEVELS, SEX_LEVELS

DEFAULT_LAMBDA = 5e-2
DEFAULT_ROPE_BASE = 1e5


# ---------------------------------------------------------------------------
# normalization statistics
# ---------------------------------------------------------------------------

BLOOD_FIELDS = ("cea", "anc", "alc", "nlr", "aec", "amc")


@dataclass
class NormStats:
    age_mean: float
    age_std: float
    blood_mean: np.ndarray  # (6,) aligned with BLOOD_FIELDS
    blood_std: np.ndarray
    sex_levels: tuple[str, ...] = SEX_LEVELS
    race_levels: tuple[str, ...] = RACE_LEVELS
    pdl1_levels: tuple[str, ...] = PDL1_LEVELS


def compute_norm_stats(records: list[ClinicalRecord]) -> NormStats:
    """Population (ddof=0) moments; stds floored at 1e-8."""
    if not records:
        raise ConfigurationError("cannot compute normalization stats from zero records")
    ages = np.array([r.age for r in records], dtype=np.float64)
    blood = np.array([[getattr(r, f) for f in BLOOD_FIELDS] for r in records], dtype=np.float64)
    return NormStats(
        age_mean=float(ages.mean()),
        age_std=float(max(ages.std(), 1e-8)),
        blood_mean=blood.mean(axis=0),
        blood_std=np.maximum(blood.std(axis=0), 1e-8),
        sex_levels=tuple(sorted({r.sex for r in records})),
        race_levels=tuple(sorted({r.race for r in records})),
        pdl1_levels=PDL1_LEVELS,
    )


def _one_hot(value: str, levels: tuple[str, ...], what: str) -> np.ndarray:
    if value not in levels:
        raise EncodingError(f"unseen {what} level {value!r}; known levels: {levels}")
    out = np.zeros(len(levels), dtype=np.float64)
    out[levels.index(value)] = 1.0
    return out


def clinical_raw_features(rec: ClinicalRecord, stats: NormStats):
    """(demographics, blood, pdl1) raw vectors before projection."""
    demo = np.concatenate([
        [(rec.age - stats.age_mean) / stats.age_std],
        _one_hot(rec.sex, stats.sex_levels, "sex"),
        _one_hot(rec.race, stats.race_levels, "race"),
    ])
    blood = (np.array([getattr(rec, f) for f in BLOOD_FIELDS], dtype=np.float64)
             - stats.blood_mean) / stats.blood_std
    pdl1 = _one_hot(rec.pdl1, stats.pdl1_levels, "pdl1")
    return demo, blood, pdl1


# ---------------------------------------------------------------------------
# rotary position encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RopeParams:
    dim: int
    base: float = DEFAULT_ROPE_BASE

    def __post_init__(self):
        if self.dim % 4:
            raise ConfigurationError(f"rotary dimension must be divisible by 4, got {self.dim}")

    @property
    def theta(self) -> np.ndarray:
        """theta_i = base ** (-i / dim) for i = 0 .. dim/4 - 1."""
        i = np.arange(self.dim // 4, dtype=np.float64)
        return self.base ** (-i / self.dim)


def _rotate_half(half: Tensor, angles: np.ndarray) -> Tensor:
    even = half[..., 0::2]
    odd = half[..., 1::2]
    cos = Tensor(np.cos(angles).astype(half.data.dtype))
    sin = Tensor(np.sin(angles).astype(half.data.dtype))
    r_even = ad.sub(ad.mul(even, cos), ad.mul(odd, sin))
    r_odd = ad.add(ad.mul(even, sin), ad.mul(odd, cos))
    paired = ad.stack([r_even, r_odd], axis=r_even.ndim)
    return ad.reshape(paired, half.shape)


def rope_apply(f: Tensor, k_h: float, k_w: float, p: RopeParams) -> Tensor:
    """Rotate feature pairs: first half by k_h * theta, second by k_w * theta."""
    f = f if isinstance(f, Tensor) else Tensor(np.asarray(f))
    d = f.shape[-1]
    if d != p.dim:
        raise ContractError(f"feature width {d} does not match rotary dim {p.dim}")
    half = d // 2
    fh = f[..., :half]
    fw = f[..., half:]
    theta = p.theta
    return ad.concat([_rotate_half(fh, k_h * theta), _rotate_half(fw, k_w * theta)],
                     axis=f.ndim - 1)


# ---------------------------------------------------------------------------
# adapter weights and attention
# ---------------------------------------------------------------------------

@dataclass
class ClinicalEmbeddings:
    z_demo: Tensor
    z_blood: Tensor
    z_pdl1: Tensor


@dataclass
class ConditionBundle:
    z_img_hat: Tensor
    z_demo_hat: Tensor
    z_blood_hat: Tensor
    z_pdl1_hat: Tensor
    c_hat: Tensor
    lam: float

    def fusion_residual(self) -> float:
        """max |c_hat - (z_img_hat + lam * sum of attended tokens)|."""
        expect = self.z_img_hat.data + self.lam * (
            self.z_demo_hat.data + self.z_blood_hat.data + self.z_pdl1_hat.data)
        return float(np.max(np.abs(self.c_hat.data - expect)))


_TOKENS = ("demo", "blood", "pdl1", "img")


class AdapterWeights(Module):
    def __init__(self, token_dim: int = 64, rng_seed: int = 0,
                 rope_base: float = DEFAULT_ROPE_BASE, dtype=np.float32,
                 rope_on_values: bool = True, literal_product: bool = False,
                 image_token: bool = True):
        if token_dim % 4:
            raise ConfigurationError("token_dim must be divisible by 4 for rotary encoding")
        rng = np.random.default_rng([int(rng_seed), 0xAD47])
        self.w_demo = Linear(6, token_dim, rng, bias=False, dtype=dtype)
        self.w_blood = Linear(6, token_dim, rng, bias=False, dtype=dtype)
        self.w_pdl1 = Linear(3, token_dim, rng, bias=False, dtype=dtype)
        self.img_conv = Conv2d(1, token_dim, 3, rng, dtype=dtype)
        self.wq = [Linear(token_dim, token_dim, rng, bias=False, dtype=dtype) for _ in _TOKENS]
        self.wk = [Linear(token_dim, token_dim, rng, bias=False, dtype=dtype) for _ in _TOKENS]
        self.wv = [Linear(token_dim, token_dim, rng, bias=False, dtype=dtype) for _ in _TOKENS]
        self.token_dim = token_dim
        self.rope = RopeParams(dim=token_dim, base=rope_base)
        self.rope_on_values = rope_on_values
        self.literal_product = literal_product
        self.image_token = image_token


def embed_clinical(adapter: AdapterWeights, rec_or_recs, stats: NormStats) -> ClinicalEmbeddings:
    """Project raw clinical features to the token width (batched)."""
    recs = rec_or_recs if isinstance(rec_or_recs, (list, tuple)) else [rec_or_recs]
    raw = [clinical_raw_features(r, stats) for r in recs]
    dtype = adapter.w_demo.w.data.dtype
    demo = Tensor(np.stack([r[0] for r in raw]).astype(dtype))
    blood = Tensor(np.stack([r[1] for r in raw]).astype(dtype))
    pdl1 = Tensor(np.stack([r[2] for r in raw]).astype(dtype))
    return ClinicalEmbeddings(
        z_demo=adapter.w_demo(demo),
        z_blood=adapter.w_blood(blood),
        z_pdl1=adapter.w_pdl1(pdl1),
    )


def embed_pretreatment(adapter: AdapterWeights, z0) -> Tensor:
    """silu(conv(z0)) pooled over space -> (N, token_dim)."""
    z0 = z0 if isinstance(z0, Tensor) else Tensor(np.asarray(z0, dtype=np.float32))
    if z0.ndim == 2:
        z0 = ad.reshape(z0, (1, 1) + z0.shape)
    elif z0.ndim == 3:
        z0 = ad.reshape(z0, (z0.shape[0], 1) + z0.shape[1:])
    if z0.ndim != 4 or z0.shape[1] != 1:
        raise ContractError("pre-treatment input must be (H,W), (N,H,W) or (N,1,H,W)")
    return ad.tmean(ad.silu(adapter.img_conv(z0)), axis=(2, 3))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v over the last two axes; returns (out, weights)."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ContractError("attention widths differ between q, k, v")
    scale = 1.0 / math.sqrt(d)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


def joint_attention(ce: ClinicalEmbeddings, z_img: Tensor, adapter: AdapterWeights):
    """Attend each clinical token over the token set; returns the three outputs."""
    tokens = [ce.z_demo, ce.z_blood, ce.z_pdl1]
    if adapter.image_token:
        tokens.append(z_img)
    n = tokens[0].shape[0]
    d = adapter.token_dim
    for tok in tokens:
        if tok.shape != (n, d):
            raise ContractError(f"token shape {tok.shape} != {(n, d)}")

    rope = adapter.rope
    keys, values = [], []
    for j, tok in enumerate(tokens):
        kj = rope_apply(adapter.wk[j](tok), j, 0, rope)
        vj = adapter.wv[j](tok)
        if adapter.rope_on_values:
            vj = rope_apply(vj, j, 0, rope)
        keys.append(ad.reshape(kj, (n, 1, d)))
        values.append(ad.reshape(vj, (n, 1, d)))
    k_mat = ad.concat(keys, axis=1)
    v_mat = ad.concat(values, axis=1)

    outs = []
    for i in range(3):
        qi = rope_apply(adapter.wq[i](tokens[i]), i, 0, rope)
        out, _ = scaled_dot_attention(ad.reshape(qi, (n, 1, d)), k_mat, v_mat)
        outs.append(ad.reshape(out, (n, d)))
    if adapter.literal_product:
        prod = ad.mul(ad.mul(outs[0], outs[1]), outs[2])
        return prod, prod, prod
    return tuple(outs)


def fuse_condition(z_img_hat: Tensor, z_demo_hat: Tensor, z_blood_hat: Tensor,
                   z_pdl1_hat: Tensor, lam: float = DEFAULT_LAMBDA) -> Tensor:
    widths = {t.shape[-1] for t in (z_img_hat, z_demo_hat, z_blood_hat, z_pdl1_hat)}
    if len(widths) != 1:
        raise ContractError(f"fusion widths differ: {sorted(widths)}")
    total = ad.add(ad.add(z_demo_hat, z_blood_hat), z_pdl1_hat)
    return ad.add(z_img_hat, ad.mul(total, float(lam)))


def build_condition(adapter: AdapterWeights, z0, recs, stats: NormStats,
                    lam: float = DEFAULT_LAMBDA) -> ConditionBundle:
    """Full conditioning path: embeddings -> attention -> fusion."""
    ce = embed_clinical(adapter, recs, stats)
    z_img_hat = embed_pretreatment(adapter, z0)
    zd, zb, zp = joint_attention(ce, z_img_hat, adapter)
    c_hat = fuse_condition(z_img_hat, zd, zb, zp, lam)
    return ConditionBundle(z_img_hat=z_img_hat, z_demo_hat=zd, z_blood_hat=zb,
                           z_pdl1_hat=zp, c_hat=c_hat, lam=float(lam))


# ---------------------------------------------------------------------------
# stage-2 training and generation
# ---------------------------------------------------------------------------

def train_stage2(cd: ControlledDenoiser, adapter: AdapterWeights, schedule, cases,
                 stats: NormStats, steps: int, lr: float, seed: int,
                 batch_size: int = 8, eval_every: int = 50,
                 lam: float = DEFAULT_LAMBDA):
    """Fine-tune branch + adapter to denoise post images given (pre, record).

    The locked base (and anything else not in the trainable set) is
    untouched. Returns (train curve, eval curve) as in train_ddpm.
    """
    if not cases:
        raise ConfigurationError("stage-2 training needs a non-empty dataset")
    pre = np.stack([c.pre_image for c in cases])[:, None].astype(np.float32)
    post = np.stack([c.post_image for c in cases])[:, None].astype(np.float32)
    recs = [c.clinical for c in cases]
    n = len(cases)
    rng = np.random.default_rng([int(seed), 0x57A2])
    params = {**cd.trainable_parameters(),
              **{f"adapter.{k}": v for k, v in adapter.trainable_parameters().items()}}
    opt = Adam(params, lr=lr)

    e_n = min(n, 16)
    e_idx = rng.choice(n, size=e_n, replace=False)
    e_t = rng.integers(0, schedule.T, size=e_n)
    e_eps = rng.standard_normal(post[e_idx].shape).astype(np.float32)
    e_recs = [recs[i] for i in e_idx]

    def eval_loss() -> float:
        with ad.no_grad():
            cond = build_condition(adapter, pre[e_idx], e_recs, stats, lam)
            x_t = diffusion.forward_diffuse(Tensor(post[e_idx]), e_t, Tensor(e_eps), schedule)
            pred = cd(x_t, e_t, cond.c_hat)
            return float(diffusion.ddpm_loss(Tensor(e_eps), pred).data)

    train_curve = []
    eval_curve = [eval_loss()]
    for step in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        t = rng.integers(0, schedule.T, size=batch_size)
        eps = rng.standard_normal(post[idx].shape).astype(np.float32)
        cond = build_condition(adapter, pre[idx], [recs[i] for i in idx], stats, lam)
        x_t = diffusion.forward_diffuse(Tensor(post[idx]), t, Tensor(eps), schedule)
        pred = cd(x_t, t, cond.c_hat)
        loss = diffusion.ddpm_loss(Tensor(eps), pred)
        for p in params.values():
            p.grad = None
        ad.backprop(loss)
        opt.step(ad.collect_grads(params))
        train_curve.append(float(loss.data))
        if (step + 1) % eval_every == 0 and step + 1 < steps:
            eval_curve.append(eval_loss())
    eval_curve.append(eval_loss())
    return np.asarray(train_curve), np.asarray(eval_curve)


def generate_posttreatment(cd: ControlledDenoiser, adapter: AdapterWeights, z0,
                           rec: ClinicalRecord, schedule, stats: NormStats,
                           seed: int, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Sample one post-treatment image conditioned on (z0, record)."""
    out = generate_posttreatment_batch(cd, adapter, np.asarray(z0)[None], [rec],
                                       schedule, stats, [seed], lam)
    return out[0]


def generate_posttreatment_batch(cd: ControlledDenoiser, adapter: AdapterWeights,
                                 z0s, recs, schedule, stats: NormStats, seeds,
                                 lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Batched ancestral sampling with one noise stream per case.

    Case i's noise comes from ``default_rng([seeds[i]])`` regardless of
    the batch composition, matching the single-case sampler's derivation.
    """
    z0s = np.asarray(z0s, dtype=np.float32)
    if z0s.ndim == 3:
        z0s = z0s[:, None]
    n = z0s.shape[0]
    if len(recs) != n or len(seeds) != n:
        raise ContractError("z0s, recs and seeds must align")
    h, w = z0s.shape[2], z0s.shape[3]
    rngs = [np.random.default_rng([int(s)]) for s in seeds]
    with ad.no_grad():
        cond = build_condition(adapter, z0s, recs, stats, lam).c_hat
        x = np.stack([r.standard_normal((1, h, w)).astype(np.float32) for r in rngs])
        for t in range(schedule.T - 1, -1, -1):
            eps_hat = cd(Tensor(x), t, cond).data
            beta_t = schedule.beta[t]
            k_eps = np.float32(beta_t / np.sqrt(1.0 - schedule.alpha_bar[t]))
            k_x = np.float32(1.0 / np.sqrt(1.0 - beta_t))
            x = k_x * (x - k_eps * eps_hat)
            if t > 0:
                z = np.stack([r.standard_normal((1, h, w)).astype(np.float32) for r in rngs])
                x = x + np.float32(np.sqrt(beta_t)) * z
    return x[:, 0]
