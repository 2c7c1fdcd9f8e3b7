"""Response classification and survival risk on frozen diffusion features.

Features: the pre-treatment image is scaled by sqrt(alpha_bar[t_feat])
(the noise-free point of the forward process at the fixed feature
timestep), pushed through the frozen stage-2 model with its clinical
condition, and the decoder-block outputs are spatially averaged and
concatenated (deepest block first). Feature extraction never mutates
model parameters.

Heads are linear. The classifier trains with class-weighted logistic
loss (minority weight = n_majority / n_minority); the survival head
trains with the Cox partial likelihood (Breslow tie handling) and keeps
a Breslow baseline so cumulative hazards can be evaluated on any time
grid. Features are standardized internally during fitting and the
standardization is folded back into the returned weights, so
``predict_response`` is exactly ``sigmoid(w . f + b)`` on raw features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .adapter import AdapterWeights, NormStats, build_condition
from .control import ControlledDenoiser
from .diffusion import NoiseSchedule
from .errors import ConfigurationError, ContractError
from .optim import Adam


@dataclass
class Stage2Model:
    """Frozen artifacts needed to turn (pre image, record) into features."""
    cd: ControlledDenoiser
    adapter: AdapterWeights
    schedule: NoiseSchedule
    stats: NormStats
    lam: float


def feature_length(cd: ControlledDenoiser) -> int:
    """Sum of decoder-block channel counts (one pooled vector each)."""
    ch = cd.base.config.channels
    return int(sum(ch[:-1]))


def extract_features_batch(model: Stage2Model, z0s, recs, t_feat: int) -> np.ndarray:
    if model.cd is None or model.adapter is None:
        raise ConfigurationError("stage-2 model handle is incomplete")
    if not (0 <= t_feat < model.schedule.T):
        raise ContractError(f"feature timestep {t_feat} outside [0, {model.schedule.T})")
    z0s = np.asarray(z0s, dtype=np.float32)
    if z0s.ndim == 3:
        z0s = z0s[:, None]
    scale = np.float32(np.sqrt(model.schedule.alpha_bar[t_feat]))
    with ad.no_grad():
        cond = build_condition(model.adapter, z0s, recs, model.stats, model.lam)
        x_t = Tensor(scale * z0s)
        _, taps = model.cd.forward_with_features(x_t, t_feat, cond.c_hat)
        pooled = [ad.tmean(tap, axis=(2, 3)).data for tap in taps]
    return np.concatenate(pooled, axis=1)


def extract_features(model: Stage2Model, z0, rec, t_feat: int) -> np.ndarray:
    return extract_features_batch(model, np.asarray(z0)[None], [rec], t_feat)[0]


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

@dataclass
class ClassifierHead:
    w: np.ndarray
    b: float


@dataclass
class SurvivalHead:
    w: np.ndarray
    baseline_times: np.ndarray       # ascending distinct event times
    baseline_increments: np.ndarray  # Breslow hazard mass at each time


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-sample weights: majority class 1, minority n_maj / n_min."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ConfigurationError("class weighting needs both classes present")
    w_pos, w_neg = (1.0, 1.0)
    if n_pos < n_neg:
        w_pos = n_neg / n_pos
    elif n_neg < n_pos:
        w_neg = n_pos / n_neg
    return np.where(labels, w_pos, w_neg)


def weighted_bce_loss(w: Tensor, b: Tensor, x: np.ndarray, y: np.ndarray,
                      sample_w: np.ndarray) -> Tensor:
    """Weighted logistic loss via softplus(z) - y*z, normalized by sum of weights."""
    dtype = w.data.dtype
    xt = Tensor(x.astype(dtype))
    yt = Tensor(y.astype(dtype).reshape(-1, 1))
    wt = Tensor(sample_w.astype(dtype).reshape(-1, 1))
    z = ad.add(ad.matmul(xt, ad.reshape(w, (-1, 1))), b)
    per = ad.sub(ad.softplus(z), ad.mul(yt, z))
    return ad.div(ad.tsum(ad.mul(per, wt)), float(sample_w.sum()))


def cox_partial_likelihood_loss(w: Tensor, x: np.ndarray, times: np.ndarray,
                                events: np.ndarray) -> Tensor:
    """Negative Breslow partial log-likelihood, normalized by event count."""
    dtype = w.data.dtype
    n = len(times)
    at_risk = (times[None, :] >= times[:, None]).astype(dtype)  # row i: at-risk set
    ev = np.asarray(events, dtype=dtype).reshape(-1, 1)
    n_events = float(ev.sum())
    if n_events == 0:
        raise ConfigurationError("Cox loss undefined with zero observed events")
    xt = Tensor(x.astype(dtype))
    z = ad.matmul(xt, ad.reshape(w, (-1, 1)))  # (n, 1)
    shift = Tensor(np.max(z.data))
    ez = ad.texp(ad.sub(z, shift))
    denom = ad.add(ad.tlog(ad.matmul(Tensor(at_risk), ez)), shift)
    per = ad.mul(ad.sub(z, denom), Tensor(ev))
    return ad.div(ad.tsum(per), -n_events)


def _comparable_pairs(times: np.ndarray, events: np.ndarray) -> int:
    count = 0
    for i in range(len(times)):
        if not events[i]:
            continue
        count += int(np.sum(times > times[i]))
    return count


def breslow_baseline(risks: np.ndarray, times: np.ndarray, events: np.ndarray):
    """Distinct event times and their Breslow hazard increments."""
    exp_r = np.exp(risks)
    out_t, out_h = [], []
    for tau in np.unique(times[events.astype(bool)]):
        d = int(np.sum((times == tau) & events.astype(bool)))
        denom = float(exp_r[times >= tau].sum())
        out_t.append(float(tau))
        out_h.append(d / denom)
    return np.asarray(out_t), np.asarray(out_h)


def fit_heads(features: np.ndarray, labels: np.ndarray, times: np.ndarray,
              events: np.ndarray, epochs: int = 300, lr: float = 1e-2,
              seed: int = 0) -> tuple[ClassifierHead, SurvivalHead]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if labels.all() or not labels.any():
        raise ConfigurationError("head fitting needs both classes present")
    if _comparable_pairs(times, events) < 2:
        raise ConfigurationError("head fitting needs at least 2 comparable survival pairs")

    mu = features.mean(axis=0)
    sd = np.maximum(features.std(axis=0), 1e-8)
    xs = (features - mu) / sd
    n_feat = xs.shape[1]
    rng = np.random.default_rng([int(seed), 0x4EAD])
    sample_w = class_weights(labels)

    # classifier
    w_c = Tensor(rng.normal(0.0, 1e-3, size=n_feat), requires_grad=True)
    b_c = Tensor(np.zeros(()), requires_grad=True)
    opt = Adam({"w": w_c, "b": b_c}, lr=lr)
    y = labels.astype(np.float64)
    for _ in range(epochs):
        loss = weighted_bce_loss(w_c, b_c, xs, y, sample_w)
        w_c.grad = b_c.grad = None
        ad.backprop(loss)
        opt.step(ad.collect_grads({"w": w_c, "b": b_c}))

    # survival
    w_s = Tensor(rng.normal(0.0, 1e-3, size=n_feat), requires_grad=True)
    opt_s = Adam({"w": w_s}, lr=lr)
    for _ in range(epochs):
        loss = cox_partial_likelihood_loss(w_s, xs, times, events.astype(np.float64))
        w_s.grad = None
        ad.backprop(loss)
        opt_s.step(ad.collect_grads({"w": w_s}))

    # fold the standardization back into raw-feature weights
    w_c_raw = w_c.data / sd
    b_c_raw = float(b_c.data - np.dot(w_c.data, mu / sd))
    w_s_raw = w_s.data / sd
    classifier = ClassifierHead(w=w_c_raw, b=b_c_raw)
    base_t, base_h = breslow_baseline(features @ w_s_raw, times, events)
    survival = SurvivalHead(w=w_s_raw, baseline_times=base_t, baseline_increments=base_h)
    return classifier, survival


def predict_response(head: ClassifierHead, f_hat: np.ndarray):
    f_hat = np.asarray(f_hat, dtype=np.float64)
    if f_hat.shape[-1] != head.w.shape[0]:
        raise ContractError(
            f"feature width {f_hat.shape[-1]} does not match head ({head.w.shape[0]})"
        )
    z = f_hat @ head.w + head.b
    out = 1.0 / (1.0 + np.exp(-z))
    return float(out) if np.ndim(out) == 0 else out


def risk_score(head: SurvivalHead, f_hat: np.ndarray):
    f_hat = np.asarray(f_hat, dtype=np.float64)
    if f_hat.shape[-1] != head.w.shape[0]:
        raise ContractError(
            f"feature width {f_hat.shape[-1]} does not match head ({head.w.shape[0]})"
        )
    out = f_hat @ head.w
    return float(out) if np.ndim(out) == 0 else out


def cumulative_hazard(head: SurvivalHead, f_hat: np.ndarray,
                      time_grid: np.ndarray) -> np.ndarray:
    """H(t) = exp(risk) * sum of baseline increments at event times <= t."""
    grid = np.asarray(time_grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) == 0:
        raise ContractError("time grid must be a non-empty 1-D array")
    if np.any(np.diff(grid) <= 0):
        raise ContractError("time grid must be strictly increasing")
    r = risk_score(head, f_hat)
    cum = np.cumsum(head.baseline_increments)
    idx = np.searchsorted(head.baseline_times, grid, side="right")
    base = np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)
    return np.exp(r) * base


def concordance_index(risks, times, events) -> float:
    """Harrell's C over comparable pairs (O(n^2) pair enumeration).

    A pair (i, j) is comparable when t_i < t_j and subject i had an
    event; it is concordant when risk_i > risk_j, and risk ties count
    one half.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not (len(risks) == len(times) == len(events)):
        raise ContractError("risks, times and events must have equal length")
    num = 0.0
    den = 0
    n = len(risks)
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    if den == 0:
        raise ContractError("concordance undefined: no comparable pairs")
    return num / den
