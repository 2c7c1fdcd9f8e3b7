"""Deterministic synthetic patient generator.

Each case is a pure function of ``(seed, case_index, attempt)``: a fresh
``default_rng`` is derived per attempt and every random draw happens in a
fixed, documented order (clinical record, survival outcome, lobe
ellipses, vessel walks, tumor, texture field). Generation rules:

* lobe mask: union of two axis-aligned ellipses, centers near 28% / 72%
  of the width, jittered; semi-axes drawn from documented uniform ranges.
* vessel mask: 2-4 one-pixel-per-step random walks (vertical drift,
  lateral jitter), width 1-2 px, intersected with the lobe mask.
* tumor: a pixel disk of radius r ~ U(3, max(3, H/6)) whose disk fits
  entirely inside the lobe mask; if no center admits the drawn radius the
  radius is shrunk by 0.85 until one does (floor 1.0).
* intensities: background 0.02, lobe 0.25 plus a smooth per-case texture
  field in [-0.05, 0.05], vessels 0.65, tumor 0.85; clipped to [0, 1].
  The post-treatment image reuses the same anatomy and texture with the
  tumor redrawn at 0.5*r (responder) or 1.2*r (non-responder, clipped to
  the image bounds).
* clinical values: log-normal draws (parameters below); nlr := anc/alc.
* response label: sigmoid(0.9*pdl1_ord - 0.8*z(nlr) + 0.3*z(alc)) > 0.5,
  evaluated noise-free with the frozen reference moments below (the
  analytic mean/std of the generating log-normals).
* survival: time ~ Exponential(rate = exp(risk)), risk = -1.0 for
  responders and +0.5 otherwise; event observed with probability 0.7.

``generate_dataset`` realizes an exact responder count of
``round(n * responder_fraction)`` by redrawing a case's clinical record
(deterministic attempt streams) until the label matches the slot's
target. Cases 0..n_resp-1 are the responder slots, and fold assignment
is ``case_index mod n_folds``, which both balances fold sizes to within
one case and spreads responders across folds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TheradiffError

PDL1_LEVELS = ("<1%", "1-49%", ">=50%")
SEX_LEVELS = ("F", "M")
RACE_LEVELS = ("race_a", "race_b", "race_c")

_PDL1_PROBS = (0.40, 0.35, 0.25)
_RACE_PROBS = (0.60, 0.25, 0.15)

# log-normal parameters (mu of log, sigma of log) for the continuous fields
_AGE_LOG = (math.log(65.0), 0.15)
_CEA_LOG = (math.log(5.0), 1.00)
_ANC_LOG = (math.log(5.0), 0.35)
_ALC_LOG = (math.log(1.5), 0.35)
_AEC_LOG = (math.log(0.15), 0.50)
_AMC_LOG = (math.log(0.6), 0.35)

# frozen reference moments of the nlr = anc/alc and alc populations,
# used by the noise-free response rule (analytic log-normal moments)
NLR_REF_MEAN = 3.7677
NLR_REF_STD = 1.9852
ALC_REF_MEAN = 1.5947
ALC_REF_STD = 0.5757

_BACKGROUND = 0.02
_LOBE_LEVEL = 0.25
_VESSEL_LEVEL = 0.65
_TUMOR_LEVEL = 0.85

RESPONDER_RISK = -1.0
NON_RESPONDER_RISK = 0.5
EVENT_PROBABILITY = 0.7


@dataclass(frozen=True)
class PhantomConfig:
    image_size: tuple[int, int] = (32, 32)
    responder_fraction: float = 19.0 / 74.0
    n_folds: int = 5

    def validate(self):
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigurationError(f"image_size must be at least 16x16, got {self.image_size}")
        if not (0.0 < self.responder_fraction < 1.0):
            raise ConfigurationError("responder_fraction must lie in (0, 1)")
        if self.n_folds < 1:
            raise ConfigurationError("n_folds must be >= 1")


@dataclass(frozen=True)
class ClinicalRecord:
    age: float
    sex: str
    race: str
    cea: float
    anc: float
    alc: float
    nlr: float
    aec: float
    amc: float
    pdl1: str


@dataclass
class PhantomCase:
    case_id: str
    pre_image: np.ndarray
    post_image: np.ndarray
    vessel_mask: np.ndarray
    lobe_mask: np.ndarray
    tumor_mask_pre: np.ndarray
    tumor_mask_post: np.ndarray
    clinical: ClinicalRecord
    responder: bool
    survival_time: float
    event: bool


@dataclass
class DatasetManifest:
    seed: int
    n_cases: int
    responder_fraction: float
    splits: dict[int, list[str]] = field(default_factory=dict)
    image_size: tuple[int, int] = (32, 32)


def pdl1_ordinal(level: str) -> int:
    if level not in PDL1_LEVELS:
        raise ConfigurationError(f"unknown PD-L1 level {level!r}")
    return PDL1_LEVELS.index(level)


def response_score(pdl1_ord: int, nlr: float, alc: float) -> float:
    """Linear score whose sign decides the response label."""
    z_nlr = (nlr - NLR_REF_MEAN) / NLR_REF_STD
    z_alc = (alc - ALC_REF_MEAN) / ALC_REF_STD
    return 0.9 * pdl1_ord - 0.8 * z_nlr + 0.3 * z_alc


def response_label(rec: ClinicalRecord) -> bool:
    """sigmoid(score) > 0.5, i.e. score > 0."""
    return response_score(pdl1_ordinal(rec.pdl1), rec.nlr, rec.alc) > 0.0


def _draw_clinical(rng: np.random.Generator) -> ClinicalRecord:
    age = float(rng.lognormal(*_AGE_LOG))
    sex = SEX_LEVELS[int(rng.random() < 0.5)]
    race = RACE_LEVELS[int(rng.choice(len(RACE_LEVELS), p=_RACE_PROBS))]
    cea = float(rng.lognormal(*_CEA_LOG))
    anc = float(rng.lognormal(*_ANC_LOG))
    alc = float(rng.lognormal(*_ALC_LOG))
    aec = float(rng.lognormal(*_AEC_LOG))
    amc = float(rng.lognormal(*_AMC_LOG))
    pdl1 = PDL1_LEVELS[int(rng.choice(len(PDL1_LEVELS), p=_PDL1_PROBS))]
    return ClinicalRecord(age=age, sex=sex, race=race, cea=cea, anc=anc, alc=alc,
                          nlr=anc / alc, aec=aec, amc=amc, pdl1=pdl1)


def _ellipse_mask(h, w, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _draw_lobes(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    for fx in (0.28, 0.72):
        cy = h * (0.50 + rng.uniform(-0.04, 0.04))
        cx = w * (fx + rng.uniform(-0.03, 0.03))
        ry = h * rng.uniform(0.30, 0.40)
        rx = w * rng.uniform(0.16, 0.22)
        mask |= _ellipse_mask(h, w, cy, cx, ry, rx)
    return mask


def _draw_vessels(rng: np.random.Generator, lobe: np.ndarray) -> np.ndarray:
    h, w = lobe.shape
    ys, xs = np.nonzero(lobe)
    vessels = np.zeros((h, w), dtype=bool)
    n_walks = int(rng.integers(2, 5))
    for _ in range(n_walks):
        start = int(rng.integers(0, len(ys)))
        y, x = int(ys[start]), int(xs[start])
        width = int(rng.integers(1, 3))
        direction = 1 if rng.random() < 0.5 else -1
        for _ in range(int(h * 1.2)):
            for dx in range(width):
                xx = x + dx
                if 0 <= y < h and 0 <= xx < w:
                    vessels[y, xx] = True
            y += direction
            x += int(rng.integers(-1, 2))
            if y < 0 or y >= h:
                break
            x = min(max(x, 0), w - 1)
    return vessels & lobe


def _disk_offsets(r: float) -> np.ndarray:
    rad = int(math.ceil(r))
    dy, dx = np.mgrid[-rad:rad + 1, -rad:rad + 1]
    keep = dy ** 2 + dx ** 2 <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def _disk_mask(h, w, cy, cx, r) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _valid_centers(lobe: np.ndarray, r: float) -> np.ndarray:
    """Boolean map of pixels whose whole radius-r disk lies inside the lobe."""
    h, w = lobe.shape
    rad = int(math.ceil(r))
    padded = np.pad(lobe, rad, constant_values=False)
    valid = np.ones((h, w), dtype=bool)
    for dy, dx in _disk_offsets(r):
        valid &= padded[rad + dy:rad + dy + h, rad + dx:rad + dx + w]
    return valid


def _draw_tumor(rng: np.random.Generator, lobe: np.ndarray) -> tuple[int, int, float]:
    h, w = lobe.shape
    r = float(rng.uniform(3.0, max(3.0, h / 6.0)))
    while True:
        valid = _valid_centers(lobe, r)
        ys, xs = np.nonzero(valid)
        if len(ys):
            pick = int(rng.integers(0, len(ys)))
            return int(ys[pick]), int(xs[pick]), r
        r *= 0.85
        if r < 1.0:
            raise TheradiffError("lobe mask too small to host any tumor disk")


def _bilinear_upsample(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    m, n = coarse.shape
    ys = np.linspace(0.0, m - 1.0, h)
    xs = np.linspace(0.0, n - 1.0, w)
    y0 = np.floor(ys).astype(int)
    y1 = np.minimum(y0 + 1, m - 1)
    wy = (ys - y0)[:, None]
    rows = coarse[y0] * (1.0 - wy) + coarse[y1] * wy
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, n - 1)
    wx = xs - x0
    return rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx


def _render(lobe, vessels, tumor, texture) -> np.ndarray:
    img = np.full(lobe.shape, _BACKGROUND, dtype=np.float64)
    img[lobe] = _LOBE_LEVEL + texture[lobe]
    img[vessels] = _VESSEL_LEVEL
    img[tumor] = _TUMOR_LEVEL
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _build_case(rng: np.random.Generator, case_id: str, config: PhantomConfig,
                clinical: ClinicalRecord) -> PhantomCase:
    h, w = config.image_size
    responder = response_label(clinical)
    risk = RESPONDER_RISK if responder else NON_RESPONDER_RISK
    survival_time = float(rng.exponential(math.exp(-risk)))
    event = bool(rng.random() < EVENT_PROBABILITY)

    lobe = _draw_lobes(rng, h, w)
    vessels = _draw_vessels(rng, lobe)
    cy, cx, r = _draw_tumor(rng, lobe)
    tumor_pre = _disk_mask(h, w, cy, cx, r)
    r_post = 0.5 * r if responder else 1.2 * r
    tumor_post = _disk_mask(h, w, cy, cx, r_post)
    texture = _bilinear_upsample(rng.uniform(-0.05, 0.05, size=(4, 4)), h, w)

    return PhantomCase(
        case_id=case_id,
        pre_image=_render(lobe, vessels, tumor_pre, texture),
        post_image=_render(lobe, vessels, tumor_post, texture),
        vessel_mask=vessels,
        lobe_mask=lobe,
        tumor_mask_pre=tumor_pre,
        tumor_mask_post=tumor_post,
        clinical=clinical,
        responder=responder,
        survival_time=survival_time,
        event=event,
    )


def generate_case(seed: int, config: PhantomConfig, case_id: str = "case_0000") -> PhantomCase:
    """One case from its own stream; the label falls where the draws land."""
    config.validate()
    rng = np.random.default_rng([int(seed), 0xCA5E])
    return _build_case(rng, case_id, config, _draw_clinical(rng))


def generate_dataset(seed: int, n: int, config: PhantomConfig) -> tuple[DatasetManifest, list[PhantomCase]]:
    """n cases with an exact responder count of round(n * fraction)."""
    config.validate()
    if n < 5:
        raise ConfigurationError(f"dataset needs n >= 5 cases, got {n}")
    n_resp = int(round(n * config.responder_fraction))
    n_resp = min(max(n_resp, 1), n - 1)

    cases = []
    for i in range(n):
        target = i < n_resp
        for attempt in range(10_000):
            rng = np.random.default_rng([int(seed), 0xCA5E, i, attempt])
            clinical = _draw_clinical(rng)
            if response_label(clinical) == target:
                cases.append(_build_case(rng, f"case_{i:04d}", config, clinical))
                break
        else:
            raise TheradiffError(f"could not realize target label for case {i}")

    splits: dict[int, list[str]] = {f: [] for f in range(config.n_folds)}
    for i, case in enumerate(cases):
        splits[i % config.n_folds].append(case.case_id)

    manifest = DatasetManifest(
        seed=int(seed), n_cases=n, responder_fraction=config.responder_fraction,
        splits=splits, image_size=tuple(config.image_size),
    )
    return manifest, cases


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def cases_equal(a: PhantomCase, b: PhantomCase) -> bool:
    """Bit-exact equality across all images, masks and scalar fields."""
    arrays = ("pre_image", "post_image", "vessel_mask", "lobe_mask",
              "tumor_mask_pre", "tumor_mask_post")
    for name in arrays:
        if not np.array_equal(getattr(a, name), getattr(b, name)):
            return False
    return (a.case_id == b.case_id and a.clinical == b.clinical
            and a.responder == b.responder and a.event == b.event
            and a.survival_time == b.survival_time)
