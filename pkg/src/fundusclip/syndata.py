"""Procedural generator of fundus-like image/caption pairs.

Every pair is a pure function of ``(global_seed, id)``: labels, scene
geometry, caption wording and pixels are all drawn from derived substreams,
so corpora regenerate bit-exactly and can be built in parallel in any order.

Rendering is deliberately cartoonish but *separable*: each disease flag adds
a primitive with a distinct pixel signature (documented next to its detector
below), which is what makes the corpus learnable by a small encoder.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .rng import Rng, _splitmix64

DISEASES = (
    "diabetic_retinopathy_mild",
    "diabetic_retinopathy_severe",
    "glaucoma",
    "age_related_degeneration",
    "hypertensive_retinopathy",
    "vein_occlusion",
    "pathological_myopia",
    "cataract_haze",
)

READABILITY_REGIONS = ("whole_image", "optic_disc", "macula", "vessels")

DEFAULT_PRIORS = {
    "diabetic_retinopathy_mild": 0.16,
    "diabetic_retinopathy_severe": 0.12,
    "glaucoma": 0.22,
    "age_related_degeneration": 0.14,
    "hypertensive_retinopathy": 0.07,
    "vein_occlusion": 0.07,
    "pathological_myopia": 0.07,
    "cataract_haze": 0.08,
}

# poor / fair / good probabilities shared by all four regions
READABILITY_PROBS = (0.08, 0.22, 0.70)

SPLITS = ("train", "val", "test")


@dataclass
class DiseaseLabelVector:
    diabetic_retinopathy_mild: bool = False
    diabetic_retinopathy_severe: bool = False
    glaucoma: bool = False
    age_related_degeneration: bool = False
    hypertensive_retinopathy: bool = False
    vein_occlusion: bool = False
    pathological_myopia: bool = False
    cataract_haze: bool = False

    def __post_init__(self):
        if self.diabetic_retinopathy_mild and self.diabetic_retinopathy_severe:
            raise ValueError("mild and severe diabetic retinopathy are mutually exclusive")

    @property
    def dr_grade(self) -> int:
        # grade 0 iff neither DR flag; mild -> 2, severe -> 4 (grades 1 and 3
        # are not representable by the two-flag schema)
        if self.diabetic_retinopathy_severe:
            return 4
        if self.diabetic_retinopathy_mild:
            return 2
        return 0

    def get(self, disease: str) -> bool:
        return getattr(self, disease)

    def active(self):
        return [d for d in DISEASES if getattr(self, d)]

    @property
    def is_normal(self) -> bool:
        return not any(getattr(self, d) for d in DISEASES)

    def as_ints(self):
        return [int(getattr(self, d)) for d in DISEASES]

    @classmethod
    def from_ints(cls, values) -> "DiseaseLabelVector":
        values = list(values)
        if len(values) != len(DISEASES) or any(v not in (0, 1) for v in values):
            raise ValueError(f"label vector must be {len(DISEASES)} ints in {{0,1}}")
        return cls(**{d: bool(v) for d, v in zip(DISEASES, values)})


@dataclass
class ReadabilityLabels:
    whole_image: int = 2
    optic_disc: int = 2
    macula: int = 2
    vessels: int = 2

    def __post_init__(self):
        for r in READABILITY_REGIONS:
            if getattr(self, r) not in (0, 1, 2):
                raise ValueError(f"readability score for {r} must be in {{0,1,2}}")

    def as_ints(self):
        return [getattr(self, r) for r in READABILITY_REGIONS]

    @classmethod
    def from_ints(cls, values) -> "ReadabilityLabels":
        values = list(values)
        if len(values) != 4:
            raise ValueError("readability vector must be 4 ints")
        return cls(**{r: int(v) for r, v in zip(READABILITY_REGIONS, values)})


@dataclass
class SceneRecipe:
    """Everything render_image needs; all coordinates in units of image size."""
    fundus_center: tuple
    fundus_radius: float
    disc_center: tuple
    disc_radius: tuple          # (rx, ry)
    cup_to_disc_ratio: float
    macula_center: tuple
    vessel_seed: int
    branch_count: int
    tortuosity: float
    vessel_width: float         # relative width factor (hypertensive narrows)
    vessel_bright: bool         # hypertensive: light arterioles
    microaneurysms: list = field(default_factory=list)   # (x, y, r)
    hemorrhages: list = field(default_factory=list)      # (x, y, r, ecc, angle)
    drusen: list = field(default_factory=list)           # (x, y, r)
    haze_opacity: float = 0.0
    wedge: tuple | None = None  # (start_angle, width, opacity)
    tessellation: tuple | None = None  # (amplitude, wavelength, angle)
    disc_gain: float = 1.0
    atrophy: float = 0.0        # peripapillary atrophy halo opacity (glaucoma)
    macula_shade: float = 0.25
    illumination: tuple = (0.0, 0.0)   # (strength, direction angle)
    blur_sigma: float = 0.0

    def __post_init__(self):
        if not 0.2 <= self.cup_to_disc_ratio <= 0.9:
            raise ValueError("cup_to_disc_ratio must lie in [0.2, 0.9]")


@dataclass
class ImageCaptionPair:
    id: int
    image: np.ndarray           # [3, S, S] float64 in [0, 1]
    caption: str
    labels: DiseaseLabelVector
    readability: ReadabilityLabels
    split: str = "train"
    seed: int = 0


# ---------------------------------------------------------------------------
# label sampling


def _validate_priors(priors: dict) -> dict:
    merged = dict(DEFAULT_PRIORS)
    for k, v in priors.items():
        if k not in DEFAULT_PRIORS:
            raise ValueError(f"unknown disease in priors: {k}")
        merged[k] = float(v)
    for k, v in merged.items():
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"prior for {k} must lie in [0, 1]")
    group = (merged["diabetic_retinopathy_mild"]
             + merged["diabetic_retinopathy_severe"])
    if group > 1.0:
        raise ValueError("mild + severe diabetic retinopathy priors exceed 1")
    return merged


def sample_labels(rng: Rng, class_priors: dict | None = None):
    """Draw a valid (DiseaseLabelVector, ReadabilityLabels) pair."""
    priors = _validate_priors(class_priors or {})
    flags = {}
    u = float(rng.uniform())
    pm = priors["diabetic_retinopathy_mild"]
    ps = priors["diabetic_retinopathy_severe"]
    flags["diabetic_retinopathy_mild"] = u < pm
    flags["diabetic_retinopathy_severe"] = pm <= u < pm + ps
    for d in DISEASES[2:]:
        flags[d] = float(rng.uniform()) < priors[d]
    scores = []
    cum = np.cumsum(READABILITY_PROBS)
    for _ in READABILITY_REGIONS:
        v = float(rng.uniform())
        scores.append(int(np.searchsorted(cum, v, side="right")))
    return DiseaseLabelVector(**flags), ReadabilityLabels(*[min(s, 2) for s in scores])


# ---------------------------------------------------------------------------
# scene recipes

_ILLUMINATION_STRENGTH = {0: 0.30, 1: 0.15, 2: 0.05}
_BLUR_SIGMA = {0: 1.0, 1: 0.55, 2: 0.25}
_DISC_GAIN = {0: 0.85, 1: 0.93, 2: 1.0}


def sample_recipe(labels: DiseaseLabelVector, readability: ReadabilityLabels,
                  rng: Rng, size: int = 64) -> SceneRecipe:
    """Random scene geometry consistent with the labels."""
    cx = 0.5 + float(rng.uniform(-0.02, 0.02))
    cy = 0.5 + float(rng.uniform(-0.02, 0.02))
    fr = float(rng.uniform(0.455, 0.48))
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    dx = cx + side * float(rng.uniform(0.24, 0.30))
    dy = cy + float(rng.uniform(-0.05, 0.05))
    drx = float(rng.uniform(0.10, 0.12))
    dry = drx * float(rng.uniform(0.88, 0.98))
    if labels.glaucoma:
        cdr = float(rng.uniform(0.70, 0.90))
        atrophy = float(rng.uniform(0.60, 0.90))
    else:
        cdr = float(rng.uniform(0.20, 0.45))
        atrophy = 0.0
    mx = cx - side * float(rng.uniform(0.08, 0.12))
    my = cy + float(rng.uniform(-0.03, 0.03))

    def scatter(n, r_lo, r_hi, around=(cx, cy), spread=None, min_gap=0.07,
                disc_clear=0.25):
        pts, tries = [], 0
        while len(pts) < n and tries < 300:
            tries += 1
            ang = float(rng.uniform(0, 2 * math.pi))
            rad = float(rng.uniform(0.14, 0.40)) if spread is None else float(rng.uniform(*spread))
            x = around[0] + rad * math.cos(ang)
            y = around[1] + rad * math.sin(ang)
            # keep lesions inside the fundus, clear of the disc, and apart
            # from each other so their pixel blobs never merge
            if math.hypot(x - cx, y - cy) > fr - 0.06:
                continue
            if math.hypot(x - dx, y - dy) < disc_clear:
                continue
            if any(math.hypot(x - px, y - py) < min_gap for px, py, _ in pts):
                continue
            pts.append((x, y, float(rng.uniform(r_lo, r_hi))))
        return pts

    # DR lesions stay well clear of the disc so the vessel-contrast annulus
    # used by the hypertensive detector never sees their dark pixels
    micro = scatter(int(rng.integers(10, 17)), 0.020, 0.028, disc_clear=0.33) \
        if labels.diabetic_retinopathy_mild else []
    hem = []
    if labels.diabetic_retinopathy_severe:
        for (x, y, r) in scatter(int(rng.integers(4, 8)), 0.045, 0.065,
                                 disc_clear=0.33):
            hem.append((x, y, r, float(rng.uniform(0.55, 0.9)),
                        float(rng.uniform(0, math.pi))))
    drus = scatter(int(rng.integers(9, 14)), 0.028, 0.038,
                   around=(mx, my), spread=(0.02, 0.20), min_gap=0.075) \
        if labels.age_related_degeneration else []

    wedge = None
    if labels.vein_occlusion:
        # aim the pale sector away from the disc so it never covers it
        base = math.atan2(cy - dy, cx - dx)
        start = base + float(rng.uniform(-0.5, 0.5)) - 0.5 * 1.4
        wedge = (start, float(rng.uniform(1.3, 1.7)), float(rng.uniform(0.34, 0.44)))

    tess = None
    if labels.pathological_myopia:
        tess = (float(rng.uniform(0.11, 0.15)),
                float(rng.uniform(0.125, 0.145)),
                float(rng.uniform(0, math.pi)))

    return SceneRecipe(
        fundus_center=(cx, cy),
        fundus_radius=fr,
        disc_center=(dx, dy),
        disc_radius=(drx, dry),
        cup_to_disc_ratio=cdr,
        macula_center=(mx, my),
        vessel_seed=int(rng.integers(0, 2 ** 62)),
        branch_count=int(rng.integers(5, 8)),
        tortuosity=float(rng.uniform(0.18, 0.34)),
        vessel_width=0.55 if labels.hypertensive_retinopathy else 1.0,
        vessel_bright=labels.hypertensive_retinopathy,
        microaneurysms=micro,
        hemorrhages=hem,
        drusen=drus,
        haze_opacity=float(rng.uniform(0.28, 0.42)) if labels.cataract_haze else 0.0,
        wedge=wedge,
        tessellation=tess,
        disc_gain=_DISC_GAIN[readability.optic_disc],
        atrophy=atrophy,
        macula_shade=0.25 if readability.macula == 2 else 0.18,
        illumination=(_ILLUMINATION_STRENGTH[readability.whole_image],
                      float(rng.uniform(0, 2 * math.pi))),
        blur_sigma=_BLUR_SIGMA[readability.vessels],
    )


# ---------------------------------------------------------------------------
# rendering

_BG_COLOR = np.array([0.62, 0.30, 0.14])
_VESSEL_DARK = np.array([0.42, 0.07, 0.05])
_VESSEL_LIGHT = np.array([0.88, 0.52, 0.30])
_DISC_COLOR = np.array([0.93, 0.82, 0.48])
# brightness-neutral against the background (same channel sum) so the ring is
# a hue cue, not a brightness cue: bright findings (wedge, haze) stay distinct
_ATROPHY_COLOR = np.array([0.82, 0.08, 0.16])
_CUP_COLOR = np.array([1.00, 0.97, 0.78])
_DOT_COLOR = np.array([0.22, 0.04, 0.24])
_HEM_COLOR = np.array([0.24, 0.03, 0.26])
_DRUSEN_COLOR = np.array([0.95, 0.93, 0.45])
_HAZE_COLOR = np.array([0.95, 0.93, 0.90])


def _blend(img, alpha, color):
    img += alpha[None] * (color[:, None, None] - img)


def _stamp_disk(img, xx, yy, x, y, r, color, softness=0.35):
    d = np.hypot(xx - x, yy - y)
    alpha = np.clip((r - d) / (softness * r) + 0.5, 0.0, 1.0)
    _blend(img, alpha, color)


def _draw_segment(img, xx, yy, p0, p1, width, color, inside):
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = vx * vx + vy * vy
    if norm2 == 0:
        return
    t = np.clip(((xx - p0[0]) * vx + (yy - p0[1]) * vy) / norm2, 0.0, 1.0)
    d = np.hypot(xx - (p0[0] + t * vx), yy - (p0[1] + t * vy))
    alpha = np.clip((width - d) / (0.6 * width) + 0.5, 0.0, 1.0) * inside
    _blend(img, alpha, color)


def _draw_vessels(img, xx, yy, recipe: SceneRecipe, inside):
    rng = Rng(recipe.vessel_seed)
    cx, cy = recipe.fundus_center
    dx, dy = recipe.disc_center
    color = _VESSEL_LIGHT if recipe.vessel_bright else _VESSEL_DARK
    toward = math.atan2(cy - dy, cx - dx)
    n = recipe.branch_count
    queue = []
    for i in range(n):
        ang = toward + (i / max(n - 1, 1) - 0.5) * 2.6 + float(rng.uniform(-0.15, 0.15))
        queue.append(((dx, dy), ang, 0.028 * recipe.vessel_width, 9))
    while queue:
        (x, y), ang, width, steps = queue.pop()
        for _ in range(steps):
            ang += float(rng.uniform(-recipe.tortuosity, recipe.tortuosity))
            step = float(rng.uniform(0.055, 0.085))
            nx, ny = x + step * math.cos(ang), y + step * math.sin(ang)
            if math.hypot(nx - cx, ny - cy) > recipe.fundus_radius - 0.03:
                break
            _draw_segment(img, xx, yy, (x, y), (nx, ny), width, color, inside)
            x, y = nx, ny
            width *= 0.90
            if steps > 4 and rng.uniform() < 0.25:
                queue.append(((x, y), ang + float(rng.uniform(0.5, 0.9))
                              * (1 if rng.uniform() < 0.5 else -1),
                              width * 0.8, 4))


def render_image(recipe: SceneRecipe, size: int = 64) -> np.ndarray:
    """Deterministic [3, size, size] rendering of a scene recipe, in [0, 1]."""
    s = float(size)
    ax = (np.arange(size) + 0.5) / s
    xx, yy = np.meshgrid(ax, ax)
    img = np.zeros((3, size, size))

    cx, cy = recipe.fundus_center
    fd = np.hypot(xx - cx, yy - cy)
    inside = np.clip((recipe.fundus_radius - fd) / 0.01, 0.0, 1.0)
    shade = 1.0 - 0.28 * (fd / recipe.fundus_radius) ** 2
    _blend(img, inside, _BG_COLOR)
    img *= np.clip(shade, 0.0, 1.0)[None]

    if recipe.tessellation is not None:
        amp, wl, ang = recipe.tessellation
        u = xx * math.cos(ang) + yy * math.sin(ang)
        v = -xx * math.sin(ang) + yy * math.cos(ang)
        pattern = amp * np.sin(2 * math.pi * u / wl) * np.sin(2 * math.pi * v / wl)
        img[0] += pattern * inside
        img[1] += 0.7 * pattern * inside
        img[2] -= 0.6 * pattern * inside  # anti-correlated blue tint

    # macula: dark smudge opposite the disc
    mx, my = recipe.macula_center
    md = np.hypot(xx - mx, yy - my)
    img *= (1.0 - recipe.macula_shade * np.exp(-(md ** 2) / (2 * 0.055 ** 2)))[None]

    _draw_vessels(img, xx, yy, recipe, inside)

    # optic disc with inner cup; relative cup diameter encodes glaucoma
    dx, dy = recipe.disc_center
    drx, dry = recipe.disc_radius
    dd = np.hypot((xx - dx) / drx, (yy - dy) / dry)
    if recipe.atrophy > 0.0:
        # peripapillary atrophy ring hugging the disc rim (glaucoma), rendered
        # as a pigmented beta-zone crescent; kept within 1.5 disc radii so it
        # stays clear of the wedge and macula
        halo = np.clip(1.0 - np.abs(dd - 1.22) / 0.32, 0.0, 1.0) * recipe.atrophy
        _blend(img, halo, _ATROPHY_COLOR * recipe.disc_gain)
    disc_alpha = np.clip((1.0 - dd) / 0.12 + 0.5, 0.0, 1.0)
    _blend(img, disc_alpha, _DISC_COLOR * recipe.disc_gain)
    cup_alpha = np.clip((recipe.cup_to_disc_ratio - dd) / 0.10 + 0.5, 0.0, 1.0)
    # cup pallor deepens with the cup-to-disc ratio, so enlarged cups are
    # both bigger and brighter than the faint physiological cup
    pallor = 0.55 + 0.45 * np.clip((recipe.cup_to_disc_ratio - 0.45) / 0.25, 0.0, 1.0)
    cup_color = _DISC_COLOR + pallor * (_CUP_COLOR - _DISC_COLOR)
    _blend(img, cup_alpha, np.clip(cup_color * recipe.disc_gain, 0, 1))

    for (x, y, r) in recipe.microaneurysms:
        _stamp_disk(img, xx, yy, x, y, r, _DOT_COLOR)
    for (x, y, r, ecc, ang) in recipe.hemorrhages:
        ux = (xx - x) * math.cos(ang) + (yy - y) * math.sin(ang)
        uy = -(xx - x) * math.sin(ang) + (yy - y) * math.cos(ang)
        d = np.hypot(ux / 1.0, uy / ecc)
        alpha = np.clip((r - d) / (0.3 * r) + 0.5, 0.0, 1.0)
        _blend(img, alpha, _HEM_COLOR)
    for (x, y, r) in recipe.drusen:
        _stamp_disk(img, xx, yy, x, y, r, _DRUSEN_COLOR)

    if recipe.wedge is not None:
        start, width, opacity = recipe.wedge
        ang = np.arctan2(yy - cy, xx - cx)
        rel = np.mod(ang - start, 2 * math.pi)
        edge = 0.30  # wide soft edge: sharp sector borders read as lesions
        sector = (np.clip(rel / edge, 0, 1) * np.clip((width - rel) / edge, 0, 1))
        sector = np.clip(sector, 0, 1) * inside
        img += (opacity * sector)[None] * (1.0 - img)

    if recipe.haze_opacity > 0.0:
        img = img * (1.0 - recipe.haze_opacity) \
            + recipe.haze_opacity * _HAZE_COLOR[:, None, None]

    strength, direction = recipe.illumination
    if strength > 0.0:
        t = (xx - 0.5) * math.cos(direction) + (yy - 0.5) * math.sin(direction) + 0.5
        t = np.clip(t, 0.0, 1.0)
        t = t * t * (3.0 - 2.0 * t)  # ease the ramp ends so no crease forms
        img *= (1.0 - strength * t)[None]

    if recipe.blur_sigma > 0.0:
        img = ndimage.gaussian_filter(img, sigma=(0, recipe.blur_sigma, recipe.blur_sigma))

    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# captions

NORMAL_TEMPLATES = (
    "color fundus photograph with no abnormal findings",
    "normal retinal fundus image with no visible disease",
    "healthy fundus with clear optic disc and macula",
)

_PREFIXES = (
    "fundus image with",
    "color fundus photograph with",
    "retinal image showing",
)

FINDING_PHRASES = {
    "diabetic_retinopathy_mild": (
        "mild diabetic retinopathy with scattered microaneurysms",
        "mild diabetic retinopathy",
        "early diabetic retinopathy with small red dots",
    ),
    "diabetic_retinopathy_severe": (
        "severe diabetic retinopathy with scattered hemorrhages",
        "severe diabetic retinopathy",
        "advanced diabetic retinopathy with large hemorrhages",
    ),
    "glaucoma": (
        "glaucoma with enlarged optic cup",
        "glaucomatous cupping of the optic disc",
        "glaucoma",
    ),
    "age_related_degeneration": (
        "age related macular degeneration with drusen deposits",
        "macular drusen of age related degeneration",
        "macular degeneration",
    ),
    "hypertensive_retinopathy": (
        "hypertensive retinopathy with narrowed arterioles",
        "hypertensive retinopathy",
        "narrowed bright vessels of hypertensive retinopathy",
    ),
    "vein_occlusion": (
        "retinal vein occlusion with a pale wedge",
        "vein occlusion",
        "pale sector of retinal vein occlusion",
    ),
    "pathological_myopia": (
        "pathological myopia with tessellated fundus",
        "myopic tessellation of the fundus",
        "pathological myopia",
    ),
    "cataract_haze": (
        "hazy media opacity from cataract",
        "cataract haze over the fundus",
        "cataract haze",
    ),
}

# marker words: caption contains one of these iff the flag is set
CAPTION_MARKERS = {
    "diabetic_retinopathy_mild": {"mild", "early"},
    "diabetic_retinopathy_severe": {"severe", "advanced"},
    "glaucoma": {"glaucoma", "glaucomatous"},
    "age_related_degeneration": {"degeneration", "drusen"},
    "hypertensive_retinopathy": {"hypertensive"},
    "vein_occlusion": {"occlusion"},
    "pathological_myopia": {"myopia", "myopic"},
    "cataract_haze": {"cataract"},
}

_QUALITY_CLAUSES = ("poor quality", "blurry")

MAX_CAPTION_WORDS = 24


def caption_vocabulary_words():
    """The closed word list of the caption grammar."""
    words = set()
    for tpl in NORMAL_TEMPLATES + _PREFIXES + _QUALITY_CLAUSES:
        words.update(tpl.split())
    for phrases in FINDING_PHRASES.values():
        for p in phrases:
            words.update(p.split())
    words.add("and")
    return sorted(words)


def generate_caption(labels: DiseaseLabelVector,
                     readability: ReadabilityLabels, rng: Rng) -> str:
    """One caption from the closed grammar; mentions a finding iff its flag is set."""
    active = labels.active()
    if not active:
        return NORMAL_TEMPLATES[int(rng.integers(len(NORMAL_TEMPLATES)))]
    if len(active) >= 4:
        # many findings: shortest forms to respect the caption length cap
        phrases = [min(FINDING_PHRASES[d], key=lambda p: len(p.split()))
                   for d in active]
        return " ".join(["fundus image with", " and ".join(phrases)])
    parts = []
    if readability.whole_image == 0 and len(active) <= 2:
        parts.append(_QUALITY_CLAUSES[int(rng.integers(len(_QUALITY_CLAUSES)))])
    parts.append(_PREFIXES[int(rng.integers(len(_PREFIXES)))])
    phrases = [FINDING_PHRASES[d][int(rng.integers(3))] for d in active]
    parts.append(" and ".join(phrases))
    caption = " ".join(parts)
    if len(caption.split()) > MAX_CAPTION_WORDS:
        # unlucky phrase draws can overflow the cap; retreat to short forms
        phrases = [min(FINDING_PHRASES[d], key=lambda p: len(p.split()))
                   for d in active]
        caption = " ".join(["fundus image with", " and ".join(phrases)])
    return caption


# ---------------------------------------------------------------------------
# corpus generation and splitting


def pair_seed(global_seed: int, pair_id: int) -> int:
    return _splitmix64((global_seed & ((1 << 64) - 1)) ^ _splitmix64(pair_id + 1))


def build_pair(global_seed: int, pair_id: int, class_priors=None,
               size: int = 64) -> ImageCaptionPair:
    """Regenerate pair ``pair_id`` of the corpus seeded by ``global_seed``."""
    root = Rng(global_seed).derive(pair_id + 1)
    labels, readability = sample_labels(root.derive(0), class_priors)
    recipe = sample_recipe(labels, readability, root.derive(1), size)
    caption = generate_caption(labels, readability, root.derive(2))
    image = render_image(recipe, size)
    return ImageCaptionPair(id=pair_id, image=image, caption=caption,
                            labels=labels, readability=readability,
                            seed=pair_seed(global_seed, pair_id))


def generate_corpus(n: int, global_seed: int, class_priors=None,
                    size: int = 64, threads: int = 1):
    """n independent pairs; identical output for any thread count."""
    if n < 10:
        raise ValueError("corpus size must be at least 10")
    if threads <= 1:
        return [build_pair(global_seed, i, class_priors, size) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(
            lambda i: build_pair(global_seed, i, class_priors, size), range(n)))


def split_corpus(items, seed: int):
    """Seeded shuffle into 80/10/10 (train gets floor(0.8n), val floor(0.1n))."""
    n = len(items)
    if n < 10:
        raise ValueError("need at least 10 items to split 8:1:1")
    order = Rng(seed, stream=0xC0DE).permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val:]]
    for part, name in ((train, "train"), (val, "val"), (test, "test")):
        for it in part:
            if isinstance(it, ImageCaptionPair):
                it.split = name
    return train, val, test


# ---------------------------------------------------------------------------
# corpus directory format: manifest.jsonl + binary PPM images


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255); values quantized by round(v * 255)."""
    c, h, w = image.shape
    data = np.round(image * 255.0).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 PPM back into a [3, H, W] float array in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"not a binary PPM (P6) file: {path}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}: {path}")
    expected = w * h * 3
    pixels = raw[pos:pos + expected]
    if len(pixels) != expected:
        raise ValueError(f"truncated PPM payload: {path}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def manifest_record(pair: ImageCaptionPair, image_path: str) -> dict:
    return {
        "id": pair.id,
        "image_path": image_path,
        "caption": pair.caption,
        "labels": pair.labels.as_ints(),
        "readability": pair.readability.as_ints(),
        "split": pair.split,
    }


def write_corpus(pairs, out_dir) -> str:
    """Write manifest.jsonl plus one PPM per pair; returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w", encoding="utf-8") as f:
        for pair in sorted(pairs, key=lambda p: p.id):
            rel = f"images/{pair.id:06d}.ppm"
            write_ppm(os.path.join(out_dir, rel), pair.image)
            f.write(json.dumps(manifest_record(pair, rel)) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# pixel-statistic detectors
#
# One scalar statistic + frozen threshold per disease flag; each is documented
# with the pixel signature it measures.  These certify that the corpus is
# separable before any training happens.


def _region_mask(size):
    ax = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(ax, ax)
    return xx, yy, np.hypot(xx - 0.5, yy - 0.5) < 0.40


# The myopic tessellation is a plane-wave product with wavelength 0.12-0.15,
# so its spectral energy sits in a narrow radial band of DFT bins
# (sqrt(2)/wavelength, about 9.4 to 11.8).  Detectors either look for energy
# there (myopia) or notch the band out so dot-scale lesions can be measured
# on a tessellation-free channel.  The band is kept tight: notching wider
# bands sheds visible ringing around compact bright spots.
_TESS_BAND = (8.8, 12.3)


def _freq_radius(size):
    k = np.fft.fftfreq(size) * size
    kx, ky = np.meshgrid(k, k)
    return np.hypot(kx, ky)


def _notch_tessellation(channel):
    spec = np.fft.fft2(channel)
    r = _freq_radius(channel.shape[0])
    spec[(r >= _TESS_BAND[0]) & (r <= _TESS_BAND[1])] = 0.0
    return np.real(np.fft.ifft2(spec))


def _find_disc(image):
    """Disc center (x, y) in unit coordinates: brightest smoothed R+G blob."""
    size = image.shape[1]
    _, _, region = _region_mask(size)
    bright = ndimage.gaussian_filter(image[0] + image[1], 2.0)
    bright = np.where(region, bright, -np.inf)
    iy, ix = np.unravel_index(np.argmax(bright), bright.shape)
    return (ix + 0.5) / size, (iy + 0.5) / size


def _lesion_components(image, exclude_disc=0.22):
    """Connected components with the lesion color signature.

    DR lesions are rendered dark in green but *elevated* in blue; after the
    tessellation band is notched out, nothing else in the scene combines a
    negative green high-pass with a positive blue high-pass, so the
    conjunction isolates them from vessels, drusen and the wedge.  Returns
    component pixel areas.
    """
    size = image.shape[1]
    xx, yy, region = _region_mask(size)
    dx, dy = _find_disc(image)
    g = _notch_tessellation(image[1])
    b = _notch_tessellation(image[2])
    gres = g - ndimage.gaussian_filter(g, 3.0)
    bres = b - ndimage.gaussian_filter(b, 3.0)
    # haze compresses every contrast by (1 - opacity); the opacity is
    # directly readable from the image corners, so undo it
    scale = max(1.0 - _stat_cataract(image) / 0.90, 0.4)
    mask = (gres < -0.035 * scale) & (bres > 0.012 * scale) & region \
        & (np.hypot(xx - dx, yy - dy) > exclude_disc)
    lbl, n = ndimage.label(mask)
    if n == 0:
        return []
    areas = ndimage.sum_labels(np.ones_like(lbl), lbl, range(1, n + 1))
    # hemorrhage rims shed small satellite fragments; drop any small
    # component that touches the dilated footprint of a large one
    large = np.isin(lbl, [i + 1 for i, a in enumerate(areas) if a >= 16])
    halo = ndimage.binary_dilation(large, iterations=3)
    keep = []
    for i, a in enumerate(areas):
        if a >= 16 or not halo[lbl == i + 1].any():
            keep.append(float(a))
    return keep


def _stat_dr_mild(image):
    """Count of small lesion-colored dots (microaneurysms)."""
    return float(sum(1 for area in _lesion_components(image) if 2 <= area <= 15))


def _stat_dr_severe(image):
    """Count of large lesion-colored blobs (hemorrhages)."""
    return float(sum(1 for area in _lesion_components(image) if area >= 16))


def _stat_glaucoma(image):
    """Cup area fraction inside the disc window: bright core / disc area."""
    size = image.shape[1]
    ax = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(ax, ax)
    dx, dy = _find_disc(image)
    win = np.hypot(xx - dx, yy - dy) < 0.14
    b = (image[0] + image[1] + image[2])[win]
    if b.size == 0:
        return 0.0
    top = b.max()
    disc = b > 0.62 * top
    cup = b > 0.93 * top
    if disc.sum() == 0:
        return 0.0
    return float(cup.sum() / disc.sum())


def _stat_armd(image):
    """Count of compact bright-yellow high-pass spots (drusen) off the disc."""
    size = image.shape[1]
    xx, yy, region = _region_mask(size)
    dx, dy = _find_disc(image)
    # raw channels: the tessellation cannot pass the conjunction below (its
    # crests are dark in blue, its troughs dark in red and green), so no
    # notching is needed here
    rres = image[0] - ndimage.gaussian_filter(image[0], 3.0)
    gres = image[1] - ndimage.gaussian_filter(image[1], 3.0)
    bres = image[2] - ndimage.gaussian_filter(image[2], 3.0)
    scale = max(1.0 - _stat_cataract(image) / 0.90, 0.4)
    # drusen are bright in all three channels at once and green-dominant;
    # bright arterioles are red-dominant, and the faint overshoot rings
    # around dark vessels never reach the blue floor
    mask = (rres > 0.03 * scale) & (gres > 0.05 * scale) \
        & (bres > 0.06 * scale) & (gres > rres) & region \
        & (np.hypot(xx - dx, yy - dy) > 0.20)
    lbl, n = ndimage.label(mask)
    count = 0
    for sl, idx in zip(ndimage.find_objects(lbl), range(1, n + 1)):
        comp = lbl[sl] == idx
        area = int(comp.sum())
        # compactness rejects the elongated slivers shed by wedge edges
        if 2 <= area <= 30 and area / (comp.shape[0] * comp.shape[1]) >= 0.45:
            count += 1
    return float(count)


def _stat_hypertensive(image):
    """Fraction of deeply dark pixels in an annulus the main vessels cross,
    measured on green-plus-blue after haze removal and background
    flattening.  Normal vessels cut the background to well under 0.78 of
    its level; narrowed bright arterioles leave no such pixels, and the
    shallow pockets between blurred bright branches never get that dark.
    The tessellation writes +0.7p into green and -0.6p into blue, so it
    nearly cancels in the sum."""
    size = image.shape[1]
    xx, yy, region = _region_mask(size)
    dx, dy = _find_disc(image)
    d = np.hypot(xx - dx, yy - dy)
    # haze is an additive blend toward white; undo it so contrast ratios
    # mean the same thing on clear and cataract images
    h = min(_stat_cataract(image) / 0.90, 0.8)
    s = (image[1] + image[2] - 1.83 * h) / (1.0 - h)
    # divide out the vessel-free background so only structure contrast
    # remains; the window is wide enough that neither the dark vessel fan
    # nor the blurred bright one is ever a majority of it
    flat = s / np.maximum(ndimage.median_filter(s, size=25), 0.05)
    f = flat[(d > 0.17) & (d < 0.26) & region]
    if f.size < 20:
        return 1.0
    return float(np.mean(f < 0.78))


def _stat_vein_occlusion(image):
    """Max-minus-median sector brightness (pale wedge lights up one sector)."""
    size = image.shape[1]
    xx, yy, _ = _region_mask(size)
    dx, dy = _find_disc(image)
    mx, my = 1.0 - dx, dy  # macula mirrors the disc horizontally (by construction)
    rad = np.hypot(xx - 0.5, yy - 0.5)
    ring = (rad > 0.15) & (rad < 0.42) \
        & (np.hypot(xx - dx, yy - dy) > 0.17) \
        & (np.hypot(xx - mx, yy - my) > 0.17)
    g = ndimage.gaussian_filter(image[1], 1.5)
    # remove a best-fit quadratic surface over the ring so the smooth
    # illumination profile (which is curved, not planar) cannot masquerade
    # as a bright sector; fit only the dimmer pixels so the wedge itself
    # does not bend the surface
    base = ring & (g < np.percentile(g[ring], 70))
    bx, by = xx[base], yy[base]
    pts = np.column_stack([bx * bx, by * by, bx * by, bx, by, np.ones(bx.size)])
    coef, *_ = np.linalg.lstsq(pts, g[base], rcond=None)
    g = g - (coef[0] * xx * xx + coef[1] * yy * yy + coef[2] * xx * yy
             + coef[3] * xx + coef[4] * yy + coef[5])
    ang = np.mod(np.arctan2(yy - 0.5, xx - 0.5), 2 * math.pi)
    sectors = []
    for k in range(16):
        m = ring & (ang >= k * math.pi / 8) & (ang < (k + 1) * math.pi / 8)
        if m.sum() >= 10:
            # upper percentile per sector: the wedge fills a sector wall to
            # wall and lifts it, while scattered dark lesions cannot drag
            # it down the way they would a mean or median
            sectors.append(float(np.percentile(g[m], 60)))
    if len(sectors) < 4:
        return 0.0
    sectors = np.array(sectors)
    return float(sectors.max() - np.median(sectors))


def _stat_cataract(image):
    """Mean blue level in the image corners (black unless haze whitens them)."""
    size = image.shape[1]
    k = max(size // 8, 2)
    b = image[2]
    corners = np.concatenate([b[:k, :k].ravel(), b[:k, -k:].ravel(),
                              b[-k:, :k].ravel(), b[-k:, -k:].ravel()])
    return float(corners.mean())


def _stat_myopia(image):
    """Peak-to-median spectral magnitude in the tessellation band of
    0.6*green - 0.7*blue, the combination that doubles the anti-correlated
    tessellation while nearly cancelling vessels, which move both channels
    in the same direction.  A global sinusoid concentrates its power in a
    handful of DFT bins; sparse structures spread theirs broadband, so the
    ratio stays near the flat-spectrum baseline without it.  It also
    cancels blur and haze attenuation.  Lesions and drusen are inpainted
    with a smoothed value first, since dot-scale spots leak power into the
    band."""
    size = image.shape[1]
    gn = _notch_tessellation(image[1])
    bn = _notch_tessellation(image[2])
    gnres = gn - ndimage.gaussian_filter(gn, 3.0)
    bnres = bn - ndimage.gaussian_filter(bn, 3.0)
    gres = image[1] - ndimage.gaussian_filter(image[1], 3.0)
    bres = image[2] - ndimage.gaussian_filter(image[2], 3.0)
    scale = max(1.0 - _stat_cataract(image) / 0.90, 0.4)
    # lesion spots found on notched channels (so tessellation troughs are
    # not swallowed); drusen spots on raw channels, where the tessellation
    # never matches the all-bright signature
    spots = ((gnres < -0.03 * scale) & (bnres > 0.01 * scale)) \
        | ((gres > 0.04 * scale) & (bres > 0.03 * scale))
    spots = ndimage.binary_dilation(spots, iterations=1)
    d = 0.6 * image[1] - 0.7 * image[2]
    d = np.where(spots, ndimage.gaussian_filter(d, 3.0), d)
    spec = np.abs(np.fft.fft2(d))
    r = _freq_radius(size)
    band = spec[(r >= _TESS_BAND[0]) & (r <= _TESS_BAND[1])]
    # floor the baseline so a nearly empty spectrum (heavy blur) cannot
    # inflate the ratio
    floor = 1.2e-3 * size ** 2
    return float(band.max() / max(float(np.median(band)), floor))


# (statistic, threshold, flag_is_on_when_above)
DETECTORS = {
    "diabetic_retinopathy_mild": (_stat_dr_mild, 5.5, True),
    "diabetic_retinopathy_severe": (_stat_dr_severe, 0.5, True),
    "glaucoma": (_stat_glaucoma, 0.45, True),
    "age_related_degeneration": (_stat_armd, 4.5, True),
    "hypertensive_retinopathy": (_stat_hypertensive, 0.15, False),
    "vein_occlusion": (_stat_vein_occlusion, 0.085, True),
    "pathological_myopia": (_stat_myopia, 2.2, True),
    "cataract_haze": (_stat_cataract, 0.08, True),
}


def detect_finding(image: np.ndarray, disease: str) -> bool:
    """Threshold the documented pixel statistic for one disease flag."""
    stat, thr, above = DETECTORS[disease]
    value = stat(image)
    return value > thr if above else value < thr


def finding_statistic(image: np.ndarray, disease: str) -> float:
    return DETECTORS[disease][0](image)
