"""Procedural slides, tiles and captions with known ground truth.

Every class renders as a sinusoidal stripe texture with its own hue and
period. Instances vary in brightness (pale / medium / dark) and stripe
orientation (horizontal / vertical); captions mention those attributes most
of the time, which gives text-to-image retrieval something to resolve beyond
the class.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .data_io import PLACEHOLDER, PromptSet, builtin_prompt_set
from .exceptions import InvalidArgumentError, ShapeError
from .numerics.rng import SeededRng

BRIGHTNESS = {"pale": 0.95, "medium": 0.78, "dark": 0.6}
ORIENTATIONS = ("horizontal", "vertical")
PERIODS = (28.0, 36.0, 46.0, 58.0)
SATURATION = 0.5
STRIPE_DEPTH = 0.3
NOISE_SD = 8.0
BACKGROUND = 244
IGNORE = 255
# rank weights for picking a class name in training captions (most frequent first)
NAME_WEIGHTS = (0.45, 0.25, 0.15, 0.1, 0.05)
N_CAPTION_TEMPLATES = 16


def synthetic_prompt_set(n_classes: int = 8) -> PromptSet:
    """Class vocabulary for the synthetic corpus (tissue types of a colorectal set)."""
    base = builtin_prompt_set("crc100k")
    classes = [(lbl, names) for lbl, names in base.classes if lbl != "BACK"]
    if not 1 <= n_classes <= len(classes):
        raise InvalidArgumentError(f"n_classes must be in [1, {len(classes)}]")
    return PromptSet(base.templates, classes[:n_classes], f"synthetic{n_classes}")


def class_color(c: int, n_classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((0.02 + c / n_classes) % 1.0, SATURATION, 1.0))


def render_texture(c: int, n_classes: int, brightness: str, orientation: str, xs, ys):
    """RGB float texture (0-255) of class ``c`` on the pixel grid ``ys x xs``."""
    period = PERIODS[c % len(PERIODS)] * (1.0 + 0.12 * (c // len(PERIODS)))
    phase = 0.7 * c
    t = np.asarray(xs, dtype=np.float64)[None, :] if orientation == "vertical" else \
        np.asarray(ys, dtype=np.float64)[:, None]
    m = 0.5 + 0.5 * np.sin(2 * np.pi * t / period + phase)
    v = BRIGHTNESS[brightness] * (1.0 - STRIPE_DEPTH * m)
    v = np.broadcast_to(v, (len(ys), len(xs)))
    return 255.0 * v[..., None] * class_color(c, n_classes)


def _to_uint8(x):
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


# --- captions ---------------------------------------------------------------

def caption_for(prompt_set: PromptSet, c: int, brightness: str, orientation: str, rng: SeededRng,
                n_templates: int = N_CAPTION_TEMPLATES) -> str:
    names = prompt_set.classes[c][1]
    w = np.array(NAME_WEIGHTS[:len(names)])
    name = names[int(rng.choice(len(names), 1, p=w / w.sum())[0])]
    template = prompt_set.templates[int(rng.integers(0, min(n_templates, len(prompt_set.templates))))]
    mode = float(rng.random())
    if mode < 0.7:
        filled = f"{brightness} {orientation} {name}"
    elif mode < 0.8:
        filled = f"{brightness} {name}"
    elif mode < 0.9:
        filled = f"{orientation} {name}"
    else:
        filled = name
    return template.replace(PLACEHOLDER, filled)


def caption_tokens_vocab(prompt_set: PromptSet) -> list[str]:
    """Every string the caption generator and the prompt ensemble can emit."""
    texts = [t.replace(PLACEHOLDER, n) for t in prompt_set.templates for _, ns in prompt_set.classes for n in ns]
    texts.append(" ".join(BRIGHTNESS) + " " + " ".join(ORIENTATIONS))
    return texts


# --- tiles ------------------------------------------------------------------

def _half_plane(side, frac, edge):
    m = np.zeros((side, side), dtype=bool)
    cut = int(side * frac)
    if edge == 0:
        m[:cut] = True
    elif edge == 1:
        m[side - cut:] = True
    elif edge == 2:
        m[:, :cut] = True
    else:
        m[:, side - cut:] = True
    return m


def render_tile(c, n_classes, brightness, orientation, rng: SeededRng, out_side=32, partial_prob=0.2,
                mix_prob=0.3):
    """One tile, rendered at 224-256 px and box-resized to ``out_side``.

    With probability ``mix_prob`` a strip of another class covers 10-40% of
    the tile, and with probability ``partial_prob`` a strip of glass does; the
    tile still belongs to (and is captioned as) class ``c``.
    """
    side = int(rng.integers(224, 257))
    ox, oy = rng.integers(0, 4096, size=2)
    xs = np.arange(side) + ox
    ys = np.arange(side) + oy
    img = render_texture(c, n_classes, brightness, orientation, xs, ys)
    if n_classes > 1 and float(rng.random()) < mix_prob:
        other = int(rng.integers(0, n_classes - 1))
        other += other >= c
        b, o = _attrs(rng)
        m = _half_plane(side, float(rng.uniform(0.1, 0.4)), int(rng.integers(0, 4)))
        img[m] = render_texture(other, n_classes, b, o, xs, ys)[m]
    if float(rng.random()) < partial_prob:
        img[_half_plane(side, float(rng.uniform(0.1, 0.4)), int(rng.integers(0, 4)))] = BACKGROUND
    small = np.asarray(Image.fromarray(_to_uint8(img)).resize((out_side, out_side), Image.BOX))
    # pixel noise averages out under the box filter; add its residue after resizing
    sd = NOISE_SD * out_side / side
    return _to_uint8(small + rng.normal(0.0, sd, size=small.shape))


def generate_pairs(prompt_set: PromptSet, n_per_class: int, rng: SeededRng, out_side=32, partial_prob=0.2,
                   mix_prob=0.3):
    """Image-caption pairs; returns (images uint8 (N,s,s,3), captions, labels, attributes)."""
    n_classes = len(prompt_set.classes)
    images, captions, labels, attrs = [], [], [], []
    order = []
    for c in range(n_classes):
        order += [c] * n_per_class
    for i in rng.permutation(len(order)):
        c = order[int(i)]
        b = list(BRIGHTNESS)[int(rng.integers(0, 3))]
        o = ORIENTATIONS[int(rng.integers(0, 2))]
        images.append(render_tile(c, n_classes, b, o, rng, out_side, partial_prob, mix_prob))
        captions.append(caption_for(prompt_set, c, b, o, rng))
        labels.append(c)
        attrs.append((b, o))
    if not images:
        return np.zeros((0, out_side, out_side, 3), np.uint8), [], np.zeros(0, int), []
    return np.stack(images), captions, np.array(labels), attrs


# --- slides -----------------------------------------------------------------

@dataclass
class Region:
    """Ellipse ``(cx, cy, rx, ry)`` or polygon ``[(x, y), ...]`` painted with one class."""
    cls: int
    brightness: str = "medium"
    orientation: str = "horizontal"
    ellipse: tuple | None = None
    polygon: list | None = None

    def mask(self, height, width) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        xx = xx + 0.5
        yy = yy + 0.5
        if self.ellipse is not None:
            cx, cy, rx, ry = self.ellipse
            return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        pts = np.asarray(self.polygon, dtype=np.float64)
        inside = np.zeros((height, width), dtype=bool)
        j = len(pts) - 1
        for i in range(len(pts)):  # even-odd rule
            xi, yi = pts[i]
            xj, yj = pts[j]
            crosses = (yi > yy) != (yj > yy)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = (xj - xi) * (yy - yi) / (yj - yi) + xi
            inside ^= crosses & (xx < xint)
            j = i
        return inside

    def bounds(self):
        if self.ellipse is not None:
            cx, cy, rx, ry = self.ellipse
            return cx - rx, cy - ry, cx + rx, cy + ry
        pts = np.asarray(self.polygon, dtype=np.float64)
        return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()


@dataclass
class SyntheticSlideSpec:
    slide_id: str
    width: int
    height: int
    regions: list = field(default_factory=list)  # later regions paint over earlier ones
    texture_seed: int = 0
    label: int | None = None
    magnification: float = 10.0

    def validate(self, n_classes: int):
        for r in self.regions:
            x0, y0, x1, y1 = r.bounds()
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                raise ShapeError(f"region of {self.slide_id} leaves the slide")
            if not 0 <= r.cls < n_classes:
                raise InvalidArgumentError(f"region class {r.cls} has no vocabulary entry")
            if r.brightness not in BRIGHTNESS or r.orientation not in ORIENTATIONS:
                raise InvalidArgumentError("unknown region attribute")


def render_slide(spec: SyntheticSlideSpec, n_classes: int):
    """Returns (RGB uint8 raster, class-index truth with ``IGNORE`` off tissue)."""
    spec.validate(n_classes)
    rng = SeededRng(spec.texture_seed)
    h, w = spec.height, spec.width
    img = np.full((h, w, 3), float(BACKGROUND))
    truth = np.full((h, w), IGNORE, dtype=np.uint8)
    xs, ys = np.arange(w), np.arange(h)
    for r in spec.regions:
        m = r.mask(h, w)
        tex = render_texture(r.cls, n_classes, r.brightness, r.orientation, xs, ys)
        img[m] = tex[m]
        truth[m] = r.cls
    # luminance noise, weaker on the glass
    sd = np.where(truth == IGNORE, 2.0, NOISE_SD)
    img += (rng.normal(0.0, 1.0, size=(h, w)) * sd)[..., None]
    return _to_uint8(img), truth


def _attrs(rng):
    return list(BRIGHTNESS)[int(rng.integers(0, 3))], ORIENTATIONS[int(rng.integers(0, 2))]


def classification_slide_specs(n_classes: int, per_class: int, rng: SeededRng, size: int = 1024,
                               mix_prob: float = 0.5):
    """Slides dominated by one class; about half carry a smaller second-class focus."""
    specs = []
    for c in range(n_classes):
        for j in range(per_class):
            regions = []
            n_blobs = int(rng.integers(1, 3))
            for _ in range(n_blobs):
                rx = float(rng.uniform(0.22, 0.4)) * size
                ry = float(rng.uniform(0.22, 0.4)) * size
                cx = float(rng.uniform(rx, size - rx))
                cy = float(rng.uniform(ry, size - ry))
                b, o = _attrs(rng)
                regions.append(Region(c, b, o, ellipse=(cx, cy, rx, ry)))
            if n_classes > 1 and float(rng.random()) < mix_prob:
                other = int(rng.integers(0, n_classes - 1))
                other += other >= c
                host = regions[0].ellipse
                r2 = 0.35 * min(host[2], host[3])
                b, o = _attrs(rng)
                regions.append(Region(other, b, o, ellipse=(host[0], host[1], r2, r2)))
            specs.append(SyntheticSlideSpec(f"cls{c}_{j:02d}", size, size, regions,
                                            int(rng.integers(0, 2**62)), label=c))
    return specs


def segmentation_slide_specs(n_slides: int, rng: SeededRng, size: int = 1024, background_cls=0, tumor_cls=1):
    """Large two-class tissue: a background class with one tumour focus."""
    specs = []
    for j in range(n_slides):
        b, o = _attrs(rng)
        host = Region(background_cls, b, o, ellipse=(size / 2, size / 2, 0.46 * size, 0.42 * size))
        rx = float(rng.uniform(0.18, 0.28)) * size
        ry = float(rng.uniform(0.18, 0.28)) * size
        cx = size / 2 + float(rng.uniform(-0.12, 0.12)) * size
        cy = size / 2 + float(rng.uniform(-0.1, 0.1)) * size
        b, o = _attrs(rng)
        specs.append(SyntheticSlideSpec(f"seg_{j:02d}", size, size,
                                        [host, Region(tumor_cls, b, o, ellipse=(cx, cy, rx, ry))],
                                        int(rng.integers(0, 2**62)), label=None))
    return specs


@dataclass
class SyntheticCorpus:
    prompt_set: PromptSet
    train_images: np.ndarray
    train_captions: list
    train_labels: np.ndarray
    test_images: np.ndarray
    test_captions: list
    test_labels: np.ndarray
    slides: list  # (spec, raster, truth)

    @property
    def slide_labels(self):
        return [spec.label for spec, _, _ in self.slides]


def generate_synthetic_corpus(specs, vocab: PromptSet, rng: SeededRng, pairs_per_class: int = 250,
                              heldout_per_class: int = 50, out_side: int = 32) -> SyntheticCorpus:
    """Render slides for ``specs`` and draw image-caption pairs over ``vocab``.

    Training and held-out pairs come from independent child streams, so
    changing one count does not perturb the other set.
    """
    n_classes = len(vocab.classes)
    if n_classes < 1:
        raise InvalidArgumentError("vocabulary needs at least one class")
    tr = generate_pairs(vocab, pairs_per_class, rng.child(1), out_side)
    te = generate_pairs(vocab, heldout_per_class, rng.child(2), out_side, partial_prob=0.0, mix_prob=0.0)
    slides = []
    for spec in specs:
        raster, truth = render_slide(spec, n_classes)
        slides.append((spec, raster, truth))
    return SyntheticCorpus(vocab, tr[0], tr[1], tr[2], te[0], te[1], te[2], slides)


def bag_prototypes(n_classes: int, rng: SeededRng, dim: int = 32, signal: float = 1.5) -> np.ndarray:
    """Random class directions of length ``signal``."""
    protos = rng.normal(size=(n_classes, dim))
    return protos * (signal / np.linalg.norm(protos, axis=1, keepdims=True))


def gaussian_bags(n_per_class: int, prototypes, rng: SeededRng, n_instances=(10, 30), key_fraction: float = 0.25):
    """Bags of unit-variance Gaussian instances in which a ``key_fraction``
    of the instances is shifted by the class prototype. Returns (bags, labels)."""
    protos = np.asarray(prototypes, dtype=np.float64)
    n_classes, dim = protos.shape
    bags, labels = [], []
    for c in range(n_classes):
        for _ in range(n_per_class):
            n = int(rng.integers(n_instances[0], n_instances[1] + 1))
            x = rng.normal(size=(n, dim))
            k = max(1, int(round(key_fraction * n)))
            x[:k] += protos[c]
            bags.append(x[rng.permutation(n)])
            labels.append(c)
    order = rng.permutation(len(bags))
    return [bags[i] for i in order], np.array(labels)[order]
