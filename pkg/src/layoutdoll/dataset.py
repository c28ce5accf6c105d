"""Procedural doll corpus and the data-preparation protocol.

Each sample is a stylized figure drawn from seeded categorical attributes,
with pixel-exact part labels. Reference crops are extracted through a
dual-segmenter cross-validation step (ground truth vs a seeded morphological
perturbation of it, accepted when the mask SSIM clears 0.75 with the smaller
mask kept), then augmented and packed into a fixed reference-sheet grid.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import CapacityError, ContractViolation, EmptyRegionError, VocabularyError
from .layout import COMPONENTS, Z_ORDER, EllipseParams, LayoutSpec, PlacedShape, RectParams, fit_layout
from .metrics import ssim

TEXT = "TEXT"
IMAGE = "IMAGE"
TEXT_ONLY = "TEXT_ONLY"
IMAGE_ONLY = "IMAGE_ONLY"
MIXED = "MIXED"

SSIM_ACCEPT_THRESHOLD = 0.75
MIXED_IMAGE_PROB = 0.5

# attribute color vocabulary: every value sits on a 60-spaced RGB lattice so
# all colors across all components stay at least 60 apart in L-inf distance,
# keeping nearest-color detection unambiguous
ATTR_COLORS = {
    "hair": {"midnight": (15, 15, 15), "cocoa": (75, 15, 15),
             "golden": (255, 195, 75), "silver": (195, 195, 195)},
    "face": {"porcelain": (255, 195, 135), "tan": (195, 135, 75),
             "umber": (135, 75, 75)},
    "top": {"scarlet": (255, 75, 75), "azure": (75, 135, 255),
            "emerald": (75, 195, 75), "sunflower": (255, 255, 75),
            "violet": (195, 75, 255), "tangerine": (255, 135, 15)},
    "bottom": {"navy": (15, 15, 135), "slate": (75, 75, 75),
               "khaki": (195, 195, 135), "maroon": (135, 15, 75)},
    "dress": {"rose": (255, 135, 195), "teal": (15, 135, 135),
              "indigo": (75, 15, 195), "lime": (135, 255, 75)},
    "shoes": {"onyx": (15, 15, 75), "cinnamon": (135, 75, 15),
              "snow": (255, 255, 195)},
    "hat": {"plum": (135, 15, 195), "sky": (135, 195, 255),
            "moss": (15, 75, 15)},
    "bag": {"sand": (255, 195, 195), "ocean": (15, 195, 255),
            "forest": (15, 135, 15)},
}

# per-component attribute slots, in sentence order; first slot is always the
# color. Sentences read "a <values...> <component>".
ATTR_SCHEMA = {
    "hair": (("color", tuple(ATTR_COLORS["hair"])), ("style", ("short", "long"))),
    "face": (("skin_tone", tuple(ATTR_COLORS["face"])),
             ("expression", ("smiling", "neutral", "surprised"))),
    "top": (("color", tuple(ATTR_COLORS["top"])),
            ("sleeve", ("short-sleeve", "long-sleeve")),
            ("garment", ("tee", "shirt", "sweater"))),
    "bottom": (("color", tuple(ATTR_COLORS["bottom"])),
               ("length", ("short", "long")),
               ("garment", ("pants", "skirt"))),
    "dress": (("color", tuple(ATTR_COLORS["dress"])),
              ("length", ("short", "long")),
              ("cut", ("plain", "flared"))),
    "shoes": (("color", tuple(ATTR_COLORS["shoes"])),
              ("style", ("sneakers", "boots"))),
    "hat": (("color", tuple(ATTR_COLORS["hat"])), ("style", ("cap", "beanie"))),
    "bag": (("color", tuple(ATTR_COLORS["bag"])), ("style", ("tote", "backpack"))),
}

# detection palette: component -> candidate RGB values it may appear with
DETECTION_PALETTE = {comp: list(ATTR_COLORS[comp].values()) for comp in COMPONENTS}

_EYE_COLOR = (15, 15, 15)


@dataclass
class Sample:
    seed: int
    image: np.ndarray   # uint8 (H, W, 3)
    labels: np.ndarray  # uint8 (H, W), component ids, 0 background
    attrs: dict         # component -> {attr: value}
    layout: LayoutSpec


@dataclass
class CrossValidationOutcome:
    status: str               # "ACCEPTED" | "FLAGGED"
    chosen_mask: object       # bool mask or None
    ssim: float


# ---------------------------------------------------------------------------
# attributes and sentences
# ---------------------------------------------------------------------------

def sample_attrs(rng):
    """Draw a component set plus categorical attributes for each."""
    comps = ["hair", "face", "shoes"]
    if rng.random() < 0.3:
        comps.append("dress")
    else:
        comps.extend(["top", "bottom"])
    if rng.random() < 0.25:
        comps.append("hat")
    if rng.random() < 0.25:
        comps.append("bag")
    attrs = {}
    for comp in COMPONENTS:
        if comp not in comps:
            continue
        attrs[comp] = {name: values[rng.integers(len(values))]
                       for name, values in ATTR_SCHEMA[comp]}
    return attrs


def attr_color(comp, attrs):
    color_slot = ATTR_SCHEMA[comp][0][0]
    return ATTR_COLORS[comp][attrs[comp][color_slot]]


def attrs_to_sentences(attrs):
    """Template sentences plus token spans over the canonical concatenation.

    Returns (sentences: comp -> str, spans: comp -> (start, end)).
    """
    sentences = {}
    spans = {}
    cursor = 0
    for comp in COMPONENTS:
        if comp not in attrs:
            continue
        values = []
        for name, allowed in ATTR_SCHEMA[comp]:
            v = attrs[comp].get(name)
            if v not in allowed:
                raise VocabularyError(f"{comp}.{name}: unknown value {v!r}")
        values = [attrs[comp][name] for name, _ in ATTR_SCHEMA[comp]]
        tokens = ["a"] + values + [comp]
        sentences[comp] = " ".join(tokens)
        spans[comp] = (cursor, cursor + len(tokens))
        cursor += len(tokens)
    return sentences, spans


def parse_sentence(sentence):
    """Inverse of the templater: sentence -> (component, attrs)."""
    tokens = sentence.split()
    if len(tokens) < 3 or tokens[0] != "a":
        raise VocabularyError(f"not a template sentence: {sentence!r}")
    comp = tokens[-1]
    if comp not in ATTR_SCHEMA:
        raise VocabularyError(f"unknown component {comp!r}")
    schema = ATTR_SCHEMA[comp]
    values = tokens[1:-1]
    if len(values) != len(schema):
        raise VocabularyError(f"wrong arity for {comp!r}: {sentence!r}")
    out = {}
    for (name, allowed), v in zip(schema, values):
        if v not in allowed:
            raise VocabularyError(f"{comp}.{name}: unknown value {v!r}")
        out[name] = v
    return comp, out


# ---------------------------------------------------------------------------
# doll drawing
# ---------------------------------------------------------------------------

def _doll_shapes(rng, attrs, size):
    """Place one geometric shape per component; returns {comp: PlacedShape}."""
    W, H = size
    cx = W * (0.5 + rng.uniform(-0.03, 0.03))
    shapes = {}

    face_a = W * rng.uniform(0.10, 0.13)
    face_b = H * rng.uniform(0.075, 0.095)
    face_cy = H * rng.uniform(0.155, 0.175)
    shapes["face"] = PlacedShape("face", "ellipse",
                                 EllipseParams((cx, face_cy), (face_a, face_b)))

    hair_b = face_b * (0.55 if attrs["hair"]["style"] == "short" else 0.75)
    hair_a = face_a * (1.25 if attrs["hair"]["style"] == "short" else 1.5)
    shapes["hair"] = PlacedShape("hair", "ellipse", EllipseParams(
        (cx, face_cy - 0.75 * face_b), (hair_a, hair_b)))

    if "hat" in attrs:
        hat_b = H * (0.030 if attrs["hat"]["style"] == "cap" else 0.048)
        shapes["hat"] = PlacedShape("hat", "ellipse", EllipseParams(
            (cx, face_cy - 1.35 * face_b), (face_a * 1.15, hat_b)))

    if "dress" in attrs:
        dw = W * rng.uniform(0.34, 0.40) * (1.15 if attrs["dress"]["cut"] == "flared" else 1.0)
        dh = H * rng.uniform(0.28, 0.32) * (1.15 if attrs["dress"]["length"] == "long" else 1.0)
        shapes["dress"] = PlacedShape("dress", "rect", RectParams(
            (cx, H * 0.48), (dw, dh), rng.uniform(-0.03, 0.03)))
    else:
        tw = W * rng.uniform(0.34, 0.42) * (1.18 if attrs["top"]["sleeve"] == "long-sleeve" else 1.0)
        th = H * rng.uniform(0.17, 0.21)
        shapes["top"] = PlacedShape("top", "rect", RectParams(
            (cx, H * rng.uniform(0.385, 0.405)), (tw, th), rng.uniform(-0.04, 0.04)))
        if attrs["bottom"]["garment"] == "skirt":
            bw = W * rng.uniform(0.34, 0.42)
            bh = H * rng.uniform(0.10, 0.13)
        else:
            bw = W * rng.uniform(0.22, 0.28)
            bh = H * rng.uniform(0.15, 0.18)
        if attrs["bottom"]["length"] == "long":
            bh *= 1.25
        shapes["bottom"] = PlacedShape("bottom", "rect", RectParams(
            (cx, H * 0.585), (bw, bh), rng.uniform(-0.03, 0.03)))

    sw = W * rng.uniform(0.26, 0.32)
    sh = H * (0.040 if attrs["shoes"]["style"] == "sneakers" else 0.065)
    shapes["shoes"] = PlacedShape("shoes", "rect", RectParams(
        (cx, H * 0.80), (sw, sh), 0.0))

    if "bag" in attrs:
        side = -1.0 if rng.random() < 0.5 else 1.0
        bag_cy = H * (0.52 if attrs["bag"]["style"] == "tote" else 0.42)
        shapes["bag"] = PlacedShape("bag", "rect", RectParams(
            (cx + side * W * 0.30, bag_cy),
            (W * rng.uniform(0.10, 0.14), H * rng.uniform(0.09, 0.12)),
            rng.uniform(-0.05, 0.05)))
    return shapes


def _texture(img, mask, comp, attrs, base):
    """Cheap in-place garment texture; keeps region mean near the base color."""
    ys, xs = np.nonzero(mask)
    if comp == "top" and attrs["top"]["garment"] == "sweater":
        rows = (ys % 6) < 2
        img[ys[rows], xs[rows]] = np.clip(np.array(base) - 20, 0, 255)
    elif comp == "top" and attrs["top"]["garment"] == "shirt":
        cols = (xs % 8) < 2
        img[ys[cols], xs[cols]] = np.clip(np.array(base) - 12, 0, 255)
    elif comp == "bottom" and attrs["bottom"]["garment"] == "skirt":
        rows = (ys % 8) < 2
        img[ys[rows], xs[rows]] = np.clip(np.array(base) - 16, 0, 255)
    elif comp == "dress" and attrs["dress"]["cut"] == "flared":
        rows = (ys % 7) < 2
        img[ys[rows], xs[rows]] = np.clip(np.array(base) - 16, 0, 255)


def _face_marks(img, shapes, attrs):
    face = shapes["face"].params
    cx, cy = face.center
    a, b = face.axes
    for sx in (-1, 1):
        ex, ey = int(round(cx + sx * 0.40 * a)), int(round(cy - 0.05 * b))
        img[ey, ex] = _EYE_COLOR
    my = int(round(cy + 0.45 * b))
    expr = attrs["face"]["expression"]
    if expr == "smiling":
        img[my, int(cx - 0.30 * a):int(cx + 0.30 * a) + 1] = _EYE_COLOR
    elif expr == "neutral":
        img[my, int(cx - 0.12 * a):int(cx + 0.12 * a) + 1] = _EYE_COLOR
    else:  # surprised
        img[my - 1:my + 1, int(cx):int(cx) + 1] = _EYE_COLOR


def generate_doll(seed, size=(64, 96), palette=None):
    """Deterministic doll sample: image, labels and the drawn attributes."""
    from .layout import DEFAULT_PALETTE
    palette = palette or DEFAULT_PALETTE
    W, H = size
    if W < 32 or H < 48:
        raise ContractViolation(f"size {size} below the 32x48 minimum")
    rng = np.random.default_rng((int(seed), 0))
    attrs = sample_attrs(rng)
    shapes = _doll_shapes(rng, attrs, size)

    xs, ys = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    labels = np.zeros((H, W), dtype=np.uint8)
    for comp in Z_ORDER:
        if comp in shapes:
            labels[shapes[comp].contains(xs, ys)] = palette.component_id(comp)

    img = np.full((H, W, 3), 255, dtype=np.uint8)
    for comp in attrs:
        mask = labels == palette.component_id(comp)
        base = attr_color(comp, attrs)
        img[mask] = base
        _texture(img, mask, comp, attrs, base)
    _face_marks(img, shapes, attrs)

    layout = fit_layout(labels, palette)
    return Sample(seed=int(seed), image=img, labels=labels, attrs=attrs,
                  layout=layout)


# ---------------------------------------------------------------------------
# dual-segmenter cross validation
# ---------------------------------------------------------------------------

def perturb_mask(mask, rng):
    """Synthetic second segmenter: translate plus dilate/erode, seeded.

    A small fraction of draws are heavy corruptions so the accept/flag
    branch both get exercised on real corpora.
    """
    out = mask
    if rng.random() < 0.04:  # heavy corruption -> should be flagged
        dx, dy = rng.integers(-10, 11, size=2)
        out = np.roll(np.roll(out, int(dy), axis=0), int(dx), axis=1)
        out = ndimage.binary_dilation(out, iterations=4)
    else:
        dx, dy = rng.integers(-1, 2, size=2)
        out = np.roll(np.roll(out, int(dy), axis=0), int(dx), axis=1)
        op = rng.integers(3)
        if op == 1:
            out = ndimage.binary_dilation(out)
        elif op == 2:
            out = ndimage.binary_erosion(out)
    return out


def cross_validate_masks(mask_a, mask_b):
    """Accept when the mask SSIM clears the threshold, keeping the smaller
    mask (ties go to `mask_a`); otherwise flag with no mask."""
    if mask_a.shape != mask_b.shape:
        raise ContractViolation(
            f"mask shapes differ: {mask_a.shape} vs {mask_b.shape}")
    score = ssim(mask_a.astype(np.float64), mask_b.astype(np.float64))
    if score > SSIM_ACCEPT_THRESHOLD:
        chosen = mask_b if mask_b.sum() < mask_a.sum() else mask_a
        return CrossValidationOutcome("ACCEPTED", chosen, score)
    return CrossValidationOutcome("FLAGGED", None, score)


def validate_sample_masks(sample, palette=None):
    """Run the protocol over every component. Returns (outcomes, all_ok)."""
    from .layout import DEFAULT_PALETTE
    palette = palette or DEFAULT_PALETTE
    outcomes = {}
    ok = True
    for comp in sample.attrs:
        gt = sample.labels == palette.component_id(comp)
        rng = np.random.default_rng((sample.seed, 1, palette.component_id(comp)))
        other = perturb_mask(gt, rng)
        outcome = cross_validate_masks(gt, other)
        outcomes[comp] = outcome
        ok = ok and outcome.status == "ACCEPTED"
    return outcomes, ok


# ---------------------------------------------------------------------------
# reference crops and sheets
# ---------------------------------------------------------------------------

def extract_reference(image, mask):
    """Tight crop of the masked pixels, white outside the mask."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise EmptyRegionError("cannot extract a reference from an empty mask")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = np.full((y1 - y0, x1 - x0, 3), 255, dtype=np.uint8)
    sub = mask[y0:y1, x0:x1]
    crop[sub] = image[y0:y1, x0:x1][sub]
    return crop


def _rotate(img, degrees):
    pil = Image.fromarray(img).rotate(degrees, resample=Image.BILINEAR,
                                      expand=True, fillcolor=(255, 255, 255))
    return np.asarray(pil)


def _scale(img, factor):
    h, w = img.shape[:2]
    nw, nh = max(1, int(round(w * factor))), max(1, int(round(h * factor)))
    return np.asarray(Image.fromarray(img).resize((nw, nh), Image.BILINEAR))


def apply_augment(crop, degrees, flip, factor):
    """rotate -> scale -> optional horizontal flip, white fill throughout."""
    out = _rotate(crop, degrees)
    out = _scale(out, factor)
    if flip:
        out = out[:, ::-1].copy()
    return out


def augment_reference(crop, seed):
    if crop.size == 0:
        raise EmptyRegionError("empty crop")
    rng = np.random.default_rng(seed)
    degrees = rng.uniform(-15.0, 15.0)
    flip = rng.random() < 0.5
    factor = rng.uniform(0.8, 1.2)
    return apply_augment(crop, degrees, flip, factor)


def sheet_cells(size):
    """Canonical grid: 2 columns x 4 rows in component order, row-major."""
    W, H = size
    cw, ch = W // 2, H // 4
    cells = {}
    for i, comp in enumerate(COMPONENTS):
        r, c = divmod(i, 2)
        cells[comp] = (c * cw, r * ch, cw, ch)
    return cells


def compose_reference_sheet(refs, size):
    """Place crops into their fixed cells, aspect-preserving downscale."""
    W, H = size
    cells = sheet_cells(size)
    if len(refs) > len(cells):
        raise CapacityError(f"{len(refs)} crops exceed the {len(cells)}-cell grid")
    sheet = np.full((H, W, 3), 255, dtype=np.uint8)
    for comp, crop in refs.items():
        if comp not in cells:
            raise CapacityError(f"no sheet cell for component {comp!r}")
        x, y, cw, ch = cells[comp]
        h, w = crop.shape[:2]
        f = min(cw / w, ch / h, 1.0)
        nw, nh = max(1, int(w * f)), max(1, int(h * f))
        if (nw, nh) != (w, h):
            crop = np.asarray(Image.fromarray(crop).resize((nw, nh), Image.NEAREST))
        ox = x + (cw - nw) // 2
        oy = y + (ch - nh) // 2
        sheet[oy:oy + nh, ox:ox + nw] = crop
    return sheet


def build_reference_sheet(sample, palette=None, augment=True):
    """Protocol path from a sample to its conditioning sheet."""
    outcomes, ok = validate_sample_masks(sample, palette)
    refs = {}
    for comp, outcome in outcomes.items():
        if outcome.status != "ACCEPTED":
            continue
        crop = extract_reference(sample.image, outcome.chosen_mask)
        if augment:
            crop = augment_reference(crop, (sample.seed, 2, COMPONENTS.index(comp)))
        refs[comp] = crop
    H, W = sample.image.shape[:2]
    return compose_reference_sheet(refs, (W, H)), refs, outcomes


# ---------------------------------------------------------------------------
# drop masks
# ---------------------------------------------------------------------------

def sample_drop_mask(components, mode, seed):
    """Per-component modality selector; MIXED flips a fair coin per component."""
    components = list(components)
    if not components:
        raise ContractViolation("drop mask needs at least one component")
    if mode == TEXT_ONLY:
        return {c: TEXT for c in components}
    if mode == IMAGE_ONLY:
        return {c: IMAGE for c in components}
    if mode != MIXED:
        raise ContractViolation(f"unknown drop mode {mode!r}")
    rng = np.random.default_rng(seed)
    return {c: (IMAGE if rng.random() < MIXED_IMAGE_PROB else TEXT)
            for c in components}


# ---------------------------------------------------------------------------
# corpus I/O
# ---------------------------------------------------------------------------

def _label_palette():
    from .layout import DEFAULT_PALETTE
    flat = [255, 255, 255]
    for comp in COMPONENTS:
        flat.extend(DEFAULT_PALETTE.color(comp))
    return flat


_LABEL_PALETTE = _label_palette()


def save_png(path, array):
    if array.ndim == 2:
        img = Image.fromarray(array, mode="P")
        img.putpalette(_LABEL_PALETTE + [0] * (768 - len(_LABEL_PALETTE)))
    else:
        img = Image.fromarray(array, mode="RGB")
    img.save(path, format="PNG")


def load_png(path):
    img = Image.open(path)
    if img.mode == "P":
        return np.asarray(img).astype(np.uint8)
    return np.asarray(img.convert("RGB"))


def generate_corpus(out_dir, n, seed, size=(64, 96)):
    """Write n ACCEPTED samples plus a JSONL manifest. Samples whose
    cross-validation flags any component are dropped (and counted); seeds
    advance deterministically until n samples pass."""
    from .layout import layout_to_json
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    (out / "layouts").mkdir(exist_ok=True)
    records = []
    flagged = []
    next_seed = int(seed)
    while len(records) < n:
        sample = generate_doll(next_seed, size)
        _, ok = validate_sample_masks(sample)
        if not ok:
            flagged.append(next_seed)
            next_seed += 1
            continue
        stem = f"{sample.seed:012d}"
        save_png(out / "images" / f"{stem}.png", sample.image)
        save_png(out / "labels" / f"{stem}.png", sample.labels)
        (out / "layouts" / f"{stem}.json").write_text(layout_to_json(sample.layout))
        records.append({
            "seed": sample.seed,
            "image": f"images/{stem}.png",
            "labels": f"labels/{stem}.png",
            "attrs": sample.attrs,
            "layout": f"layouts/{stem}.json",
        })
        next_seed += 1
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest, {"accepted": len(records), "flagged": len(flagged),
                      "flagged_seeds": flagged}


def load_manifest(manifest_path):
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = []
    with open(manifest_path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rec["_root"] = root
                records.append(rec)
    return records


def load_sample(record):
    from .layout import layout_from_json
    root = record["_root"]
    return Sample(
        seed=record["seed"],
        image=load_png(root / record["image"]),
        labels=load_png(root / record["labels"]),
        attrs=record["attrs"],
        layout=layout_from_json((root / record["layout"]).read_text()),
    )
