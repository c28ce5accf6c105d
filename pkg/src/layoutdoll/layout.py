"""Hand-drawn layouts: colored geometric shapes per figure component.

Pixels are treated as lattice points (x = column index, y = row index);
arrays are indexed [y, x]. A layout is an ordered set of at most one shape
(ellipse or rotated rectangle) per component, rasterized as flat color
blocks over white in a fixed z-order.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRegionError, LayoutParseError, UnknownColorError

# canonical component order: used for sheets, prompts and token spans
COMPONENTS = ("hair", "face", "top", "bottom", "dress", "shoes", "hat", "bag")

# drawing order, later entries painted over earlier ones
Z_ORDER = ("dress", "bottom", "top", "shoes", "face", "hair", "hat", "bag")

_DEFAULT_COLORS = {
    "hair": (150, 75, 0),
    "face": (255, 220, 180),
    "top": (230, 30, 30),
    "bottom": (30, 30, 230),
    "dress": (230, 30, 230),
    "shoes": (30, 230, 30),
    "hat": (230, 230, 30),
    "bag": (30, 230, 230),
}

MIN_AXIS = 0.5  # degenerate regions clamp their semi-axes/extents to this
COLOR_DECODE_TOL = 16  # L-inf tolerance when decoding a raster back to masks


@dataclass(frozen=True)
class ComponentPalette:
    """Ordered component_id -> (name, RGB). Ids start at 1; 0 is background."""

    colors: dict = field(default_factory=lambda: dict(_DEFAULT_COLORS))

    def __post_init__(self):
        names = list(self.colors)
        arr = np.array([self.colors[n] for n in names], dtype=np.int16)
        for i in range(len(arr)):
            for j in range(i + 1, len(arr)):
                d = np.abs(arr[i] - arr[j]).max()
                if d < 32:
                    raise ValueError(
                        f"palette colors for {names[i]} and {names[j]} too close ({d})")

    @property
    def names(self):
        return list(self.colors)

    def component_id(self, name):
        return self.names.index(name) + 1

    def name_of(self, cid):
        return self.names[cid - 1]

    def color(self, name):
        return self.colors[name]


DEFAULT_PALETTE = ComponentPalette()


@dataclass
class EllipseParams:
    center: tuple  # (x_c, y_c)
    axes: tuple    # (a, b) semi-axes, >= 0

    def contains(self, xs, ys):
        a = max(self.axes[0], MIN_AXIS)
        b = max(self.axes[1], MIN_AXIS)
        return ((xs - self.center[0]) / a) ** 2 + ((ys - self.center[1]) / b) ** 2 <= 1.0


@dataclass
class RectParams:
    center: tuple  # (x_r, y_r)
    size: tuple    # (w, h) full extents, >= 0
    theta: float   # radians in [-pi/2, pi/2)

    def contains(self, xs, ys):
        w = max(self.size[0], MIN_AXIS)
        h = max(self.size[1], MIN_AXIS)
        dx = xs - self.center[0]
        dy = ys - self.center[1]
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)


def corners_from_rect(rect: RectParams):
    """The four corners via center-to-corner bearings and distances.

    Every corner sits at distance d = sqrt(w^2 + h^2)/2 from the center at
    angle theta + alpha_i, where alpha_i are the corner bearings of the
    axis-aligned w-by-h box.
    """
    w, h = rect.size
    d = math.sqrt(w * w + h * h) / 2.0
    alphas = [math.atan2(sy * h, sx * w)
              for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1))]
    return np.array([
        (rect.center[0] + math.cos(rect.theta + a) * d,
         rect.center[1] + math.sin(rect.theta + a) * d)
        for a in alphas
    ])


@dataclass
class PlacedShape:
    component: str
    kind: str  # "ellipse" | "rect"
    params: object

    def contains(self, xs, ys):
        return self.params.contains(xs, ys)


@dataclass
class LayoutSpec:
    canvas: tuple  # (W, H)
    shapes: list = field(default_factory=list)

    def shape_for(self, component):
        for s in self.shapes:
            if s.component == component:
                return s
        return None

    def components(self):
        return [s.component for s in self.shapes]


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def fit_ellipse(region) -> EllipseParams:
    """Axis-aligned bounding-box fit: center at the box midpoint, semi-axes
    half the box extents."""
    ys, xs = np.nonzero(region)
    if xs.size == 0:
        raise EmptyRegionError("cannot fit an ellipse to an empty region")
    x_min, x_max = float(xs.min()), float(xs.max())
    y_min, y_max = float(ys.min()), float(ys.max())
    return EllipseParams(
        center=((x_min + x_max) / 2.0, (y_min + y_max) / 2.0),
        axes=(max((x_max - x_min) / 2.0, MIN_AXIS),
              max((y_max - y_min) / 2.0, MIN_AXIS)),
    )


def fit_rect(region) -> RectParams:
    """Orientation-aligned bounding rectangle from second central moments.

    theta is the principal-axis angle folded into [-pi/4, pi/4), so an
    axis-aligned region always reports theta ~ 0 with (w, h) its x/y extents;
    (w, h) are the extents along (theta, theta + pi/2). Square regions break
    the tie toward 0.
    """
    ys, xs = np.nonzero(region)
    if xs.size == 0:
        raise EmptyRegionError("cannot fit a rectangle to an empty region")
    xf = xs.astype(np.float64)
    yf = ys.astype(np.float64)
    cx, cy = float(xf.mean()), float(yf.mean())
    dx, dy = xf - cx, yf - cy
    mu20 = float((dx * dx).mean())
    mu02 = float((dy * dy).mean())
    mu11 = float((dx * dy).mean())
    if abs(mu11) < 1e-12 and abs(mu20 - mu02) < 1e-12:
        theta = 0.0
    else:
        theta = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    # fold into [-pi/4, pi/4): quarter-turn symmetry of a rectangle
    while theta >= math.pi / 4:
        theta -= math.pi / 2
    while theta < -math.pi / 4:
        theta += math.pi / 2
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    w = float(u.max() - u.min())
    h = float(v.max() - v.min())
    return RectParams(center=(cx, cy), size=(max(w, MIN_AXIS * 2), max(h, MIN_AXIS * 2)),
                      theta=theta)


def _shape_mask(shape: PlacedShape, size):
    W, H = size
    xs, ys = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    return shape.contains(xs, ys)


def fit_layout(labels, palette: ComponentPalette = DEFAULT_PALETTE) -> LayoutSpec:
    """Fit one shape per present component, keeping whichever of the two
    candidates (ellipse / rotated rect) has higher pixel IoU with the region.
    Ties go to the ellipse."""
    H, W = labels.shape
    spec = LayoutSpec(canvas=(W, H))
    for name in COMPONENTS:
        cid = palette.component_id(name)
        region = labels == cid
        if not region.any():
            continue
        candidates = [
            PlacedShape(name, "ellipse", fit_ellipse(region)),
            PlacedShape(name, "rect", fit_rect(region)),
        ]
        best, best_iou = None, -1.0
        for cand in candidates:
            m = _shape_mask(cand, (W, H))
            inter = float(np.logical_and(m, region).sum())
            union = float(np.logical_or(m, region).sum())
            iou = inter / union if union else 0.0
            if iou > best_iou:
                best, best_iou = cand, iou
        spec.shapes.append(best)
    return spec


# ---------------------------------------------------------------------------
# rasterization and mask decoding
# ---------------------------------------------------------------------------

def rasterize(layout: LayoutSpec, palette: ComponentPalette = DEFAULT_PALETTE,
              warn=None):
    """Flat color blocks over white, painted in the fixed z-order."""
    W, H = layout.canvas
    if W <= 0 or H <= 0:
        raise LayoutParseError("canvas", "canvas dims must be positive")
    img = np.full((H, W, 3), 255, dtype=np.uint8)
    xs, ys = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    order = {name: i for i, name in enumerate(Z_ORDER)}
    for shape in sorted(layout.shapes, key=lambda s: order[s.component]):
        mask = shape.contains(xs, ys)
        if not mask.any():
            if warn is not None:
                warn(f"shape for {shape.component!r} lies outside the canvas; skipped")
            continue
        img[mask] = palette.color(shape.component)
    return img


def masks_from_layout(raster, palette: ComponentPalette = DEFAULT_PALETTE):
    """Decode a palette-colored raster into one binary mask per component.

    Pixels must match a palette color or white within L-inf COLOR_DECODE_TOL.
    """
    H, W, _ = raster.shape
    img = raster.astype(np.int16)
    names = palette.names
    refs = np.array([palette.color(n) for n in names] + [(255, 255, 255)],
                    dtype=np.int16)
    # distance of every pixel to every reference color, L-inf over channels
    d = np.abs(img[:, :, None, :] - refs[None, None, :, :]).max(axis=3)
    nearest = d.argmin(axis=2)
    within = d.min(axis=2) <= COLOR_DECODE_TOL
    if not within.all():
        y, x = np.argwhere(~within)[0]
        raise UnknownColorError(
            f"pixel ({x},{y}) color {tuple(raster[y, x])} matches no palette color")
    out = {}
    for i, name in enumerate(names):
        m = (nearest == i)
        if m.any():
            out[name] = m
    return out


def labels_from_masks(masks, size, palette: ComponentPalette = DEFAULT_PALETTE):
    """Merge disjoint component masks into an id label map (0 = background)."""
    W, H = size
    labels = np.zeros((H, W), dtype=np.uint8)
    for name, m in masks.items():
        labels[m] = palette.component_id(name)
    return labels


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def layout_to_json(layout: LayoutSpec) -> str:
    shapes = []
    for s in layout.shapes:
        if s.kind == "ellipse":
            shapes.append({
                "component": s.component, "kind": "ellipse",
                "center": [round(float(v), 4) for v in s.params.center],
                "axes": [round(float(v), 4) for v in s.params.axes],
            })
        else:
            shapes.append({
                "component": s.component, "kind": "rect",
                "center": [round(float(v), 4) for v in s.params.center],
                "size": [round(float(v), 4) for v in s.params.size],
                "theta": round(float(s.params.theta), 6),
            })
    doc = {"canvas": [int(layout.canvas[0]), int(layout.canvas[1])], "shapes": shapes}
    return json.dumps(doc, separators=(",", ":"))


def _expect(cond, fieldpath, message):
    if not cond:
        raise LayoutParseError(fieldpath, message)


def layout_from_json(text) -> LayoutSpec:
    if isinstance(text, (str, bytes)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise LayoutParseError("$", f"malformed JSON: {e}") from e
    else:
        doc = text
    _expect(isinstance(doc, dict), "$", "document must be an object")
    canvas = doc.get("canvas")
    _expect(isinstance(canvas, list) and len(canvas) == 2, "canvas",
            "must be [W,H]")
    _expect(all(isinstance(v, (int, float)) and v > 0 for v in canvas), "canvas",
            "dims must be positive")
    shapes_doc = doc.get("shapes")
    _expect(isinstance(shapes_doc, list), "shapes", "must be a list")
    spec = LayoutSpec(canvas=(int(canvas[0]), int(canvas[1])))
    seen = set()
    for i, sd in enumerate(shapes_doc):
        base = f"shapes[{i}]"
        _expect(isinstance(sd, dict), base, "must be an object")
        comp = sd.get("component")
        _expect(comp in COMPONENTS, f"{base}.component",
                f"unknown component {comp!r}")
        _expect(comp not in seen, f"{base}.component",
                f"duplicate shape for {comp!r}")
        seen.add(comp)
        kind = sd.get("kind")
        _expect(kind in ("ellipse", "rect"), f"{base}.kind",
                f"kind must be 'ellipse' or 'rect', got {kind!r}")
        center = sd.get("center")
        _expect(isinstance(center, list) and len(center) == 2
                and all(isinstance(v, (int, float)) for v in center),
                f"{base}.center", "must be [x,y]")
        if kind == "ellipse":
            axes = sd.get("axes")
            _expect(isinstance(axes, list) and len(axes) == 2,
                    f"{base}.axes", "must be [a,b]")
            for j, v in enumerate(axes):
                _expect(isinstance(v, (int, float)) and v >= 0,
                        f"{base}.axes[{j}]", "must be non-negative")
            params = EllipseParams(center=(float(center[0]), float(center[1])),
                                   axes=(float(axes[0]), float(axes[1])))
        else:
            size = sd.get("size")
            _expect(isinstance(size, list) and len(size) == 2,
                    f"{base}.size", "must be [w,h]")
            for j, v in enumerate(size):
                _expect(isinstance(v, (int, float)) and v >= 0,
                        f"{base}.size[{j}]", "must be non-negative")
            theta = sd.get("theta", 0.0)
            _expect(isinstance(theta, (int, float)), f"{base}.theta",
                    "must be a number")
            # wrap into [-pi/2, pi/2): a rect is invariant under half turns
            t = float(theta)
            t = (t + math.pi / 2) % math.pi - math.pi / 2
            params = RectParams(center=(float(center[0]), float(center[1])),
                                size=(float(size[0]), float(size[1])), theta=t)
        spec.shapes.append(PlacedShape(comp, kind, params))
    return spec
