import json
import math
from pathlib import Path

import numpy as np
import pytest

from layoutdoll.errors import EmptyRegionError, LayoutParseError, UnknownColorError
from layoutdoll.layout import (
    COMPONENTS,
    DEFAULT_PALETTE,
    EllipseParams,
    LayoutSpec,
    PlacedShape,
    RectParams,
    corners_from_rect,
    fit_ellipse,
    fit_layout,
    fit_rect,
    layout_from_json,
    layout_to_json,
    masks_from_layout,
    rasterize,
)

FIXTURES = Path(__file__).resolve().parent.parent / "docs" / "fixtures"


def blank(w=64, h=96):
    return np.zeros((h, w), dtype=bool)


def ellipse_shape(component, cx, cy, a, b):
    return PlacedShape(component, "ellipse", EllipseParams((cx, cy), (a, b)))


def rect_shape(component, cx, cy, w, h, theta=0.0):
    return PlacedShape(component, "rect", RectParams((cx, cy), (w, h), theta))


# ---------------------------------------------------------------------------
# fit_ellipse
# ---------------------------------------------------------------------------

def test_fit_ellipse_bbox_formulas():
    region = blank(32, 32)
    region[4:17, 2:11] = True  # bbox x 2..10, y 4..16
    e = fit_ellipse(region)
    assert e.center == (6.0, 10.0)
    assert e.axes == (4.0, 6.0)


def test_fit_ellipse_single_pixel_clamped():
    region = blank(16, 16)
    region[5, 5] = True
    e = fit_ellipse(region)
    assert e.center == (5.0, 5.0)
    assert e.axes == (0.5, 0.5)


def test_fit_ellipse_empty_region():
    with pytest.raises(EmptyRegionError):
        fit_ellipse(blank())


def test_fit_ellipse_roundtrip_through_rasterizer():
    layout = LayoutSpec((128, 96), [ellipse_shape("face", 64, 48, 30, 20)])
    img = rasterize(layout)
    masks = masks_from_layout(img)
    e = fit_ellipse(masks["face"])
    assert abs(e.center[0] - 64) <= 1 and abs(e.center[1] - 48) <= 1
    assert abs(e.axes[0] - 30) / 30 <= 0.05
    assert abs(e.axes[1] - 20) / 20 <= 0.05


def test_ellipse_refit_iou_property():
    # integer-parameter ellipses: the lattice-exact family for the bbox fit
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = int(rng.integers(3, 25)), int(rng.integers(3, 25))
        cx = int(rng.integers(a + 1, 127 - a))
        cy = int(rng.integers(b + 1, 95 - b))
        first = rasterize(LayoutSpec((128, 96), [ellipse_shape("face", cx, cy, a, b)]))
        refit = fit_ellipse(masks_from_layout(first)["face"])
        second = rasterize(LayoutSpec((128, 96),
                                      [PlacedShape("face", "ellipse", refit)]))
        m1 = (first != 255).any(axis=2)
        m2 = (second != 255).any(axis=2)
        iou = np.logical_and(m1, m2).sum() / np.logical_or(m1, m2).sum()
        assert iou >= 0.90


# ---------------------------------------------------------------------------
# fit_rect
# ---------------------------------------------------------------------------

def test_fit_rect_axis_aligned():
    region = blank(64, 96)
    region[10:51, 10:31] = True  # x extent 20, y extent 40
    r = fit_rect(region)
    assert r.center[0] == pytest.approx(20, abs=0.5)
    assert r.center[1] == pytest.approx(30, abs=0.5)
    assert abs(r.size[0] - 20) <= 1
    assert abs(r.size[1] - 40) <= 1
    assert abs(r.theta) <= 0.05


def test_fit_rect_rotated_30_degrees():
    layout = LayoutSpec((96, 96), [rect_shape("top", 48, 48, 20, 40, math.pi / 6)])
    img = rasterize(layout)
    r = fit_rect(masks_from_layout(img)["top"])
    dt = (r.theta - math.pi / 6 + math.pi / 4) % (math.pi / 2) - math.pi / 4
    assert abs(dt) <= 0.05
    assert abs(r.size[0] - 20) <= 2
    assert abs(r.size[1] - 40) <= 2


def test_fit_rect_square_tie_breaks_to_zero():
    region = blank(32, 32)
    region[8:25, 8:25] = True
    assert fit_rect(region).theta == 0.0


def test_fit_rect_empty_region():
    with pytest.raises(EmptyRegionError):
        fit_rect(blank())


def test_corner_reconstruction_distances():
    rng = np.random.default_rng(3)
    for _ in range(50):
        r = RectParams(center=(rng.uniform(0, 64), rng.uniform(0, 96)),
                       size=(rng.uniform(1, 40), rng.uniform(1, 40)),
                       theta=rng.uniform(-math.pi / 2, math.pi / 2))
        corners = corners_from_rect(r)
        d = math.sqrt(r.size[0] ** 2 + r.size[1] ** 2) / 2
        dist = np.hypot(corners[:, 0] - r.center[0], corners[:, 1] - r.center[1])
        assert np.abs(dist - d).max() < 1e-6
        # equal diagonals -> parallelogram is a rectangle
        d1 = np.hypot(*(corners[0] - corners[2]))
        d2 = np.hypot(*(corners[1] - corners[3]))
        assert abs(d1 - d2) < 1e-6


# ---------------------------------------------------------------------------
# fit_layout
# ---------------------------------------------------------------------------

def test_fit_layout_round_region_prefers_ellipse():
    img = rasterize(LayoutSpec((64, 96), [ellipse_shape("face", 32, 30, 12, 14)]))
    masks = masks_from_layout(img)
    labels = np.zeros((96, 64), dtype=np.uint8)
    labels[masks["face"]] = DEFAULT_PALETTE.component_id("face")
    spec = fit_layout(labels)
    assert [s.kind for s in spec.shapes] == ["ellipse"]


def test_fit_layout_bar_prefers_rect():
    labels = np.zeros((96, 64), dtype=np.uint8)
    labels[60:70, 8:56] = DEFAULT_PALETTE.component_id("bottom")
    spec = fit_layout(labels)
    assert [s.kind for s in spec.shapes] == ["rect"]


def test_fit_layout_empty_labels():
    assert fit_layout(np.zeros((48, 32), dtype=np.uint8)).shapes == []


def test_fit_layout_never_emits_absent_components():
    labels = np.zeros((96, 64), dtype=np.uint8)
    labels[10:20, 10:20] = DEFAULT_PALETTE.component_id("hat")
    spec = fit_layout(labels)
    assert spec.components() == ["hat"]


# ---------------------------------------------------------------------------
# rasterize / masks_from_layout
# ---------------------------------------------------------------------------

def test_rasterize_empty_layout_is_white():
    img = rasterize(LayoutSpec((32, 48)))
    assert img.shape == (48, 32, 3)
    assert (img == 255).all()


def test_rasterize_matches_point_in_ellipse_oracle():
    e = ellipse_shape("face", 20, 24, 9, 12)
    img = rasterize(LayoutSpec((40, 48), [e]))
    color = np.array(DEFAULT_PALETTE.color("face"), dtype=np.uint8)
    for y in range(48):
        for x in range(40):
            inside = ((x - 20) / 9) ** 2 + ((y - 24) / 12) ** 2 <= 1.0
            assert (img[y, x] == color).all() == inside


def test_rasterize_z_order_hat_over_top():
    layout = LayoutSpec((40, 40), [
        rect_shape("top", 20, 20, 24, 24),
        ellipse_shape("hat", 20, 20, 6, 6),
    ])
    img = rasterize(layout)
    assert tuple(img[20, 20]) == DEFAULT_PALETTE.color("hat")
    assert tuple(img[10, 20]) == tuple(img[20, 10]) == DEFAULT_PALETTE.color("top")


def test_rasterize_skips_out_of_canvas_shape():
    warnings = []
    layout = LayoutSpec((32, 32), [ellipse_shape("face", 200, 200, 5, 5)])
    img = rasterize(layout, warn=warnings.append)
    assert (img == 255).all()
    assert len(warnings) == 1 and "face" in warnings[0]


def test_masks_roundtrip_equals_coverage():
    layout = LayoutSpec((64, 96), [ellipse_shape("face", 30, 40, 10, 13)])
    img = rasterize(layout)
    masks = masks_from_layout(img)
    color = np.array(DEFAULT_PALETTE.color("face"))
    expected = (img == color).all(axis=2)
    assert np.array_equal(masks["face"], expected)


def test_masks_disjoint_and_union_is_nonwhite():
    layout = LayoutSpec((64, 96), [
        ellipse_shape("face", 20, 20, 8, 8),
        rect_shape("top", 44, 60, 20, 30),
    ])
    img = rasterize(layout)
    masks = masks_from_layout(img)
    assert set(masks) == {"face", "top"}
    assert not (masks["face"] & masks["top"]).any()
    union = masks["face"] | masks["top"]
    assert np.array_equal(union, (img != 255).any(axis=2))


def test_masks_all_white_is_empty():
    img = np.full((16, 16, 3), 255, dtype=np.uint8)
    assert masks_from_layout(img) == {}


def test_masks_unknown_color_raises():
    img = np.full((8, 8, 3), 255, dtype=np.uint8)
    img[3, 3] = (100, 100, 100)
    with pytest.raises(UnknownColorError):
        masks_from_layout(img)


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def test_json_roundtrip_structural_equality():
    layout = LayoutSpec((64, 96), [
        ellipse_shape("face", 32.25, 20.5, 8.0, 9.5),
        rect_shape("top", 32.0, 48.0, 26.0, 22.0, 0.1),
    ])
    text = layout_to_json(layout)
    back = layout_from_json(text)
    assert back.canvas == layout.canvas
    assert len(back.shapes) == 2
    for a, b in zip(layout.shapes, back.shapes):
        assert (a.component, a.kind) == (b.component, b.kind)
        assert np.allclose(a.params.center, b.params.center)
    assert layout_to_json(back) == text


def test_json_negative_axis_names_field():
    doc = {"canvas": [32, 32], "shapes": [
        {"component": "face", "kind": "ellipse", "center": [5, 5], "axes": [-3, 2]}]}
    with pytest.raises(LayoutParseError) as e:
        layout_from_json(json.dumps(doc))
    assert "axes[0]" in str(e.value)


def test_json_malformed_and_unknown_component():
    with pytest.raises(LayoutParseError):
        layout_from_json("{not json")
    with pytest.raises(LayoutParseError) as e:
        layout_from_json(json.dumps({"canvas": [8, 8], "shapes": [
            {"component": "cape", "kind": "rect", "center": [1, 1], "size": [2, 2]}]}))
    assert "component" in str(e.value)


def test_json_golden_fixture():
    golden = (FIXTURES / "layout_384x512.json").read_bytes()
    spec = layout_from_json(golden)
    assert spec.canvas == (384, 512)
    assert layout_to_json(spec).encode() == golden.strip()


def test_palette_minimum_separation():
    names = DEFAULT_PALETTE.names
    assert list(names) == list(COMPONENTS)
    arr = np.array([DEFAULT_PALETTE.color(n) for n in names], dtype=np.int16)
    for i in range(len(arr)):
        for j in range(i + 1, len(arr)):
            assert np.abs(arr[i] - arr[j]).max() >= 32
