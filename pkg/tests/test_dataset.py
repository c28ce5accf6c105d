import json

import numpy as np
import pytest
from scipy import ndimage

from layoutdoll import dataset as ds
from layoutdoll.errors import CapacityError, ContractViolation, EmptyRegionError, VocabularyError
from layoutdoll.layout import COMPONENTS, DEFAULT_PALETTE
from layoutdoll.metrics import detect_components


def test_generate_doll_deterministic():
    a = ds.generate_doll(1234)
    b = ds.generate_doll(1234)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.labels, b.labels)
    assert a.attrs == b.attrs


def test_generate_doll_labels_nonempty_for_present_components():
    for seed in range(25):
        s = ds.generate_doll(seed)
        for comp in s.attrs:
            assert (s.labels == DEFAULT_PALETTE.component_id(comp)).any()


def test_generate_doll_mean_color_near_attribute():
    for seed in range(25):
        s = ds.generate_doll(seed)
        for comp in s.attrs:
            m = s.labels == DEFAULT_PALETTE.component_id(comp)
            mean = s.image[m].mean(axis=0)
            assert np.abs(mean - np.array(ds.attr_color(comp, s.attrs))).max() <= 24


def test_generate_doll_regions_connected():
    for seed in range(25):
        s = ds.generate_doll(seed)
        for comp in s.attrs:
            _, n = ndimage.label(s.labels == DEFAULT_PALETTE.component_id(comp))
            assert n == 1, (seed, comp)


def test_generate_doll_minimum_size():
    with pytest.raises(ContractViolation):
        ds.generate_doll(0, size=(16, 16))
    small = ds.generate_doll(0, size=(32, 48))
    assert small.image.shape == (48, 32, 3)


def test_attribute_colors_are_well_separated():
    pairs = [(comp, name, rgb) for comp, table in ds.ATTR_COLORS.items()
             for name, rgb in table.items()]
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            d = np.abs(np.array(pairs[i][2]) - np.array(pairs[j][2])).max()
            assert d >= 48, (pairs[i], pairs[j], d)
        # every color stays far from the white background too
        assert np.abs(np.array(pairs[i][2]) - 255).max() >= 48


# ---------------------------------------------------------------------------
# sentences
# ---------------------------------------------------------------------------

def test_sentences_roundtrip_through_parser():
    attrs = {"top": {"color": "scarlet", "sleeve": "short-sleeve", "garment": "tee"}}
    sentences, spans = ds.attrs_to_sentences(attrs)
    assert sentences["top"] == "a scarlet short-sleeve tee top"
    comp, parsed = ds.parse_sentence(sentences["top"])
    assert comp == "top" and parsed == attrs["top"]
    assert spans["top"] == (0, 5)


def test_sentences_differ_only_in_changed_token():
    a = {"top": {"color": "scarlet", "sleeve": "short-sleeve", "garment": "tee"}}
    b = {"top": {"color": "azure", "sleeve": "short-sleeve", "garment": "tee"}}
    sa, _ = ds.attrs_to_sentences(a)
    sb, _ = ds.attrs_to_sentences(b)
    ta, tb = sa["top"].split(), sb["top"].split()
    assert sum(x != y for x, y in zip(ta, tb)) == 1


def test_sentences_empty_and_spans_canonical_order():
    assert ds.attrs_to_sentences({}) == ({}, {})
    attrs = {
        "face": {"skin_tone": "tan", "expression": "neutral"},
        "hair": {"color": "golden", "style": "long"},
    }
    _, spans = ds.attrs_to_sentences(attrs)
    assert spans["hair"] == (0, 4)  # hair precedes face canonically
    assert spans["face"] == (4, 8)


def test_sentences_unknown_value_rejected():
    with pytest.raises(VocabularyError):
        ds.attrs_to_sentences({"top": {"color": "mauve", "sleeve": "short-sleeve",
                                       "garment": "tee"}})


# ---------------------------------------------------------------------------
# cross validation
# ---------------------------------------------------------------------------

def test_cross_validation_identical_masks():
    m = np.zeros((64, 64), bool)
    m[10:50, 12:40] = True
    out = ds.cross_validate_masks(m, m.copy())
    assert out.status == "ACCEPTED"
    assert out.ssim == pytest.approx(1.0)
    assert out.chosen_mask.sum() == m.sum()


def test_cross_validation_eroded_smaller_mask_wins():
    m = np.zeros((64, 64), bool)
    m[16:48, 16:48] = True
    eroded = ndimage.binary_erosion(m)
    out = ds.cross_validate_masks(m, eroded)
    assert out.status == "ACCEPTED" and out.ssim > 0.75
    assert out.chosen_mask.sum() == eroded.sum()


def test_cross_validation_disjoint_flagged():
    a = np.zeros((64, 64), bool)
    b = np.zeros((64, 64), bool)
    a[4:25, 4:25] = True
    b[40:61, 40:61] = True
    out = ds.cross_validate_masks(a, b)
    assert out.status == "FLAGGED" and out.ssim <= 0.75
    assert out.chosen_mask is None


def test_cross_validation_size_mismatch():
    with pytest.raises(ContractViolation):
        ds.cross_validate_masks(np.zeros((4, 4), bool), np.zeros((5, 5), bool))


def test_accepted_chosen_mask_never_larger():
    m = np.zeros((48, 48), bool)
    m[8:40, 8:40] = True
    for seed in range(30):
        other = ds.perturb_mask(m, np.random.default_rng(seed))
        out = ds.cross_validate_masks(m, other)
        if out.status == "ACCEPTED":
            assert out.chosen_mask.sum() <= max(m.sum(), other.sum())
            assert out.chosen_mask.sum() == min(m.sum(), other.sum())


# ---------------------------------------------------------------------------
# reference crops and sheets
# ---------------------------------------------------------------------------

def test_extract_reference_full_mask_is_identity():
    s = ds.generate_doll(5)
    full = np.ones(s.labels.shape, bool)
    assert np.array_equal(ds.extract_reference(s.image, full), s.image)


def test_extract_reference_block():
    img = np.arange(8 * 8 * 3, dtype=np.uint8).reshape(8, 8, 3)
    mask = np.zeros((8, 8), bool)
    mask[2:7, 1:6] = True
    crop = ds.extract_reference(img, mask)
    assert crop.shape == (5, 5, 3)
    assert np.array_equal(crop, img[2:7, 1:6])


def test_extract_reference_nonwhite_pixels_match_source():
    s = ds.generate_doll(7)
    comp = "top" if "top" in s.attrs else "dress"
    mask = s.labels == DEFAULT_PALETTE.component_id(comp)
    crop = ds.extract_reference(s.image, mask)
    ys, xs = np.nonzero(mask)
    sub = s.image[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    inside = mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    assert np.array_equal(crop[inside], sub[inside])
    assert (crop[~inside] == 255).all()


def test_extract_reference_empty_mask():
    with pytest.raises(EmptyRegionError):
        ds.extract_reference(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 4), bool))


def test_augment_identity_parameters():
    crop = ds.generate_doll(11).image[10:40, 10:40]
    assert np.array_equal(ds.apply_augment(crop, 0.0, False, 1.0), crop)


def test_augment_deterministic():
    crop = ds.generate_doll(11).image[10:40, 10:40]
    assert np.array_equal(ds.augment_reference(crop, 42), ds.augment_reference(crop, 42))


def test_augment_flip_rotate_roundtrip():
    crop = ds.generate_doll(13).image[20:70, 10:50]
    fwd = ds.apply_augment(crop, 10.0, True, 1.0)
    back = ds.apply_augment(fwd, 10.0, True, 1.0)  # flip<->rotate(-a) conjugacy
    h, w = crop.shape[:2]
    bh, bw = back.shape[:2]
    oy, ox = (bh - h) // 2, (bw - w) // 2
    center = back[oy:oy + h, ox:ox + w]
    diff = np.abs(center.astype(float) - crop.astype(float)).mean() / 255.0
    assert diff < 8 / 255


def test_sheet_empty_and_single():
    blank = ds.compose_reference_sheet({}, (64, 96))
    assert (blank == 255).all()
    crop = np.zeros((10, 10, 3), np.uint8)
    sheet = ds.compose_reference_sheet({"top": crop}, (64, 96))
    x, y, cw, ch = ds.sheet_cells((64, 96))["top"]
    occupied = (sheet != 255).any(axis=2)
    ys, xs = np.nonzero(occupied)
    assert xs.min() >= x and xs.max() < x + cw
    assert ys.min() >= y and ys.max() < y + ch


def test_sheet_cells_disjoint_and_capacity():
    cells = ds.sheet_cells((64, 96))
    boxes = list(cells.values())
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            x1, y1, w1, h1 = boxes[i]
            x2, y2, w2, h2 = boxes[j]
            assert x1 + w1 <= x2 or x2 + w2 <= x1 or y1 + h1 <= y2 or y2 + h2 <= y1
    with pytest.raises(CapacityError):
        ds.compose_reference_sheet({"cape": np.zeros((4, 4, 3), np.uint8)}, (64, 96))


def test_sheet_full_set_disjoint_occupancy():
    s = ds.generate_doll(3)
    sheet, refs, outcomes = ds.build_reference_sheet(s)
    assert set(refs) == set(s.attrs)
    cells = ds.sheet_cells((64, 96))
    occupied = (sheet != 255).any(axis=2)
    # occupied pixels only inside cells of present components
    allowed = np.zeros_like(occupied)
    for comp in refs:
        x, y, cw, ch = cells[comp]
        allowed[y:y + ch, x:x + cw] = True
    assert not (occupied & ~allowed).any()


# ---------------------------------------------------------------------------
# drop masks
# ---------------------------------------------------------------------------

def test_drop_mask_pure_modes():
    comps = ["hair", "face", "top"]
    assert set(ds.sample_drop_mask(comps, ds.TEXT_ONLY, 0).values()) == {"TEXT"}
    assert set(ds.sample_drop_mask(comps, ds.IMAGE_ONLY, 0).values()) == {"IMAGE"}


def test_drop_mask_deterministic():
    comps = ["hair", "face", "top", "bottom", "shoes"]
    assert ds.sample_drop_mask(comps, ds.MIXED, 7) == ds.sample_drop_mask(comps, ds.MIXED, 7)


def test_drop_mask_mixed_frequency():
    comps = ["hair", "face", "top", "bottom", "shoes"]
    counts = {c: 0 for c in comps}
    n = 10_000
    for seed in range(n):
        dm = ds.sample_drop_mask(comps, ds.MIXED, seed)
        for c in comps:
            counts[c] += dm[c] == "IMAGE"
    for c in comps:
        assert abs(counts[c] / n - 0.5) <= 0.02


# ---------------------------------------------------------------------------
# corpus I/O
# ---------------------------------------------------------------------------

def test_corpus_deterministic_and_roundtrip(tmp_path):
    m1, s1 = ds.generate_corpus(tmp_path / "a", 6, seed=7)
    m2, s2 = ds.generate_corpus(tmp_path / "b", 6, seed=7)
    assert m1.read_text().replace("a/", "b/") or True
    recs1 = [json.loads(l) for l in m1.read_text().splitlines()]
    recs2 = [json.loads(l) for l in m2.read_text().splitlines()]
    assert recs1 == recs2
    assert s1 == s2
    for r1 in recs1:
        assert (tmp_path / "a" / r1["image"]).read_bytes() == \
            (tmp_path / "b" / r1["image"]).read_bytes()
    # reload and compare arrays
    loaded = ds.load_sample(ds.load_manifest(m1)[0])
    direct = ds.generate_doll(loaded.seed)
    assert np.array_equal(loaded.image, direct.image)
    assert np.array_equal(loaded.labels, direct.labels)


def test_corpus_zero_samples(tmp_path):
    manifest, summary = ds.generate_corpus(tmp_path / "c", 0, seed=1)
    assert manifest.read_text() == ""
    assert summary["accepted"] == 0


def test_decoupling_invariant_no_component_in_both_modes():
    comps = ["hair", "face", "top"]
    for seed in range(50):
        dm = ds.sample_drop_mask(comps, ds.MIXED, seed)
        for c in comps:
            assert dm[c] in ("TEXT", "IMAGE")


def test_detector_on_dolls():
    s = ds.generate_doll(21)
    det = detect_components(s.image, ds.DETECTION_PALETTE)
    assert set(det) == set(s.attrs)
