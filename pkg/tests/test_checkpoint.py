import numpy as np

from layoutdoll.checkpoint import load_checkpoint, save_checkpoint


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "enc/w": rng.standard_normal((3, 4)).astype(np.float32),
        "enc/b": rng.standard_normal(7),
        "steps": np.array([12], dtype=np.int64),
    }
    meta = {"step_count": 12, "schedule": {"T": 1000, "kind": "cosine"}}
    path = tmp_path / "ck.zip"
    save_checkpoint(path, arrays, meta)
    loaded, meta2 = load_checkpoint(path)
    assert meta2 == meta
    for k, a in arrays.items():
        assert loaded[k].dtype == a.dtype
        assert loaded[k].shape == a.shape
        assert np.array_equal(
            loaded[k].view(np.uint8), a.view(np.uint8)), f"bytes differ for {k}"


def test_identical_saves_are_byte_identical(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
    save_checkpoint(p1, arrays, {"x": 1})
    save_checkpoint(p2, arrays, {"x": 1})
    assert p1.read_bytes() == p2.read_bytes()
