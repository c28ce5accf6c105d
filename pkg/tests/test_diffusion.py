import numpy as np
import pytest

from layoutdoll import dataset as ds
from layoutdoll import diffusion as D
from layoutdoll import tensor as T
from layoutdoll.encoders import MAX_TOKENS, encode_text
from layoutdoll.errors import ContractViolation
from layoutdoll.optim import ParamSet
from layoutdoll.unet import AttentionRecord, DenoiserConfig, UNet


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_schedule_shape_and_bounds():
    s = D.make_schedule(1000)
    assert s.alpha_bar.shape == (1000,)
    assert (np.diff(s.alpha_bar) <= 0).all()
    assert (s.alpha_bar > 0).all() and (s.alpha_bar <= 1).all()
    assert s.alpha_bar[0] >= 0.999
    assert s.alpha_bar[-1] <= 1e-3


def test_schedule_rejects_tiny_T():
    with pytest.raises(ContractViolation):
        D.make_schedule(1)


def test_linear_schedule_supported():
    s = D.make_schedule(100, kind="linear")
    assert (np.diff(s.alpha_bar) <= 0).all() and (s.alpha_bar > 0).all()


# ---------------------------------------------------------------------------
# q_sample
# ---------------------------------------------------------------------------

def test_q_sample_limits():
    sched = D.NoiseSchedule(T=3, kind="custom",
                            alpha_bar=np.array([1.0, 0.5, 1e-12]))
    z0 = np.full((2, 3), 2.0, dtype=np.float32)
    eps = np.full((2, 3), -1.0, dtype=np.float32)
    assert np.allclose(D.q_sample(z0, 0, eps, sched), z0)
    assert np.allclose(D.q_sample(z0, 2, eps, sched), eps, atol=1e-5)


def test_q_sample_shape_mismatch():
    sched = D.make_schedule(10)
    with pytest.raises(ContractViolation):
        D.q_sample(np.zeros((2, 2)), 1, np.zeros((3, 2)), sched)


def test_q_sample_monte_carlo_moments():
    # frozen Monte Carlo run: 160 per-element 3-sigma checks, seed chosen so
    # none of them lands in the expected ~0.4 chance tail crossings
    sched = D.make_schedule(1000)
    rng = np.random.default_rng(124)
    z0 = rng.standard_normal((4, 4))
    n = 10_000
    for t in (100, 300, 500, 700, 900):
        ab = sched.alpha_bar[t]
        eps = rng.standard_normal((n, 4, 4))
        zt = D.q_sample(np.broadcast_to(z0, (n, 4, 4)), np.full(n, t), eps, sched)
        mean_err = np.abs(zt.mean(axis=0) - np.sqrt(ab) * z0)
        # 3 sigma of the sample mean
        assert (mean_err <= 3.0 * np.sqrt((1 - ab) / n) + 1e-9).all()
        var = zt.var(axis=0)
        var_sigma = (1 - ab) * np.sqrt(2.0 / (n - 1))
        assert (np.abs(var - (1 - ab)) <= 3.0 * var_sigma + 1e-9).all()


# ---------------------------------------------------------------------------
# snr weights
# ---------------------------------------------------------------------------

def test_snr_and_weights():
    sched = D.NoiseSchedule(T=4, kind="custom",
                            alpha_bar=np.array([1 - 1e-9, 0.8, 0.5, 1e-9]))
    assert D.snr(sched, 2) == pytest.approx(1.0)
    assert D.loss_weight(sched, 2) == pytest.approx(1.0, abs=1e-12)
    assert D.snr(sched, 1) == pytest.approx(4.0)
    assert D.loss_weight(sched, 1) == pytest.approx(0.25, abs=1e-12)
    # clamp: near-pure-signal -> w tiny; near-pure-noise -> w = 1/eps = 1000
    assert D.loss_weight(sched, 0) < 1e-6
    assert D.loss_weight(sched, 3) == pytest.approx(1000.0)


# ---------------------------------------------------------------------------
# latent assembly
# ---------------------------------------------------------------------------

def test_assemble_and_split_roundtrip():
    rng = np.random.default_rng(0)
    zh = rng.standard_normal((4, 12, 8)).astype(np.float32)
    zr = rng.standard_normal((4, 12, 8)).astype(np.float32)
    zg = D.assemble_gt_latent(zh, zr)
    assert zg.shape == (4, 12, 16)
    left, right = D.split_canvas(zg)
    assert np.array_equal(left, zh) and np.array_equal(right, zr)


def test_assemble_energy_bookkeeping():
    rng = np.random.default_rng(1)
    zh = rng.standard_normal((4, 6, 5))
    zr = rng.standard_normal((4, 6, 5))
    zg = D.assemble_gt_latent(zh, zr)
    assert (zg ** 2).sum() == pytest.approx((zh ** 2).sum() + (zr ** 2).sum())


def test_assemble_shape_mismatch():
    with pytest.raises(ContractViolation):
        D.assemble_gt_latent(np.zeros((4, 12, 8)), np.zeros((4, 10, 8)))


def test_drop_reference_cells():
    size = (64, 96)
    z = np.ones((4, 12, 8), dtype=np.float32)
    dropped = D.drop_reference_cells(z, {"hair": "TEXT", "face": "IMAGE"}, size)
    cells = D.latent_sheet_cells(size)
    x, y, w, h = cells["hair"]
    assert (dropped[:, y:y + h, x:x + w] == 0).all()
    x, y, w, h = cells["face"]
    assert (dropped[:, y:y + h, x:x + w] == 1).all()
    # untouched elsewhere
    assert dropped.sum() > 0


def test_all_dropped_ref_makes_right_half_zero():
    size = (64, 96)
    rng = np.random.default_rng(2)
    z_layout = rng.standard_normal((4, 12, 8)).astype(np.float32)
    z_ref = rng.standard_normal((4, 12, 8)).astype(np.float32)
    drop = {c: "TEXT" for c in ds.COMPONENTS}
    z_src = D.assemble_src_latent(z_layout, D.drop_reference_cells(z_ref, drop, size))
    _, right = D.split_canvas(z_src)
    assert (right == 0).all()


# ---------------------------------------------------------------------------
# attention modulation
# ---------------------------------------------------------------------------

def build_m_oracle(masks, spans, grid, n_tokens):
    """Entry-by-entry loop construction of the modulation matrix."""
    h_l, w_l = grid
    w_half = w_l // 2
    M = np.ones((h_l * w_l, n_tokens))
    for comp, (s, e) in spans.items():
        m = masks.get(comp)
        down = np.zeros((h_l, w_l), dtype=bool)
        if m is not None:
            H, W = m.shape
            fy, fx = H // h_l, W // w_half
            for gy in range(h_l):
                for gx in range(w_half):
                    block = m[gy * fy:(gy + 1) * fy, gx * fx:(gx + 1) * fx]
                    down[gy, gx] = block.mean() >= 0.5
        for q in range(h_l * w_l):
            gy, gx = divmod(q, w_l)
            for k in range(s, e):
                M[q, k] = 1.0 if down[gy, gx] else 0.0
    return M


def test_modulation_all_ones_identity():
    rng = np.random.default_rng(3)
    A = rng.random((2, 4, 24, 9))
    A = A / A.sum(axis=-1, keepdims=True)
    rec = AttentionRecord("x", A, (4, 6))
    out = D.modulate_attention(rec, {}, {})
    assert np.array_equal(out, A)


def test_modulation_zero_mask_annihilates_span():
    rng = np.random.default_rng(4)
    A = rng.random((1, 2, 192, 12))
    rec = AttentionRecord("x", A, (12, 16))
    masks = {"top": np.zeros((96, 64), dtype=bool)}
    spans = {"top": (3, 7)}
    out = D.modulate_attention(rec, masks, spans)
    assert (out[..., 3:7] == 0).all()
    assert np.array_equal(out[..., :3], A[..., :3])
    assert np.array_equal(out[..., 7:], A[..., 7:])


def test_modulation_matches_bruteforce_oracle():
    rng = np.random.default_rng(5)
    masks = {"top": np.zeros((96, 64), dtype=bool),
             "face": np.zeros((96, 64), dtype=bool)}
    masks["top"][40:70, 10:50] = True   # a solid block
    masks["face"][5:25, 20:45] = True
    spans = {"top": (0, 5), "face": (5, 9)}
    for grid in ((12, 16), (6, 8)):
        M = D.build_modulation_map(masks, spans, grid, 12)
        oracle = build_m_oracle(masks, spans, grid, 12)
        assert np.array_equal(M, oracle)
        A = rng.random((3, 4, grid[0] * grid[1], 12))
        rec = AttentionRecord("x", A, grid)
        assert np.array_equal(D.modulate_attention(rec, masks, spans), A * oracle)


def test_modulation_never_increases_entries():
    rng = np.random.default_rng(6)
    A = rng.random((1, 1, 192, 10))
    masks = {"top": rng.random((96, 64)) > 0.5}
    rec = AttentionRecord("x", A, (12, 16))
    out = D.modulate_attention(rec, masks, {"top": (2, 6)})
    assert (out <= A + 1e-12).all()


def test_modulation_unknown_component_rejected():
    A = np.ones((1, 1, 192, 4))
    rec = AttentionRecord("x", A, (12, 16))
    with pytest.raises(ContractViolation):
        D.modulate_attention(rec, {}, {"cape": (0, 2)})


def test_half_plane_mask_inside_outside():
    masks = {"top": np.zeros((96, 64), dtype=bool)}
    masks["top"][:48, :] = True  # top half-plane
    spans = {"top": (0, 4)}
    M = D.build_modulation_map(masks, spans, (12, 16), 8)
    grid = M[:, 0].reshape(12, 16)
    assert (grid[:6, :8] == 1).all()     # inside mask, human half
    assert (grid[6:, :8] == 0).all()     # outside mask
    assert (grid[:, 8:] == 0).all()      # reference half never in layout masks
    assert (M[:, 4:] == 1).all()         # tokens outside spans untouched


# ---------------------------------------------------------------------------
# denoiser forward
# ---------------------------------------------------------------------------

def micro_unet(seed=0):
    cfg = DenoiserConfig(base_channels=16, second_mid_block=False)
    ps = ParamSet()
    return ps, UNet(ps, cfg, rng=np.random.default_rng(seed)), cfg


def test_denoiser_output_shape_and_records():
    ps, net, cfg = micro_unet()
    x = np.random.default_rng(0).standard_normal((2, 8, 12, 16)).astype(np.float32)
    ids = np.zeros((2, MAX_TOKENS), dtype=np.int32)
    out, records = net.forward(T.Tensor(x), np.array([5, 9]), ids,
                               record_attention=True)
    assert out.shape == (2, 4, 12, 16)
    assert len(records) == 4  # four cross-attention layers
    for rec in records:
        rows = rec.weights.sum(axis=-1)
        assert np.allclose(rows, 1.0, atol=1e-5)  # softmax rows pre-modulation


def test_denoiser_unconditional_null_tokens():
    ps, net, cfg = micro_unet()
    x = np.random.default_rng(1).standard_normal((1, 8, 12, 16)).astype(np.float32)
    ids = np.zeros((1, MAX_TOKENS), dtype=np.int32)  # all null
    out, _ = net.forward(T.Tensor(x), np.array([3]), ids)
    assert np.isfinite(out.data).all()


def test_denoiser_gradcheck_small(float64):
    """Finite differences through a 1-level-ish config on a scalar head."""
    from conftest import numeric_grad, rel_err
    cfg = DenoiserConfig(base_channels=8, heads=2, second_mid_block=False,
                         time_dim=16)
    ps = ParamSet()
    net = UNet(ps, cfg, rng=np.random.default_rng(2))
    x = np.random.default_rng(3).standard_normal((1, 8, 4, 8))
    ids = np.zeros((1, 6), dtype=np.int32)
    ids[0, :3] = [1, 2, 3]

    def loss_value():
        with T.no_grad():
            out, _ = net.forward(T.Tensor(x), np.array([7]), ids)
            return float(T.mean_all(T.square(out)).data)

    out, _ = net.forward(T.Tensor(x), np.array([7]), ids)
    ps.zero_grad()
    T.backward(T.mean_all(T.square(out)))
    checked = 0
    for path in ["unet.conv_in.w", "unet.res_d0.time.w", "unet.sa_1.q.w",
                 "unet.ca_m.k.w", "unet.out_gn.g", "text.table"]:
        t = ps[path]
        rng = np.random.default_rng(hash(path) % 2**32)
        flat_idx = rng.integers(0, t.size, size=min(3, t.size))
        for i in flat_idx:
            fd = _fd_single(loss_value, t.data, int(i))
            ad = t.grad.reshape(-1)[int(i)]
            denom = max(abs(fd), abs(ad), 1e-6)
            assert abs(fd - ad) / denom <= 1e-3, (path, i, fd, ad)
            checked += 1
    assert checked >= 15


def _fd_single(f, arr, i, h=1e-5):
    flat = arr.reshape(-1)
    orig = flat[i]
    flat[i] = orig + h
    fp = f()
    flat[i] = orig - h
    fm = f()
    flat[i] = orig
    return (fp - fm) / (2 * h)


# ---------------------------------------------------------------------------
# training step mechanics (micro scale)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def micro_trainer():
    from layoutdoll.diffusion import DiffusionTrainer, GeneratorModel, TrainConfig
    from layoutdoll.encoders import AutoencoderConfig, train_autoencoder
    samples = [ds.generate_doll(s) for s in range(8)]
    ae_cfg = AutoencoderConfig(channels=(8, 16, 24), steps=12, batch_size=4, seed=0)
    params, ae, _ = train_autoencoder([s.image for s in samples], ae_cfg)
    from layoutdoll.encoders import encode_images, latent_scale
    scale = latent_scale(encode_images(ae, [s.image for s in samples]))
    sched = D.make_schedule(100)
    den_cfg = DenoiserConfig(base_channels=16, second_mid_block=False)
    model = GeneratorModel(params, ae_cfg, den_cfg, sched, scale,
                           rng=np.random.default_rng(7))
    trainer = DiffusionTrainer(model, samples, TrainConfig(
        seed=0, batch_size=4, learning_rate=1e-3))
    return trainer


def test_training_loss_decreases(micro_trainer):
    mses = [micro_trainer.training_step(i)[1] for i in range(30)]
    assert np.mean(mses[-5:]) < np.mean(mses[:5])


def test_perfect_prediction_zero_loss(micro_trainer):
    trainer = micro_trainer
    real_forward = trainer.model.unet.forward

    def oracle_forward(x, t, ids, modulations=None, record_attention=False):
        # returns exactly the target noise: loss must be 0, grads 0
        return T.Tensor(oracle_forward.eps), []

    rng = np.random.default_rng((trainer.tcfg.seed, 2, 999))
    idx = rng.integers(0, len(trainer.z_human), trainer.tcfg.batch_size)
    z_gt, z_src, ids = trainer._assemble(idx, rng)
    t = rng.integers(0, trainer.sched.T, len(idx))
    eps = rng.standard_normal(z_gt.shape).astype(z_gt.dtype)
    oracle_forward.eps = eps
    trainer.model.unet.forward = oracle_forward
    try:
        before = {p: t_.data.copy() for p, t_ in trainer.trainable.items()}
        # replicate the loss path of training_step with injected prediction
        z_t = D.q_sample(z_gt, t, eps, trainer.sched)
        x_in = np.concatenate([z_t, z_src], axis=1)
        eps_hat, _ = trainer.model.unet.forward(T.Tensor(x_in), t, ids)
        diff = T.add(eps_hat, T.neg(T.Tensor(eps)))
        loss = T.mean_all(T.square(diff))
        assert float(loss.data) == 0.0
    finally:
        trainer.model.unet.forward = real_forward


def test_weighted_path_with_unit_weights_equals_plain(float64, micro_trainer):
    trainer = micro_trainer
    rng = np.random.default_rng(5)
    z_gt = rng.standard_normal((4, 4, 12, 16))
    eps_hat = rng.standard_normal(z_gt.shape)
    diff = T.Tensor(eps_hat - z_gt)
    plain = float(T.mean_all(T.square(diff)).data)
    w = np.ones(4)
    weighted = float(T.mul_scalar(
        T.dot(T.mean_per_sample(T.square(diff)), T.Tensor(w)), 1.0 / 4).data)
    assert abs(plain - weighted) <= 1e-9
