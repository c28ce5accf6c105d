"""Diffusion core: the noise schedule and forward process, condition
assembly on the concatenated latent canvas, SNR-weighted training, and the
deterministic guided sampler with mask-modulated cross attention.

Latent geometry: the target canvas is Concat(z_human, z_ref) along width
(human half left), the conditioning canvas is Concat(z_layout, z_ref_drop),
and the denoiser sees both channel-stacked. During sampling only the human
half is denoised; the source half of the canvas is re-fixed from the
conditioning latent every step and the layout masks modulate cross
attention on the human half.
"""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import IMAGE, TEXT, attrs_to_sentences, build_reference_sheet, sheet_cells
from .encoders import (
    MAX_TOKENS,
    Autoencoder,
    AutoencoderConfig,
    DOWNSAMPLE_FACTOR,
    array_to_image,
    encode_images,
    encode_text,
    image_to_array,
    latent_scale,
    pad_token_ids,
    train_autoencoder,
)
from .errors import ContractViolation, NumericFailure
from .layout import COMPONENTS, masks_from_layout, rasterize
from .optim import AdamW, OptimizerConfig, ParamSet, clip_grad_norm
from .unet import AttentionRecord, DenoiserConfig, UNet

EPS_SNR = 1e-3


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    kind: str
    alpha_bar: np.ndarray  # (T,) float64, in (0, 1], non-increasing


def make_schedule(timesteps, kind="cosine"):
    if timesteps < 2:
        raise ContractViolation("schedule needs T >= 2")
    if kind == "cosine":
        s = 0.008
        u = (np.arange(timesteps, dtype=np.float64) + 0.5) / timesteps
        f = np.cos((u + s) / (1 + s) * np.pi / 2) ** 2
        f0 = np.cos((0.5 / timesteps + s) / (1 + s) * np.pi / 2) ** 2
        ab = np.clip(f / f0, 1e-8, 1.0)
    elif kind == "linear":
        betas = np.linspace(1e-4, 0.02, timesteps, dtype=np.float64)
        ab = np.cumprod(1.0 - betas)
    else:
        raise ContractViolation(f"unknown schedule kind {kind!r}")
    ab = np.minimum.accumulate(ab)
    return NoiseSchedule(T=timesteps, kind=kind, alpha_bar=ab)


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; t may be per-sample."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ContractViolation(f"noise shape {eps.shape} != z0 shape {z0.shape}")
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr >= sched.T).any():
        raise ContractViolation("timestep out of range")
    ab = sched.alpha_bar[t_arr]
    if t_arr.ndim:  # batched: leading axis of z0 is the batch
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def snr(sched: NoiseSchedule, t):
    ab = sched.alpha_bar[np.asarray(t)]
    return ab / np.maximum(1.0 - ab, 1e-12)


def loss_weight(sched: NoiseSchedule, t, eps_snr=EPS_SNR):
    """w = 1 / max(SNR, eps_snr); the clamp bounds w near pure noise."""
    return 1.0 / np.maximum(snr(sched, t), eps_snr)


# ---------------------------------------------------------------------------
# latent canvas assembly
# ---------------------------------------------------------------------------

def assemble_gt_latent(z_human, z_ref):
    """Width-concat: ground-truth canvas [human | reference sheet]."""
    if z_human.shape[:-1] != z_ref.shape[:-1]:
        raise ContractViolation(
            f"channel/height mismatch: {z_human.shape} vs {z_ref.shape}")
    return np.concatenate([z_human, z_ref], axis=-1)


def assemble_src_latent(z_layout, z_ref_drop):
    """Width-concat: conditioning canvas [layout | dropped reference]."""
    if z_layout.shape[:-1] != z_ref_drop.shape[:-1]:
        raise ContractViolation(
            f"channel/height mismatch: {z_layout.shape} vs {z_ref_drop.shape}")
    return np.concatenate([z_layout, z_ref_drop], axis=-1)


def split_canvas(z):
    """Undo the width concat; returns (left_half, right_half)."""
    w = z.shape[-1]
    if w % 2:
        raise ContractViolation("canvas width is odd; cannot split")
    return z[..., : w // 2], z[..., w // 2:]


def latent_sheet_cells(size, factor=DOWNSAMPLE_FACTOR):
    """Sheet grid cells mapped into latent coordinates."""
    cells = {}
    for comp, (x, y, w, h) in sheet_cells(size).items():
        cells[comp] = (x // factor, y // factor, w // factor, h // factor)
    return cells


def drop_reference_cells(z_ref, drop, size):
    """Zero the latent cells of every component not kept in IMAGE mode."""
    out = z_ref.copy()
    for comp, mode in drop.items():
        if mode == IMAGE:
            continue
        x, y, w, h = latent_sheet_cells(size)[comp]
        out[..., y:y + h, x:x + w] = 0.0
    return out


# ---------------------------------------------------------------------------
# attention modulation (inference-time layout control)
# ---------------------------------------------------------------------------

def downsample_mask(mask, grid_hw):
    """Area-average then threshold 0.5 down to (h_l, w_l)."""
    H, W = mask.shape
    gh, gw = grid_hw
    if H % gh or W % gw:
        raise ContractViolation(f"mask {mask.shape} not divisible by grid {grid_hw}")
    m = mask.astype(np.float64).reshape(gh, H // gh, gw, W // gw).mean(axis=(1, 3))
    return m >= 0.5


def build_modulation_map(masks, spans, grid_hw, n_tokens):
    """Binary map M over (query_positions, key_tokens).

    M[q, k] = 1 when token k lies in component i's span and query q falls
    inside i's downsampled layout mask (placed on the human half of the
    canvas); tokens outside every span keep 1 everywhere.
    """
    h_l, w_l = grid_hw
    if w_l % 2:
        raise ContractViolation("canvas grid width must be even (two halves)")
    w_half = w_l // 2
    M = np.ones((h_l * w_l, n_tokens), dtype=np.float64)
    for comp, (s, e) in spans.items():
        if comp not in COMPONENTS:
            raise ContractViolation(f"span references unknown component {comp!r}")
        if not (0 <= s <= e <= n_tokens):
            raise ContractViolation(f"span {s, e} outside token range")
        grid = np.zeros((h_l, w_l), dtype=bool)
        m = masks.get(comp)
        if m is not None:
            grid[:, :w_half] = downsample_mask(m, (h_l, w_half))
        M[:, s:e] = grid.reshape(-1)[:, None]
    return M


def modulate_attention(record: AttentionRecord, masks, spans):
    """Literal elementwise product A * M (no row renormalization)."""
    h_l, w_l = record.grid
    n_tokens = record.weights.shape[-1]
    M = build_modulation_map(masks, spans, (h_l, w_l), n_tokens)
    return record.weights * M  # broadcasts over (batch, heads)


# ---------------------------------------------------------------------------
# condition bundles
# ---------------------------------------------------------------------------

@dataclass
class ConditionBundle:
    """Per-generation decoupled conditions, all in standardized latent space."""
    z_layout: np.ndarray       # (C, h, w)
    z_ref_drop: np.ndarray     # (C, h, w), non-IMAGE cells zeroed
    token_ids: np.ndarray      # (MAX_TOKENS,) padded with the null id
    spans: dict                # component -> (start, end) into token_ids
    masks: dict                # component -> (H, W) bool at raster resolution
    drop: dict                 # component -> TEXT | IMAGE | NONE
    image_size: tuple          # (W, H)
    unconditional: bool = False

    @property
    def z_src(self):
        return assemble_src_latent(self.z_layout, self.z_ref_drop)

    def validate(self):
        if self.unconditional:
            return
        for comp, mode in self.drop.items():
            has_text = comp in self.spans
            cell = latent_sheet_cells(self.image_size)[comp]
            x, y, w, h = cell
            has_ref = bool(np.abs(self.z_ref_drop[..., y:y + h, x:x + w]).sum() > 0)
            if has_text and has_ref:
                raise ContractViolation(
                    f"component {comp!r} carries both text and reference")
            if mode == TEXT and not has_text:
                raise ContractViolation(f"component {comp!r} dropped to TEXT "
                                        "but has no sentence")


# ---------------------------------------------------------------------------
# model state: everything a generation run needs
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    max_grad_norm: float = 1.0
    p_uncond: float = 0.1
    image_mode_prob: float = 0.5
    snr_weighting: bool = True


class GeneratorModel:
    """Bound parameters plus the frozen pieces needed for inference.

    Binds to parameters already present in `params` (e.g. from a checkpoint
    or a trained autoencoder); missing ones are initialized from `rng`.
    """

    def __init__(self, params, ae_cfg, den_cfg, sched, scale, rng=None):
        self.params = params
        self.ae_cfg = ae_cfg
        self.den_cfg = den_cfg
        self.sched = sched
        self.latent_scale = scale
        self.ae = Autoencoder(params, ae_cfg, rng=rng)
        self.unet = UNet(params, den_cfg, rng=rng)

    def encode_std(self, images):
        """uint8 images -> standardized latents (N, C, h, w)."""
        z = encode_images(self.ae, images)
        return z / self.latent_scale

    def decode_std(self, z_std):
        with T.no_grad():
            x = self.ae.decode(T.Tensor(z_std * self.latent_scale))
        return [array_to_image(a) for a in x.data]


def prepare_bundle(model: GeneratorModel, layout_spec, sentences, ref_crops,
                   drop):
    """Build a ConditionBundle from user-facing inputs.

    `sentences` and `ref_crops` are consulted per the drop map: TEXT keeps
    the sentence, IMAGE keeps the crop, NONE keeps neither.
    """
    raster = rasterize(layout_spec)
    masks = masks_from_layout(raster)
    H, W = raster.shape[:2]
    size = (W, H)
    kept_sentences = {c: sentences[c] for c, m in drop.items()
                      if m == TEXT and c in sentences}
    kept_refs = {c: ref_crops[c] for c, m in drop.items()
                 if m == IMAGE and c in ref_crops}
    from .dataset import compose_reference_sheet
    sheet = compose_reference_sheet(kept_refs, size)
    z_layout, z_sheet = model.encode_std([raster, sheet])
    z_ref_drop = drop_reference_cells(z_sheet, drop, size)
    text = encode_text(kept_sentences)
    bundle = ConditionBundle(
        z_layout=z_layout, z_ref_drop=z_ref_drop,
        token_ids=pad_token_ids(text.ids), spans=text.spans,
        masks=masks, drop=dict(drop), image_size=size)
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class DiffusionTrainer:
    """Owns the denoiser optimization loop over precomputed latents.

    Per-step randomness derives from (seed, 2, step_index) so an interrupted
    run resumed from a checkpoint retraces the identical trajectory.
    """

    def __init__(self, model: GeneratorModel, samples, tcfg: TrainConfig,
                 opt_state=None):
        self.model = model
        self.tcfg = tcfg
        self.sched = model.sched
        trainable = ParamSet()
        for path, tensor in model.params.items():
            if path.startswith(("unet.", "text.")):
                trainable._params[path] = tensor
        trainable.step_count = model.params.step_count
        self.trainable = trainable
        self.opt = AdamW(trainable, OptimizerConfig(
            learning_rate=tcfg.learning_rate, weight_decay=tcfg.weight_decay,
            max_grad_norm=tcfg.max_grad_norm))
        if opt_state is not None:
            self.opt.load_state_arrays(opt_state)
        self._prepare(samples)

    def _prepare(self, samples):
        images, rasters, sheets = [], [], []
        self.sample_meta = []
        for s in samples:
            sheet, _, _ = build_reference_sheet(s)
            images.append(s.image)
            rasters.append(rasterize(s.layout))
            sheets.append(sheet)
            sentences, _ = attrs_to_sentences(s.attrs)
            token_lists = {c: encode_text({c: sentences[c]}).ids for c in sentences}
            H, W = s.image.shape[:2]
            self.sample_meta.append({
                "components": [c for c in COMPONENTS if c in s.attrs],
                "tokens": token_lists,
                "size": (W, H),
            })
        self.z_human = self.model.encode_std(images)
        self.z_layout = self.model.encode_std(rasters)
        self.z_ref = self.model.encode_std(sheets)
        self.image_size = self.sample_meta[0]["size"]

    def _assemble(self, idx, rng):
        """Batch of (Z_gt, Z_src, token ids) with per-sample drop decisions."""
        tcfg = self.tcfg
        z_gt = assemble_gt_latent(self.z_human[idx], self.z_ref[idx])
        z_src = np.empty_like(z_gt)
        ids = np.zeros((len(idx), MAX_TOKENS), dtype=np.int32)
        for j, i in enumerate(idx):
            meta = self.sample_meta[i]
            if rng.random() < tcfg.p_uncond:
                z_src[j] = 0.0  # unconditional: every condition dropped
                continue
            drop = {c: (IMAGE if rng.random() < tcfg.image_mode_prob else TEXT)
                    for c in meta["components"]}
            ref = drop_reference_cells(self.z_ref[i], drop, meta["size"])
            z_src[j] = assemble_src_latent(self.z_layout[i], ref)
            toks = [meta["tokens"][c] for c in meta["components"] if drop[c] == TEXT]
            flat = np.concatenate(toks) if toks else np.zeros(0, np.int32)
            ids[j] = pad_token_ids(flat)
        return z_gt, z_src, ids

    def training_step(self, step_index):
        """One optimization step; returns the scalar loss."""
        tcfg = self.tcfg
        rng = np.random.default_rng((tcfg.seed, 2, step_index))
        idx = rng.integers(0, len(self.z_human), tcfg.batch_size)
        z_gt, z_src, ids = self._assemble(idx, rng)
        t = rng.integers(0, self.sched.T, len(idx))
        eps = rng.standard_normal(z_gt.shape).astype(z_gt.dtype)
        z_t = q_sample(z_gt, t, eps, self.sched)
        x_in = np.concatenate([z_t, z_src], axis=1)

        eps_hat, _ = self.model.unet.forward(T.Tensor(x_in), t, ids)
        diff = T.add(eps_hat, T.neg(T.Tensor(eps)))
        if tcfg.snr_weighting:
            w = loss_weight(self.sched, t)
            loss = T.mul_scalar(
                T.dot(T.mean_per_sample(T.square(diff)),
                      T.Tensor(w.astype(eps_hat.data.dtype))),
                1.0 / len(idx))
        else:
            loss = T.mean_all(T.square(diff))
        if not np.isfinite(loss.data):
            raise NumericFailure("diffusion loss is not finite", step=step_index)
        self.trainable.zero_grad()
        T.backward(loss)
        grads, _ = clip_grad_norm(self.trainable.gradients(), tcfg.max_grad_norm)
        self.opt.step(grads)
        self.model.params.step_count = self.trainable.step_count
        # unweighted noise-prediction error: the stable progress signal
        # (the 1/SNR-weighted loss spikes whenever high-noise steps are drawn)
        mse = float((diff.data ** 2).mean())
        return float(loss.data), mse

    def train(self, total_steps, log=None):
        curve = []
        start = self.trainable.step_count
        for step in range(start, total_steps):
            loss, mse = self.training_step(step)
            curve.append((step, loss, mse))
            if log and (step % 250 == 0 or step == total_steps - 1):
                log(f"diffusion step {step} loss {loss:.5f} mse {mse:.5f}")
        return curve


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _modulations_for(bundles, grids, n_tokens):
    """Per-level (B, Q, L) modulation stacks for a batch of bundles."""
    out = {}
    for level, (gh, gw) in grids.items():
        mats = []
        for b in bundles:
            if b.unconditional or not b.spans:
                mats.append(np.ones((gh * gw, n_tokens)))
            else:
                mats.append(build_modulation_map(b.masks, b.spans, (gh, gw),
                                                 n_tokens))
        out[level] = np.stack(mats)
    return out


def sample(model: GeneratorModel, bundles, seeds, steps=50, guidance_scale=3.0,
           use_ca=True, record_attention=False, log=None):
    """Deterministic DDIM-style sampling for a batch of bundles.

    Returns (images, records): one uint8 RGB image per bundle; records holds
    the final-step attention maps when requested.
    """
    if steps > model.sched.T:
        raise ContractViolation("steps may not exceed the schedule length")
    bundles = list(bundles)
    seeds = list(seeds)
    if len(seeds) != len(bundles):
        raise ContractViolation("one seed per bundle required")
    B = len(bundles)
    z_src = np.stack([b.z_src for b in bundles]).astype(T.get_default_dtype())
    _, _, h, w2 = z_src.shape
    w = w2 // 2
    canvas = np.stack([
        np.random.default_rng((int(s), 3)).standard_normal(z_src.shape[1:])
        for s in seeds]).astype(z_src.dtype)
    ids = np.stack([b.token_ids for b in bundles])
    n_tokens = ids.shape[1]
    grids = {0: (h, w2), 1: (h // 2, w2 // 2)}
    mods = _modulations_for(bundles, grids, n_tokens) if use_ca else None

    t_seq = np.unique(np.linspace(0, model.sched.T - 1, steps).round().astype(int))[::-1]
    null_ids = np.zeros_like(ids)
    zeros_src = np.zeros_like(z_src)
    records = []
    t_start = time.time()
    for k, t in enumerate(t_seq):
        canvas[..., w:] = z_src[..., w:]  # re-fix the source half each step
        t_arr = np.full(B, t)
        want_records = record_attention and k == len(t_seq) - 1
        with T.no_grad():
            if guidance_scale == 1.0:
                x = np.concatenate([canvas, z_src], axis=1)
                eps_c, recs = model.unet.forward(
                    T.Tensor(x), t_arr, ids, mods, want_records)
                eps_tilde = eps_c.data
            elif guidance_scale == 0.0:
                x = np.concatenate([canvas, zeros_src], axis=1)
                eps_u, recs = model.unet.forward(
                    T.Tensor(x), t_arr, null_ids, None, want_records)
                eps_tilde = eps_u.data
            else:
                x = np.concatenate([
                    np.concatenate([canvas, z_src], axis=1),
                    np.concatenate([canvas, zeros_src], axis=1)], axis=0)
                both_ids = np.concatenate([ids, null_ids])
                both_mods = None
                if mods is not None:
                    both_mods = {lvl: np.concatenate([m, np.ones_like(m)])
                                 for lvl, m in mods.items()}
                out, recs = model.unet.forward(
                    T.Tensor(x), np.concatenate([t_arr, t_arr]), both_ids,
                    both_mods, want_records)
                eps_c, eps_u = out.data[:B], out.data[B:]
                eps_tilde = eps_u + guidance_scale * (eps_c - eps_u)
        if want_records:
            records = recs
        ab_t = model.sched.alpha_bar[t]
        t_prev = t_seq[k + 1] if k + 1 < len(t_seq) else None
        ab_prev = model.sched.alpha_bar[t_prev] if t_prev is not None else 1.0
        z0_hat = (canvas - np.sqrt(1.0 - ab_t) * eps_tilde) / np.sqrt(ab_t)
        canvas = (np.sqrt(ab_prev) * z0_hat
                  + np.sqrt(1.0 - ab_prev) * eps_tilde).astype(z_src.dtype)
        if not np.isfinite(canvas).all():
            raise NumericFailure("sampling diverged", step=int(k))
    if log:
        log(f"sampled {B} images in {time.time() - t_start:.1f}s ({len(t_seq)} steps)")
    human = canvas[..., :w]
    images = model.decode_std(human)
    return images, records


# ---------------------------------------------------------------------------
# checkpoint glue
# ---------------------------------------------------------------------------

def save_state(path, model: GeneratorModel, opt: AdamW = None, extra=None):
    arrays = {f"param/{p}": t.data for p, t in model.params.items()}
    if opt is not None:
        for name, arr in opt.state_arrays().items():
            arrays[f"opt/{name}"] = arr
    meta = {
        "format": "layoutdoll-v1",
        "step_count": model.params.step_count,
        "latent_scale": model.latent_scale,
        "schedule": {"T": model.sched.T, "kind": model.sched.kind},
        "ae_cfg": asdict(model.ae_cfg),
        "den_cfg": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in asdict(model.den_cfg).items()},
        "extra": extra or {},
    }
    save_checkpoint(path, arrays, meta)


def load_state(path):
    """Returns (model, opt_state_arrays_or_None, metadata)."""
    arrays, meta = load_checkpoint(path)
    ae_cfg = AutoencoderConfig(**{**meta["ae_cfg"],
                                  "channels": tuple(meta["ae_cfg"]["channels"])})
    den = dict(meta["den_cfg"])
    den["channel_mults"] = tuple(den["channel_mults"])
    den_cfg = DenoiserConfig(**den)
    sched = make_schedule(meta["schedule"]["T"], meta["schedule"]["kind"])
    params = ParamSet()
    model = GeneratorModel(params, ae_cfg, den_cfg, sched, meta["latent_scale"])
    # constructing AE/UNet allocated fresh tensors; overwrite with saved data
    params.load_arrays({p[len("param/"):]: a for p, a in arrays.items()
                        if p.startswith("param/")})
    params.step_count = int(meta["step_count"])
    opt_state = {p[len("opt/"):]: a for p, a in arrays.items()
                 if p.startswith("opt/")}
    return model, (opt_state or None), meta
