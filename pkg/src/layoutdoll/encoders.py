"""Toy stand-ins for the pretrained image autoencoder and text encoder.

The image side is a small strided conv autoencoder (downsample factor 8,
4 latent channels) trained on pixel MSE and then frozen; latents are
standardized by a corpus-level scale constant kept in the checkpoint. The
text side tokenizes template sentences against the fixed grammar vocabulary
and looks tokens up in an embedding table trained jointly with the denoiser.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import ATTR_SCHEMA
from .errors import ContractViolation, NumericFailure, VocabularyError
from .layout import COMPONENTS
from .optim import AdamW, OptimizerConfig, ParamSet, clip_grad_norm

LATENT_CHANNELS = 4
DOWNSAMPLE_FACTOR = 8
NULL_TOKEN = "<null>"


def build_vocab():
    tokens = {"a"}
    tokens.update(COMPONENTS)
    for comp, schema in ATTR_SCHEMA.items():
        for _, values in schema:
            tokens.update(values)
    return [NULL_TOKEN] + sorted(tokens)


VOCAB = build_vocab()
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}
MAX_TOKENS = 36  # all eight component sentences concatenated never exceed this


@dataclass
class TextEmbedding:
    ids: np.ndarray      # int32 (N,)
    spans: dict          # component -> (start, end)
    vectors: object = None  # Tensor (N, d_txt) once looked up


def encode_text(sentences):
    """Tokenize per-component sentences in canonical order.

    Returns a TextEmbedding whose ids are vocabulary indices and whose spans
    give each component's contiguous token range in the concatenation.
    """
    ids = []
    spans = {}
    for comp in COMPONENTS:
        if comp not in sentences:
            continue
        toks = sentences[comp].split()
        for tok in toks:
            if tok not in TOKEN_IDS:
                raise VocabularyError(f"token {tok!r} not in the template vocabulary")
        spans[comp] = (len(ids), len(ids) + len(toks))
        ids.extend(TOKEN_IDS[t] for t in toks)
    return TextEmbedding(ids=np.array(ids, dtype=np.int32), spans=spans)


def pad_token_ids(ids, length=MAX_TOKENS):
    if len(ids) > length:
        raise ContractViolation(f"{len(ids)} tokens exceed the {length} budget")
    out = np.zeros(length, dtype=np.int32)  # 0 is the null token
    out[:len(ids)] = ids
    return out


def embed_tokens(table, ids):
    """Look token ids up in the learned table; stays on the tape."""
    return T.gather_rows(table, ids)


# ---------------------------------------------------------------------------
# image autoencoder
# ---------------------------------------------------------------------------

@dataclass
class AutoencoderConfig:
    channels: tuple = (24, 48, 64)
    latent_channels: int = LATENT_CHANNELS
    seed: int = 0
    steps: int = 2500
    batch_size: int = 8
    learning_rate: float = 2e-3
    weight_decay: float = 1e-5
    max_grad_norm: float = 1.0


class Conv:
    def __init__(self, ps, path, cin, cout, k=3, stride=1, rng=None, zero=False):
        self.stride = stride
        self.pad = k // 2
        if path + ".w" in ps:
            self.w, self.b = ps[path + ".w"], ps[path + ".b"]
            return
        scale = 0.0 if zero else np.sqrt(2.0 / (cin * k * k))
        self.w = ps.add(path + ".w", rng.standard_normal((cout, cin, k, k)) * scale)
        self.b = ps.add(path + ".b", np.zeros(cout))

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)


def space_to_depth(x):
    """(B, C, H, W) -> (B, 4C, H/2, W/2) by folding 2x2 blocks into channels."""
    B, C, H, W = x.shape
    h = T.reshape(x, (B, C, H // 2, 2, W // 2, 2))
    h = T.transpose(h, (0, 1, 3, 5, 2, 4))
    return T.reshape(h, (B, 4 * C, H // 2, W // 2))


def depth_to_space(x):
    """(B, 4C, H, W) -> (B, C, 2H, 2W); inverse of space_to_depth."""
    B, C4, H, W = x.shape
    h = T.reshape(x, (B, C4 // 4, 2, 2, H, W))
    h = T.transpose(h, (0, 1, 4, 2, 5, 3))
    return T.reshape(h, (B, C4 // 4, 2 * H, 2 * W))


class Autoencoder:
    """Plain conv autoencoder, no KL term. The outermost 2x resampling each
    way is a space/depth fold so no convolution runs at full resolution."""

    def __init__(self, params: ParamSet, cfg: AutoencoderConfig, rng=None):
        c1, c2, c3 = cfg.channels
        cl = cfg.latent_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.enc = [
            Conv(params, "ae.enc0", 12, c1, rng=rng),
            Conv(params, "ae.enc1", c1, c2, stride=2, rng=rng),
            Conv(params, "ae.enc2", c2, c3, stride=2, rng=rng),
            Conv(params, "ae.enc3", c3, cl, rng=rng),
        ]
        self.dec = [
            Conv(params, "ae.dec0", cl, c3, rng=rng),
            Conv(params, "ae.dec1", c3, c2, rng=rng),
            Conv(params, "ae.dec2", c2, c1, rng=rng),
            Conv(params, "ae.dec3", c1, 12, rng=rng),
        ]

    def encode(self, x):
        if x.shape[2] % DOWNSAMPLE_FACTOR or x.shape[3] % DOWNSAMPLE_FACTOR:
            raise ContractViolation(
                f"image dims {x.shape[2:]} not divisible by {DOWNSAMPLE_FACTOR}")
        h = space_to_depth(x)
        for conv in self.enc[:-1]:
            h = T.silu(conv(h))
        return self.enc[-1](h)

    def decode(self, z):
        h = T.silu(self.dec[0](z))
        h = T.silu(self.dec[1](T.upsample2x(h)))
        h = T.silu(self.dec[2](T.upsample2x(h)))
        return depth_to_space(self.dec[3](h))


def image_to_array(img):
    """uint8 (H, W, 3) -> float (3, H, W) in [0, 1]."""
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(
        T.get_default_dtype()) / 255.0


def array_to_image(arr):
    """float (3, H, W) -> uint8 (H, W, 3), clipped."""
    return (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8).transpose(1, 2, 0)


def psnr(a, b):
    mse = float(((a.astype(np.float64) - b.astype(np.float64)) ** 2).mean())
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)


def train_autoencoder(images, cfg: AutoencoderConfig, params=None, log=None):
    """Minimize pixel reconstruction MSE over the image list; deterministic
    per cfg.seed. Returns (params, autoencoder, loss_curve)."""
    if not images:
        raise ContractViolation("autoencoder training needs a non-empty corpus")
    params = params if params is not None else ParamSet()
    ae = Autoencoder(params, cfg, rng=np.random.default_rng((cfg.seed, 0)))
    opt = AdamW(params, OptimizerConfig(
        learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
        max_grad_norm=cfg.max_grad_norm))
    data = np.stack([image_to_array(img) for img in images])
    curve = []
    for step in range(cfg.steps):
        rng = np.random.default_rng((cfg.seed, 1, step))
        idx = rng.integers(0, len(data), cfg.batch_size)
        x = T.Tensor(data[idx])
        recon = ae.decode(ae.encode(x))
        loss = T.mean_all(T.square(T.add(recon, T.neg(x))))
        if not np.isfinite(loss.data):
            raise NumericFailure("autoencoder loss diverged", step=step)
        params.zero_grad()
        T.backward(loss)
        grads, _ = clip_grad_norm(params.gradients(), cfg.max_grad_norm)
        opt.step(grads)
        curve.append(float(loss.data))
        if log and (step % 200 == 0 or step == cfg.steps - 1):
            log(f"ae step {step} loss {float(loss.data):.5f}")
    return params, ae, curve


def encode_images(ae, images, batch=32):
    """Frozen-encoder pass over uint8 images; returns float array (N, C, h, w)."""
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            x = T.Tensor(np.stack([image_to_array(im) for im in images[i:i + batch]]))
            outs.append(ae.encode(x).data.copy())
    return np.concatenate(outs, axis=0)


def latent_scale(latents, percentile=None):
    """Corpus-level standardization constant (std of all latent values)."""
    return float(np.std(latents.astype(np.float64)))
