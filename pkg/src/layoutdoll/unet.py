"""Small attention U-Net noise estimator over the stacked latent canvas.

Input is the noisy target latent channel-stacked with the conditioning
latent (2 * C_lat channels); output predicts the noise on the target.
Cross-attention layers attend from canvas positions to the token embeddings
and can be recorded and/or modulated with precomputed binary maps at
inference time.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import VOCAB
from .errors import ContractViolation
from .optim import ParamSet


@dataclass
class DenoiserConfig:
    in_channels: int = 8
    out_channels: int = 4
    base_channels: int = 40
    channel_mults: tuple = (1, 2)
    heads: int = 4
    d_txt: int = 64
    time_dim: int = 128
    groups: int = 8
    second_mid_block: bool = True
    vocab_size: int = field(default_factory=lambda: len(VOCAB))

    def __post_init__(self):
        if len(self.channel_mults) != 2:
            raise ContractViolation("this denoiser uses exactly two resolutions")


@dataclass
class AttentionRecord:
    layer: str
    weights: np.ndarray  # (B, heads, queries, key_tokens), post-softmax
    grid: tuple          # (h_l, w_l) spatial shape of the queries


def sinusoidal_embedding(t, dim):
    """Standard sin/cos position features for integer timesteps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)[None, :]
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(
        T.get_default_dtype())


class Dense:
    def __init__(self, ps, path, din, dout, rng=None, zero=False):
        if path + ".w" in ps:
            self.w, self.b = ps[path + ".w"], ps[path + ".b"]
            return
        scale = 0.0 if zero else np.sqrt(1.0 / din)
        self.w = ps.add(path + ".w", rng.standard_normal((din, dout)) * scale)
        self.b = ps.add(path + ".b", np.zeros(dout))

    def __call__(self, x):
        return T.add_bias(T.matmul(x, self.w), self.b)


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


class GNorm:
    def __init__(self, ps, path, channels, groups):
        self.groups = groups
        if path + ".g" in ps:
            self.g, self.b = ps[path + ".g"], ps[path + ".b"]
            return
        self.g = ps.add(path + ".g", np.ones(channels))
        self.b = ps.add(path + ".b", np.zeros(channels))

    def __call__(self, x):
        return T.group_norm(x, self.g, self.b, self.groups)


class ResBlock:
    def __init__(self, ps, path, cin, cout, time_dim, groups, rng):
        self.gn1 = GNorm(ps, path + ".gn1", cin, groups)
        self.conv1 = Conv(ps, path + ".conv1", cin, cout, rng=rng)
        self.time = Dense(ps, path + ".time", time_dim, cout, rng=rng)
        self.gn2 = GNorm(ps, path + ".gn2", cout, groups)
        self.conv2 = Conv(ps, path + ".conv2", cout, cout, rng=rng, zero=True)
        self.skip = Conv(ps, path + ".skip", cin, cout, k=1, rng=rng) \
            if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(T.silu(self.gn1(x)))
        h = T.add_time_bias(h, self.time(temb))
        h = self.conv2(T.silu(self.gn2(h)))
        return T.add(h, self.skip(x) if self.skip else x)


def _split_heads(x, heads):
    # (B, N, C) -> (B, heads, N, C/heads)
    B, N, C = x.shape
    x = T.reshape(x, (B, N, heads, C // heads))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x):
    # (B, heads, N, dh) -> (B, N, heads*dh)
    B, H, N, D = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, H * D))


class SelfAttention:
    def __init__(self, ps, path, channels, heads, groups, rng):
        self.heads = heads
        self.gn = GNorm(ps, path + ".gn", channels, groups)
        self.q = Dense(ps, path + ".q", channels, channels, rng=rng)
        self.k = Dense(ps, path + ".k", channels, channels, rng=rng)
        self.v = Dense(ps, path + ".v", channels, channels, rng=rng)
        self.out = Dense(ps, path + ".out", channels, channels, rng=rng, zero=True)

    def __call__(self, x):
        B, C, H, W = x.shape
        seq = T.transpose(T.reshape(self.gn(x), (B, C, H * W)), (0, 2, 1))
        q = _split_heads(self.q(seq), self.heads)
        k = _split_heads(self.k(seq), self.heads)
        v = _split_heads(self.v(seq), self.heads)
        scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                              1.0 / math.sqrt(q.shape[-1]))
        att = T.softmax(scores)
        out = self.out(_merge_heads(T.matmul(att, v)))
        out = T.reshape(T.transpose(out, (0, 2, 1)), (B, C, H, W))
        return T.add(x, out)


class CrossAttention:
    """Canvas queries attend over token keys; supports recording the
    post-softmax map and multiplying in a binary modulation map."""

    def __init__(self, ps, path, channels, d_txt, heads, groups, rng):
        self.path = path
        self.heads = heads
        self.gn = GNorm(ps, path + ".gn", channels, groups)
        self.q = Dense(ps, path + ".q", channels, channels, rng=rng)
        self.k = Dense(ps, path + ".k", d_txt, channels, rng=rng)
        self.v = Dense(ps, path + ".v", d_txt, channels, rng=rng)
        self.out = Dense(ps, path + ".out", channels, channels, rng=rng, zero=True)

    def __call__(self, x, text, modulation=None, records=None):
        B, C, H, W = x.shape
        seq = T.transpose(T.reshape(self.gn(x), (B, C, H * W)), (0, 2, 1))
        q = _split_heads(self.q(seq), self.heads)
        k = _split_heads(self.k(text), self.heads)
        v = _split_heads(self.v(text), self.heads)
        scores = T.mul_scalar(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                              1.0 / math.sqrt(q.shape[-1]))
        att = T.softmax(scores)
        if records is not None:
            records.append(AttentionRecord(self.path, att.data.copy(), (H, W)))
        if modulation is not None:
            m = modulation  # (B, Q, L), shared across heads
            if m.shape != (B, H * W, text.shape[1]):
                raise ContractViolation(
                    f"modulation shape {m.shape} does not match attention "
                    f"({B}, {H * W}, {text.shape[1]})")
            tiled = np.broadcast_to(m[:, None], att.shape).astype(att.data.dtype)
            att = T.mul(att, T.Tensor(tiled))
        out = self.out(_merge_heads(T.matmul(att, v)))
        out = T.reshape(T.transpose(out, (0, 2, 1)), (B, C, H, W))
        return T.add(x, out)


class UNet:
    """Two-resolution U-Net with self+cross attention at the coarse level and
    cross attention at both; the final conv is zero-initialized."""

    def __init__(self, params: ParamSet, cfg: DenoiserConfig, rng=None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        c0 = cfg.base_channels * cfg.channel_mults[0]
        c1 = cfg.base_channels * cfg.channel_mults[1]
        g = cfg.groups
        td = cfg.time_dim
        if "text.table" in params:
            self.table = params["text.table"]
        else:
            self.table = params.add(
                "text.table", rng.standard_normal((cfg.vocab_size, cfg.d_txt)) * 0.2)
        self.t1 = Dense(params, "unet.time1", 64, td, rng=rng)
        self.t2 = Dense(params, "unet.time2", td, td, rng=rng)
        self.conv_in = Conv(params, "unet.conv_in", cfg.in_channels, c0, rng=rng)
        self.res_d0 = ResBlock(params, "unet.res_d0", c0, c0, td, g, rng)
        self.ca_d0 = CrossAttention(params, "unet.ca_d0", c0, cfg.d_txt, cfg.heads, g, rng)
        self.down = Conv(params, "unet.down", c0, c1, stride=2, rng=rng)
        self.res_d1 = ResBlock(params, "unet.res_d1", c1, c1, td, g, rng)
        self.sa_1 = SelfAttention(params, "unet.sa_1", c1, cfg.heads, g, rng)
        self.ca_1 = CrossAttention(params, "unet.ca_1", c1, cfg.d_txt, cfg.heads, g, rng)
        self.res_m = ResBlock(params, "unet.res_m", c1, c1, td, g, rng)
        self.sa_m = SelfAttention(params, "unet.sa_m", c1, cfg.heads, g, rng)
        self.ca_m = CrossAttention(params, "unet.ca_m", c1, cfg.d_txt, cfg.heads, g, rng)
        self.res_m2 = ResBlock(params, "unet.res_m2", c1, c1, td, g, rng) \
            if cfg.second_mid_block else None
        self.reduce = Conv(params, "unet.reduce", c1, c0, k=1, rng=rng)
        self.res_u0 = ResBlock(params, "unet.res_u0", 2 * c0, c0, td, g, rng)
        self.ca_u0 = CrossAttention(params, "unet.ca_u0", c0, cfg.d_txt, cfg.heads, g, rng)
        self.out_gn = GNorm(params, "unet.out_gn", c0, g)
        self.out_conv = Conv(params, "unet.out", c0, cfg.out_channels, rng=rng, zero=True)
        # cross-attention layers by resolution level (0 = finest)
        self.cross_levels = {"unet.ca_d0": 0, "unet.ca_1": 1, "unet.ca_m": 1,
                             "unet.ca_u0": 0}

    def forward(self, x, t, token_ids, modulations=None, record_attention=False):
        """x: Tensor (B, in_channels, h, w); t: int array (B,); token_ids:
        int array (B, L). `modulations` maps level -> (B, Q_level, L) arrays.

        Returns (eps_hat Tensor (B, out_channels, h, w), attention records).
        """
        if x.shape[1] != self.cfg.in_channels:
            raise ContractViolation(
                f"denoiser expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        records = [] if record_attention else None
        mods = modulations or {}
        temb = self.t2(T.silu(self.t1(T.Tensor(sinusoidal_embedding(t, 64)))))
        text = T.gather_rows(self.table, np.asarray(token_ids))

        h0 = self.res_d0(self.conv_in(x), temb)
        h0 = self.ca_d0(h0, text, mods.get(0), records)
        h1 = self.res_d1(self.down(h0), temb)
        h1 = self.sa_1(h1)
        h1 = self.ca_1(h1, text, mods.get(1), records)
        h1 = self.res_m(h1, temb)
        h1 = self.sa_m(h1)
        h1 = self.ca_m(h1, text, mods.get(1), records)
        if self.res_m2 is not None:
            h1 = self.res_m2(h1, temb)
        u = T.upsample2x(self.reduce(h1))
        u = self.res_u0(T.concat([u, h0], axis=1), temb)
        u = self.ca_u0(u, text, mods.get(0), records)
        eps = self.out_conv(T.silu(self.out_gn(u)))
        return eps, (records or [])
