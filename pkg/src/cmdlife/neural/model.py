"""Multimodal regressor: structured MLP, two shallow CNNs, a post-norm
Transformer encoder over the 1 Hz sequence, concatenation fusion and a joint
two-output head.  Parameters live in a flat ordered dict of float arrays."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import BadConfig, SchemaMismatch
from . import layers as L

IMAGE_KEYS = ("hist", "snap")


@dataclass(frozen=True)
class ModelConfig:
    d_struct_in: int = 24
    d_mlp: int = 128
    d_seq_in: int = 4
    seq_len: int = 60
    d_seq_hidden: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    dropout: float = 0.1
    d_img: int = 512
    img_size: int = 64
    img_channels: int = 3
    cnn_channels: tuple = (16, 32, 64, 128)
    fusion_hidden: int = 256
    out_dim: int = 2

    def __post_init__(self):
        if self.d_seq_hidden % self.n_heads:
            raise BadConfig("d_seq_hidden must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig("dropout must lie in [0, 1)")
        if self.n_layers < 1 or not self.cnn_channels:
            raise BadConfig("need at least one encoder layer and one conv block")
        object.__setattr__(self, "cnn_channels", tuple(self.cnn_channels))

    @property
    def fusion_in(self) -> int:
        return self.d_mlp + self.d_seq_hidden + 2 * self.d_img

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "cnn_channels": tuple(d["cnn_channels"])})


def tiny_config(**kw) -> ModelConfig:
    """Small widths for finite-difference checks."""
    base = dict(d_struct_in=5, d_mlp=4, d_seq_in=4, seq_len=5, d_seq_hidden=4, n_layers=2, n_heads=2,
                d_ffn=6, dropout=0.1, d_img=3, img_size=8, img_channels=3, cnn_channels=(2, 3), fusion_hidden=5)
    base.update(kw)
    return ModelConfig(**base)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform fan-in weights, zero biases, unit layer-norm gains, N(0, 0.02^2) positions."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out):
        bound = 1.0 / math.sqrt(n_in)
        p[name + ".w"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        p[name + ".b"] = np.zeros(n_out)

    def ln(name, d):
        p[name + ".g"] = np.ones(d)
        p[name + ".b"] = np.zeros(d)

    lin("s0", cfg.d_struct_in, cfg.d_mlp)
    ln("s0.ln", cfg.d_mlp)
    lin("s1", cfg.d_mlp, cfg.d_mlp)
    ln("s1.ln", cfg.d_mlp)
    for key in IMAGE_KEYS:
        c_in = cfg.img_channels
        for k, c_out in enumerate(cfg.cnn_channels):
            lin(f"{key}.c{k}", 9 * c_in, c_out)
            c_in = c_out
        lin(f"{key}.proj", c_in, cfg.d_img)
    d = cfg.d_seq_hidden
    lin("seq.in", cfg.d_seq_in, d)
    p["seq.pos"] = rng.normal(0.0, 0.02, size=(cfg.seq_len, d))
    for l in range(cfg.n_layers):
        lin(f"seq.l{l}.qkv", d, 3 * d)
        lin(f"seq.l{l}.o", d, d)
        ln(f"seq.l{l}.ln1", d)
        lin(f"seq.l{l}.ff1", d, cfg.d_ffn)
        lin(f"seq.l{l}.ff2", cfg.d_ffn, d)
        ln(f"seq.l{l}.ln2", d)
    lin("fuse", cfg.fusion_in, cfg.fusion_hidden)
    ln("fuse.ln", cfg.fusion_hidden)
    lin("out", cfg.fusion_hidden, cfg.out_dim)
    return p


def check_batch(cfg: ModelConfig, batch: dict) -> int:
    s = np.shape(batch["struct"])
    n = s[0] if len(s) == 2 else -1
    expect = {
        "struct": (n, cfg.d_struct_in),
        "seq": (n, cfg.seq_len, cfg.d_seq_in),
        "hist": (n, cfg.img_size, cfg.img_size, cfg.img_channels),
        "snap": (n, cfg.img_size, cfg.img_size, cfg.img_channels),
    }
    for k, shape in expect.items():
        if k not in batch or tuple(np.shape(batch[k])) != shape:
            raise SchemaMismatch(f"input {k!r}: expected shape {shape}, got {np.shape(batch.get(k))}")
    return n


# ----------------------------------------------------------------------------
# forward


@dataclass
class Forward:
    out: np.ndarray
    attention: list[np.ndarray]  # per layer (B, heads, T, T)
    cache: dict = field(default_factory=dict, repr=False)


def _mlp_block(p, name, x, cfg, rng, train, cache):
    h, c_lin = L.linear(x, p[name + ".w"], p[name + ".b"])
    h, c_ln = L.layernorm(h, p[name + ".ln.g"], p[name + ".ln.b"])
    h, c_relu = L.relu(h)
    h, c_drop = L.dropout(h, cfg.dropout, rng, train)
    cache[name] = (c_lin, c_ln, c_relu, c_drop)
    return h


def _mlp_block_back(p, name, dy, cache, grads, need_dx=True):
    c_lin, c_ln, c_relu, c_drop = cache[name]
    d = L.dropout_back(dy, c_drop)
    d = L.relu_back(d, c_relu)
    d, grads[name + ".ln.g"], grads[name + ".ln.b"] = L.layernorm_back(d, c_ln, p[name + ".ln.g"])
    d, grads[name + ".w"], grads[name + ".b"] = L.linear_back(d, c_lin, p[name + ".w"], need_dx)
    return d


def cnn_encode(p, key, img, cfg, cache):
    h = img
    steps = []
    for k in range(len(cfg.cnn_channels)):
        h, c_conv = L.conv3s2(h, p[f"{key}.c{k}.w"], p[f"{key}.c{k}.b"])
        h, c_relu = L.relu(h)
        steps.append((c_conv, c_relu))
    pooled = h.mean(axis=(1, 2))
    out, c_proj = L.linear(pooled, p[f"{key}.proj.w"], p[f"{key}.proj.b"])
    cache[key] = (steps, h.shape, c_proj)
    return out


def _cnn_back(p, key, dy, cfg, cache, grads):
    steps, shape, c_proj = cache[key]
    dpool, grads[f"{key}.proj.w"], grads[f"{key}.proj.b"] = L.linear_back(dy, c_proj, p[f"{key}.proj.w"])
    d = np.broadcast_to(dpool[:, None, None, :] / (shape[1] * shape[2]), shape)
    for k in reversed(range(len(cfg.cnn_channels))):
        c_conv, c_relu = steps[k]
        d = L.relu_back(d, c_relu)
        d, grads[f"{key}.c{k}.w"], grads[f"{key}.c{k}.b"] = L.conv3s2_back(d, c_conv, p[f"{key}.c{k}.w"], k > 0)
    return d


def _split_heads(x, nh):
    b, t, d = x.shape
    return x.reshape(b, t, nh, d // nh).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, nh, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


def attention(p, name, h, nh):
    """Multi-head self-attention; returns output, row-stochastic maps and cache."""
    d = h.shape[-1]
    qkv, c_qkv = L.linear(h, p[name + ".qkv.w"], p[name + ".qkv.b"])
    q, k, v = (_split_heads(qkv[..., i * d:(i + 1) * d], nh) for i in range(3))
    scale = 1.0 / math.sqrt(d // nh)
    a = L.softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    o = _merge_heads(a @ v)
    out, c_o = L.linear(o, p[name + ".o.w"], p[name + ".o.b"])
    return out, a, (c_qkv, q, k, v, a, scale, c_o)


def _attention_back(p, name, dy, cache, nh, grads):
    c_qkv, q, k, v, a, scale, c_o = cache
    do, grads[name + ".o.w"], grads[name + ".o.b"] = L.linear_back(dy, c_o, p[name + ".o.w"])
    do = _split_heads(do, nh)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = L.softmax_back(da, a) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
    dh, grads[name + ".qkv.w"], grads[name + ".qkv.b"] = L.linear_back(dqkv, c_qkv, p[name + ".qkv.w"])
    return dh


def transformer_encode(p, seq, cfg: ModelConfig, rng=None, train=False, cache=None):
    """(B, T, d_seq_in) -> (B, d_seq_hidden) mean-pooled encoding and attention maps."""
    if seq.ndim != 3 or seq.shape[1] != cfg.seq_len or seq.shape[2] != cfg.d_seq_in:
        raise SchemaMismatch(f"sequence shape {seq.shape} != (B, {cfg.seq_len}, {cfg.d_seq_in})")
    cache = {} if cache is None else cache
    h, c_in = L.linear(seq, p["seq.in.w"], p["seq.in.b"])
    h = h + p["seq.pos"]
    maps, layer_caches = [], []
    for l in range(cfg.n_layers):
        n = f"seq.l{l}"
        a, amap, c_att = attention(p, n, h, cfg.n_heads)
        h1, c_ln1 = L.layernorm(h + a, p[n + ".ln1.g"], p[n + ".ln1.b"])
        f, c_ff1 = L.linear(h1, p[n + ".ff1.w"], p[n + ".ff1.b"])
        f, c_relu = L.relu(f)
        f, c_drop = L.dropout(f, cfg.dropout, rng, train)
        f, c_ff2 = L.linear(f, p[n + ".ff2.w"], p[n + ".ff2.b"])
        h, c_ln2 = L.layernorm(h1 + f, p[n + ".ln2.g"], p[n + ".ln2.b"])
        maps.append(amap)
        layer_caches.append((c_att, c_ln1, c_ff1, c_relu, c_drop, c_ff2, c_ln2))
    cache["seq"] = (c_in, layer_caches, seq.shape[1])
    return h.mean(axis=1), maps


def _transformer_back(p, dy, cfg, cache, grads):
    c_in, layer_caches, t = cache["seq"]
    dh = np.repeat(dy[:, None, :] / t, t, axis=1)
    for l in reversed(range(cfg.n_layers)):
        n = f"seq.l{l}"
        c_att, c_ln1, c_ff1, c_relu, c_drop, c_ff2, c_ln2 = layer_caches[l]
        dsum, grads[n + ".ln2.g"], grads[n + ".ln2.b"] = L.layernorm_back(dh, c_ln2, p[n + ".ln2.g"])
        df, grads[n + ".ff2.w"], grads[n + ".ff2.b"] = L.linear_back(dsum, c_ff2, p[n + ".ff2.w"])
        df = L.relu_back(L.dropout_back(df, c_drop), c_relu)
        dh1, grads[n + ".ff1.w"], grads[n + ".ff1.b"] = L.linear_back(df, c_ff1, p[n + ".ff1.w"])
        dh1 = dh1 + dsum
        dsum, grads[n + ".ln1.g"], grads[n + ".ln1.b"] = L.layernorm_back(dh1, c_ln1, p[n + ".ln1.g"])
        dh = _attention_back(p, n, dsum, c_att, cfg.n_heads, grads) + dsum
    grads["seq.pos"] = dh.sum(axis=0)
    _, grads["seq.in.w"], grads["seq.in.b"] = L.linear_back(dh, c_in, p["seq.in.w"], False)


def forward(p, cfg: ModelConfig, batch: dict, train: bool = False, rng=None) -> Forward:
    """Standardised (B, out_dim) outputs.  Dropout runs only when train is set."""
    check_batch(cfg, batch)
    if train and rng is None:
        rng = np.random.default_rng(0)
    cache: dict = {}
    s = _mlp_block(p, "s0", batch["struct"], cfg, rng, train, cache)
    s = _mlp_block(p, "s1", s, cfg, rng, train, cache)
    imgs = [cnn_encode(p, key, batch[key], cfg, cache) for key in IMAGE_KEYS]
    q, maps = transformer_encode(p, batch["seq"], cfg, rng, train, cache)
    z = np.concatenate([s, *imgs, q], axis=1)
    f = _mlp_block(p, "fuse", z, cfg, rng, train, cache)
    out, cache["out"] = L.linear(f, p["out.w"], p["out.b"])
    return Forward(out, maps, cache)


def backward(p, cfg: ModelConfig, fwd: Forward, dout: np.ndarray) -> dict[str, np.ndarray]:
    cache = fwd.cache
    grads: dict[str, np.ndarray] = {}
    df, grads["out.w"], grads["out.b"] = L.linear_back(dout, cache["out"], p["out.w"])
    dz = _mlp_block_back(p, "fuse", df, cache, grads)
    widths = [cfg.d_mlp, cfg.d_img, cfg.d_img, cfg.d_seq_hidden]
    parts = np.split(dz, np.cumsum(widths)[:-1], axis=1)
    ds = _mlp_block_back(p, "s1", parts[0], cache, grads)
    _mlp_block_back(p, "s0", ds, cache, grads, need_dx=False)
    for key, d in zip(IMAGE_KEYS, parts[1:3]):
        _cnn_back(p, key, d, cfg, cache, grads)
    _transformer_back(p, parts[3], cfg, cache, grads)
    return {k: grads[k] for k in p}
