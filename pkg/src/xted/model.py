"""Dependency-structured trajectory denoiser.

States, actions and rewards get their own encoders, self-attention stacks
and decoders. State and action streams exchange information through
cross-attention; the reward stream reads from both but never writes back,
so reward inputs cannot influence the state or action noise estimates.

Every attention block is conditioned through adaLN-style modulation
(scale, shift, gate) computed from a shared embedding of the diffusion step
and the optional return condition. Modulation weights start at zero, which
makes every block the identity map at initialization.

All stream tensors are batch-first: ``(B, L, width)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, FormatError
from .numerics import Tensor

STREAMS = ("s", "a", "r")
CKPT_MAGIC = b"XTEDCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    H: int = 20
    dim_s: int = 4
    dim_a: int = 2
    reward_enabled: bool = True
    embed_multiplier: int = 16
    n_s: int = 2
    n_a: int = 2
    n_r: int = 1
    heads: int = 4
    cond_dim: int = 32
    mlp_ratio: int = 4
    cfg_dropout: float = 0.25

    def __post_init__(self):
        for name in ("H", "dim_s", "dim_a", "embed_multiplier", "heads", "cond_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.H < 2:
            raise ConfigError("horizon H must be at least 2")
        for name in ("n_s", "n_a", "n_r"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.cond_dim % 4:
            raise ConfigError("cond_dim must be a multiple of 4")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ConfigError("cfg_dropout must lie in [0, 1]")

    def width(self, stream):
        """Embedding width of a stream, padded up to a multiple of ``heads``."""
        raw = {"s": self.dim_s, "a": self.dim_a, "r": 1}[stream] * self.embed_multiplier
        return int(math.ceil(raw / self.heads) * self.heads)

    def dim(self, stream):
        return {"s": self.dim_s, "a": self.dim_a, "r": 1}[stream]

    def n_blocks(self, stream):
        return {"s": self.n_s, "a": self.n_a, "r": self.n_r}[stream]

    @property
    def streams(self):
        return STREAMS if self.reward_enabled else STREAMS[:2]

    @property
    def transition_dim(self):
        return self.dim_s + self.dim_a + (1 if self.reward_enabled else 0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def values(self):
        return list(self.tensors.values())

    def copy(self):
        return DenoiserParams(self.config, {k: Tensor(v.data) for k, v in self.tensors.items()})


@dataclass
class ConditionInput:
    """Batch of conditions: diffusion step, optional normalized return, null flags."""

    k: np.ndarray
    ret: np.ndarray | None = None
    null: np.ndarray | None = None

    def __post_init__(self):
        self.k = np.atleast_1d(np.asarray(self.k, dtype=np.int64))
        n = self.k.shape[0]
        if self.ret is not None:
            self.ret = np.broadcast_to(np.asarray(self.ret, dtype=np.float64), (n,)).copy()
            if np.any(self.ret < 0.0) or np.any(self.ret > 1.0) or not np.all(np.isfinite(self.ret)):
                raise ValueError("return condition must lie in [0, 1]")
        if self.null is None:
            self.null = np.full(n, self.ret is None)
        else:
            self.null = np.broadcast_to(np.asarray(self.null, dtype=bool), (n,)).copy()
        if self.ret is None and not np.all(self.null):
            raise ValueError("rows without a return value must be marked null")

    @classmethod
    def unconditional(cls, k, n=None):
        k = np.full(n, k) if n is not None else k
        return cls(k=k)

    @classmethod
    def with_return(cls, k, ret, n=None):
        k = np.full(n, k) if n is not None else k
        return cls(k=k, ret=ret, null=False)

    def __len__(self):
        return self.k.shape[0]


# ---------------------------------------------------------------- init


def _dense(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))


def _self_block_shapes(prefix, d, cfg):
    hid = cfg.mlp_ratio * d
    return [
        (f"{prefix}.mod_w", (cfg.cond_dim, 4 * d), "zero"),
        (f"{prefix}.mod_b", (4 * d,), "zero"),
        (f"{prefix}.wq", (d, d), "dense"),
        (f"{prefix}.bq", (d,), "zero"),
        (f"{prefix}.wk", (d, d), "dense"),
        (f"{prefix}.bk", (d,), "zero"),
        (f"{prefix}.wv", (d, d), "dense"),
        (f"{prefix}.bv", (d,), "zero"),
        (f"{prefix}.wo", (d, d), "dense"),
        (f"{prefix}.bo", (d,), "zero"),
        (f"{prefix}.ffn_w1", (d, hid), "dense"),
        (f"{prefix}.ffn_b1", (hid,), "zero"),
        (f"{prefix}.ffn_w2", (hid, d), "dense"),
        (f"{prefix}.ffn_b2", (d,), "zero"),
    ]


def _cross_block_shapes(prefix, q_widths, d, cfg):
    c = cfg.cond_dim
    hid = cfg.mlp_ratio * d
    out = [
        (f"{prefix}.cq_w", (c, c), "dense"),
        (f"{prefix}.cq_b", (c,), "zero"),
        (f"{prefix}.ckv_w", (c, c), "dense"),
        (f"{prefix}.ckv_b", (c,), "zero"),
    ]
    for j, dq in enumerate(q_widths):
        out += [
            (f"{prefix}.modq{j}_w", (c, 2 * dq), "zero"),
            (f"{prefix}.modq{j}_b", (2 * dq,), "zero"),
            (f"{prefix}.wq{j}", (dq, d), "dense"),
            (f"{prefix}.bq{j}", (d,), "zero"),
        ]
    out += [
        (f"{prefix}.modkv_w", (c, 4 * d), "zero"),
        (f"{prefix}.modkv_b", (4 * d,), "zero"),
        (f"{prefix}.wk", (d, d), "dense"),
        (f"{prefix}.bk", (d,), "zero"),
        (f"{prefix}.wv", (d, d), "dense"),
        (f"{prefix}.bv", (d,), "zero"),
        (f"{prefix}.wo", (d, d), "dense"),
        (f"{prefix}.bo", (d,), "zero"),
        (f"{prefix}.ffn_w1", (d, hid), "dense"),
        (f"{prefix}.ffn_b1", (hid,), "zero"),
        (f"{prefix}.ffn_w2", (hid, d), "dense"),
        (f"{prefix}.ffn_b2", (d,), "zero"),
    ]
    return out


def param_layout(cfg):
    """Ordered ``(name, shape, init)`` triples. This order is the checkpoint order."""
    c, half = cfg.cond_dim, cfg.cond_dim // 2
    layout = [
        ("cond.ret_w", (1, half), "dense"),
        ("cond.ret_b", (half,), "zero"),
        ("cond.null", (half,), "normal"),
        ("cond.w", (c, c), "dense"),
        ("cond.b", (c,), "zero"),
    ]
    for s in cfg.streams:
        d, n = cfg.width(s), cfg.dim(s)
        layout += [
            (f"enc.{s}.w1", (n, d), "dense"),
            (f"enc.{s}.b1", (d,), "zero"),
            (f"enc.{s}.w2", (d, d), "dense"),
            (f"enc.{s}.b2", (d,), "zero"),
            (f"enc.{s}.pos", (cfg.H, d), "normal"),
        ]
        for i in range(cfg.n_blocks(s)):
            layout += _self_block_shapes(f"self.{s}.{i}", d, cfg)
    ds, da = cfg.width("s"), cfg.width("a")
    layout += _cross_block_shapes("cross.s", [da], ds, cfg)
    layout += _cross_block_shapes("cross.a", [ds], da, cfg)
    if cfg.reward_enabled:
        layout += _cross_block_shapes("cross.r", [ds, da], cfg.width("r"), cfg)
    for s in cfg.streams:
        d, n = cfg.width(s), cfg.dim(s)
        layout += [
            (f"dec.{s}.w1", (d, d), "dense"),
            (f"dec.{s}.b1", (d,), "zero"),
            (f"dec.{s}.w2", (d, n), "dense"),
            (f"dec.{s}.b2", (n,), "zero"),
        ]
    return layout


def init_params(cfg, seed=0, zero_gates=True):
    """Fresh parameters. ``zero_gates=False`` randomizes modulation weights too
    (used to exercise every path in gradient checks)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in param_layout(cfg):
        if kind == "dense":
            arr = _dense(rng, shape[0], shape[1]) if len(shape) == 2 else rng.normal(0, 0.1, shape)
        elif kind == "normal":
            arr = rng.normal(0.0, 0.1, size=shape)
        elif zero_gates:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.3, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True)
    return DenoiserParams(cfg, tensors)


# ---------------------------------------------------------------- layers


def sinusoidal(k, dim):
    """Sinusoidal features of integer steps, shape (B, dim)."""
    k = np.asarray(k, dtype=np.float64).reshape(-1, 1)
    n = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(n) / max(n, 1))
    out = np.zeros((k.shape[0], dim))
    out[:, :n] = np.sin(k * freqs)
    out[:, n : 2 * n] = np.cos(k * freqs)
    return out


def condition_features(c, params):
    """Pre-projection condition vector: [step features, return-or-null features]."""
    cfg = params.config
    half = cfg.cond_dim // 2
    n = len(c)
    step = Tensor._wrap(sinusoidal(c.k, half))
    null_mask = c.null.astype(np.float64).reshape(n, 1)
    null_part = nx.mul(params["cond.null"].reshape(1, half), null_mask)
    if c.ret is None:
        ret_part = null_part
    else:
        ret = np.where(c.null, 0.0, c.ret).reshape(n, 1)
        live = nx.linear(Tensor._wrap(ret), params["cond.ret_w"], params["cond.ret_b"])
        ret_part = nx.add(nx.mul(live, 1.0 - null_mask), null_part)
    return nx.concat([step, ret_part], axis=1)


def condition_embed(c, params):
    """Shared condition embedding ``e`` of shape (B, cond_dim)."""
    return nx.linear(condition_features(c, params), params["cond.w"], params["cond.b"])


def _modulation(e, w, b, n_chunks, d):
    z = nx.linear(nx.gelu(e), w, b)
    z = z.reshape(z.shape[0], 1, n_chunks * d)
    return nx.split(z, [d] * n_chunks, axis=-1)


def _modulate(x, scale, shift):
    return nx.add(nx.mul(nx.layer_norm(x), nx.add(scale, 1.0)), shift)


def _heads(x, h):
    b, L, d = x.shape
    return x.reshape(b, L, h, d // h).swapaxes(1, 2)


def _merge(x):
    b, h, L, dh = x.shape
    return x.swapaxes(1, 2).reshape(b, L, h * dh)


def _ffn(x, p, prefix):
    hid = nx.gelu(nx.linear(x, p[f"{prefix}.ffn_w1"], p[f"{prefix}.ffn_b1"]))
    return nx.linear(hid, p[f"{prefix}.ffn_w2"], p[f"{prefix}.ffn_b2"])


def _check_width(x, d, what):
    if x.ndim != 3 or x.shape[-1] != d:
        raise DimensionError(f"{what}: expected (B, L, {d}), got {x.shape}")


def self_attn_block(x, e, params, prefix):
    """Modulated pre-norm self-attention plus feed-forward, both gated residuals."""
    p, heads = params, params.config.heads
    d = p[f"{prefix}.wq"].shape[0]
    _check_width(x, d, prefix)
    scale, shift, g_attn, g_mlp = _modulation(e, p[f"{prefix}.mod_w"], p[f"{prefix}.mod_b"], 4, d)
    h = _modulate(x, scale, shift)
    q = _heads(nx.linear(h, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), heads)
    k = _heads(nx.linear(h, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _heads(nx.linear(h, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    att = nx.linear(_merge(nx.softmax_attention(q, k, v)), p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    x = nx.add(x, nx.mul(g_attn, att))
    ff = _ffn(_modulate(x, scale, shift), p, prefix)
    return nx.add(x, nx.mul(g_mlp, ff))


def _fold_queries(att, L_kv):
    """Map attention output over L_q query rows onto L_kv residual rows.

    Equal lengths pass through, a single query broadcasts, and a query
    sequence made of m stacked length-L_kv segments is averaged per position.
    """
    b, L_q, d = att.shape
    if L_q == L_kv:
        return att
    if L_q == 1:
        return att
    if L_q % L_kv == 0:
        m = L_q // L_kv
        return att.reshape(b, m, L_kv, d).mean(axis=1)
    raise DimensionError(f"cannot map {L_q} query rows onto {L_kv} key/value rows")


def cross_attn_block(x_q, x_kv, e, params, prefix):
    """Cross-attention that updates the key/value stream.

    ``x_q`` is one query stream or a list of them; a list is concatenated
    along the sequence axis after per-stream modulation and projection.
    Returns the updated ``x_kv`` with its own shape.
    """
    p, heads = params, params.config.heads
    queries = list(x_q) if isinstance(x_q, (list, tuple)) else [x_q]
    d = p[f"{prefix}.wk"].shape[0]
    _check_width(x_kv, d, f"{prefix} key/value stream")
    c_q = nx.linear(e, p[f"{prefix}.cq_w"], p[f"{prefix}.cq_b"])
    c_kv = nx.linear(e, p[f"{prefix}.ckv_w"], p[f"{prefix}.ckv_b"])
    projected = []
    for j, xq in enumerate(queries):
        dq = p[f"{prefix}.wq{j}"].shape[0]
        _check_width(xq, dq, f"{prefix} query stream {j}")
        sq, tq = _modulation(c_q, p[f"{prefix}.modq{j}_w"], p[f"{prefix}.modq{j}_b"], 2, dq)
        projected.append(nx.linear(_modulate(xq, sq, tq), p[f"{prefix}.wq{j}"], p[f"{prefix}.bq{j}"]))
    q = projected[0] if len(projected) == 1 else nx.concat(projected, axis=1)
    scale, shift, g_attn, g_mlp = _modulation(
        c_kv, p[f"{prefix}.modkv_w"], p[f"{prefix}.modkv_b"], 4, d
    )
    h = _modulate(x_kv, scale, shift)
    k = _heads(nx.linear(h, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), heads)
    v = _heads(nx.linear(h, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), heads)
    att = _merge(nx.softmax_attention(_heads(q, heads), k, v))
    att = _fold_queries(nx.linear(att, p[f"{prefix}.wo"], p[f"{prefix}.bo"]), x_kv.shape[1])
    x = nx.add(x_kv, nx.mul(g_attn, att))
    ff = _ffn(_modulate(x, scale, shift), p, prefix)
    return nx.add(x, nx.mul(g_mlp, ff))


def split_window(tau, cfg):
    """Split a (B, H, D) window array into per-stream Tensors."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim != 3 or tau.shape[1] != cfg.H or tau.shape[2] != cfg.transition_dim:
        raise DimensionError(
            f"window batch must be (B, {cfg.H}, {cfg.transition_dim}), got {tau.shape}"
        )
    s = Tensor._wrap(tau[:, :, : cfg.dim_s])
    a = Tensor._wrap(tau[:, :, cfg.dim_s : cfg.dim_s + cfg.dim_a])
    r = Tensor._wrap(tau[:, :, cfg.dim_s + cfg.dim_a :]) if cfg.reward_enabled else None
    return {"s": s, "a": a, "r": r}


def embed_stream(x, stream, params):
    """f_i plus learned positional embedding."""
    p = params
    h = nx.gelu(nx.linear(x, p[f"enc.{stream}.w1"], p[f"enc.{stream}.b1"]))
    h = nx.linear(h, p[f"enc.{stream}.w2"], p[f"enc.{stream}.b2"])
    return nx.add(h, p[f"enc.{stream}.pos"])


def encode(parts, e, params):
    """Per-stream encoder followed by that stream's self-attention stack."""
    cfg = params.config
    out = {}
    for s in STREAMS:
        if parts.get(s) is None:
            continue
        if s == "r" and not cfg.reward_enabled:
            raise ConfigError("reward input given but the model is reward-free")
        h = embed_stream(parts[s], s, params)
        for i in range(cfg.n_blocks(s)):
            h = self_attn_block(h, e, params, f"self.{s}.{i}")
        out[s] = h
    if cfg.reward_enabled and "r" not in out:
        raise ConfigError("reward-enabled model needs a reward sequence")
    return out


def cross_depend(h, e, params):
    """State/action exchange plus the one-way state-action to reward block."""
    new = {
        "s": cross_attn_block(h["a"], h["s"], e, params, "cross.s"),
        "a": cross_attn_block(h["s"], h["a"], e, params, "cross.a"),
    }
    if params.config.reward_enabled:
        new["r"] = cross_attn_block([h["s"], h["a"]], h["r"], e, params, "cross.r")
    return new


def decode(h, stream, params):
    p = params
    y = nx.gelu(nx.linear(h, p[f"dec.{stream}.w1"], p[f"dec.{stream}.b1"]))
    return nx.linear(y, p[f"dec.{stream}.w2"], p[f"dec.{stream}.b2"])


def predict_noise(tau_k, c, params):
    """Noise estimate for a batch of noised windows.

    Returns a dict of Tensors ``{"s": (B,H,dim_s), "a": (B,H,dim_a), "r": (B,H,1)}``;
    ``"r"`` is absent in reward-free mode.
    """
    parts = split_window(tau_k, params.config)
    if len(c) != tau_k.shape[0]:
        raise DimensionError(f"{len(c)} conditions for a batch of {tau_k.shape[0]}")
    e = condition_embed(c, params)
    h = cross_depend(encode(parts, e, params), e, params)
    return {s: decode(h[s], s, params) for s in h}


def predict_noise_array(tau_k, c, params):
    """Inference helper: the noise estimate as one (B, H, D) array."""
    y = predict_noise(tau_k, c, params)
    return np.concatenate([y[s].data for s in params.config.streams], axis=-1)


# ---------------------------------------------------------------- files


def _pack_json(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob


def _unpack_json(buf, off):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    return json.loads(buf[off : off + n].decode("utf-8")), off + n


def pack_tensors(arrays):
    """Serialize an ordered name->array mapping (float64 little-endian)."""
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def unpack_tensors(buf, off):
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return arrays, off


def checkpoint_bytes(params, meta=None, extra=None):
    """Checkpoint layout:

    magic ``XTEDCKPT`` | u32 version | u32 len + JSON model config |
    u32 len + JSON metadata | tensor table (parameters in ``param_layout``
    order, then any ``extra`` arrays such as the normalizer).
    """
    arrays = {name: params.tensors[name].data for name, _, _ in param_layout(params.config)}
    for name, arr in (extra or {}).items():
        arrays[name] = arr
    return (
        CKPT_MAGIC
        + struct.pack("<I", CKPT_VERSION)
        + _pack_json(params.config.to_dict())
        + _pack_json(meta or {})
        + pack_tensors(arrays)
    )


def parse_checkpoint(buf):
    if len(buf) < 12 or buf[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} but this build reads version {CKPT_VERSION}")
    try:
        cfg_dict, off = _unpack_json(buf, 12)
        meta, off = _unpack_json(buf, off)
        arrays, off = unpack_tensors(buf, off)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint tensor table")
    cfg = DenoiserConfig.from_dict(cfg_dict)
    tensors = {}
    for name, shape, _ in param_layout(cfg):
        if name not in arrays or arrays[name].shape != tuple(shape):
            raise FormatError(f"checkpoint parameter {name!r} missing or misshapen")
        tensors[name] = Tensor(arrays.pop(name), requires_grad=True)
    return DenoiserParams(cfg, tensors), meta, arrays


def save_checkpoint(path, params, meta=None, extra=None):
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(params, meta, extra))


def load_checkpoint(path):
    """Returns ``(params, meta, extra_arrays)``."""
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
