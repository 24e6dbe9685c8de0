"""Decoder-only transformer with full-recompute and KV-cached decode paths.

Architecture: pre-norm residual blocks, multi-head causal self-attention,
GELU (tanh approximation) feed-forward, learned absolute position
embeddings, untied LM head. Greedy decoding only; argmax ties break to the
lowest token id.

The compute core is batched with left-padding; the public single-sequence
operations wrap it at B=1. Because every kernel is row-independent and
reduction order never depends on batch or sequence shape (see kernels),
the cached, uncached, batched, and unbatched paths produce bit-identical
f32 results — the equivalence oracles in the test suite assert exactly
that instead of approximate closeness.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    CapacityError,
    ConfigError,
    FormatError,
    ParameterError,
    PositionError,
    VocabError,
)
from .rng import SplitMix64
from .tensor import DType, Tensor, read_tinf, round_to, write_tinf, layer_norm_f32

WEIGHT_SCALE = 0.05  # uniform init half-range


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int
    num_layers: int
    num_heads: int
    head_dim: int
    ffn_size: int
    max_position: int
    dtype: DType
    eos_token: int
    pad_token: int

    def __post_init__(self):
        counts = {
            "vocab_size": self.vocab_size,
            "hidden_size": self.hidden_size,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "ffn_size": self.ffn_size,
            "max_position": self.max_position,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_size != self.num_heads * self.head_dim:
            raise ConfigError(
                f"hidden_size ({self.hidden_size}) != num_heads*head_dim "
                f"({self.num_heads}*{self.head_dim})")
        for name in ("eos_token", "pad_token"):
            tok = getattr(self, name)
            if not isinstance(tok, int) or tok < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        if self.vocab_size <= max(self.eos_token, self.pad_token):
            raise ConfigError("vocab_size must exceed eos_token and pad_token")
        if not isinstance(self.dtype, DType):
            raise ConfigError("dtype must be a DType")

    def to_json(self) -> str:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["dtype"] = self.dtype.value
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"bad config JSON: {e}") from None
        expected = {f.name for f in fields(cls)}
        if set(d) != expected:
            raise FormatError(
                f"config fields {sorted(d)} != expected {sorted(expected)}")
        d["dtype"] = DType.from_name(d["dtype"])
        return cls(**d)


# Desk-scale reference configuration used by the benchmark harness.
def reference_config(dtype: DType = DType.F32) -> ModelConfig:
    return ModelConfig(
        vocab_size=4096, hidden_size=128, num_layers=4, num_heads=4,
        head_dim=32, ffn_size=512, max_position=512, dtype=dtype,
        eos_token=1, pad_token=2)


@dataclass
class LayerWeights:
    attn_norm_gamma: Tensor
    attn_norm_beta: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ffn_norm_gamma: Tensor
    ffn_norm_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class Model:
    """Weights plus config; immutable after construction (share freely)."""

    def __init__(self, config: ModelConfig, token_embedding: Tensor,
                 position_embedding: Tensor, layers: list[LayerWeights],
                 final_norm_gamma: Tensor, final_norm_beta: Tensor,
                 lm_head: Tensor):
        self.config = config
        self.token_embedding = token_embedding
        self.position_embedding = position_embedding
        self.layers = layers
        self.final_norm_gamma = final_norm_gamma
        self.final_norm_beta = final_norm_beta
        self.lm_head = lm_head
        self._f32: dict[str, np.ndarray] | None = None
        self._check_shapes()

    def _check_shapes(self):
        c = self.config
        expect = dict(_tensor_shapes(c))
        for name, t in self.named_tensors():
            if tuple(t.shape) != expect[name]:
                raise ConfigError(
                    f"weight {name} has shape {list(t.shape)}, expected "
                    f"{list(expect[name])}")
            if t.dtype is not c.dtype:
                raise ConfigError(f"weight {name} dtype != config dtype")

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Canonical (name, tensor) list — the TINF serialization order."""
        out = [("token_embedding", self.token_embedding),
               ("position_embedding", self.position_embedding)]
        for i, lw in enumerate(self.layers):
            p = f"layers.{i}."
            out += [
                (p + "attn_norm.gamma", lw.attn_norm_gamma),
                (p + "attn_norm.beta", lw.attn_norm_beta),
                (p + "attn.wq", lw.wq), (p + "attn.bq", lw.bq),
                (p + "attn.wk", lw.wk), (p + "attn.bk", lw.bk),
                (p + "attn.wv", lw.wv), (p + "attn.bv", lw.bv),
                (p + "attn.wo", lw.wo), (p + "attn.bo", lw.bo),
                (p + "ffn_norm.gamma", lw.ffn_norm_gamma),
                (p + "ffn_norm.beta", lw.ffn_norm_beta),
                (p + "ffn.w1", lw.w1), (p + "ffn.b1", lw.b1),
                (p + "ffn.w2", lw.w2), (p + "ffn.b2", lw.b2),
            ]
        out += [("final_norm.gamma", self.final_norm_gamma),
                ("final_norm.beta", self.final_norm_beta),
                ("lm_head", self.lm_head)]
        return out

    def f32(self, name: str) -> np.ndarray:
        """f32 compute view of a weight (memoized upcast for F16 models —
        exact, since f16 -> f32 is lossless)."""
        if self._f32 is None:
            self._f32 = {n: (t.array if t.dtype is DType.F32
                             else t.array.astype(np.float32))
                         for n, t in self.named_tensors()}
        return self._f32[name]

    def weight_bytes(self) -> dict[str, int]:
        return {name: t.nbytes for name, t in self.named_tensors()}


def _tensor_shapes(c: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    h, v, p, f = c.hidden_size, c.vocab_size, c.max_position, c.ffn_size
    out = [("token_embedding", (v, h)), ("position_embedding", (p, h))]
    for i in range(c.num_layers):
        pre = f"layers.{i}."
        out += [
            (pre + "attn_norm.gamma", (h,)), (pre + "attn_norm.beta", (h,)),
            (pre + "attn.wq", (h, h)), (pre + "attn.bq", (h,)),
            (pre + "attn.wk", (h, h)), (pre + "attn.bk", (h,)),
            (pre + "attn.wv", (h, h)), (pre + "attn.bv", (h,)),
            (pre + "attn.wo", (h, h)), (pre + "attn.bo", (h,)),
            (pre + "ffn_norm.gamma", (h,)), (pre + "ffn_norm.beta", (h,)),
            (pre + "ffn.w1", (h, f)), (pre + "ffn.b1", (f,)),
            (pre + "ffn.w2", (f, h)), (pre + "ffn.b2", (h,)),
        ]
    out += [("final_norm.gamma", (h,)), ("final_norm.beta", (h,)),
            ("lm_head", (h, v))]
    return out


def init_random(config: ModelConfig, seed: int) -> Model:
    """Deterministic random weights: one splitmix64 stream, canonical tensor
    order, uniform in [-0.05, 0.05]. Norm gammas are offset by +1 (a gain
    near zero would collapse every activation and make the model useless
    even as a stand-in)."""
    stream = SplitMix64(seed)
    arrays: dict[str, Tensor] = {}
    for name, shape in _tensor_shapes(config):
        n = int(np.prod(shape))
        vals = stream.uniform(n, -WEIGHT_SCALE, WEIGHT_SCALE).astype(np.float32)
        if name.endswith("norm.gamma"):
            vals = vals + np.float32(1.0)
        arr = vals.reshape(shape)
        arrays[name] = Tensor(round_to(arr, config.dtype), config.dtype)
    return _model_from_dict(config, arrays)


def _model_from_dict(config: ModelConfig, arrays: dict[str, Tensor]) -> Model:
    layers = []
    for i in range(config.num_layers):
        p = f"layers.{i}."
        layers.append(LayerWeights(
            attn_norm_gamma=arrays[p + "attn_norm.gamma"],
            attn_norm_beta=arrays[p + "attn_norm.beta"],
            wq=arrays[p + "attn.wq"], bq=arrays[p + "attn.bq"],
            wk=arrays[p + "attn.wk"], bk=arrays[p + "attn.bk"],
            wv=arrays[p + "attn.wv"], bv=arrays[p + "attn.bv"],
            wo=arrays[p + "attn.wo"], bo=arrays[p + "attn.bo"],
            ffn_norm_gamma=arrays[p + "ffn_norm.gamma"],
            ffn_norm_beta=arrays[p + "ffn_norm.beta"],
            w1=arrays[p + "ffn.w1"], b1=arrays[p + "ffn.b1"],
            w2=arrays[p + "ffn.w2"], b2=arrays[p + "ffn.b2"]))
    return Model(config, arrays["token_embedding"], arrays["position_embedding"],
                 layers, arrays["final_norm.gamma"], arrays["final_norm.beta"],
                 arrays["lm_head"])


def cast_model(model: Model, dtype: DType) -> Model:
    """Same weights re-rounded to another storage precision."""
    if dtype is model.config.dtype:
        return model
    cfg = ModelConfig(**{**_config_dict(model.config), "dtype": dtype})
    arrays = {}
    for name, t in model.named_tensors():
        f32 = t.array.astype(np.float32) if t.dtype is DType.F16 else t.array
        arrays[name] = Tensor(round_to(f32, dtype), dtype)
    return _model_from_dict(cfg, arrays)


def _config_dict(c: ModelConfig) -> dict:
    return {f.name: getattr(c, f.name) for f in fields(ModelConfig)}


# ---------------------------------------------------------------------------
# model files: <base>.tinf (weights) + <base>.json (config)
# ---------------------------------------------------------------------------

def config_path_for(weights_path: str | Path) -> Path:
    p = Path(weights_path)
    return p.with_suffix(".json") if p.suffix == ".tinf" else Path(str(p) + ".json")


def save_model(model: Model, weights_path: str | Path) -> None:
    write_tinf(str(weights_path), model.named_tensors())
    config_path_for(weights_path).write_text(model.config.to_json() + "\n",
                                             encoding="utf-8")


def load_model(weights_path: str | Path) -> Model:
    cfg = ModelConfig.from_json(
        config_path_for(weights_path).read_text(encoding="utf-8"))
    named = read_tinf(str(weights_path))
    expect = [name for name, _ in _tensor_shapes(cfg)]
    got = [name for name, _ in named]
    if got != expect:
        raise FormatError("weight file tensors do not match the config layout")
    return _model_from_dict(cfg, dict(named))


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------

class KVCache:
    """Per-layer append-only K/V store.

    Slots [0, len) are written once and never mutated. Storage follows the
    model dtype; for F16 an f32 mirror of the already-rounded values is
    kept so decode steps do not re-upcast the whole cache (bit-identical
    to upcasting on every use, since f16 -> f32 is exact).

    ``batch`` > 1 is used internally by batched generation; the public
    single-sequence accessors expose the batch-of-one layout from the
    module contract.
    """

    def __init__(self, config: ModelConfig, batch: int = 1,
                 capacity: int | None = None):
        if capacity is None:
            capacity = config.max_position
        if not 1 <= capacity <= config.max_position:
            raise ParameterError("cache capacity must be in [1, max_position]")
        self.config = config
        self.batch = batch
        self.capacity = capacity
        self.len = 0
        shape = (config.num_layers, batch, config.num_heads, capacity,
                 config.head_dim)
        self._k32 = np.zeros(shape, dtype=np.float32)
        self._v32 = np.zeros(shape, dtype=np.float32)
        if config.dtype is DType.F16:
            self._k16 = np.zeros(shape, dtype=np.float16)
            self._v16 = np.zeros(shape, dtype=np.float16)
        else:
            self._k16 = self._v16 = None

    def write(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        """Store f32 K/V rows [B, NH, T, D] at slots [len, len+T) after
        rounding to the storage dtype. ``commit`` advances len."""
        t = k.shape[2]
        lo, hi = self.len, self.len + t
        if hi > self.capacity:
            raise CapacityError(f"cache capacity {self.capacity} exceeded")
        if self._k16 is not None:
            k16 = round_to(k, DType.F16)
            v16 = round_to(v, DType.F16)
            self._k16[layer, :, :, lo:hi] = k16
            self._v16[layer, :, :, lo:hi] = v16
            self._k32[layer, :, :, lo:hi] = k16.astype(np.float32)
            self._v32[layer, :, :, lo:hi] = v16.astype(np.float32)
        else:
            self._k32[layer, :, :, lo:hi] = k
            self._v32[layer, :, :, lo:hi] = v

    def commit(self, t: int) -> None:
        self.len += t

    def view(self, layer: int, length: int) -> tuple[np.ndarray, np.ndarray]:
        return (self._k32[layer, :, :, :length], self._v32[layer, :, :, :length])

    # single-sequence accessors (module contract shape [NH, capacity, D])
    def keys(self, layer: int) -> Tensor:
        arr = (self._k16 if self._k16 is not None else self._k32)[layer, 0]
        return Tensor(arr.copy(), self.config.dtype)

    def values(self, layer: int) -> Tensor:
        arr = (self._v16 if self._v16 is not None else self._v32)[layer, 0]
        return Tensor(arr.copy(), self.config.dtype)

    def fingerprint(self) -> bytes:
        """Filled-slot bytes in slot-major order, so appending slots
        strictly appends bytes — a prefix mismatch means an old slot was
        rewritten (append-only violation)."""
        ks = (self._k16 if self._k16 is not None else self._k32)
        vs = (self._v16 if self._v16 is not None else self._v32)
        parts = []
        for slot in range(self.len):
            parts.append(ks[:, :, :, slot].tobytes())
            parts.append(vs[:, :, :, slot].tobytes())
        return b"".join(parts)


# ---------------------------------------------------------------------------
# instrumentation
# ---------------------------------------------------------------------------

@dataclass
class OpCounters:
    attn_macs: int = 0
    gemm_macs: int = 0
    launches: int = 0


COUNTERS = OpCounters()


def reset_counters() -> None:
    COUNTERS.attn_macs = 0
    COUNTERS.gemm_macs = 0
    COUNTERS.launches = 0


def snapshot_counters() -> OpCounters:
    return OpCounters(COUNTERS.attn_macs, COUNTERS.gemm_macs, COUNTERS.launches)


# ---------------------------------------------------------------------------
# forward core (batched, f32 compute, storage-dtype quantization points)
# ---------------------------------------------------------------------------

def _quant(x: np.ndarray, dtype: DType) -> np.ndarray:
    """Quantize activations to the storage dtype, keeping f32 layout."""
    if dtype is DType.F32:
        return x
    return round_to(x, DType.F16).astype(np.float32)


def _gemm(a2d: np.ndarray, w: np.ndarray, b: np.ndarray | None,
          fused: bool, act: int = kernels.ACT_NONE) -> np.ndarray:
    """Engine GEMM: fused runs bias+activation inside one launch, unfused
    issues separate launches. Identical f32 results either way (same
    per-element operation order)."""
    m, k = a2d.shape
    n = w.shape[1]
    COUNTERS.gemm_macs += m * k * n
    if fused:
        COUNTERS.launches += 1
        return kernels.gemm_f32(a2d, w, b, act)
    out = kernels.gemm_f32(a2d, w, None)
    COUNTERS.launches += 1
    if b is not None:
        kernels.bias_add(out, b)
        COUNTERS.launches += 1
    if act == kernels.ACT_GELU:
        kernels.gelu(out, out)
        COUNTERS.launches += 1
    return out


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, start: np.ndarray,
            qbase: int, scale: float) -> np.ndarray:
    b, nh, tq, d = q.shape
    # per sample, query row t touches (qbase + t + 1 - start_b) slots
    series = (qbase + 1 + qbase + tq) * tq // 2
    valid = b * series - int(start.sum()) * tq
    COUNTERS.attn_macs += 2 * nh * d * valid
    COUNTERS.launches += 1
    return kernels.attend_f32(q, k, v, start, qbase, scale)


def _forward_tokens(model: Model, ids: np.ndarray, pos: np.ndarray,
                    cache: KVCache, start: np.ndarray, fused: bool,
                    all_logits: bool) -> np.ndarray:
    """Run T new tokens [B, T] through every layer, appending K/V to
    ``cache`` at slots [cache.len, cache.len+T) and attending over all
    slots up to the new length. Returns logits [B, T, V] or [B, V]."""
    c = model.config
    B, T = ids.shape
    H, NH, D = c.hidden_size, c.num_heads, c.head_dim
    qbase = cache.len
    length = qbase + T
    scale = 1.0 / math.sqrt(D)

    tok = model.f32("token_embedding")[ids.reshape(-1)]
    posrows = model.f32("position_embedding")[pos.reshape(-1)]
    x = _quant((tok + posrows).reshape(B, T, H), c.dtype)
    COUNTERS.launches += 1

    for li in range(c.num_layers):
        pre = f"layers.{li}."
        h = _quant(layer_norm_f32(x, model.f32(pre + "attn_norm.gamma"),
                                  model.f32(pre + "attn_norm.beta"), 1e-5),
                   c.dtype)
        COUNTERS.launches += 1
        h2 = h.reshape(B * T, H)
        q = _quant(_gemm(h2, model.f32(pre + "attn.wq"),
                         model.f32(pre + "attn.bq"), fused), c.dtype)
        kk = _quant(_gemm(h2, model.f32(pre + "attn.wk"),
                          model.f32(pre + "attn.bk"), fused), c.dtype)
        vv = _quant(_gemm(h2, model.f32(pre + "attn.wv"),
                          model.f32(pre + "attn.bv"), fused), c.dtype)
        qh = q.reshape(B, T, NH, D).transpose(0, 2, 1, 3)
        kh = kk.reshape(B, T, NH, D).transpose(0, 2, 1, 3)
        vh = vv.reshape(B, T, NH, D).transpose(0, 2, 1, 3)
        cache.write(li, kh, vh)
        kall, vall = cache.view(li, length)
        a = _quant(_attend(np.ascontiguousarray(qh), kall, vall, start,
                           qbase, scale), c.dtype)
        merged = a.transpose(0, 2, 1, 3).reshape(B * T, H)
        o = _quant(_gemm(merged, model.f32(pre + "attn.wo"),
                         model.f32(pre + "attn.bo"), fused), c.dtype)
        x = _quant(x + o.reshape(B, T, H), c.dtype)
        COUNTERS.launches += 1

        h = _quant(layer_norm_f32(x, model.f32(pre + "ffn_norm.gamma"),
                                  model.f32(pre + "ffn_norm.beta"), 1e-5),
                   c.dtype)
        COUNTERS.launches += 1
        f = _quant(_gemm(h.reshape(B * T, H), model.f32(pre + "ffn.w1"),
                         model.f32(pre + "ffn.b1"), fused,
                         act=kernels.ACT_GELU), c.dtype)
        o = _quant(_gemm(f, model.f32(pre + "ffn.w2"),
                         model.f32(pre + "ffn.b2"), fused), c.dtype)
        x = _quant(x + o.reshape(B, T, H), c.dtype)
        COUNTERS.launches += 1

    cache.commit(T)
    h = _quant(layer_norm_f32(x, model.f32("final_norm.gamma"),
                              model.f32("final_norm.beta"), 1e-5), c.dtype)
    COUNTERS.launches += 1
    if all_logits:
        logits = _gemm(h.reshape(B * T, H), model.f32("lm_head"), None, fused)
        return _quant(logits, c.dtype).reshape(B, T, c.vocab_size)
    last = np.ascontiguousarray(h[:, -1, :])
    return _quant(_gemm(last, model.f32("lm_head"), None, fused), c.dtype)


def _check_ids(config: ModelConfig, ids) -> list[int]:
    out = []
    for t in ids:
        t = int(t)
        if not 0 <= t < config.vocab_size:
            raise VocabError(f"token id {t} out of range [0, {config.vocab_size})")
        out.append(t)
    return out


# ---------------------------------------------------------------------------
# public single-sequence operations
# ---------------------------------------------------------------------------

def embed(model: Model, token_ids, start_position: int = 0) -> Tensor:
    """Token embedding rows plus position rows [start, start+T)."""
    c = model.config
    ids = _check_ids(c, token_ids)
    t = len(ids)
    if t == 0:
        raise ParameterError("embed requires at least one token")
    if start_position < 0 or start_position + t > c.max_position:
        raise PositionError(
            f"positions [{start_position}, {start_position + t}) exceed "
            f"max_position {c.max_position}")
    tok = model.f32("token_embedding")[np.asarray(ids, dtype=np.int64)]
    pos = model.f32("position_embedding")[start_position:start_position + t]
    return Tensor(round_to(tok + pos, c.dtype), c.dtype)


def forward_full(model: Model, token_ids, fused: bool = True) -> Tensor:
    """Full-recompute causal forward pass; next-token logits per position."""
    c = model.config
    ids = _check_ids(c, token_ids)
    t = len(ids)
    if t == 0:
        raise ParameterError("forward_full requires at least one token")
    if t > c.max_position:
        raise PositionError(f"sequence length {t} exceeds max_position")
    scratch = KVCache(c, batch=1, capacity=t)
    arr = np.asarray(ids, dtype=np.int64).reshape(1, t)
    pos = np.arange(t, dtype=np.int64).reshape(1, t)
    logits = _forward_tokens(model, arr, pos, scratch, np.zeros(1, np.int64),
                             fused, all_logits=True)
    return Tensor(logits[0].astype(c.dtype.np_dtype), c.dtype)


def decode_step(model: Model, token_id: int, cache: KVCache,
                fused: bool = True) -> Tensor:
    """Incremental decode: project the new token only, append its K/V,
    attend over the cache. Returns [1, vocab] next-token logits."""
    c = model.config
    if cache.batch != 1:
        raise ParameterError("decode_step expects a single-sequence cache")
    if cache.len >= cache.capacity:
        raise CapacityError(f"cache is full (capacity {cache.capacity})")
    (tid,) = _check_ids(c, [token_id])
    ids = np.asarray([[tid]], dtype=np.int64)
    pos = np.asarray([[cache.len]], dtype=np.int64)
    logits = _forward_tokens(model, ids, pos, cache, np.zeros(1, np.int64),
                             fused, all_logits=False)
    return Tensor(logits.astype(c.dtype.np_dtype), c.dtype)


def greedy_decode(model: Model, prompt, max_new_tokens: int,
                  use_cache: bool = True, fused: bool = True) -> list[int]:
    """Greedy generation; stops at eos_token or after max_new_tokens."""
    c = model.config
    ids = _check_ids(c, prompt)
    if len(ids) < 1:
        raise ParameterError("prompt must contain at least one token")
    if max_new_tokens < 0:
        raise ParameterError("max_new_tokens must be >= 0")
    if len(ids) + max_new_tokens > c.max_position:
        raise PositionError(
            f"prompt ({len(ids)}) + max_new_tokens ({max_new_tokens}) "
            f"exceeds max_position {c.max_position}")
    seq = list(ids)
    if max_new_tokens == 0:
        return seq
    if use_cache:
        cache = KVCache(c, batch=1, capacity=len(ids) + max_new_tokens)
        arr = np.asarray(ids, dtype=np.int64).reshape(1, -1)
        pos = np.arange(len(ids), dtype=np.int64).reshape(1, -1)
        logits = _forward_tokens(model, arr, pos, cache, np.zeros(1, np.int64),
                                 fused, all_logits=False)
        for _ in range(max_new_tokens):
            nxt = int(np.argmax(logits[0]))
            seq.append(nxt)
            if nxt == c.eos_token or len(seq) - len(ids) == max_new_tokens:
                break
            logits = decode_step(model, nxt, cache, fused).array
    else:
        for _ in range(max_new_tokens):
            logits = forward_full(model, seq, fused).array
            nxt = int(np.argmax(logits[-1]))
            seq.append(nxt)
            if nxt == c.eos_token:
                break
    return seq


# ---------------------------------------------------------------------------
# batched generation (left-padded; engine-internal, used by the pipeline)
# ---------------------------------------------------------------------------

def batched_greedy_decode(model: Model, prompts: list[list[int]],
                          max_new_tokens: int, fused: bool = True
                          ) -> list[list[int]]:
    """KV-cached greedy generation for a group of prompts in lockstep.

    Prompts are left-padded with pad_token to the group maximum; padded
    slots are excluded from attention, so every sequence's tokens are
    bit-identical to its single-sequence decode.
    """
    c = model.config
    if not prompts:
        return []
    lens = []
    for p in prompts:
        ids = _check_ids(c, p)
        if len(ids) < 1:
            raise ParameterError("every prompt needs at least one token")
        if len(ids) + max_new_tokens > c.max_position:
            raise PositionError(
                f"prompt ({len(ids)}) + max_new_tokens exceeds max_position")
        lens.append(len(ids))
    B = len(prompts)
    L = max(lens)
    pads = np.asarray([L - n for n in lens], dtype=np.int64)
    ids = np.full((B, L), c.pad_token, dtype=np.int64)
    pos = np.zeros((B, L), dtype=np.int64)
    for i, p in enumerate(prompts):
        ids[i, pads[i]:] = p
        pos[i, pads[i]:] = np.arange(lens[i], dtype=np.int64)

    cache = KVCache(c, batch=B, capacity=min(L + max_new_tokens,
                                             c.max_position))
    seqs = [list(p) for p in prompts]
    if max_new_tokens == 0:
        return seqs
    logits = _forward_tokens(model, ids, pos, cache, pads, fused,
                             all_logits=False)
    done = [False] * B
    for step in range(max_new_tokens):
        nxt = np.argmax(logits, axis=1)
        feed = np.empty((B, 1), dtype=np.int64)
        newpos = np.empty((B, 1), dtype=np.int64)
        for i in range(B):
            tok = int(nxt[i])
            if not done[i]:
                seqs[i].append(tok)
                if tok == c.eos_token or len(seqs[i]) - lens[i] == max_new_tokens:
                    done[i] = True
            feed[i, 0] = tok
            newpos[i, 0] = cache.len - pads[i]
        if all(done) or step == max_new_tokens - 1:
            break
        logits = _forward_tokens(model, feed, newpos, cache, pads, fused,
                                 all_logits=False)
    return seqs
