"""Transformer encoder covering the BERT, ALBERT, DistilBERT and RoBERTa variants.

Variants differ only in configuration: depth, width, cross-layer parameter
sharing, factorized (E < H) embeddings, and pretraining flags consumed by
:mod:`sstbert.pretrain`. Forward passes return an explicit cache that the
matching backward pass consumes, accumulating into ``Parameter.grad``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError
from .tokenizer import Batch

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 2
    feedforward_size: int = 256
    vocab_size: int = 30522
    max_len: int = 64
    embedding_size: int = 0  # 0 means "same as hidden_size"
    share_layer_parameters: bool = False
    dropout_p: float = 0.1
    activation: str = "gelu"
    norm: str = "post"
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12
    nsp_enabled: bool = True
    dynamic_masking: bool = False
    name: str = "custom"

    def __post_init__(self):
        if not self.embedding_size:
            self.embedding_size = self.hidden_size
        self.validate()

    @property
    def factorized(self) -> bool:
        return self.embedding_size < self.hidden_size

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 1 <= self.embedding_size <= self.hidden_size:
            raise ValueError("embedding_size must lie in [1, hidden_size]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("post", "pre"):
            raise ValueError("norm must be 'post' or 'pre'")
        if min(self.vocab_size, self.max_len, self.feedforward_size, self.type_vocab_size) < 1:
            raise ValueError("sizes must be positive")

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in kinds:
                continue
            kwargs[k] = _parse_value(v, kinds[k]) if isinstance(v, str) else v
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        return cls.from_dict(parse_kv(text))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, kind) -> object:
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if kind == "bool":
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# presets

PRESETS = ("bert_base", "bert_large", "albert_base", "distilbert_base", "roberta_base", "roberta_large")

_FULL = {
    "bert_base": dict(num_layers=12, hidden_size=768, num_heads=12, feedforward_size=3072),
    "bert_large": dict(num_layers=24, hidden_size=1024, num_heads=16, feedforward_size=4096),
    "albert_base": dict(num_layers=12, hidden_size=768, num_heads=12, feedforward_size=3072,
                        embedding_size=128, share_layer_parameters=True),
    "distilbert_base": dict(num_layers=6, hidden_size=768, num_heads=12, feedforward_size=3072),
    "roberta_base": dict(num_layers=12, hidden_size=768, num_heads=12, feedforward_size=3072,
                         vocab_size=50265, nsp_enabled=False, dynamic_masking=True),
    "roberta_large": dict(num_layers=24, hidden_size=1024, num_heads=16, feedforward_size=4096,
                          vocab_size=50265, nsp_enabled=False, dynamic_masking=True),
}

# depth keeps the full-scale ratios (12 -> 2, 24 -> 4, 6 -> 1)
_TINY = {
    "bert_base": dict(num_layers=2, hidden_size=64, num_heads=2, feedforward_size=256),
    "bert_large": dict(num_layers=4, hidden_size=96, num_heads=3, feedforward_size=384),
    "albert_base": dict(num_layers=2, hidden_size=64, num_heads=2, feedforward_size=256,
                        embedding_size=32, share_layer_parameters=True),
    "distilbert_base": dict(num_layers=1, hidden_size=64, num_heads=2, feedforward_size=256),
    "roberta_base": dict(num_layers=2, hidden_size=64, num_heads=2, feedforward_size=256,
                         max_len=128, nsp_enabled=False, dynamic_masking=True),
    "roberta_large": dict(num_layers=4, hidden_size=96, num_heads=3, feedforward_size=384,
                          max_len=128, nsp_enabled=False, dynamic_masking=True),
}


def preset(name: str, scale: str = "full", **overrides) -> EncoderConfig:
    """Architecture for a named model family at ``full`` or ``tiny`` scale."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if scale == "full":
        base = dict(vocab_size=30522, max_len=512)
        table = _FULL
    elif scale == "tiny":
        base = dict(vocab_size=8000, max_len=64)
        table = _TINY
    else:
        raise ValueError(f"scale must be 'full' or 'tiny', got {scale!r}")
    kw = {**base, **table[name], "name": name}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return EncoderConfig(**kw)


# ---------------------------------------------------------------------------
# parameter layout


def embedding_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    e, h = cfg.embedding_size, cfg.hidden_size
    shapes = {
        "embeddings.token": (cfg.vocab_size, e),
        "embeddings.position": (cfg.max_len, e),
        "embeddings.segment": (cfg.type_vocab_size, e),
        "embeddings.ln.gain": (e,),
        "embeddings.ln.bias": (e,),
    }
    if cfg.factorized:
        shapes["embeddings.proj.weight"] = (e, h)
        shapes["embeddings.proj.bias"] = (h,)
    return shapes


def layer_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f = cfg.hidden_size, cfg.feedforward_size
    shapes = {}
    for name in ("query", "key", "value", "output"):
        shapes[f"attn.{name}.weight"] = (h, h)
        shapes[f"attn.{name}.bias"] = (h,)
    shapes.update({
        "attn_ln.gain": (h,),
        "attn_ln.bias": (h,),
        "ffn.in.weight": (h, f),
        "ffn.in.bias": (f,),
        "ffn.out.weight": (f, h),
        "ffn.out.bias": (h,),
        "ffn_ln.gain": (h,),
        "ffn_ln.bias": (h,),
    })
    return shapes


def head_shapes(cfg: EncoderConfig, num_classes: int = 0, mlm: bool = False, nsp: bool = False):
    h, e = cfg.hidden_size, cfg.embedding_size
    shapes = {}
    if num_classes:
        shapes["classifier.weight"] = (h, num_classes)
        shapes["classifier.bias"] = (num_classes,)
    if mlm:
        # decoder weight is tied to embeddings.token
        shapes["mlm.dense.weight"] = (h, e)
        shapes["mlm.dense.bias"] = (e,)
        shapes["mlm.ln.gain"] = (e,)
        shapes["mlm.ln.bias"] = (e,)
        shapes["mlm.bias"] = (cfg.vocab_size,)
    if nsp:
        shapes["nsp.weight"] = (h, 2)
        shapes["nsp.bias"] = (2,)
    return shapes


def layer_prefixes(cfg: EncoderConfig) -> list[str]:
    if cfg.share_layer_parameters:
        return ["layers.shared"] * cfg.num_layers
    return [f"layers.{i}" for i in range(cfg.num_layers)]


def count_parameters(cfg: EncoderConfig, num_classes: int = 0, mlm: bool = False, nsp: bool = False) -> int:
    """Closed-form count of trainable scalars.

    Embeddings: (V + max_len + segments) * E + 2E for the embedding norm, plus
    E*H + H when factorized. Each block: 4(H^2 + H) + 2HF + F + H + 4H. A shared
    block is counted once.
    """
    v, p, s = cfg.vocab_size, cfg.max_len, cfg.type_vocab_size
    e, h, f = cfg.embedding_size, cfg.hidden_size, cfg.feedforward_size
    total = (v + p + s) * e + 2 * e
    if e < h:
        total += e * h + h
    block = 4 * (h * h + h) + 2 * h * f + f + h + 4 * h
    total += block * (1 if cfg.share_layer_parameters else cfg.num_layers)
    if num_classes:
        total += h * num_classes + num_classes
    if mlm:
        total += h * e + e + 2 * e + v
    if nsp:
        total += 2 * h + 2
    return total


# ---------------------------------------------------------------------------
# model


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def _init_array(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape, dtype=dtype)
    if leaf == "bias":
        return np.zeros(shape, dtype=dtype)
    return truncated_normal(rng, shape).astype(dtype)


class Model:
    """Encoder parameters plus optional task heads.

    ``params`` maps unique names to :class:`Parameter`; with cross-layer
    sharing every layer resolves to the single ``layers.shared`` block.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Parameter], seed: int = 0,
                 num_classes: int = 0, mlm: bool = False, nsp: bool = False, head_dropout: float | None = None):
        self.config = config
        self.params = params
        self.seed = seed
        self.num_classes = num_classes
        self.mlm = mlm
        self.nsp = nsp
        self.head_dropout = config.dropout_p if head_dropout is None else head_dropout

    @property
    def dtype(self):
        return self.params["embeddings.token"].data.dtype

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def layer(self, i: int) -> dict[str, Parameter]:
        prefix = layer_prefixes(self.config)[i]
        return {k: self.params[f"{prefix}.{k}"] for k in layer_shapes(self.config)}

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def expected_parameters(self) -> int:
        return count_parameters(self.config, self.num_classes, self.mlm, self.nsp)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        params = {k: Parameter(k, p.data.astype(dtype)) for k, p in self.params.items()}
        return Model(self.config, params, self.seed, self.num_classes, self.mlm, self.nsp, self.head_dropout)

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def drop_pretraining_heads(self) -> "Model":
        for name in head_shapes(self.config, 0, mlm=True, nsp=True):
            self.params.pop(name, None)
        self.mlm = self.nsp = False
        return self

    def add_heads(self, num_classes: int = 0, mlm: bool = False, nsp: bool = False) -> "Model":
        """Allocate any missing heads, initialized like the encoder weights."""
        if num_classes and self.num_classes and num_classes != self.num_classes:
            raise ValueError("model already has a classifier with a different class count")
        want = head_shapes(self.config, num_classes, mlm, nsp)
        rng = np.random.default_rng([self.seed, 1 if num_classes else 0, int(mlm), int(nsp)])
        for name, shape in want.items():
            if name not in self.params:
                self.params[name] = Parameter(name, _init_array(name, shape, rng, self.dtype))
        self.num_classes = num_classes or self.num_classes
        self.mlm = self.mlm or mlm
        self.nsp = self.nsp or nsp
        return self


def init_model(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh encoder: truncated-normal(0.02) weights, zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    for name, shape in embedding_shapes(config).items():
        params[name] = Parameter(name, _init_array(name, shape, rng, dtype))
    for prefix in dict.fromkeys(layer_prefixes(config)):
        for name, shape in layer_shapes(config).items():
            full = f"{prefix}.{name}"
            params[full] = Parameter(full, _init_array(full, shape, rng, dtype))
    return Model(config, params, seed)


# ---------------------------------------------------------------------------
# forward / backward


class EncoderOutput(NamedTuple):
    hidden: np.ndarray
    pooled: np.ndarray
    attention_maps: list


def _additive_mask(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask[:, None, None, :] > 0, 0.0, -np.inf).astype(dtype)


def _split_heads(x, b, t, a, d):
    return x.reshape(b, t, a, d).transpose(0, 2, 1, 3)


def _merge_heads(x, b, t, h):
    return x.transpose(0, 2, 1, 3).reshape(b, t, h)


def _attention_forward(x, lp, addmask, cfg, training, rng):
    b, t, h = x.shape
    a, d = cfg.num_heads, cfg.head_size
    q, _ = T.linear_forward(x, lp["attn.query.weight"].data, lp["attn.query.bias"].data)
    k, _ = T.linear_forward(x, lp["attn.key.weight"].data, lp["attn.key.bias"].data)
    v, _ = T.linear_forward(x, lp["attn.value.weight"].data, lp["attn.value.bias"].data)
    qh, kh, vh = (_split_heads(z, b, t, a, d) for z in (q, k, v))
    scale = x.dtype.type(1.0 / math.sqrt(d))
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale + addmask
    probs = T._softmax(scores)
    probs_d, pmask = T.dropout_forward(probs, cfg.dropout_p, rng, training)
    ctx = _merge_heads(probs_d @ vh, b, t, h)
    out, _ = T.linear_forward(ctx, lp["attn.output.weight"].data, lp["attn.output.bias"].data)
    cache = (x, qh, kh, vh, probs, probs_d, pmask, ctx, scale)
    return out, probs, cache


def _attention_backward(dout, lp, cache, cfg):
    x, qh, kh, vh, probs, probs_d, pmask, ctx, scale = cache
    b, t, h = x.shape
    a, d = cfg.num_heads, cfg.head_size
    dctx, dw, db = T.linear_backward(dout, ctx, lp["attn.output.weight"].data)
    lp["attn.output.weight"].accumulate(dw)
    lp["attn.output.bias"].accumulate(db)
    dctx_h = _split_heads(dctx, b, t, a, d)
    dprobs_d = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = probs_d.transpose(0, 1, 3, 2) @ dctx_h
    dprobs = T.dropout_backward(dprobs_d, pmask)
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dscores = dscores * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dx = np.zeros_like(x)
    for name, dz in (("query", dqh), ("key", dkh), ("value", dvh)):
        dzm = _merge_heads(dz, b, t, h)
        dxi, dw, db = T.linear_backward(dzm, x, lp[f"attn.{name}.weight"].data)
        lp[f"attn.{name}.weight"].accumulate(dw)
        lp[f"attn.{name}.bias"].accumulate(db)
        dx += dxi
    return dx


def _ffn_forward(x, lp, cfg, training, rng):
    act_f, _ = T.ACTIVATIONS[cfg.activation]
    h1, _ = T.linear_forward(x, lp["ffn.in.weight"].data, lp["ffn.in.bias"].data)
    a, acache = act_f(h1)
    h2, _ = T.linear_forward(a, lp["ffn.out.weight"].data, lp["ffn.out.bias"].data)
    return h2, (x, a, acache)


def _ffn_backward(dh2, lp, cache, cfg):
    _, act_b = T.ACTIVATIONS[cfg.activation]
    x, a, acache = cache
    da, dw, db = T.linear_backward(dh2, a, lp["ffn.out.weight"].data)
    lp["ffn.out.weight"].accumulate(dw)
    lp["ffn.out.bias"].accumulate(db)
    dh1 = act_b(da, acache)
    dx, dw, db = T.linear_backward(dh1, x, lp["ffn.in.weight"].data)
    lp["ffn.in.weight"].accumulate(dw)
    lp["ffn.in.bias"].accumulate(db)
    return dx


def _ln(x, lp, name, eps):
    return T.layer_norm_forward(x, lp[f"{name}.gain"].data, lp[f"{name}.bias"].data, eps)


def _ln_back(dy, lp, name, cache):
    dx, dg, db = T.layer_norm_backward(dy, cache)
    lp[f"{name}.gain"].accumulate(dg)
    lp[f"{name}.bias"].accumulate(db)
    return dx


def _block_forward(x, lp, addmask, cfg, training, rng):
    eps = cfg.layer_norm_eps
    p = cfg.dropout_p
    if cfg.norm == "post":
        att, probs, acache = _attention_forward(x, lp, addmask, cfg, training, rng)
        att_d, m1 = T.dropout_forward(att, p, rng, training)
        y, ln1 = _ln(x + att_d, lp, "attn_ln", eps)
        f, fcache = _ffn_forward(y, lp, cfg, training, rng)
        f_d, m2 = T.dropout_forward(f, p, rng, training)
        z, ln2 = _ln(y + f_d, lp, "ffn_ln", eps)
    else:
        u, ln1 = _ln(x, lp, "attn_ln", eps)
        att, probs, acache = _attention_forward(u, lp, addmask, cfg, training, rng)
        att_d, m1 = T.dropout_forward(att, p, rng, training)
        y = x + att_d
        w, ln2 = _ln(y, lp, "ffn_ln", eps)
        f, fcache = _ffn_forward(w, lp, cfg, training, rng)
        f_d, m2 = T.dropout_forward(f, p, rng, training)
        z = y + f_d
    return z, probs, (acache, m1, ln1, fcache, m2, ln2)


def _block_backward(dz, lp, cache, cfg):
    acache, m1, ln1, fcache, m2, ln2 = cache
    if cfg.norm == "post":
        dsum2 = _ln_back(dz, lp, "ffn_ln", ln2)
        dy = dsum2 + _ffn_backward(T.dropout_backward(dsum2, m2), lp, fcache, cfg)
        dsum1 = _ln_back(dy, lp, "attn_ln", ln1)
        dx = dsum1 + _attention_backward(T.dropout_backward(dsum1, m1), lp, acache, cfg)
    else:
        dw = _ffn_backward(T.dropout_backward(dz, m2), lp, fcache, cfg)
        dy = dz + _ln_back(dw, lp, "ffn_ln", ln2)
        du = _attention_backward(T.dropout_backward(dy, m1), lp, acache, cfg)
        dx = dy + _ln_back(du, lp, "attn_ln", ln1)
    return dx


def check_batch(model: Model, batch: Batch) -> None:
    cfg = model.config
    ids = batch.ids
    if ids.ndim != 2:
        raise ShapeError(f"ids must be (batch, length), got {ids.shape}")
    if ids.shape[1] > cfg.max_len:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ShapeError(f"token id outside vocabulary of size {cfg.vocab_size}")
    if batch.segment_ids.size and batch.segment_ids.max() >= cfg.type_vocab_size:
        raise ShapeError("segment id outside type vocabulary")


def forward(model: Model, batch: Batch, training: bool = False, rng: np.random.Generator | None = None):
    """Run the encoder. Returns ``(EncoderOutput, cache)``.

    Padded keys receive -inf before the attention softmax; ``pooled`` is the
    final hidden state at position 0 ([CLS]).
    """
    check_batch(model, batch)
    cfg = model.config
    dtype = model.dtype
    p = model.params
    ids, seg = batch.ids, batch.segment_ids
    b, t = ids.shape
    emb = (
        T.embedding_lookup(p["embeddings.token"].data, ids)
        + p["embeddings.position"].data[:t][None, :, :]
        + T.embedding_lookup(p["embeddings.segment"].data, seg)
    )
    e_ln, ln_cache = T.layer_norm_forward(emb, p["embeddings.ln.gain"].data, p["embeddings.ln.bias"].data,
                                          cfg.layer_norm_eps)
    x, emb_mask = T.dropout_forward(e_ln, cfg.dropout_p, rng, training)
    proj_in = None
    if cfg.factorized:
        proj_in = x
        x, _ = T.linear_forward(x, p["embeddings.proj.weight"].data, p["embeddings.proj.bias"].data)
    addmask = _additive_mask(batch.attention_mask, dtype)
    maps, caches = [], []
    for i in range(cfg.num_layers):
        x, probs, c = _block_forward(x, model.layer(i), addmask, cfg, training, rng)
        maps.append(probs)
        caches.append(c)
    cache = dict(ids=ids, seg=seg, t=t, ln=ln_cache, emb_mask=emb_mask, proj_in=proj_in, blocks=caches)
    return EncoderOutput(x, x[:, 0, :], maps), cache


def backward(model: Model, cache: dict, d_hidden: np.ndarray, d_pooled: np.ndarray | None = None) -> None:
    """Accumulate parameter gradients given dLoss/dhidden (and optionally dLoss/dpooled)."""
    cfg = model.config
    p = model.params
    dx = np.array(d_hidden, dtype=model.dtype, copy=True)
    if d_pooled is not None:
        dx[:, 0, :] += d_pooled
    for i in reversed(range(cfg.num_layers)):
        dx = _block_backward(dx, model.layer(i), cache["blocks"][i], cfg)
    if cfg.factorized:
        dx, dw, db = T.linear_backward(dx, cache["proj_in"], p["embeddings.proj.weight"].data)
        p["embeddings.proj.weight"].accumulate(dw)
        p["embeddings.proj.bias"].accumulate(db)
    dx = T.dropout_backward(dx, cache["emb_mask"])
    demb, dg, db = T.layer_norm_backward(dx, cache["ln"])
    p["embeddings.ln.gain"].accumulate(dg)
    p["embeddings.ln.bias"].accumulate(db)
    p["embeddings.token"].accumulate(T.embedding_backward(demb, cache["ids"], cfg.vocab_size))
    dpos = np.zeros_like(p["embeddings.position"].data)
    dpos[: cache["t"]] = demb.sum(axis=0)
    p["embeddings.position"].accumulate(dpos)
    p["embeddings.segment"].accumulate(T.embedding_backward(demb, cache["seg"], cfg.type_vocab_size))


# ---------------------------------------------------------------------------
# heads


def classifier_forward(model: Model, pooled: np.ndarray, training: bool = False, rng=None):
    """Dropout on the pooled [CLS] vector followed by a linear layer. Returns logits."""
    if not model.num_classes:
        raise ValueError("model has no classification head")
    x, mask = T.dropout_forward(pooled, model.head_dropout, rng, training)
    logits, _ = T.linear_forward(x, model["classifier.weight"].data, model["classifier.bias"].data)
    return logits, (x, mask)


def classifier_backward(model: Model, dlogits: np.ndarray, cache) -> np.ndarray:
    x, mask = cache
    dx, dw, db = T.linear_backward(dlogits, x, model["classifier.weight"].data)
    model["classifier.weight"].accumulate(dw)
    model["classifier.bias"].accumulate(db)
    return T.dropout_backward(dx, mask)


def predict_proba(model: Model, batch: Batch) -> np.ndarray:
    out, _ = forward(model, batch, training=False)
    logits, _ = classifier_forward(model, out.pooled, training=False)
    return T.softmax(logits.astype(np.float64))


def mlm_forward(model: Model, hidden: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Vocabulary logits at the given (row, col) positions, decoder tied to the token embedding."""
    if not model.mlm:
        raise ValueError("model has no MLM head")
    cfg = model.config
    act_f, _ = T.ACTIVATIONS[cfg.activation]
    h = hidden[rows, cols]
    d, _ = T.linear_forward(h, model["mlm.dense.weight"].data, model["mlm.dense.bias"].data)
    a, acache = act_f(d)
    n, lncache = T.layer_norm_forward(a, model["mlm.ln.gain"].data, model["mlm.ln.bias"].data, cfg.layer_norm_eps)
    logits = n @ model["embeddings.token"].data.T + model["mlm.bias"].data
    return logits, (rows, cols, h, acache, lncache, n, hidden.shape)


def mlm_backward(model: Model, dlogits: np.ndarray, cache) -> np.ndarray:
    """Returns dLoss/dhidden (dense, zeros away from the selected positions)."""
    rows, cols, h, acache, lncache, n, hshape = cache
    _, act_b = T.ACTIVATIONS[model.config.activation]
    tok = model["embeddings.token"]
    model["mlm.bias"].accumulate(dlogits.sum(axis=0))
    tok.accumulate(dlogits.T @ n)
    dn = dlogits @ tok.data
    da, dg, db = T.layer_norm_backward(dn, lncache)
    model["mlm.ln.gain"].accumulate(dg)
    model["mlm.ln.bias"].accumulate(db)
    dd = act_b(da, acache)
    dh, dw, db = T.linear_backward(dd, h, model["mlm.dense.weight"].data)
    model["mlm.dense.weight"].accumulate(dw)
    model["mlm.dense.bias"].accumulate(db)
    dhidden = np.zeros(hshape, dtype=dlogits.dtype)
    np.add.at(dhidden, (rows, cols), dh)
    return dhidden


def nsp_forward(model: Model, pooled: np.ndarray):
    if not model.nsp:
        raise ValueError("model has no NSP head")
    logits, _ = T.linear_forward(pooled, model["nsp.weight"].data, model["nsp.bias"].data)
    return logits, pooled


def nsp_backward(model: Model, dlogits: np.ndarray, pooled: np.ndarray) -> np.ndarray:
    dx, dw, db = T.linear_backward(dlogits, pooled, model["nsp.weight"].data)
    model["nsp.weight"].accumulate(dw)
    model["nsp.bias"].accumulate(db)
    return dx
