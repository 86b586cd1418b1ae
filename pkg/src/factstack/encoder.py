"""A small pre-norm transformer encoder with exact hand-written gradients.

Everything runs in float64 numpy. A forward pass can record its activations
into a :class:`ForwardGraph`; head evaluations and loss gradients register
into the same graph, and :func:`backward` then produces the gradient for
every parameter tensor analytically. There is no autodiff framework behind
this; the backward pass is the source of truth that the finite-difference
tests in the suite verify.

Parameter tensors live in a flat name -> array dict in a fixed declaration
order (see :func:`param_shapes`), which is also the checkpoint layout:
a magic string, the config block, then raw little-endian float64 tensors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tokenizer import TokenSequence

__all__ = [
    "EncoderConfig", "EncoderParams", "ForwardGraph", "Gradients",
    "init_params", "param_shapes", "forward", "mlm_logits", "class_logits",
    "backward", "rehead", "stack_batch", "zero_grads",
    "softmax", "log_softmax", "softmax_cross_entropy",
    "save_checkpoint", "load_checkpoint",
    "INIT_STD", "CHECKPOINT_MAGIC",
]

INIT_STD = 0.02          # std of the scaled-normal weight init
LN_EPS = 1e-5
NEG_INF = -1e30          # additive attention bias for padded key positions
CHECKPOINT_MAGIC = b"FSENCHK1"
_CONFIG_STRUCT = struct.Struct("<7Id")  # vocab, max_len, d_model, heads, layers, d_ff, classes, dropout

Gradients = dict


@dataclass
class EncoderConfig:
    vocab_size: int
    max_len: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    dropout_rate: float = 0.1
    n_classes: int = 5

    def __post_init__(self) -> None:
        dims = (self.vocab_size, self.max_len, self.d_model,
                self.n_heads, self.n_layers, self.d_ff, self.n_classes)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive: {self}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")


def param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) declaration order for all parameter tensors."""
    v, l, d, f, c = (config.vocab_size, config.max_len, config.d_model,
                     config.d_ff, config.n_classes)
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
        ("pos_emb", (l, d)),
    ]
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w1", (d, f)), (p + "b1", (f,)),
            (p + "w2", (f, d)), (p + "b2", (d,)),
        ]
    shapes += [
        ("lnf_g", (d,)), ("lnf_b", (d,)),
        ("mlm_w", (d, v)), ("mlm_b", (v,)),
        ("cls_w", (d, c)), ("cls_b", (c,)),
    ]
    return shapes


@dataclass
class EncoderParams:
    """Config plus the flat tensor dict, in declaration order."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded initialization: weights and embeddings ~ N(0, INIT_STD^2),
    biases and layer-norm offsets 0, layer-norm scales 1."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif base.endswith("_b") and base.startswith("ln"):
            tensors[name] = np.zeros(shape)
        elif base.startswith("b") or base in ("mlm_b", "cls_b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
    return EncoderParams(config=config, tensors=tensors)


def rehead(params: EncoderParams, n_classes: int, seed: int) -> EncoderParams:
    """New params with a freshly initialized classification head of the
    requested width; everything else is copied."""
    cfg = EncoderConfig(
        vocab_size=params.config.vocab_size, max_len=params.config.max_len,
        d_model=params.config.d_model, n_heads=params.config.n_heads,
        n_layers=params.config.n_layers, d_ff=params.config.d_ff,
        dropout_rate=params.config.dropout_rate, n_classes=n_classes,
    )
    rng = np.random.default_rng(seed)
    out = EncoderParams(cfg, {k: v.copy() for k, v in params.tensors.items()})
    out.tensors["cls_w"] = rng.normal(0.0, INIT_STD, size=(cfg.d_model, n_classes))
    out.tensors["cls_b"] = np.zeros(n_classes)
    return out


def zero_grads(config: EncoderConfig) -> Gradients:
    return {name: np.zeros(shape) for name, shape in param_shapes(config)}


def stack_batch(batch: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into (ids, attention_mask) int64/float64 arrays."""
    ids = np.array([seq.ids for seq in batch], dtype=np.int64)
    mask = np.array([seq.attention_mask for seq in batch], dtype=np.float64)
    return ids, mask


# ---------------------------------------------------------------------------
# numeric primitives

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, target_ids: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy over rows; returns (loss, dloss/dlogits)."""
    if logits.ndim != 2 or len(target_ids) != logits.shape[0]:
        raise ValueError("logits must be (n, k) with one target per row")
    n = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    loss = -float(np.mean(logp[np.arange(n), target_ids]))
    dlogits = softmax(logits, axis=-1)
    dlogits[np.arange(n), target_ids] -= 1.0
    dlogits /= n
    return loss, dlogits


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def _ln_backward(dy: np.ndarray, g: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(np.float64) / keep


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class _LayerCache:
    x_in: np.ndarray
    ln1: tuple
    a: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    ctx: np.ndarray
    drop1: Optional[np.ndarray]
    x_mid: np.ndarray
    ln2: tuple
    f: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    drop2: Optional[np.ndarray]


@dataclass
class _ForwardCache:
    ids: np.ndarray
    mask: np.ndarray
    emb_drop: Optional[np.ndarray]
    layers: list[_LayerCache]
    lnf: tuple
    hidden: np.ndarray


@dataclass
class _HeadEval:
    kind: str                      # "mlm" | "cls"
    inputs: np.ndarray             # gathered hidden rows the head consumed
    where: object                  # mlm: (batch_idx, pos_idx) arrays; cls: None
    dlogits: Optional[np.ndarray] = None


class ForwardGraph:
    """Recorded activations of one forward pass plus its head/loss evaluations."""

    def __init__(self) -> None:
        self.cache: Optional[_ForwardCache] = None
        self.head_evals: list[_HeadEval] = []
        self.consumed = False

    def register_loss(self, dlogits: np.ndarray, kind: str = "mlm") -> None:
        """Attach a loss gradient (w.r.t. head logits) to the matching head
        evaluation recorded in this graph."""
        for ev in self.head_evals:
            if ev.kind == kind and ev.dlogits is None:
                if dlogits.shape[0] != ev.inputs.shape[0]:
                    raise ValueError(
                        f"loss gradient rows {dlogits.shape[0]} != head rows {ev.inputs.shape[0]}"
                    )
                ev.dlogits = np.asarray(dlogits, dtype=np.float64)
                return
        raise RuntimeError(f"no pending {kind!r} head evaluation in this graph")


def forward(
    params: EncoderParams,
    batch: Sequence[TokenSequence],
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    graph: Optional[ForwardGraph] = None,
) -> np.ndarray:
    """Run the encoder over a batch; returns hidden states (B, max_len, d_model).

    Attention never places weight on padded key positions, so padding tokens
    cannot influence any real position. Dropout fires only in train mode and
    requires an explicit generator; eval mode is fully deterministic.
    """
    cfg = params.config
    ids, mask = stack_batch(batch)
    if ids.shape[1] != cfg.max_len:
        raise ValueError(f"sequence length {ids.shape[1]} != configured max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range for vocabulary")
    drop = cfg.dropout_rate if train_mode else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("train-mode forward with dropout requires an explicit rng")

    t = params.tensors
    B, L, D, H = ids.shape[0], cfg.max_len, cfg.d_model, cfg.n_heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)

    x = t["tok_emb"][ids] + t["pos_emb"][np.newaxis, :, :]
    emb_drop = None
    if drop > 0.0:
        emb_drop = _dropout_mask(rng, x.shape, drop)
        x = x * emb_drop

    # additive bias: 0 on real key positions, NEG_INF on padding
    key_bias = (1.0 - mask)[:, np.newaxis, np.newaxis, :] * NEG_INF

    layer_caches: list[_LayerCache] = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        x_in = x
        a, ln1c = _ln_forward(x_in, t[p + "ln1_g"], t[p + "ln1_b"])
        a2d = a.reshape(B * L, D)

        def heads(w, b):
            return (a2d @ t[p + w] + t[p + b]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale + key_bias
        attn = softmax(scores, axis=-1)
        ctx = np.matmul(attn, v)                                # (B,H,L,dh)
        ctx2d = ctx.transpose(0, 2, 1, 3).reshape(B * L, D)
        o = (ctx2d @ t[p + "wo"] + t[p + "bo"]).reshape(B, L, D)
        drop1 = None
        if drop > 0.0:
            drop1 = _dropout_mask(rng, o.shape, drop)
            o = o * drop1
        x_mid = x_in + o

        f, ln2c = _ln_forward(x_mid, t[p + "ln2_g"], t[p + "ln2_b"])
        h1 = f.reshape(B * L, D) @ t[p + "w1"] + t[p + "b1"]
        a1 = _gelu(h1)
        o2 = (a1 @ t[p + "w2"] + t[p + "b2"]).reshape(B, L, D)
        drop2 = None
        if drop > 0.0:
            drop2 = _dropout_mask(rng, o2.shape, drop)
            o2 = o2 * drop2
        x = x_mid + o2

        if graph is not None:
            layer_caches.append(_LayerCache(
                x_in=x_in, ln1=ln1c, a=a, q=q, k=k, v=v, attn=attn, ctx=ctx,
                drop1=drop1, x_mid=x_mid, ln2=ln2c, f=f, h1=h1, a1=a1, drop2=drop2,
            ))

    hidden, lnfc = _ln_forward(x, t["lnf_g"], t["lnf_b"])

    if graph is not None:
        if graph.cache is not None:
            raise RuntimeError("graph already holds a recorded forward pass")
        graph.cache = _ForwardCache(
            ids=ids, mask=mask, emb_drop=emb_drop, layers=layer_caches,
            lnf=lnfc, hidden=hidden,
        )
    return hidden


def mlm_logits(
    params: EncoderParams,
    hidden: np.ndarray,
    positions: Sequence[Sequence[int]],
    graph: Optional[ForwardGraph] = None,
) -> np.ndarray:
    """Vocabulary logits at the requested positions.

    ``positions`` holds one index list per sequence in the batch; the result
    is the row-major concatenation, shape (total positions, vocab_size).
    """
    B, L, _ = hidden.shape
    if len(positions) != B:
        raise ValueError(f"positions for {len(positions)} sequences, batch has {B}")
    b_idx, p_idx = [], []
    for b, plist in enumerate(positions):
        for pos in plist:
            if not 0 <= pos < L:
                raise ValueError(f"position {pos} out of range for length {L}")
            b_idx.append(b)
            p_idx.append(pos)
    b_arr = np.array(b_idx, dtype=np.int64)
    p_arr = np.array(p_idx, dtype=np.int64)
    h_sel = hidden[b_arr, p_arr, :] if len(b_idx) else np.zeros((0, params.config.d_model))
    logits = h_sel @ params.tensors["mlm_w"] + params.tensors["mlm_b"]
    if graph is not None:
        graph.head_evals.append(_HeadEval(kind="mlm", inputs=h_sel, where=(b_arr, p_arr)))
    return logits


def class_logits(
    params: EncoderParams,
    hidden: np.ndarray,
    graph: Optional[ForwardGraph] = None,
) -> np.ndarray:
    """Classification logits (B, n_classes), read from the CLS position only."""
    h_cls = hidden[:, 0, :]
    logits = h_cls @ params.tensors["cls_w"] + params.tensors["cls_b"]
    if graph is not None:
        graph.head_evals.append(_HeadEval(kind="cls", inputs=h_cls, where=None))
    return logits


def backward(params: EncoderParams, graph: ForwardGraph) -> Gradients:
    """Exact analytic gradients for every parameter tensor.

    Requires a recorded forward pass and at least one registered loss
    gradient; a graph may be consumed only once.
    """
    if graph.cache is None:
        raise RuntimeError("backward called without a recorded forward pass")
    if graph.consumed:
        raise RuntimeError("graph already consumed by a previous backward call")
    live = [ev for ev in graph.head_evals if ev.dlogits is not None]
    if not live:
        raise RuntimeError("backward called without a registered loss gradient")
    graph.consumed = True

    cfg = params.config
    t = params.tensors
    cache = graph.cache
    B, L, D, H = cache.ids.shape[0], cfg.max_len, cfg.d_model, cfg.n_heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)
    grads = zero_grads(cfg)

    d_hidden = np.zeros((B, L, D))
    for ev in live:
        dlog = ev.dlogits
        if ev.kind == "mlm":
            grads["mlm_w"] += ev.inputs.T @ dlog
            grads["mlm_b"] += dlog.sum(axis=0)
            d_sel = dlog @ t["mlm_w"].T
            b_arr, p_arr = ev.where
            np.add.at(d_hidden, (b_arr, p_arr), d_sel)
        else:
            grads["cls_w"] += ev.inputs.T @ dlog
            grads["cls_b"] += dlog.sum(axis=0)
            d_hidden[:, 0, :] += dlog @ t["cls_w"].T

    dx, dg, db = _ln_backward(d_hidden, t["lnf_g"], cache.lnf)
    grads["lnf_g"] += dg
    grads["lnf_b"] += db

    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        lc = cache.layers[i]

        # feed-forward sublayer
        do2 = dx if lc.drop2 is None else dx * lc.drop2
        do2_2d = do2.reshape(B * L, D)
        grads[p + "w2"] += lc.a1.T @ do2_2d
        grads[p + "b2"] += do2_2d.sum(axis=0)
        da1 = do2_2d @ t[p + "w2"].T
        dh1 = da1 * _gelu_grad(lc.h1)
        f2d = lc.f.reshape(B * L, D)
        grads[p + "w1"] += f2d.T @ dh1
        grads[p + "b1"] += dh1.sum(axis=0)
        df = (dh1 @ t[p + "w1"].T).reshape(B, L, D)
        dx_mid, dg, db = _ln_backward(df, t[p + "ln2_g"], lc.ln2)
        grads[p + "ln2_g"] += dg
        grads[p + "ln2_b"] += db
        dx_mid = dx_mid + dx  # residual

        # attention sublayer
        do = dx_mid if lc.drop1 is None else dx_mid * lc.drop1
        do_2d = do.reshape(B * L, D)
        ctx2d = lc.ctx.transpose(0, 2, 1, 3).reshape(B * L, D)
        grads[p + "wo"] += ctx2d.T @ do_2d
        grads[p + "bo"] += do_2d.sum(axis=0)
        dctx = (do_2d @ t[p + "wo"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        dattn = np.matmul(dctx, lc.v.transpose(0, 1, 3, 2))
        dv = np.matmul(lc.attn.transpose(0, 1, 3, 2), dctx)
        # softmax backward, rowwise over key axis
        dscores = (dattn - np.sum(dattn * lc.attn, axis=-1, keepdims=True)) * lc.attn
        dq = np.matmul(dscores, lc.k) * scale
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), lc.q) * scale

        a2d = lc.a.reshape(B * L, D)
        da = np.zeros((B * L, D))
        for name, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            d2d = dmat.transpose(0, 2, 1, 3).reshape(B * L, D)
            grads[p + name] += a2d.T @ d2d
            grads[p + "b" + name[1]] += d2d.sum(axis=0)
            da += d2d @ t[p + name].T
        da = da.reshape(B, L, D)
        dx_in, dg, db = _ln_backward(da, t[p + "ln1_g"], lc.ln1)
        grads[p + "ln1_g"] += dg
        grads[p + "ln1_b"] += db
        dx = dx_in + dx_mid  # residual

    if cache.emb_drop is not None:
        dx = dx * cache.emb_drop
    grads["pos_emb"] += dx.sum(axis=0)
    flat_ids = cache.ids.reshape(-1)
    np.add.at(grads["tok_emb"], flat_ids, dx.reshape(B * L, D))
    return grads


# ---------------------------------------------------------------------------
# checkpoint io

def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Binary checkpoint: magic, config block, float64 tensors in declaration order."""
    cfg = params.config
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_CONFIG_STRUCT.pack(
            cfg.vocab_size, cfg.max_len, cfg.d_model, cfg.n_heads,
            cfg.n_layers, cfg.d_ff, cfg.n_classes, cfg.dropout_rate,
        ))
        for name, shape in param_shapes(cfg):
            arr = params.tensors[name]
            if tuple(arr.shape) != tuple(shape):
                raise ValueError(f"tensor {name} has shape {arr.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> EncoderParams:
    path = Path(path)
    data = path.read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an encoder checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    vals = _CONFIG_STRUCT.unpack_from(data, off)
    off += _CONFIG_STRUCT.size
    cfg = EncoderConfig(
        vocab_size=vals[0], max_len=vals[1], d_model=vals[2], n_heads=vals[3],
        n_layers=vals[4], d_ff=vals[5], n_classes=vals[6], dropout_rate=vals[7],
    )
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        end = off + 8 * n
        if end > len(data):
            raise ValueError(f"{path}: truncated checkpoint at tensor {name}")
        tensors[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after tensors")
    return EncoderParams(config=cfg, tensors=tensors)
