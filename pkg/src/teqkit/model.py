"""Desk-scale decoder-only transformer and the per-channel scale fusion.

The architecture is pre-LN with learned positional embeddings, a GELU
MLP and a byte-level vocabulary (256 bytes + BOS/EOS/PAD = 259), so the
fusion topology matches the usual LLM families: every layer norm feeds
either the q/k/v projections or the MLP up projection, and those are the
linears whose per-channel scales can be absorbed with zero runtime cost.

Weights of linear layers are stored as (c_in, c_out) and applied as
x @ W + b, so the input-channel (grouping/scaling) axis is axis 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .quant import QuantizedTensor, QuantSpec, dequantize, fake_quant
from .tensor import Tensor

BOS, EOS, PAD = 256, 257, 258
BYTE_VOCAB = 259

CAUSAL_NEG = np.float32(-1e9)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = BYTE_VOCAB
    max_seq_len: int = 128

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.n_layers, self.vocab_size, self.max_seq_len) < 1:
            raise ContractError("model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }


@dataclass(frozen=True)
class LayerRecord:
    """One node of the (static) layer graph, used for fusion-site discovery."""

    name: str
    kind: str  # embedding | layer_norm | linear | attention_compose | activation | residual_add | lm_head
    inputs: tuple
    c_in: int = 0
    c_out: int = 0


@dataclass(frozen=True)
class FusionSite:
    """A layer norm plus the linear consumers that can absorb its scales."""

    site_id: str
    predecessor: str  # layer-norm name
    consumers: tuple  # linear names sharing the predecessor output
    channel_count: int


class ModelGraph:
    """Parameter store plus static topology for the tiny transformer."""

    def __init__(self, config: ModelConfig, params: dict, layers: list):
        self.config = config
        self.params = params  # name -> float32 ndarray
        self.layers = layers  # list[LayerRecord], topological order
        # name -> QuantizedTensor for weights stored in integer form
        self.quantized: dict[str, QuantizedTensor] = {}

    def copy(self) -> "ModelGraph":
        clone = ModelGraph(
            self.config, {k: v.copy() for k, v in self.params.items()}, list(self.layers)
        )
        clone.quantized = dict(self.quantized)
        return clone

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def weight_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))

    def linear_names(self) -> list:
        return [r.name for r in self.layers if r.kind == "linear"]


def _layer_records(cfg: ModelConfig) -> list:
    d, ff = cfg.d_model, 4 * cfg.d_model
    recs = [
        LayerRecord("tok_emb", "embedding", ("tokens",), 0, d),
        LayerRecord("pos_emb", "embedding", ("tokens",), 0, d),
    ]
    prev = "tok_emb"
    for i in range(cfg.n_layers):
        b = f"block{i}"
        recs += [
            LayerRecord(f"{b}.ln1", "layer_norm", (prev,), d, d),
            LayerRecord(f"{b}.attn.q", "linear", (f"{b}.ln1",), d, d),
            LayerRecord(f"{b}.attn.k", "linear", (f"{b}.ln1",), d, d),
            LayerRecord(f"{b}.attn.v", "linear", (f"{b}.ln1",), d, d),
            LayerRecord(
                f"{b}.attn.mix",
                "attention_compose",
                (f"{b}.attn.q", f"{b}.attn.k", f"{b}.attn.v"),
                d,
                d,
            ),
            LayerRecord(f"{b}.attn.out", "linear", (f"{b}.attn.mix",), d, d),
            LayerRecord(f"{b}.res1", "residual_add", (prev, f"{b}.attn.out"), d, d),
            LayerRecord(f"{b}.ln2", "layer_norm", (f"{b}.res1",), d, d),
            LayerRecord(f"{b}.mlp.up", "linear", (f"{b}.ln2",), d, ff),
            LayerRecord(f"{b}.mlp.act", "activation", (f"{b}.mlp.up",), ff, ff),
            LayerRecord(f"{b}.mlp.down", "linear", (f"{b}.mlp.act",), ff, d),
            LayerRecord(f"{b}.res2", "residual_add", (f"{b}.res1", f"{b}.mlp.down"), d, d),
        ]
        prev = f"{b}.res2"
    recs += [
        LayerRecord("final_ln", "layer_norm", (prev,), d, d),
        LayerRecord("lm_head", "lm_head", ("final_ln",), d, cfg.vocab_size),
    ]
    return recs


def build_model(config: ModelConfig, seed: int) -> ModelGraph:
    """Deterministic random initialization from the seed."""
    rng = np.random.default_rng(seed)
    d, ff, v = config.d_model, 4 * config.d_model, config.vocab_size
    std = np.float32(0.02)

    def w(*shape):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    params: dict[str, np.ndarray] = {
        "tok_emb.weight": w(v, d),
        "pos_emb.weight": w(config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        b = f"block{i}"
        params[f"{b}.ln1.gamma"] = np.ones(d, dtype=np.float32)
        params[f"{b}.ln1.beta"] = np.zeros(d, dtype=np.float32)
        for h in ("q", "k", "v", "out"):
            params[f"{b}.attn.{h}.weight"] = w(d, d)
            params[f"{b}.attn.{h}.bias"] = np.zeros(d, dtype=np.float32)
        params[f"{b}.ln2.gamma"] = np.ones(d, dtype=np.float32)
        params[f"{b}.ln2.beta"] = np.zeros(d, dtype=np.float32)
        params[f"{b}.mlp.up.weight"] = w(d, ff)
        params[f"{b}.mlp.up.bias"] = np.zeros(ff, dtype=np.float32)
        params[f"{b}.mlp.down.weight"] = w(ff, d)
        params[f"{b}.mlp.down.bias"] = np.zeros(d, dtype=np.float32)
    params["final_ln.gamma"] = np.ones(d, dtype=np.float32)
    params["final_ln.beta"] = np.zeros(d, dtype=np.float32)
    params["lm_head.weight"] = w(d, v)
    params["lm_head.bias"] = np.zeros(v, dtype=np.float32)

    return ModelGraph(config, params, _layer_records(config))


def find_fusion_sites(model: ModelGraph) -> list:
    """One site per layer norm whose direct consumers are linear layers.

    The lm_head is never a consumer (kept in full precision), so the
    final layer norm yields no site. Depends only on topology.
    """
    by_input: dict[str, list[LayerRecord]] = {}
    for rec in model.layers:
        for inp in rec.inputs:
            by_input.setdefault(inp, []).append(rec)
    sites = []
    for rec in model.layers:
        if rec.kind != "layer_norm":
            continue
        consumers = [c for c in by_input.get(rec.name, []) if c.kind == "linear"]
        if not consumers:
            continue
        sites.append(
            FusionSite(
                site_id=rec.name,
                predecessor=rec.name,
                consumers=tuple(c.name for c in consumers),
                channel_count=rec.c_out,
            )
        )
    return sites


def fuse_scales(model: ModelGraph, scales: dict) -> ModelGraph:
    """Absorb per-channel scales: consumer weight rows times s, LN affine over s.

    The returned model computes the same function in exact arithmetic and
    contains no runtime scaling ops.
    """
    sites = {s.site_id: s for s in find_fusion_sites(model)}
    fused = model.copy()
    for site_id, s in scales.items():
        if site_id not in sites:
            raise ContractError(f"unknown fusion site {site_id!r}")
        site = sites[site_id]
        s = np.asarray(s, dtype=np.float32)
        if s.shape != (site.channel_count,):
            raise ShapeError(
                f"site {site_id}: scale length {s.shape} != channel count "
                f"{site.channel_count}"
            )
        if np.any(s <= 0.0):
            raise ContractError(f"site {site_id}: scales must be strictly positive")
        for name in site.consumers:
            fused.params[f"{name}.weight"] = fused.params[f"{name}.weight"] * s[:, None]
        fused.params[f"{site.predecessor}.gamma"] = (
            fused.params[f"{site.predecessor}.gamma"] / s
        )
        fused.params[f"{site.predecessor}.beta"] = (
            fused.params[f"{site.predecessor}.beta"] / s
        )
    return fused


def forward(
    model: ModelGraph,
    token_ids: np.ndarray,
    *,
    quant=None,  # QuantSpec, or callable (w, name) -> Tensor
    site_scales: dict | None = None,
    params_override: dict | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Causal LM forward returning logits (batch, t, vocab).

    quant:        fake-quantize every linear weight (lm_head and embeddings
                  stay full precision).
    site_scales:  site_id -> Tensor; consumer weights are scaled per input
                  channel before fake-quantization and the site's
                  activations divided by the same vector, both on the tape.
    capture:      dict filled with each linear's output array.
    """
    cfg = model.config
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    bsz, t = token_ids.shape
    if t > cfg.max_seq_len:
        raise ShapeError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if token_ids.min(initial=0) < 0 or token_ids.max(initial=0) >= cfg.vocab_size:
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")

    site_scales = site_scales or {}
    scale_of_linear: dict[str, Tensor] = {}
    scale_of_ln: dict[str, Tensor] = {}
    if site_scales:
        for site in find_fusion_sites(model):
            if site.site_id in site_scales:
                sv = site_scales[site.site_id]
                scale_of_ln[site.predecessor] = sv
                for name in site.consumers:
                    scale_of_linear[name] = sv

    overrides = params_override or {}
    tensor_cache: dict[str, Tensor] = {}

    def p(name: str) -> Tensor:
        if name not in tensor_cache:
            ov = overrides.get(name)
            tensor_cache[name] = ov if ov is not None else Tensor(model.params[name])
        return tensor_cache[name]

    def linear(x: Tensor, name: str) -> Tensor:
        w = p(f"{name}.weight")
        sv = scale_of_linear.get(name)
        if sv is not None:
            w = w.scale_channels(sv, axis=0)
        if quant is not None:
            # A callable stands in for the quantizer (used by gradient
            # checks that freeze rounding decisions).
            w = quant(w, name) if callable(quant) else fake_quant(w, quant)
        out = x.matmul(w).add(p(f"{name}.bias"))
        if capture is not None:
            capture[name] = out.data.copy()
        return out

    def maybe_divide(x: Tensor, ln_name: str) -> Tensor:
        sv = scale_of_ln.get(ln_name)
        return x.div_channels(sv, axis=-1) if sv is not None else x

    h = p("tok_emb.weight").embed(token_ids).add(
        p("pos_emb.weight").embed(np.tile(np.arange(t), (bsz, 1)))
    )

    d, nh = cfg.d_model, cfg.n_heads
    hd = d // nh
    mask = np.triu(np.full((t, t), CAUSAL_NEG, dtype=np.float32), k=1)

    for i in range(cfg.n_layers):
        b = f"block{i}"
        x_ln = h.layer_norm(p(f"{b}.ln1.gamma"), p(f"{b}.ln1.beta"))
        x_in = maybe_divide(x_ln, f"{b}.ln1")

        def heads(z: Tensor) -> Tensor:
            return z.reshape(bsz, t, nh, hd).transpose(0, 2, 1, 3)

        q = heads(linear(x_in, f"{b}.attn.q"))
        k = heads(linear(x_in, f"{b}.attn.k"))
        v = heads(linear(x_in, f"{b}.attn.v"))

        att = q.matmul(k.transpose(0, 1, 3, 2)).scale_const(1.0 / np.sqrt(hd))
        att = att.add_const(mask).softmax()
        mixed = att.matmul(v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        h = h.add(linear(mixed, f"{b}.attn.out"))

        y_ln = h.layer_norm(p(f"{b}.ln2.gamma"), p(f"{b}.ln2.beta"))
        y_in = maybe_divide(y_ln, f"{b}.ln2")
        up = linear(y_in, f"{b}.mlp.up").gelu()
        h = h.add(linear(up, f"{b}.mlp.down"))

    h = h.layer_norm(p("final_ln.gamma"), p("final_ln.beta"))
    logits = h.matmul(p("lm_head.weight")).add(p("lm_head.bias"))
    if capture is not None:
        capture["lm_head"] = logits.data.copy()
    return logits


def lm_loss(
    model: ModelGraph,
    token_ids: np.ndarray,
    targets: np.ndarray,
    **fwd_kwargs,
) -> Tensor:
    """Next-token cross-entropy over all positions."""
    logits = forward(model, token_ids, **fwd_kwargs)
    bsz, t, v = logits.shape
    return logits.reshape(bsz * t, v).cross_entropy(np.asarray(targets).reshape(-1))


def quantize_model(
    model: ModelGraph, spec: QuantSpec, scales: dict | None = None
) -> ModelGraph:
    """Deployment-time quantization: optional fusion, then RTN on every linear.

    The result keeps integer codes + scales in `quantized` and stores the
    dequantized weights in `params` so forward passes read reconstructed
    values. lm_head and embeddings stay full precision.
    """
    from .quant import compute_scales, quantize

    work = fuse_scales(model, scales) if scales else model.copy()
    out = work.copy()
    for name in work.linear_names():
        w = work.params[f"{name}.weight"]
        qt = quantize(w, compute_scales(w, spec), spec)
        out.quantized[f"{name}.weight"] = qt
        out.params[f"{name}.weight"] = dequantize(qt)
    return out
