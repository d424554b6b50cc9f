"""Miniature text-to-text encoder-decoder transformer.

Pre-norm blocks, RMS normalization (gain only), learned-table absolute
positions initialized sinusoidally, ReLU feed-forward, and an embedding
table tied between encoder input, decoder input, and the output projection.

Every projection and activation site carries a stable SiteId so adapter
mechanisms can attach without the core knowing which method is in use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

NEG_INF = -1e30

WEIGHT_KINDS = ("q", "k", "v", "o", "ffn_in", "ffn_out")
ACT_KINDS = ("act_k", "act_v", "act_ffn")
SITE_KINDS = WEIGHT_KINDS + ACT_KINDS

# "cross" addresses the cross-attention block of decoder layer `layer`.
STACKS = ("encoder", "decoder", "cross")


@dataclass(frozen=True)
class SiteId:
    stack: str
    layer: int
    kind: str

    def __str__(self) -> str:
        return f"{self.stack}.{self.layer}.{self.kind}"

    @staticmethod
    def parse(s: str) -> "SiteId":
        stack, layer, kind = s.split(".")
        return SiteId(stack, int(layer), kind)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    max_seq_len: int = 768
    context_bias: float = -6.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def weight_sites(config: ModelConfig):
    """All weight-matrix SiteIds in a stable order."""
    sites = []
    for layer in range(config.n_enc_layers):
        for kind in WEIGHT_KINDS:
            sites.append(SiteId("encoder", layer, kind))
    for layer in range(config.n_dec_layers):
        for kind in WEIGHT_KINDS:
            sites.append(SiteId("decoder", layer, kind))
        for kind in ("q", "k", "v", "o"):
            sites.append(SiteId("cross", layer, kind))
    return sites


def activation_sites(config: ModelConfig):
    """Activation-scaling SiteIds: k/v of every attention block plus FFN mid."""
    sites = []
    for layer in range(config.n_enc_layers):
        for kind in ACT_KINDS:
            sites.append(SiteId("encoder", layer, kind))
    for layer in range(config.n_dec_layers):
        for kind in ACT_KINDS:
            sites.append(SiteId("decoder", layer, kind))
        for kind in ("act_k", "act_v"):
            sites.append(SiteId("cross", layer, kind))
    return sites


def _weight_shape(config: ModelConfig, site: SiteId) -> tuple[int, int]:
    d, f = config.d_model, config.d_ff
    return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "ffn_in": (d, f), "ffn_out": (f, d)}[site.kind]


def activation_width(config: ModelConfig, site: SiteId) -> int:
    return config.d_ff if site.kind == "act_ffn" else config.d_model


def _norm_keys(config: ModelConfig):
    keys = []
    for layer in range(config.n_enc_layers):
        keys += [f"encoder.{layer}.norm_attn", f"encoder.{layer}.norm_ffn"]
    for layer in range(config.n_dec_layers):
        keys += [f"decoder.{layer}.norm_self", f"decoder.{layer}.norm_cross", f"decoder.{layer}.norm_ffn"]
    keys += ["encoder.final_norm", "decoder.final_norm"]
    return keys


def _sinusoidal(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table * 0.1


class ModelParams:
    """Frozen base parameters plus any non-mergeable activation scalings."""

    def __init__(self, config: ModelConfig, embedding: Tensor, positions: Tensor,
                 weights: dict, norms: dict, ffn_scalings: dict | None = None):
        self.config = config
        self.embedding = embedding
        self.positions = positions
        self.weights = weights
        self.norms = norms
        # SiteId -> np.ndarray: residue of merging a post-nonlinearity scaling.
        self.ffn_scalings = ffn_scalings or {}

    def named_tensors(self):
        yield "embedding", self.embedding
        yield "positions", self.positions
        for site in weight_sites(self.config):
            yield str(site), self.weights[site]
        for key in _norm_keys(self.config):
            yield key, self.norms[key]

    def scalar_count(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag
            t.grad = None


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    embedding = Tensor(rng.normal(0.0, 0.02, size=(config.vocab_size, config.d_model)))
    positions = Tensor(_sinusoidal(config.max_seq_len, config.d_model))
    weights = {}
    for site in weight_sites(config):
        fan_in, fan_out = _weight_shape(config, site)
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights[site] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    norms = {key: Tensor(np.ones(config.d_model)) for key in _norm_keys(config)}
    return ModelParams(config, embedding, positions, weights, norms)


def _linear(params: ModelParams, adapters, site: SiteId, x: Tensor, rng) -> Tensor:
    w = params.weights[site]
    if adapters is not None:
        return adapters.linear(site, x, w, rng)
    return T.matmul(x, w)


def _act(params: ModelParams, adapters, site: SiteId, h: Tensor) -> Tensor:
    if adapters is not None:
        h = adapters.scale_site(site, h)
    if site in params.ffn_scalings:
        h = T.mul(h, Tensor(params.ffn_scalings[site]))
    return h


def _project_kv(params, adapters, stack, layer, x_kv, rng):
    k = _linear(params, adapters, SiteId(stack, layer, "k"), x_kv, rng)
    v = _linear(params, adapters, SiteId(stack, layer, "v"), x_kv, rng)
    k = _act(params, adapters, SiteId(stack, layer, "act_k"), k)
    v = _act(params, adapters, SiteId(stack, layer, "act_v"), v)
    return k, v


def _attention_block(params, adapters, stack, layer, x_q, k, v, mask, rng):
    cfg = params.config
    q = _linear(params, adapters, SiteId(stack, layer, "q"), x_q, rng)
    out = T.attention(T.split_heads(q, cfg.n_heads), T.split_heads(k, cfg.n_heads),
                      T.split_heads(v, cfg.n_heads), mask)
    return _linear(params, adapters, SiteId(stack, layer, "o"), T.merge_heads(out), rng)


def _ffn_block(params, adapters, stack, layer, x, rng):
    h = _linear(params, adapters, SiteId(stack, layer, "ffn_in"), x, rng)
    h = T.relu(h)
    h = _act(params, adapters, SiteId(stack, layer, "act_ffn"), h)
    return _linear(params, adapters, SiteId(stack, layer, "ffn_out"), h, rng)


def _embed(params: ModelParams, ids, offset: int = 0) -> Tensor:
    tok = T.embedding_lookup(params.embedding, ids)
    pos = T.embedding_lookup(params.positions, np.arange(offset, offset + len(ids)))
    return T.add(tok, pos)


def _pad_key_mask(ids, n_queries: int) -> np.ndarray | None:
    ids = np.asarray(ids)
    if not (ids == PAD_ID).any():
        return None
    mask = np.zeros((n_queries, len(ids)))
    mask[:, ids == PAD_ID] = NEG_INF
    return mask


def _check_len(n: int, config: ModelConfig, what: str) -> None:
    if n > config.max_seq_len:
        raise DimensionError(f"{what} length {n} exceeds max_seq_len {config.max_seq_len}")


class EncoderPrefix:
    """Encoder state of a fixed context segment, reusable across queries.

    The segment attends only within itself, so its per-layer keys/values do
    not depend on any later query tokens. Queries encoded against it attend
    to the concatenation of segment and query positions; the decoder then
    reads only the query rows, so the exemplars steer the query encoding
    without drowning out the query itself.
    """

    def __init__(self, ids: list[int], layer_kvs: list[tuple[Tensor, Tensor]]):
        self.ids = list(ids)
        self.layer_kvs = layer_kvs

    def __len__(self) -> int:
        return len(self.ids)


def _encode_rows(params, adapters, ids, rng, context: EncoderPrefix | None, collect: bool):
    offset = len(context) if context is not None else 0
    _check_len(offset + len(ids), params.config, "input")
    all_ids = (context.ids + list(ids)) if context is not None else ids
    x = _embed(params, ids, offset)
    mask = _pad_key_mask(all_ids, len(ids))
    if context is not None:
        # Down-weight context keys so the query encoding is not drowned out
        # by a long exemplar prefix; attention can still grow past the bias.
        if mask is None:
            mask = np.zeros((len(ids), len(all_ids)))
        mask[:, :offset] += params.config.context_bias
    kvs: list[tuple[Tensor, Tensor]] = []
    for layer in range(params.config.n_enc_layers):
        normed = T.rms_norm(x, params.norms[f"encoder.{layer}.norm_attn"])
        k, v = _project_kv(params, adapters, "encoder", layer, normed, rng)
        if collect:
            kvs.append((k, v))
        if context is not None:
            pk, pv = context.layer_kvs[layer]
            k, v = T.concat_rows(pk, k), T.concat_rows(pv, v)
        x = T.add(x, _attention_block(params, adapters, "encoder", layer, normed, k, v, mask, rng))
        normed = T.rms_norm(x, params.norms[f"encoder.{layer}.norm_ffn"])
        x = T.add(x, _ffn_block(params, adapters, "encoder", layer, normed, rng))
    return T.rms_norm(x, params.norms["encoder.final_norm"]), kvs


def encode_context(params: ModelParams, adapters, prefix_ids, rng=None) -> EncoderPrefix:
    """Encode a fixed prompt prefix once; reusable across many queries."""
    _, kvs = _encode_rows(params, adapters, prefix_ids, rng, None, True)
    return EncoderPrefix(prefix_ids, kvs)


def encode(params: ModelParams, adapters, input_ids, rng=None,
           context: EncoderPrefix | None = None) -> Tensor:
    """Contextual encoder states; PAD tokens are masked out of attention.

    With ``context``, ``input_ids`` is the query segment; its rows attend
    over the context followed by the query, and only the query rows are
    returned.
    """
    final, _ = _encode_rows(params, adapters, input_ids, rng, context, False)
    return final


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF), k=1)


def _decode(params: ModelParams, adapters, enc_out: Tensor, dec_ids, enc_ids, rng=None) -> Tensor:
    """Logits (len(dec_ids), vocab) for next-token prediction at each decoder position."""
    _check_len(len(dec_ids), params.config, "target")
    y = _embed(params, dec_ids)
    causal = _causal_mask(len(dec_ids))
    cross_mask = _pad_key_mask(enc_ids, len(dec_ids))
    for layer in range(params.config.n_dec_layers):
        normed = T.rms_norm(y, params.norms[f"decoder.{layer}.norm_self"])
        k, v = _project_kv(params, adapters, "decoder", layer, normed, rng)
        y = T.add(y, _attention_block(params, adapters, "decoder", layer, normed, k, v, causal, rng))
        normed = T.rms_norm(y, params.norms[f"decoder.{layer}.norm_cross"])
        k, v = _project_kv(params, adapters, "cross", layer, enc_out, rng)
        y = T.add(y, _attention_block(params, adapters, "cross", layer, normed, k, v, cross_mask, rng))
        normed = T.rms_norm(y, params.norms[f"decoder.{layer}.norm_ffn"])
        y = T.add(y, _ffn_block(params, adapters, "decoder", layer, normed, rng))
    y = T.rms_norm(y, params.norms["decoder.final_norm"])
    return T.matmul_t(y, params.embedding)


def forward_logits(params: ModelParams, adapters, input_ids, target_ids, rng=None,
                   context: EncoderPrefix | None = None) -> Tensor:
    """Teacher-forced logits: row t is the distribution over target_ids[t] given target_ids[:t]."""
    if len(target_ids) < 1:
        raise DimensionError("target_ids must be non-empty")
    enc_out = encode(params, adapters, input_ids, rng, context)
    dec_ids = [BOS_ID] + list(target_ids[:-1])
    return _decode(params, adapters, enc_out, dec_ids, input_ids, rng)


def log_likelihood(params: ModelParams, adapters, input_ids, target_ids,
                   context: EncoderPrefix | None = None) -> float:
    logits = forward_logits(params, adapters, input_ids, target_ids, context=context).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(logp[np.arange(len(target_ids)), np.asarray(target_ids)].sum())


def greedy_generate(params: ModelParams, adapters, input_ids, max_new: int, eos: int = EOS_ID,
                    context: EncoderPrefix | None = None):
    """Argmax decoding; ties resolve to the lowest token id; stops at eos or max_new."""
    if max_new < 1:
        raise T.UsageError("max_new must be >= 1")
    enc_out = encode(params, adapters, input_ids, context=context)
    enc_ids = list(input_ids)
    out: list[int] = []
    for _ in range(max_new):
        logits = _decode(params, adapters, enc_out, [BOS_ID] + out, enc_ids)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        if nxt == eos:
            break
    return out
