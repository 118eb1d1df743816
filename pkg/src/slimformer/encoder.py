"""Pre-norm transformer encoder classifier, parameterized for structured
prunability at five granularities: feature dimensions, attention heads, FFN
intermediate dimensions, whole attention sublayers and whole FFN sublayers.

Gating conventions (chosen so that a zero gate is exactly equivalent to
physical removal):

* head gates scale each head's slice of the attention output before the
  output projection;
* whole-sublayer gates scale the residual update, so a zero-gated sublayer
  is the identity;
* the feature-dimension gate multiplies the embedding output and every
  residual update, and in hard (binarized) mode LayerNorm statistics are
  restricted to surviving dimensions — this makes masked execution agree
  with a model whose dimensions were physically sliced out.

Attention masking uses the explicit renormalization
``A = M * R / sum(M * R)`` with ``R = exp(QK^T / sqrt(d_h))``; this equals
additive -inf masking where both are defined, and guarantees that masked
execution matches attention run on the physically extracted subsequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    div,
    embedding,
    exp,
    gather,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    sub,
    tanh,
    tsum,
    transpose,
)

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the encoder classifier."""

    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_seq_len: int
    num_labels: int
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "num_labels"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "num_labels": self.num_labels,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class StructuredMasks:
    """Gates over the five static granularities.

    ``hidden`` is one shared feature-dimension gate for the whole model;
    the other four are per layer. Values live in [0, 1] during training and
    are binarized for finalization.
    """

    hidden: Tensor
    heads: list
    intermediate: list
    mha: list
    ffn: list

    @classmethod
    def all_ones(cls, config: ModelConfig) -> "StructuredMasks":
        return cls(
            hidden=Tensor(np.ones(config.hidden_dim)),
            heads=[Tensor(np.ones(config.num_heads)) for _ in range(config.num_layers)],
            intermediate=[Tensor(np.ones(config.ffn_dim)) for _ in range(config.num_layers)],
            mha=[Tensor(np.ones(())) for _ in range(config.num_layers)],
            ffn=[Tensor(np.ones(())) for _ in range(config.num_layers)],
        )

    def values(self) -> dict:
        """Raw gate values as numpy arrays, keyed like checkpoint entries."""
        out = {"masks.hidden": self.hidden.data}
        for i in range(len(self.heads)):
            out[f"masks.{i}.heads"] = self.heads[i].data
            out[f"masks.{i}.intermediate"] = self.intermediate[i].data
            out[f"masks.{i}.mha"] = self.mha[i].data
            out[f"masks.{i}.ffn"] = self.ffn[i].data
        return out

    @classmethod
    def from_values(cls, values: dict, num_layers: int) -> "StructuredMasks":
        return cls(
            hidden=Tensor(values["masks.hidden"]),
            heads=[Tensor(values[f"masks.{i}.heads"]) for i in range(num_layers)],
            intermediate=[Tensor(values[f"masks.{i}.intermediate"]) for i in range(num_layers)],
            mha=[Tensor(values[f"masks.{i}.mha"]) for i in range(num_layers)],
            ffn=[Tensor(values[f"masks.{i}.ffn"]) for i in range(num_layers)],
        )

    def is_binary(self) -> bool:
        for arr in self.values().values():
            if not np.all(np.isin(arr, (0.0, 1.0))):
                return False
        return True

    def check_all_in_unit_interval(self) -> None:
        for key, arr in self.values().items():
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise ValueError(f"gate values of {key} escape [0, 1]")


@dataclass
class EncoderActivations:
    """Intermediate states exposed for the loss terms and distillation."""

    hidden_states: list = field(default_factory=list)  # h^i entering each layer's sampler point
    sampler_views: list = field(default_factory=list)  # scale-referenced h^i seen by the samplers
    keep_probs: list = field(default_factory=list)
    token_masks: list = field(default_factory=list)  # cumulative keep mask used at each layer
    attention_probs: list = field(default_factory=list)
    trunk: Tensor = None  # final residual stream, before the final norm
    final_hidden: Tensor = None
    pooled: Tensor = None
    logits: Tensor = None


def sampler_view(h: Tensor, live) -> Tensor:
    """Hidden states divided by a per-example RMS reference over live rows.

    A pre-norm residual trunk has a scale gauge freedom: scaling all states
    by a constant leaves the logits unchanged (LayerNorm absorbs it), so a
    raw norm penalty would be minimized by shrinking the trunk rather than
    by dropping tokens. The view is exactly invariant along that gauge
    direction while keeping relative token energies, so compression pressure
    on it can only be satisfied by dropping tokens. Fully differentiable;
    masked and physically pruned execution (same live rows) see identical
    views.
    """
    d = h.data.shape[-1]
    live = _as_live_tensor(live, h.data.shape[:-1])
    weighted = mul(mul(h, h), reshape(live, live.data.shape + (1,)))
    sq = tsum(tsum(weighted, axis=-1, keepdims=True), axis=-2, keepdims=True)
    count = mul(tsum(live, axis=-1, keepdims=True), float(d))
    scale = add(div(sq, reshape(count, count.data.shape + (1,))), 1e-12) ** 0.5
    return div(h, scale)


def _as_live_tensor(live, shape) -> Tensor:
    if isinstance(live, Tensor):
        return live
    return Tensor(np.broadcast_to(np.asarray(live, dtype=np.float64), shape).copy())


def init_params(config: ModelConfig, rng: np.random.Generator, init_scale: float = 0.02) -> dict:
    """Fresh parameter dictionary. Insertion order is the canonical order."""

    def normal(*shape):
        return Tensor(rng.normal(0.0, init_scale, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    d, f = config.hidden_dim, config.ffn_dim
    params = {
        "tok_emb": normal(config.vocab_size, d),
        "pos_emb": normal(config.max_seq_len, d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        params[p + "attn_ln_g"] = ones(d)
        params[p + "attn_ln_b"] = zeros(d)
        params[p + "wq"] = normal(d, d)
        params[p + "bq"] = zeros(d)
        params[p + "wk"] = normal(d, d)
        params[p + "bk"] = zeros(d)
        params[p + "wv"] = normal(d, d)
        params[p + "bv"] = zeros(d)
        params[p + "wo"] = normal(d, d)
        params[p + "bo"] = zeros(d)
        params[p + "ffn_ln_g"] = ones(d)
        params[p + "ffn_ln_b"] = zeros(d)
        params[p + "w1"] = normal(d, f)
        params[p + "b1"] = zeros(f)
        params[p + "w2"] = normal(f, d)
        params[p + "b2"] = zeros(d)
    params["final_ln_g"] = ones(d)
    params["final_ln_b"] = zeros(d)
    params["pooler_w"] = normal(d, d)
    params["pooler_b"] = zeros(d)
    params["cls_w"] = normal(d, config.num_labels)
    params["cls_b"] = zeros(config.num_labels)
    return params


def clone_params(params: dict, requires_grad: bool = True) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


def parameter_count(params: dict, include_embeddings: bool = False) -> int:
    """Number of parameters; the embedding tables are excluded by default."""
    total = 0
    for name, t in params.items():
        if not include_embeddings and name in ("tok_emb", "pos_emb"):
            continue
        total += t.data.size
    return total


def _expand_head_gate(head_gate: Tensor, head_dim: int) -> Tensor:
    """(n_heads,) gate -> (n_heads * head_dim,) by repeating each entry."""
    n = head_gate.data.shape[0]
    col = reshape(head_gate, (n, 1))
    return reshape(mul(col, Tensor(np.ones((1, head_dim)))), (n * head_dim,))


class Encoder:
    """The encoder classifier. Holds a config plus a parameter dict.

    The same forward code serves the full model (optionally with soft or
    binarized ``StructuredMasks``) and a compacted model whose parameter
    arrays were physically sliced: shapes are read from the arrays, and a
    sublayer whose keys are absent is skipped entirely.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None, rng: np.random.Generator | None = None):
        if params is None:
            if rng is None:
                raise ValueError("need params or an rng to initialize them")
            params = init_params(config, rng)
        self.config = config
        self.params = params

    # -- sublayers ---------------------------------------------------------

    def _ln(self, x, gain, bias, hard_dim_mask):
        return layer_norm(x, gain, bias, LN_EPS, dim_mask=hard_dim_mask)

    def _dropout(self, t: Tensor, rng) -> Tensor:
        # inverted dropout on residual updates; inactive at rate 0 / eval
        rate = self.config.dropout
        if rng is None or rate == 0.0:
            return t
        keep = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
        return mul(t, Tensor(keep))

    def mha_forward(self, h: Tensor, attn_mask, layer: int, masks: StructuredMasks | None = None,
                    hard_hidden: bool = False, dropout_rng=None,
                    collect: EncoderActivations | None = None) -> Tensor:
        """Masked multi-head attention sublayer with residual.

        ``attn_mask`` is (B, L, L) with entries in [0, 1] (or None for no
        masking). A query row that is kept (mask diagonal > 0) but has no
        admissible key is a contract violation.
        """
        p = self.params
        prefix = f"layers.{layer}."
        if prefix + "wq" not in p:
            return h  # sublayer physically removed
        dh = self.config.head_dim
        n_heads = p[prefix + "wq"].data.shape[1] // dh
        b, length, _ = h.data.shape
        hid_mask = self._hidden_mask_np(masks) if hard_hidden else None

        u = self._ln(h, p[prefix + "attn_ln_g"], p[prefix + "attn_ln_b"], hid_mask)
        q = add(matmul(u, p[prefix + "wq"]), p[prefix + "bq"])
        k = add(matmul(u, p[prefix + "wk"]), p[prefix + "bk"])
        v = add(matmul(u, p[prefix + "wv"]), p[prefix + "bv"])

        def split(t):
            return transpose(reshape(t, (b, length, n_heads, dh)), (0, 2, 1, 3))

        qh, kh, vh = split(q), split(k), split(v)
        scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        # subtracting any per-row constant leaves M*R / sum(M*R) unchanged
        shift = Tensor(scores.data.max(axis=-1, keepdims=True))
        r = exp(sub(scores, shift))
        if attn_mask is not None:
            m4 = reshape(attn_mask, (b, 1, length, length))
            numer = mul(r, m4)
        else:
            numer = r
        denom = tsum(numer, axis=-1, keepdims=True)
        dead = denom.data[..., 0] == 0.0
        if attn_mask is not None and dead.any():
            # a token is live if anything attends to it or it attends to itself;
            # a live token with no admissible key has undefined normalization
            col_mass = attn_mask.data.sum(axis=1)
            diag = np.einsum("bll->bl", attn_mask.data)
            live_rows = (col_mass > 0) | (diag > 0)
            if np.any(dead & live_rows[:, None, :]):
                raise ValueError("attention mask leaves a live query row with no admissible key")
        if dead.any():
            denom = add(denom, Tensor(dead[..., None].astype(np.float64)))
        probs = div(numer, denom)
        if collect is not None:
            collect.attention_probs.append(probs)
        ctx = transpose(matmul(probs, vh), (0, 2, 1, 3))
        ctx = reshape(ctx, (b, length, n_heads * dh))
        if masks is not None:
            ctx = mul(ctx, _expand_head_gate(masks.heads[layer], dh))
        update = add(matmul(ctx, p[prefix + "wo"]), p[prefix + "bo"])
        update = self._dropout(update, dropout_rng)
        if masks is not None:
            update = mul(update, masks.hidden)
            update = mul(update, masks.mha[layer])
        return add(h, update)

    def ffn_forward(self, h: Tensor, layer: int, masks: StructuredMasks | None = None,
                    hard_hidden: bool = False, dropout_rng=None) -> Tensor:
        p = self.params
        prefix = f"layers.{layer}."
        if prefix + "w1" not in p:
            return h
        hid_mask = self._hidden_mask_np(masks) if hard_hidden else None
        u = self._ln(h, p[prefix + "ffn_ln_g"], p[prefix + "ffn_ln_b"], hid_mask)
        a = gelu(add(matmul(u, p[prefix + "w1"]), p[prefix + "b1"]))
        if masks is not None:
            a = mul(a, masks.intermediate[layer])
        update = add(matmul(a, p[prefix + "w2"]), p[prefix + "b2"])
        update = self._dropout(update, dropout_rng)
        if masks is not None:
            update = mul(update, masks.hidden)
            update = mul(update, masks.ffn[layer])
        return add(h, update)

    def _hidden_mask_np(self, masks: StructuredMasks | None):
        if masks is None:
            return None
        arr = masks.hidden.data
        if not np.all(np.isin(arr, (0.0, 1.0))):
            raise ValueError("hard_hidden requires a binarized hidden gate")
        return arr

    # -- embeddings and full forward ----------------------------------------

    def embed(self, token_ids: np.ndarray, masks: StructuredMasks | None = None,
              positions: np.ndarray | None = None) -> Tensor:
        """Token plus learned positional embeddings.

        ``positions`` overrides the default 0..L-1 indexing; physical token
        pruning passes original positions so that both execution styles see
        identical positional signals.
        """
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, length = ids.shape
        if length > self.config.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id out of range for vocab size {self.config.vocab_size}")
        if positions is None:
            positions = np.arange(length)
        positions = np.asarray(positions, dtype=np.intp)
        tok = embedding(self.params["tok_emb"], ids)
        pos = reshape(gather(self.params["pos_emb"], positions), (1, len(positions), -1))
        h = add(tok, pos)
        if masks is not None:
            h = mul(h, masks.hidden)
        return h

    def forward(self, token_ids, masks: StructuredMasks | None = None, token_mask_fn=None,
                hard_hidden: bool = False, dropout_rng=None, initial_live=None,
                collect_attention: bool = False) -> EncoderActivations:
        """Run the full encoder.

        ``token_mask_fn(layer, h, live_mask) -> (z, keep_probs)`` is the
        per-layer sampling hook; ``z`` (B, L) is combined multiplicatively
        with the running mask so a token, once dropped, stays dropped. With
        no hook, all tokens are kept. ``initial_live`` (B, L) pre-masks
        positions that were never real tokens (padding).
        """
        acts = EncoderActivations()
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, length = ids.shape
        h = self.embed(ids, masks=masks)
        if initial_live is None:
            live = Tensor(np.ones((b, length)))
        else:
            live = Tensor(np.asarray(initial_live, dtype=np.float64).reshape(b, length))
        for layer in range(self.config.num_layers):
            acts.hidden_states.append(h)
            if token_mask_fn is not None:
                view = sampler_view(h, live)
                acts.sampler_views.append(view)
                z, pi = token_mask_fn(layer, view, live)
                acts.keep_probs.append(pi)
                if z is not None:
                    live = mul(live, z)
            acts.token_masks.append(live)
            attn_mask = mul(reshape(live, (b, length, 1)), reshape(live, (b, 1, length)))
            h = self.mha_forward(h, attn_mask, layer, masks=masks, hard_hidden=hard_hidden,
                                 dropout_rng=dropout_rng,
                                 collect=acts if collect_attention else None)
            h = self.ffn_forward(h, layer, masks=masks, hard_hidden=hard_hidden,
                                 dropout_rng=dropout_rng)
        acts.trunk = h
        acts.final_hidden, acts.pooled, acts.logits = self.classify(h, masks=masks, hard_hidden=hard_hidden)
        return acts

    def classify(self, trunk: Tensor, masks: StructuredMasks | None = None,
                 hard_hidden: bool = False):
        """Final norm, pooling of position 0, and the label head.

        Returns (final_hidden, pooled, logits). Shared by masked execution
        and physically pruned inference, whose surviving row 0 is the
        classification token.
        """
        b = trunk.data.shape[0]
        hid_mask = self._hidden_mask_np(masks) if hard_hidden else None
        final_hidden = self._ln(trunk, self.params["final_ln_g"], self.params["final_ln_b"], hid_mask)
        first = reshape(gather1(final_hidden, 0), (b, -1))
        pooled = tanh(add(matmul(first, self.params["pooler_w"]), self.params["pooler_b"]))
        if masks is not None:
            pooled = mul(pooled, masks.hidden)
        logits = add(matmul(pooled, self.params["cls_w"]), self.params["cls_b"])
        return final_hidden, pooled, logits


def gather1(t: Tensor, index: int) -> Tensor:
    """Select one position along the token axis (axis 1) of a (B, L, d) tensor."""
    return gather(t, [index], axis=1)


# ---------------------------------------------------------------------------
# physical compaction


def finalize_prune(params: dict, config: ModelConfig, masks: StructuredMasks) -> tuple[dict, dict]:
    """Physically remove zero-gated structures.

    Returns (compacted params, report). The compacted model's forward agrees
    with masked execution of the full model (hard_hidden=True) to float
    precision. Raises if the masks are not binary, or if every layer keeps an
    open attention gate over zero surviving heads.
    """
    if not masks.is_binary():
        raise ValueError("finalize_prune requires binarized masks")
    dh = config.head_dim
    hid = masks.hidden.data.astype(bool)
    if not hid.any():
        raise ValueError("cannot remove every hidden dimension")
    hid_idx = np.where(hid)[0]

    degenerate = all(
        masks.mha[i].data > 0 and not masks.heads[i].data.astype(bool).any()
        for i in range(config.num_layers)
    )
    if degenerate:
        raise ValueError("all heads of all layers removed while attention gates stay open")

    out: dict = {}
    out["tok_emb"] = Tensor(params["tok_emb"].data[:, hid_idx].copy(), requires_grad=True)
    out["pos_emb"] = Tensor(params["pos_emb"].data[:, hid_idx].copy(), requires_grad=True)
    counts = {"attention": 0, "ffn": 0, "layer_norm": 0, "classifier": 0}
    for i in range(config.num_layers):
        p = f"layers.{i}."
        if masks.mha[i].data > 0:
            head_idx = np.where(masks.heads[i].data.astype(bool))[0]
            col_idx = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in head_idx]) if head_idx.size else np.zeros(0, dtype=np.intp)
            for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
                out[p + w] = Tensor(params[p + w].data[np.ix_(hid_idx, col_idx)].copy(), requires_grad=True)
                out[p + b] = Tensor(params[p + b].data[col_idx].copy(), requires_grad=True)
                counts["attention"] += out[p + w].size + out[p + b].size
            out[p + "wo"] = Tensor(params[p + "wo"].data[np.ix_(col_idx, hid_idx)].copy(), requires_grad=True)
            out[p + "bo"] = Tensor(params[p + "bo"].data[hid_idx].copy(), requires_grad=True)
            counts["attention"] += out[p + "wo"].size + out[p + "bo"].size
            out[p + "attn_ln_g"] = Tensor(params[p + "attn_ln_g"].data[hid_idx].copy(), requires_grad=True)
            out[p + "attn_ln_b"] = Tensor(params[p + "attn_ln_b"].data[hid_idx].copy(), requires_grad=True)
            counts["layer_norm"] += 2 * hid_idx.size
        if masks.ffn[i].data > 0:
            int_idx = np.where(masks.intermediate[i].data.astype(bool))[0]
            out[p + "w1"] = Tensor(params[p + "w1"].data[np.ix_(hid_idx, int_idx)].copy(), requires_grad=True)
            out[p + "b1"] = Tensor(params[p + "b1"].data[int_idx].copy(), requires_grad=True)
            out[p + "w2"] = Tensor(params[p + "w2"].data[np.ix_(int_idx, hid_idx)].copy(), requires_grad=True)
            out[p + "b2"] = Tensor(params[p + "b2"].data[hid_idx].copy(), requires_grad=True)
            counts["ffn"] += sum(out[p + k].size for k in ("w1", "b1", "w2", "b2"))
            out[p + "ffn_ln_g"] = Tensor(params[p + "ffn_ln_g"].data[hid_idx].copy(), requires_grad=True)
            out[p + "ffn_ln_b"] = Tensor(params[p + "ffn_ln_b"].data[hid_idx].copy(), requires_grad=True)
            counts["layer_norm"] += 2 * hid_idx.size
    out["final_ln_g"] = Tensor(params["final_ln_g"].data[hid_idx].copy(), requires_grad=True)
    out["final_ln_b"] = Tensor(params["final_ln_b"].data[hid_idx].copy(), requires_grad=True)
    out["pooler_w"] = Tensor(params["pooler_w"].data[np.ix_(hid_idx, hid_idx)].copy(), requires_grad=True)
    out["pooler_b"] = Tensor(params["pooler_b"].data[hid_idx].copy(), requires_grad=True)
    out["cls_w"] = Tensor(params["cls_w"].data[hid_idx, :].copy(), requires_grad=True)
    out["cls_b"] = Tensor(params["cls_b"].data.copy(), requires_grad=True)
    counts["classifier"] = (
        out["final_ln_g"].size + out["final_ln_b"].size + out["pooler_w"].size
        + out["pooler_b"].size + out["cls_w"].size + out["cls_b"].size
    )
    report = {
        "hidden_kept": int(hid_idx.size),
        "params_before": parameter_count(params),
        "params_after": parameter_count(out),
        **{k: int(v) for k, v in counts.items()},
    }
    # The compacted model keeps the original config: actual widths are read
    # from the sliced arrays, and config.head_dim stays the head stride.
    return out, report
