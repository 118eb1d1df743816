"""Analytical multiply/add accounting for the (possibly pruned) encoder.

Counting convention, fixed so that every ratio is reproducible:

* a linear map over L tokens costs 2 * L * d_in * d_out (multiplies and
  adds counted separately; bias adds are excluded from the kernel);
* softmax costs 5 ops per score entry, layer norm 8 per element, GELU and
  tanh 10 per element;
* embedding lookups are free, mirroring the parameter-count policy.

Padding is an accounting construct: inference itself runs unpadded, and the
meter charges the model as if each sequence were padded — to the batch
maximum (grouping the dataset in order into batches) or to a fixed
per-dataset length. Padding tokens are assumed to be dropped at the first
sampling point when token sampling is active; without samplers they travel
through every layer. The dense baseline always carries them everywhere,
which is exactly why fixed-length padding exaggerates speedups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelConfig, StructuredMasks

SOFTMAX_OPS_PER_SCORE = 5
LAYERNORM_OPS_PER_ELEMENT = 8
GELU_OPS_PER_ELEMENT = 10
TANH_OPS_PER_ELEMENT = 10

FIXED_PADDED_LENGTHS = {"mrpc": 128, "mnli": 128, "qnli": 128, "sst2": 64}


@dataclass
class PaddingStrategy:
    """How sequences are padded for accounting purposes.

    Sequence mode takes its length from the published per-dataset table;
    datasets outside it must pass ``fixed_len`` explicitly.
    """

    mode: str = "batch"  # "batch" | "sequence"
    dataset: str | None = None
    batch_size: int = 32
    fixed_len: int | None = None

    def __post_init__(self):
        if self.mode not in ("batch", "sequence"):
            raise ValueError(f"unknown padding mode {self.mode!r}")
        if self.mode == "sequence" and self.fixed_len is None:
            if self.dataset is None or self.dataset.lower() not in FIXED_PADDED_LENGTHS:
                raise ValueError(
                    f"sequence padding needs a dataset with a fixed length, got {self.dataset!r}"
                )
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def fixed_length(self) -> int:
        if self.fixed_len is not None:
            return self.fixed_len
        return FIXED_PADDED_LENGTHS[self.dataset.lower()]


@dataclass
class LayerCost:
    """Surviving widths of one encoder layer."""

    heads: int
    ffn: int
    mha_on: bool
    ffn_on: bool


@dataclass
class ModelCost:
    """Everything the meter needs to price a forward pass."""

    hidden: int
    head_dim: int
    num_labels: int
    layers: list
    sampler_on: bool = False
    sampler_dim: int = 0

    @classmethod
    def dense(cls, config: ModelConfig, sampler_on: bool = False,
              sampler_dim: int | None = None) -> "ModelCost":
        d = config.hidden_dim
        return cls(
            hidden=d,
            head_dim=config.head_dim,
            num_labels=config.num_labels,
            layers=[
                LayerCost(heads=config.num_heads, ffn=config.ffn_dim, mha_on=True, ffn_on=True)
                for _ in range(config.num_layers)
            ],
            sampler_on=sampler_on,
            sampler_dim=sampler_dim if sampler_dim is not None else max(1, d // 2),
        )

    @classmethod
    def from_masks(cls, config: ModelConfig, masks: StructuredMasks, sampler_on: bool = False,
                   sampler_dim: int | None = None) -> "ModelCost":
        if not masks.is_binary():
            raise ValueError("cost accounting needs binarized masks")
        d = int(masks.hidden.data.sum())
        layers = []
        for i in range(config.num_layers):
            mha_on = bool(masks.mha[i].data > 0)
            ffn_on = bool(masks.ffn[i].data > 0)
            layers.append(
                LayerCost(
                    heads=int(masks.heads[i].data.sum()) if mha_on else 0,
                    ffn=int(masks.intermediate[i].data.sum()) if ffn_on else 0,
                    mha_on=mha_on,
                    ffn_on=ffn_on,
                )
            )
        return cls(
            hidden=d,
            head_dim=config.head_dim,
            num_labels=config.num_labels,
            layers=layers,
            sampler_on=sampler_on,
            sampler_dim=sampler_dim if sampler_dim is not None else max(1, d // 2),
        )

    @classmethod
    def from_params(cls, params: dict, config: ModelConfig, sampler_on: bool = False,
                    sampler_dim: int | None = None) -> "ModelCost":
        """Read surviving widths from a (possibly compacted) parameter dict."""
        d = params["tok_emb"].data.shape[1]
        layers = []
        for i in range(config.num_layers):
            p = f"layers.{i}."
            mha_on = p + "wq" in params
            ffn_on = p + "w1" in params
            layers.append(
                LayerCost(
                    heads=params[p + "wq"].data.shape[1] // config.head_dim if mha_on else 0,
                    ffn=params[p + "w1"].data.shape[1] if ffn_on else 0,
                    mha_on=mha_on,
                    ffn_on=ffn_on,
                )
            )
        return cls(
            hidden=d,
            head_dim=config.head_dim,
            num_labels=config.num_labels,
            layers=layers,
            sampler_on=sampler_on,
            sampler_dim=sampler_dim if sampler_dim is not None else max(1, d // 2),
        )


@dataclass
class FlopsReport:
    """Operation counts summed over a dataset, plus the dense baseline."""

    mha: int = 0
    ffn: int = 0
    sampler: int = 0
    classifier: int = 0
    total: int = 0
    baseline: int = 0
    speedup: float = 1.0
    num_examples: int = 0
    mha_per_layer: list = field(default_factory=list)
    ffn_per_layer: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mha": self.mha,
            "ffn": self.ffn,
            "sampler": self.sampler,
            "classifier": self.classifier,
            "total": self.total,
            "baseline": self.baseline,
            "speedup": self.speedup,
            "num_examples": self.num_examples,
            "mha_per_layer": list(self.mha_per_layer),
            "ffn_per_layer": list(self.ffn_per_layer),
        }


def flops_linear(tokens: int, d_in: int, d_out: int) -> int:
    """Multiplies plus adds of a dense map applied to ``tokens`` rows."""
    if d_in < 0 or d_out < 0 or tokens < 0:
        raise ValueError("dimensions must be nonnegative")
    return 2 * tokens * d_in * d_out


def flops_mha(tokens: int, cost: ModelCost, layer: int) -> int:
    """Attention sublayer cost at ``tokens`` kept rows; zero if gated off.

    Projections scale with surviving heads and feature dimensions; the
    score and context products scale with tokens squared.
    """
    lc = cost.layers[layer]
    if not lc.mha_on:
        return 0
    total = LAYERNORM_OPS_PER_ELEMENT * tokens * cost.hidden
    if lc.heads == 0:
        return total
    width = lc.heads * cost.head_dim
    total += 3 * flops_linear(tokens, cost.hidden, width)  # q, k, v
    total += 2 * tokens * tokens * width  # scores
    total += SOFTMAX_OPS_PER_SCORE * lc.heads * tokens * tokens
    total += 2 * tokens * tokens * width  # context
    total += flops_linear(tokens, width, cost.hidden)  # output projection
    return total


def flops_ffn(tokens: int, cost: ModelCost, layer: int) -> int:
    lc = cost.layers[layer]
    if not lc.ffn_on:
        return 0
    total = LAYERNORM_OPS_PER_ELEMENT * tokens * cost.hidden
    total += flops_linear(tokens, cost.hidden, lc.ffn)
    total += GELU_OPS_PER_ELEMENT * tokens * lc.ffn
    total += flops_linear(tokens, lc.ffn, cost.hidden)
    return total


def flops_sampler(tokens: int, cost: ModelCost) -> int:
    """Keep/drop MLP overhead for one layer over ``tokens`` rows."""
    total = flops_linear(tokens, cost.hidden, cost.sampler_dim)
    total += GELU_OPS_PER_ELEMENT * tokens * cost.sampler_dim
    total += flops_linear(tokens, cost.sampler_dim, 2)
    total += SOFTMAX_OPS_PER_SCORE * 2 * tokens
    return total


def flops_classifier(final_tokens: int, cost: ModelCost) -> int:
    """Final norm over the surviving sequence, pooler and label head."""
    total = LAYERNORM_OPS_PER_ELEMENT * final_tokens * cost.hidden
    total += flops_linear(1, cost.hidden, cost.hidden) + TANH_OPS_PER_ELEMENT * cost.hidden
    total += flops_linear(1, cost.hidden, cost.num_labels)
    return total


def example_flops(padded_len: int, kept_counts: list, cost: ModelCost) -> dict:
    """Price one example entering at ``padded_len`` tokens.

    ``kept_counts[i]`` is the number of real tokens processed by layer i
    (from the pruning trace). With sampling active, the first sampler sees
    the padded length and padding is assumed gone afterwards; without
    sampling every layer carries the padded length.
    """
    num_layers = len(cost.layers)
    if len(kept_counts) != num_layers:
        raise ValueError(f"need one kept count per layer, got {len(kept_counts)}")
    if any(k > padded_len for k in kept_counts):
        raise ValueError("kept counts exceed the padded length")
    parts = {"mha": 0, "ffn": 0, "sampler": 0, "classifier": 0,
             "mha_per_layer": [0] * num_layers, "ffn_per_layer": [0] * num_layers}
    if cost.sampler_on:
        lengths = list(kept_counts)
        sampler_in = [padded_len] + lengths[:-1]
    else:
        lengths = [padded_len] * num_layers
        sampler_in = None
    for i, tokens in enumerate(lengths):
        m = flops_mha(tokens, cost, i)
        f = flops_ffn(tokens, cost, i)
        parts["mha"] += m
        parts["ffn"] += f
        parts["mha_per_layer"][i] = m
        parts["ffn_per_layer"][i] = f
        if sampler_in is not None:
            parts["sampler"] += flops_sampler(sampler_in[i], cost)
    final_tokens = lengths[-1] if lengths else padded_len
    parts["classifier"] = flops_classifier(final_tokens, cost)
    return parts


def padded_lengths(raw_lengths: list, strategy: PaddingStrategy) -> list:
    """Entry length per example under the padding strategy."""
    raw_lengths = list(raw_lengths)
    if strategy.mode == "sequence":
        fixed = strategy.fixed_length()
        too_long = [n for n in raw_lengths if n > fixed]
        if too_long:
            raise ValueError(
                f"sequence length {max(too_long)} exceeds the fixed padded length {fixed}"
            )
        return [fixed] * len(raw_lengths)
    out = []
    for start in range(0, len(raw_lengths), strategy.batch_size):
        chunk = raw_lengths[start:start + strategy.batch_size]
        peak = max(chunk)
        out.extend([peak] * len(chunk))
    return out


def model_flops(traces: list, cost: ModelCost, strategy: PaddingStrategy,
                baseline_cost: ModelCost | None = None) -> FlopsReport:
    """Aggregate cost of a dataset of pruning traces.

    Each trace is ``(raw_length, kept_counts)``. The baseline is the dense
    unsampled model (``baseline_cost``) run at the same padded lengths.
    """
    if not traces:
        raise ValueError("no traces to account")
    if baseline_cost is None:
        raise ValueError("a dense baseline cost is required")
    raw = [t[0] for t in traces]
    padded = padded_lengths(raw, strategy)
    report = FlopsReport(
        mha_per_layer=[0] * len(cost.layers),
        ffn_per_layer=[0] * len(cost.layers),
        num_examples=len(traces),
    )
    for trace, pad_len in zip(traces, padded):
        kept = trace[1]  # traces may carry kept index sets beyond (len, counts)
        parts = example_flops(pad_len, list(kept), cost)
        report.mha += parts["mha"]
        report.ffn += parts["ffn"]
        report.sampler += parts["sampler"]
        report.classifier += parts["classifier"]
        for i in range(len(cost.layers)):
            report.mha_per_layer[i] += parts["mha_per_layer"][i]
            report.ffn_per_layer[i] += parts["ffn_per_layer"][i]
        base = example_flops(pad_len, [pad_len] * len(baseline_cost.layers), baseline_cost)
        report.baseline += base["mha"] + base["ffn"] + base["classifier"]
    report.total = report.mha + report.ffn + report.sampler + report.classifier
    report.speedup = report.baseline / report.total if report.total else float("inf")
    return report
