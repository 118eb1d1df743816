import numpy as np
import pytest

from slimformer.encoder import ModelConfig, StructuredMasks
from slimformer.autodiff import Tensor
from slimformer.flops import (
    FIXED_PADDED_LENGTHS,
    GELU_OPS_PER_ELEMENT,
    LAYERNORM_OPS_PER_ELEMENT,
    SOFTMAX_OPS_PER_SCORE,
    TANH_OPS_PER_ELEMENT,
    ModelCost,
    PaddingStrategy,
    example_flops,
    flops_linear,
    flops_mha,
    flops_ffn,
    flops_sampler,
    model_flops,
    padded_lengths,
)


def test_flops_linear_enumerated():
    # 4 tokens x 3 in x 5 out: 60 multiplies and 60 adds
    assert flops_linear(4, 3, 5) == 120


def test_flops_linear_zero_tokens():
    assert flops_linear(0, 3, 5) == 0


def test_flops_linear_doubles_with_tokens():
    assert flops_linear(8, 3, 5) == 2 * flops_linear(4, 3, 5)


def test_mha_quadratic_in_tokens():
    cfg = ModelConfig(1, 16, 4, 32, 50, 64, 2)
    cost = ModelCost.dense(cfg)
    full = flops_mha(16, cost, 0)
    half = flops_mha(8, cost, 0)
    d = 16
    score_full = 2 * 16 * 16 * d
    score_half = 2 * 8 * 8 * d
    assert score_full == 4 * score_half
    # quadratic terms shrink 4x, linear terms 2x
    assert half < full / 2 + 1


def test_mha_all_gates_closed_is_zero():
    cfg = ModelConfig(2, 16, 4, 32, 50, 64, 2)
    masks = StructuredMasks.all_ones(cfg)
    for i in range(2):
        masks.mha[i] = Tensor(np.zeros(()))
        masks.ffn[i] = Tensor(np.zeros(()))
    cost = ModelCost.from_masks(cfg, masks)
    assert flops_mha(16, cost, 0) == 0
    assert flops_ffn(16, cost, 0) == 0


def test_dense_model_hand_computed_oracle():
    """Spreadsheet-style manual count of a 12-layer, d=768 encoder at L=128."""
    H, d, nh, F, L, K = 12, 768, 12, 3072, 128, 2
    cfg = ModelConfig(H, d, nh, F, 30522, 512, K)
    cost = ModelCost.dense(cfg)

    ln = LAYERNORM_OPS_PER_ELEMENT * L * d
    qkv = 3 * 2 * L * d * d
    scores = 2 * L * L * d
    smax = SOFTMAX_OPS_PER_SCORE * nh * L * L
    ctx = 2 * L * L * d
    out = 2 * L * d * d
    mha_hand = ln + qkv + scores + smax + ctx + out

    ffn_hand = ln + 2 * L * d * F + GELU_OPS_PER_ELEMENT * L * F + 2 * L * F * d

    assert flops_mha(L, cost, 0) == mha_hand
    assert flops_ffn(L, cost, 0) == ffn_hand

    cls_hand = ln + 2 * d * d + TANH_OPS_PER_ELEMENT * d + 2 * d * K
    parts = example_flops(L, [L] * H, cost)
    assert parts["mha"] == H * mha_hand
    assert parts["ffn"] == H * ffn_hand
    assert parts["classifier"] == cls_hand


def test_no_pruning_speedup_exactly_one():
    cfg = ModelConfig(4, 64, 4, 256, 1000, 64, 2)
    cost = ModelCost.dense(cfg)
    traces = [(n, [n] * 4) for n in (10, 20, 33)]
    report = model_flops(traces, cost, PaddingStrategy(mode="batch"), baseline_cost=cost)
    assert report.speedup == 1.0
    assert report.total == report.baseline


def test_report_additivity_integer():
    cfg = ModelConfig(3, 32, 4, 64, 100, 64, 2)
    cost = ModelCost.dense(cfg, sampler_on=True)
    rng = np.random.default_rng(0)
    traces = []
    for _ in range(10):
        n = int(rng.integers(4, 30))
        kept = sorted(rng.integers(1, n + 1, size=3).tolist(), reverse=True)
        traces.append((n, kept))
    report = model_flops(traces, cost, PaddingStrategy(mode="batch", batch_size=4),
                         baseline_cost=ModelCost.dense(cfg))
    assert report.total == report.mha + report.ffn + report.sampler + report.classifier
    assert isinstance(report.total, int) and isinstance(report.baseline, int)
    assert report.mha == sum(report.mha_per_layer)
    assert report.ffn == sum(report.ffn_per_layer)


def test_monotonicity_randomized():
    """Pointwise-smaller kept counts and more closed gates never cost more."""
    cfg = ModelConfig(3, 32, 4, 64, 100, 64, 2)
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(4, 40))
        kept = np.minimum.accumulate(rng.integers(1, n + 1, size=3))
        masks = StructuredMasks.all_ones(cfg)
        cost = ModelCost.from_masks(cfg, masks, sampler_on=True)
        base_parts = example_flops(n, kept.tolist(), cost)
        base = sum(base_parts[k] for k in ("mha", "ffn", "sampler", "classifier"))

        smaller = np.maximum(1, kept - rng.integers(0, 3, size=3))
        smaller = np.minimum.accumulate(smaller)
        m2 = StructuredMasks.all_ones(cfg)
        layer = int(rng.integers(0, 3))
        head_gate = np.ones(4)
        head_gate[: int(rng.integers(0, 4))] = 0.0
        m2.heads[layer] = Tensor(head_gate)
        if rng.random() < 0.3:
            m2.ffn[layer] = Tensor(np.zeros(()))
        cost2 = ModelCost.from_masks(cfg, m2, sampler_on=True)
        parts2 = example_flops(n, smaller.tolist(), cost2)
        total2 = sum(parts2[k] for k in ("mha", "ffn", "sampler", "classifier"))
        assert total2 <= base


def test_fixed_padded_lengths_table():
    assert FIXED_PADDED_LENGTHS == {"mrpc": 128, "mnli": 128, "qnli": 128, "sst2": 64}
    for name, length in (("mrpc", 128), ("mnli", 128), ("qnli", 128), ("sst2", 64)):
        assert PaddingStrategy(mode="sequence", dataset=name).fixed_length() == length


def test_sequence_padding_requires_known_dataset():
    with pytest.raises(ValueError, match="fixed length"):
        PaddingStrategy(mode="sequence", dataset="unknown")
    PaddingStrategy(mode="sequence", dataset="unknown", fixed_len=48)  # explicit override


def test_padded_lengths_batch_mode():
    lengths = [5, 9, 3, 7, 8, 2]
    out = padded_lengths(lengths, PaddingStrategy(mode="batch", batch_size=3))
    assert out == [9, 9, 9, 8, 8, 8]


def test_padded_lengths_sequence_mode_rejects_overflow():
    with pytest.raises(ValueError, match="exceeds"):
        padded_lengths([70], PaddingStrategy(mode="sequence", dataset="sst2"))


def test_sequence_speedup_dominates_batch_when_longer():
    """With sampling active, fixed-length padding never reports a smaller
    speedup than batch padding at the same traces."""
    cfg = ModelConfig(4, 64, 4, 256, 1000, 128, 2)
    cost = ModelCost.dense(cfg, sampler_on=True)
    base = ModelCost.dense(cfg)
    rng = np.random.default_rng(9)
    traces = []
    for _ in range(40):
        n = int(rng.integers(8, 60))
        kept = np.minimum.accumulate(rng.integers(1, n + 1, size=4)).tolist()
        traces.append((n, kept))
    batch = model_flops(traces, cost, PaddingStrategy(mode="batch", batch_size=8), baseline_cost=base)
    for dataset in ("sst2", "mrpc"):
        seq = model_flops(traces, cost, PaddingStrategy(mode="sequence", dataset=dataset),
                          baseline_cost=base)
        assert seq.speedup >= batch.speedup


def test_cost_from_params_matches_masks(small_config):
    from slimformer.encoder import Encoder, finalize_prune

    enc = Encoder(small_config, rng=np.random.default_rng(0))
    masks = StructuredMasks.all_ones(small_config)
    masks.heads[0] = Tensor(np.array([1.0, 0.0, 0.0, 1.0]))
    masks.ffn[1] = Tensor(np.zeros(()))
    hidden = np.ones(small_config.hidden_dim)
    hidden[:4] = 0.0
    masks.hidden = Tensor(hidden)
    compact, _ = finalize_prune(enc.params, small_config, masks)
    from_masks = ModelCost.from_masks(small_config, masks)
    from_params = ModelCost.from_params(compact, small_config)
    assert from_masks.hidden == from_params.hidden
    for a, b in zip(from_masks.layers, from_params.layers):
        assert (a.heads, a.ffn, a.mha_on, a.ffn_on) == (b.heads, b.ffn, b.mha_on, b.ffn_on)
