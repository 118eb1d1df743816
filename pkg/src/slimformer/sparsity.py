"""Stochastic structured gates and the sparsity controller.

Each prunable unit (feature dimension, head, FFN channel, whole sublayer)
carries a hard-concrete gate: a stretched, clamped binary concrete sample
that is exactly 0 or 1 with positive probability yet differentiable through
its relaxed path. The expected model sparsity — the fraction of gated
(non-embedding) encoder parameters expected to survive — is driven to a
target by a pair of Lagrangian multipliers updated by gradient ascent while
the gates descend.

Distillation losses (temperature-scaled prediction KL and fixed-map
layerwise MSE against the unpruned teacher) recover accuracy during gate
learning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    Tensor,
    add,
    clip,
    div,
    exp,
    log,
    mul,
    sigmoid,
    straight_through,
    sub,
    tmean,
    tsum,
)
from .encoder import ModelConfig, StructuredMasks

# stretched-concrete constants, the standard choice for L0 gate learning
HC_BETA = 2.0 / 3.0
HC_GAMMA = -0.1
HC_ZETA = 1.1
LOG_ALPHA_CLAMP = 20.0


def hc_sample(log_alpha: Tensor, rng: np.random.Generator) -> Tensor:
    """One stochastic gate value in [0, 1] per entry of ``log_alpha``.

    u ~ U(0,1); s = sigmoid((log u - log(1-u) + log_alpha) / beta);
    stretched to (gamma, zeta) and clamped. The clamp is straight-through:
    the backward pass follows the unclamped relaxed value.
    """
    u = rng.uniform(1e-9, 1.0 - 1e-9, size=log_alpha.data.shape)
    noise = np.log(u) - np.log1p(-u)
    la = clip(log_alpha, -LOG_ALPHA_CLAMP, LOG_ALPHA_CLAMP)
    s = sigmoid(mul(add(la, Tensor(noise)), 1.0 / HC_BETA))
    stretched = add(mul(s, HC_ZETA - HC_GAMMA), HC_GAMMA)
    return straight_through(stretched, np.clip(stretched.data, 0.0, 1.0))


def hc_deterministic(log_alpha: Tensor) -> Tensor:
    """Noise-free evaluation value: clamp(sigmoid(log_alpha)*(zeta-gamma)+gamma)."""
    stretched = add(mul(sigmoid(log_alpha), HC_ZETA - HC_GAMMA), HC_GAMMA)
    return clip(stretched, 0.0, 1.0)


def hc_open_probability(log_alpha: Tensor) -> Tensor:
    """P(gate > 0) = sigmoid(log_alpha - beta * log(-gamma / zeta))."""
    offset = HC_BETA * np.log(-HC_GAMMA / HC_ZETA)
    return sigmoid(sub(log_alpha, offset))


@dataclass
class LagrangianState:
    """Multipliers and target of the sparsity constraint."""

    target: float
    mu1: float = 0.0
    mu2: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.target < 1.0:
            raise ValueError("target sparsity must be in [0, 1)")


def l0_lagrangian(state: LagrangianState, sparsity: Tensor) -> Tensor:
    """mu1 * (target - s) + mu2 * (target - s)^2, differentiable through s."""
    gap = sub(state.target, sparsity)
    return add(mul(gap, state.mu1), mul(mul(gap, gap), state.mu2))


def update_multipliers(state: LagrangianState, sparsity: float, lr: float) -> LagrangianState:
    """Gradient ascent on the multipliers; mu2 stays nonnegative."""
    gap = state.target - sparsity
    return replace(state, mu1=state.mu1 + lr * gap, mu2=max(0.0, state.mu2 + lr * gap * gap))


class GateSet:
    """Hard-concrete gates over the five structured-mask granularities.

    The initial log-alphas carry real spread: with near-identical starts the
    controller's symmetric pressure parks every gate at the same value and
    binarization flips whole granularities at once, instead of letting
    individual units polarize.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 init_log_alpha: float = 2.5, init_noise: float = 0.5):
        self.config = config

        def la(*shape):
            return Tensor(init_log_alpha + rng.normal(0.0, init_noise, shape), requires_grad=True)

        self.params: dict[str, Tensor] = {"gates.hidden": la(config.hidden_dim)}
        for i in range(config.num_layers):
            self.params[f"gates.{i}.heads"] = la(config.num_heads)
            self.params[f"gates.{i}.intermediate"] = la(config.ffn_dim)
            self.params[f"gates.{i}.mha"] = la()
            self.params[f"gates.{i}.ffn"] = la()

    def _masks_from(self, fn) -> StructuredMasks:
        n = self.config.num_layers
        return StructuredMasks(
            hidden=fn(self.params["gates.hidden"]),
            heads=[fn(self.params[f"gates.{i}.heads"]) for i in range(n)],
            intermediate=[fn(self.params[f"gates.{i}.intermediate"]) for i in range(n)],
            mha=[fn(self.params[f"gates.{i}.mha"]) for i in range(n)],
            ffn=[fn(self.params[f"gates.{i}.ffn"]) for i in range(n)],
        )

    def sample_masks(self, rng: np.random.Generator) -> StructuredMasks:
        """Stochastic training masks (tape-recorded)."""
        return self._masks_from(lambda la: hc_sample(la, rng))

    def deterministic_masks(self) -> StructuredMasks:
        """Noise-free soft masks for evaluation during gate learning."""
        return self._masks_from(hc_deterministic)

    def binarize(self, threshold: float = 0.5) -> StructuredMasks:
        """Final hard masks: a gate is kept iff its deterministic value
        exceeds the threshold."""
        return self._masks_from(
            lambda la: Tensor((hc_deterministic(la).data > threshold).astype(np.float64))
        )


def gated_parameter_totals(config: ModelConfig) -> dict:
    """Parameter counts of the gated structures (encoder layers only;
    embeddings and the classifier head carry no gates and are excluded)."""
    d, f, dh, nh = config.hidden_dim, config.ffn_dim, config.head_dim, config.num_heads
    mha = 4 * dh * nh * d + 3 * dh * nh + 3 * d  # qkvo weights, qkv biases, bo + layer norm
    ffn = 2 * d * f + f + 3 * d
    return {"mha_per_layer": mha, "ffn_per_layer": ffn, "total": config.num_layers * (mha + ffn)}


def expected_sparsity(config: ModelConfig, gates: GateSet) -> Tensor:
    """1 - expected surviving fraction of gated encoder parameters.

    Survival is multiplicative across intersecting gates: a head weight
    needs its head, its attention sublayer and its input feature dimension
    all open; FFN weights likewise.
    """
    d, f, dh = config.hidden_dim, config.ffn_dim, config.head_dim
    p_hidden = hc_open_probability(gates.params["gates.hidden"])
    s_hid = tsum(p_hidden)
    remaining = Tensor(np.zeros(()))
    for i in range(config.num_layers):
        p_heads = hc_open_probability(gates.params[f"gates.{i}.heads"])
        p_int = hc_open_probability(gates.params[f"gates.{i}.intermediate"])
        p_mha = hc_open_probability(gates.params[f"gates.{i}.mha"])
        p_ffn = hc_open_probability(gates.params[f"gates.{i}.ffn"])
        s_head = tsum(p_heads)
        s_int = tsum(p_int)
        mha_alive = add(
            add(mul(mul(s_head, s_hid), 4.0 * dh), mul(s_head, 3.0 * dh)),
            mul(s_hid, 3.0),
        )
        ffn_alive = add(add(mul(mul(s_int, s_hid), 2.0), s_int), mul(s_hid, 3.0))
        remaining = add(remaining, add(mul(p_mha, mha_alive), mul(p_ffn, ffn_alive)))
    total = float(gated_parameter_totals(config)["total"])
    return sub(1.0, div(remaining, total))


# ---------------------------------------------------------------------------
# distillation


@dataclass
class DistillConfig:
    """Prediction-distillation temperature, layer map and loss weights."""

    temperature: float = 2.0
    layer_map: tuple = ()  # (student_layer, teacher_layer) pairs
    prediction_weight: float = 0.5
    layerwise_weight: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("distillation temperature must be > 0")
        students = [s for s, _ in self.layer_map]
        if len(set(students)) != len(students):
            raise ValueError("layer map must be injective from student layers")

    @classmethod
    def identity_map(cls, num_layers: int, **kwargs) -> "DistillConfig":
        return cls(layer_map=tuple((i, i) for i in range(num_layers)), **kwargs)


def _log_softmax(logits: Tensor) -> Tensor:
    m = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = sub(logits, m)
    lse = log(tsum(exp(shifted), axis=-1, keepdims=True))
    return sub(shifted, lse)


def prediction_distill_loss(student_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """KL(teacher_T || student_T) * T^2, averaged over the batch."""
    teacher = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    if teacher.shape != student_logits.data.shape:
        raise ValueError(
            f"teacher logits {teacher.shape} do not match student {student_logits.data.shape}"
        )
    t = teacher / temperature
    t = t - t.max(axis=-1, keepdims=True)
    p = np.exp(t)
    p /= p.sum(axis=-1, keepdims=True)
    teacher_term = float((p * np.log(np.maximum(p, 1e-300))).sum(axis=-1).mean())
    student_logp = _log_softmax(mul(student_logits, 1.0 / temperature))
    cross = tmean(tsum(mul(Tensor(p), student_logp), axis=-1))
    return mul(sub(teacher_term, cross), temperature * temperature)


def layerwise_distill_loss(student_hiddens: list, teacher_hiddens: list,
                           config: DistillConfig) -> Tensor:
    """Sum over mapped layer pairs of the elementwise MSE."""
    if not config.layer_map:
        warnings.warn("layerwise distillation configured with an empty layer map")
        return Tensor(np.zeros(()))
    total = Tensor(np.zeros(()))
    for s_i, t_i in config.layer_map:
        hs = student_hiddens[s_i]
        ht = teacher_hiddens[t_i]
        ht_data = ht.data if isinstance(ht, Tensor) else np.asarray(ht)
        if hs.data.shape != ht_data.shape:
            raise ValueError(
                f"layer pair ({s_i}, {t_i}) width mismatch: {hs.data.shape} vs {ht_data.shape}"
            )
        diff = sub(hs, Tensor(ht_data))
        total = add(total, tmean(mul(diff, diff)))
    return total
