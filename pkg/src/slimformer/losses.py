"""Training objective for dynamic token downsampling.

The total loss is cross-entropy plus two terms per layer:

* an entropy term, sum of pi*log(pi) + (1-pi)*log(1-pi) over tokens — the
  negative entropy of the per-token Bernoulli keep masks, pushing decisions
  toward certainty;
* a norm term, half the squared Frobenius norm of the probability-weighted
  hidden states diag(pi) h — the compression pressure that actually drives
  tokens out.

Both are normalized so that the coefficients transfer across model sizes:
the entropy term by (layers x tokens), the norm term by
(layers x tokens x width). The skim baseline (mean fraction of preserved
tokens per layer) is included for ablations.

Brute-force enumeration oracles over the 2^L mask outcomes are provided for
small L; tests use them to validate the closed forms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, clip, div, frobenius_sq, log, mul, reshape, sub, tsum

PROB_EPS = 1e-12
ENUM_MAX_LEN = 12


@dataclass
class LossWeights:
    """Coefficients of the entropy and norm terms."""

    gamma1: float = 0.0  # entropy coefficient
    gamma2: float = 0.0  # norm coefficient

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("loss coefficients must be >= 0")


@dataclass
class LossBreakdown:
    """Scalar values of every loss component, for the metrics stream."""

    ce: float
    entropy: float
    norm: float
    total: float
    skim: float | None = None
    l0: float | None = None
    distill: float | None = None


def entropy_loss(keep_probs: list, token_weights: list | None = None,
                 normalize: bool = True) -> Tensor:
    """Sum over layers and tokens of pi*log(pi) + (1-pi)*log(1-pi).

    Equals minus the entropy of the product-Bernoulli mask distribution.
    Zero when every decision is deterministic, -log 2 per token at pi = 0.5.
    Normalized by (num_layers * tokens-per-layer) when ``normalize``.
    ``token_weights`` (constant 0/1 arrays matching each pi) restricts the
    sum to real tokens when batches carry padding.
    """
    total = Tensor(np.zeros(()))
    count = 0.0
    for i, pi in enumerate(keep_probs):
        p = clip(pi, PROB_EPS, 1.0 - PROB_EPS)
        q = sub(1.0, p)
        term = add(mul(p, log(p)), mul(q, log(q)))
        if token_weights is not None:
            w = np.asarray(token_weights[i], dtype=np.float64)
            term = mul(term, Tensor(w))
            count += float(w.sum())
        else:
            count += pi.data.size
        total = add(total, tsum(term))
    if normalize and count:
        total = div(total, count)
    return total


def norm_loss(hidden_states: list, keep_probs: list, token_weights: list | None = None,
              normalize: bool = True) -> Tensor:
    """Sum over layers of 0.5 * ||diag(pi) h||_F^2.

    ``hidden_states[i]`` are the states entering layer i's sampler, shape
    (..., L, d); ``keep_probs[i]`` the matching keep probabilities (..., L).
    Gradients flow to both. Normalized by the total number of weighted
    entries (layers * tokens * width) when ``normalize``.
    """
    if len(hidden_states) != len(keep_probs):
        raise ValueError("one keep-probability vector per hidden state is required")
    total = Tensor(np.zeros(()))
    count = 0.0
    for i, (h, pi) in enumerate(zip(hidden_states, keep_probs)):
        if h.data.shape[:-1] != pi.data.shape:
            raise ValueError(
                f"hidden states {h.data.shape} do not match keep probs {pi.data.shape}"
            )
        width = h.data.shape[-1]
        if token_weights is not None:
            w = np.asarray(token_weights[i], dtype=np.float64)
            pi = mul(pi, Tensor(w))  # 0/1 weights: zeroed rows drop out of the norm
            count += float(w.sum()) * width
        else:
            count += h.data.size
        weighted = mul(h, reshape(pi, pi.data.shape + (1,)))
        total = add(total, mul(frobenius_sq(weighted), 0.5))
    if normalize and count:
        total = div(total, count)
    return total


def skim_loss(keep_probs: list, token_weights: list | None = None) -> Tensor:
    """Mean over layers of the mean keep probability — the fraction of
    preserved tokens per layer."""
    total = Tensor(np.zeros(()))
    count = 0.0
    for i, pi in enumerate(keep_probs):
        if token_weights is not None:
            w = np.asarray(token_weights[i], dtype=np.float64)
            total = add(total, tsum(mul(pi, Tensor(w))))
            count += float(w.sum())
        else:
            total = add(total, tsum(pi))
            count += pi.data.size
    return div(total, max(count, 1.0))


def ib_total(ce: Tensor, entropy: Tensor, norm: Tensor, weights: LossWeights,
             extras: dict | None = None) -> tuple[Tensor, LossBreakdown]:
    """ce + gamma1 * entropy + gamma2 * norm, plus any stage extras.

    Extras (e.g. {"l0": ..., "distill": ..., "skim": ...}) are added to the
    total with weight 1 and reported in the breakdown.
    """
    total = add(ce, add(mul(entropy, weights.gamma1), mul(norm, weights.gamma2)))
    extras = extras or {}
    for value in extras.values():
        total = add(total, value)
    breakdown = LossBreakdown(
        ce=float(ce.data),
        entropy=float(entropy.data),
        norm=float(norm.data),
        total=float(total.data),
        skim=float(extras["skim"].data) if "skim" in extras else None,
        l0=float(extras["l0"].data) if "l0" in extras else None,
        distill=float(extras["distill"].data) if "distill" in extras else None,
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# exhaustive oracles (test instruments, exponential in L)


def _check_enum_length(length: int) -> None:
    if length > ENUM_MAX_LEN:
        raise ValueError(f"enumeration over 2^{length} outcomes refused (max L = {ENUM_MAX_LEN})")


def enumeration_mask_entropy(pi: np.ndarray) -> float:
    """Exact entropy H(z) of the product Bernoulli, by enumerating all 2^L
    mask outcomes."""
    pi = np.asarray(pi, dtype=np.float64)
    _check_enum_length(pi.size)
    h = 0.0
    for bits in itertools.product((0, 1), repeat=pi.size):
        z = np.asarray(bits, dtype=np.float64)
        p = float(np.prod(np.where(z > 0, pi, 1.0 - pi)))
        if p > 0:
            h -= p * np.log(p)
    return h


def enumeration_norm_expectation(h: np.ndarray, pi: np.ndarray) -> float:
    """Exact E_z[0.5 * ||diag(z) h||_F^2] over z ~ Bernoulli(pi), enumerated.

    The closed form is 0.5 * sum_l pi_l ||h_l||^2. Note the training loss
    instead uses the point estimate diag(pi) h, which gives
    0.5 * sum_l pi_l^2 ||h_l||^2 — this oracle quantifies that gap.
    """
    h = np.asarray(h, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if h.shape[0] != pi.size:
        raise ValueError("one probability per token row is required")
    _check_enum_length(pi.size)
    expect = 0.0
    for bits in itertools.product((0, 1), repeat=pi.size):
        z = np.asarray(bits, dtype=np.float64)
        p = float(np.prod(np.where(z > 0, pi, 1.0 - pi)))
        expect += p * 0.5 * float(((h * z[:, None]) ** 2).sum())
    return expect
