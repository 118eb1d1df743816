"""Per-layer token samplers and the pruner.

Each encoder layer gets a two-layer MLP that scores every token with two
logits (drop, keep); the softmax of those logits is the per-token Bernoulli
keep probability. Binary masks are sampled with the Gumbel-softmax trick —
optionally straight-through, so the forward value is exactly one-hot while
gradients follow the relaxed sample.

At training time masks become attention masks (outer product of the keep
vector with itself); at inference tokens are physically removed, and every
dropped token's hidden state is carried to the final hidden sequence at its
original position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    clip,
    gather,
    gelu,
    log,
    matmul,
    mul,
    reshape,
    sigmoid,
    straight_through,
    sub,
)

KEEP_BIAS = 4.6  # sigmoid(4.6) ~ 0.990: a fresh sampler always says "keep"
LOGIT_CLAMP = 20.0
PROB_EPS = 1e-12


@dataclass
class GumbelConfig:
    """Relaxation temperature and the straight-through switch."""

    temperature: float = 1.0
    straight_through: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("gumbel temperature must be > 0")


class SamplerStack:
    """One keep/drop MLP (d -> d/2 -> 2, GELU between) per encoder layer.

    The second affine map starts at zero with bias (0, KEEP_BIAS), so the
    initial keep probability is >= 0.99 for any input.
    """

    def __init__(self, num_layers: int, hidden_dim: int, rng: np.random.Generator,
                 sampler_dim: int | None = None, init_scale: float = 0.02):
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.sampler_dim = sampler_dim if sampler_dim is not None else max(1, hidden_dim // 2)
        self.params: dict[str, Tensor] = {}
        for i in range(num_layers):
            p = f"sampler.{i}."
            self.params[p + "w1"] = Tensor(
                rng.normal(0.0, init_scale, (hidden_dim, self.sampler_dim)), requires_grad=True
            )
            self.params[p + "b1"] = Tensor(np.zeros(self.sampler_dim), requires_grad=True)
            self.params[p + "w2"] = Tensor(np.zeros((self.sampler_dim, 2)), requires_grad=True)
            self.params[p + "b2"] = Tensor(np.array([0.0, KEEP_BIAS]), requires_grad=True)

    @classmethod
    def from_params(cls, tensors: dict, num_layers: int) -> "SamplerStack":
        """Rebuild a stack from checkpoint arrays keyed ``sampler.{i}.*``."""
        w1 = np.asarray(tensors["sampler.0.w1"])
        stack = cls.__new__(cls)
        stack.num_layers = num_layers
        stack.hidden_dim = w1.shape[0]
        stack.sampler_dim = w1.shape[1]
        stack.params = {}
        for i in range(num_layers):
            for key in ("w1", "b1", "w2", "b2"):
                name = f"sampler.{i}.{key}"
                stack.params[name] = Tensor(np.asarray(tensors[name]).copy(), requires_grad=True)
        return stack

    def logits(self, h: Tensor, layer: int) -> Tensor:
        """(B, L, 2) drop/keep logits."""
        p = f"sampler.{layer}."
        u = gelu(add(matmul(h, self.params[p + "w1"]), self.params[p + "b1"]))
        return add(matmul(u, self.params[p + "w2"]), self.params[p + "b2"])

    def keep_probs(self, h: Tensor, layer: int) -> Tensor:
        """(B, L) keep probabilities: softmax over the two logits."""
        lg = self.logits(h, layer)
        b, length, _ = lg.data.shape
        l0 = reshape(gather(lg, [0], axis=2), (b, length))
        l1 = reshape(gather(lg, [1], axis=2), (b, length))
        return sigmoid(sub(l1, l0))  # two-way softmax


def gumbel_sample(keep_probs: Tensor, cfg: GumbelConfig, rng: np.random.Generator) -> Tensor:
    """Sample a token mask from per-token Bernoulli keep probabilities.

    The relaxed sample is the two-way softmax of ((log pi + g) / tau) with
    Gumbel(0,1) noise g per class; with ``straight_through`` the forward
    value is the exact one-hot argmax of (log pi + g), the backward pass its
    relaxed surrogate. Keep-logits are clamped to +-LOGIT_CLAMP, so
    probabilities of exactly 0 or 1 stay finite.
    """
    pi = clip(keep_probs, PROB_EPS, 1.0 - PROB_EPS)
    l1 = clip(log(pi), -LOGIT_CLAMP, LOGIT_CLAMP)
    l0 = clip(log(sub(1.0, pi)), -LOGIT_CLAMP, LOGIT_CLAMP)
    u = rng.uniform(size=(2,) + keep_probs.data.shape)
    g = -np.log(-np.log(u))
    diff = sub(add(l1, Tensor(g[1])), add(l0, Tensor(g[0])))
    soft = sigmoid(mul(diff, 1.0 / cfg.temperature))
    if not cfg.straight_through:
        return soft
    hard = (diff.data > 0).astype(np.float64)
    return straight_through(soft, hard)


def deterministic_mask(keep_probs: Tensor) -> np.ndarray:
    """Inference decision: keep iff the keep probability wins (pi_1 >= 0.5)."""
    return (keep_probs.data >= 0.5).astype(np.float64)


def pin_keep_first(z: Tensor) -> Tensor:
    """Force position 0 (the classification token) to stay kept.

    Gradients still flow to every other position; position 0 becomes a
    constant 1.
    """
    length = z.data.shape[-1]
    e0 = np.zeros(length)
    e0[0] = 1.0
    return add(mul(z, Tensor(1.0 - e0)), Tensor(e0))


def to_attention_mask(z: Tensor) -> Tensor:
    """Outer product M_ij = z_i * z_j; (B, L) -> (B, L, L), (L,) -> (L, L)."""
    if z.ndim == 1:
        length = z.data.shape[0]
        return mul(reshape(z, (length, 1)), reshape(z, (1, length)))
    b, length = z.data.shape
    return mul(reshape(z, (b, length, 1)), reshape(z, (b, 1, length)))


@dataclass
class DroppedToken:
    """A token removed by the pruner: where it sat, when it was dropped,
    and its hidden state at drop time."""

    position: int
    layer: int
    state: np.ndarray


def prune_physical(h: Tensor, z: np.ndarray, live_positions: np.ndarray, layer: int):
    """Gather rows of the (1, L, d) hidden state where the hard mask keeps them.

    Returns (kept hidden (1, L', d), kept original positions, drop records).
    ``z`` indexes current rows; ``live_positions`` maps rows to original
    positions. The keep set must be non-empty.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isin(z, (0.0, 1.0))):
        raise ValueError("prune_physical needs a hard 0/1 mask")
    keep_rows = np.where(z > 0)[0]
    drop_rows = np.where(z == 0)[0]
    if keep_rows.size == 0:
        raise ValueError("pruning removed every token")
    records = [
        DroppedToken(position=int(live_positions[r]), layer=layer, state=h.data[0, r].copy())
        for r in drop_rows
    ]
    if drop_rows.size == 0:
        return h, np.asarray(live_positions, dtype=np.intp), records
    kept = gather(h, keep_rows, axis=1)
    return kept, np.asarray(live_positions, dtype=np.intp)[keep_rows], records


@dataclass
class PrunedRun:
    """Result of physically pruned inference on one example."""

    logits: Tensor
    final_hidden: Tensor  # surviving rows only, after the final norm
    live_positions: np.ndarray
    records: list
    kept_counts: list  # tokens processed by each layer
    kept_positions: list  # original positions alive at each layer
    keep_probs: list  # per layer, over the rows that were live at that point


def forward_pruned(encoder, token_ids, decision_fn, masks=None, hard_hidden: bool = False) -> PrunedRun:
    """Run one example with tokens physically removed between layers.

    ``decision_fn(layer, h_live, live_positions) -> (z, keep_probs)`` returns
    a hard 0/1 numpy mask over the currently live rows (and optionally the
    keep probabilities behind it). Dropped rows are recorded and carried to
    the final hidden sequence via ``forward_to_final``.
    """
    from .encoder import sampler_view

    ids = np.asarray(token_ids, dtype=np.intp).reshape(-1)
    h = encoder.embed(ids[None, :], masks=masks)
    live = np.arange(ids.size, dtype=np.intp)
    records: list[DroppedToken] = []
    kept_counts = []
    kept_positions = []
    keep_probs = []
    for layer in range(encoder.config.num_layers):
        view = sampler_view(h, np.ones(h.data.shape[:2]))
        z, pi = decision_fn(layer, view, live)
        keep_probs.append(pi)
        if z is not None:
            h, live, recs = prune_physical(h, z, live, layer)
            records.extend(recs)
        kept_counts.append(int(live.size))
        kept_positions.append(live.copy())
        h = encoder.mha_forward(h, None, layer, masks=masks, hard_hidden=hard_hidden)
        h = encoder.ffn_forward(h, layer, masks=masks, hard_hidden=hard_hidden)
    final_hidden, _, logits = encoder.classify(h, masks=masks, hard_hidden=hard_hidden)
    return PrunedRun(
        logits=logits,
        final_hidden=final_hidden,
        live_positions=live,
        records=records,
        kept_counts=kept_counts,
        kept_positions=kept_positions,
        keep_probs=keep_probs,
    )


def replay_decisions(schedule: list[np.ndarray]):
    """A ``decision_fn`` that replays fixed per-layer masks.

    Masks are indexed by original position; live rows pick out their own
    entries, so a token dropped earlier cannot resurface.
    """

    def fn(layer, h, live_positions):
        z_full = np.asarray(schedule[layer], dtype=np.float64)
        return z_full[live_positions], None

    return fn


def sampler_decisions(sampler: SamplerStack):
    """A ``decision_fn`` using deterministic sampler outputs, position 0 pinned."""

    def fn(layer, h, live_positions):
        pi = sampler.keep_probs(h, layer)
        z = deterministic_mask(pi)[0]
        z[live_positions == 0] = 1.0
        return z, pi

    return fn


def forward_to_final(final_hidden: Tensor, live_positions: np.ndarray,
                     records: list[DroppedToken], original_length: int) -> np.ndarray:
    """Rebuild the full-length final hidden sequence.

    Surviving rows land at their original positions; each dropped token is
    reinserted at its original position with the state it had when dropped.
    Position collisions violate the contract.
    """
    live_positions = np.asarray(live_positions, dtype=np.intp)
    d = final_hidden.data.shape[-1]
    out = np.zeros((original_length, d))
    filled = np.zeros(original_length, dtype=bool)
    rows = final_hidden.data[0] if final_hidden.data.ndim == 3 else final_hidden.data
    for row, pos in zip(rows, live_positions):
        if filled[pos]:
            raise ValueError(f"position {pos} written twice")
        out[pos] = row
        filled[pos] = True
    for rec in records:
        if filled[rec.position]:
            raise ValueError(f"position {rec.position} written twice")
        out[rec.position] = rec.state
        filled[rec.position] = True
    if not filled.all():
        raise ValueError("some original positions were never filled")
    return out
