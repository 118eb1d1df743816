import numpy as np
import pytest

from slimformer.autodiff import Tensor
from slimformer.gradcheck import max_grad_error
from slimformer.losses import (
    ENUM_MAX_LEN,
    LossBreakdown,
    LossWeights,
    entropy_loss,
    enumeration_mask_entropy,
    enumeration_norm_expectation,
    ib_total,
    norm_loss,
    skim_loss,
)


def test_entropy_maximal_uncertainty_case():
    """All pi = 0.5, one layer, two tokens: per-token term ln 0.5."""
    pis = [Tensor(np.array([0.5, 0.5]))]
    unnorm = entropy_loss(pis, normalize=False)
    assert abs(float(unnorm.data) - 2 * np.log(0.5)) < 1e-12
    norm = entropy_loss(pis)
    assert abs(float(norm.data) - np.log(0.5)) < 1e-12


def test_entropy_deterministic_masks_are_zero():
    pis = [Tensor(np.array([0.0, 1.0, 1.0, 0.0]))]
    assert abs(float(entropy_loss(pis).data)) < 1e-9


def test_entropy_extremes():
    """Per-token term: minimum -ln 2 at 0.5, supremum 0 at the corners."""
    grid = np.linspace(0.001, 0.999, 201)
    terms = grid * np.log(grid) + (1 - grid) * np.log(1 - grid)
    assert terms.min() >= -np.log(2) - 1e-12
    assert abs(terms[100] + np.log(2)) < 1e-9  # at pi = 0.5
    assert terms.max() <= 0.0
    corners = entropy_loss([Tensor(np.array([0.0, 1.0]))], normalize=False)
    assert abs(float(corners.data)) < 1e-9


def test_entropy_matches_enumeration_for_given_example(rng):
    pi = rng.uniform(0.01, 0.99, size=8)
    closed = -float(entropy_loss([Tensor(pi)], normalize=False).data)
    assert abs(closed - enumeration_mask_entropy(pi)) < 1e-9


def test_entropy_matches_enumeration_all_lengths(rng):
    for length in range(1, 11):
        for _ in range(5):
            pi = rng.uniform(0.01, 0.99, size=length)
            closed = -float(entropy_loss([Tensor(pi)], normalize=False).data)
            assert abs(closed - enumeration_mask_entropy(pi)) < 1e-9


def test_entropy_gradient(rng):
    pi = Tensor(rng.uniform(0.05, 0.95, size=(2, 6)), requires_grad=True)
    err = max_grad_error(lambda: entropy_loss([pi]), [pi])
    assert err < 1e-6


def test_norm_loss_hand_case():
    """pi = (1, 0), row norms (2, 3): 0.5 * 4 = 2 before normalization."""
    h = Tensor(np.array([[2.0, 0.0], [0.0, 3.0]]))
    pi = Tensor(np.array([1.0, 0.0]))
    out = norm_loss([h], [pi], normalize=False)
    assert abs(float(out.data) - 2.0) < 1e-12


def test_norm_loss_zero_probs():
    h = Tensor(np.ones((3, 4)))
    assert float(norm_loss([h], [Tensor(np.zeros(3))]).data) == 0.0


def test_norm_loss_gradient_wrt_probs(rng):
    h = Tensor(rng.normal(size=(5, 4)))
    pi = Tensor(rng.uniform(0.1, 0.9, size=5), requires_grad=True)
    err = max_grad_error(lambda: norm_loss([h], [pi]), [pi], step=1e-6)
    assert err < 1e-6


def test_norm_loss_gradient_wrt_hidden(rng):
    h = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    pi = Tensor(rng.uniform(0.1, 0.9, size=4), requires_grad=True)
    err = max_grad_error(lambda: norm_loss([h], [pi]), [h, pi])
    assert err < 1e-4


def test_norm_loss_permutation_invariance(rng):
    h = rng.normal(size=(6, 4))
    pi = rng.uniform(size=6)
    perm = rng.permutation(6)
    a = float(norm_loss([Tensor(h)], [Tensor(pi)]).data)
    b = float(norm_loss([Tensor(h[perm])], [Tensor(pi[perm])]).data)
    assert abs(a - b) < 1e-12


def test_norm_and_skim_monotone_in_single_prob(rng):
    h = Tensor(rng.normal(size=(5, 3)))
    pi = rng.uniform(0.2, 0.8, size=5)
    base_norm = float(norm_loss([h], [Tensor(pi)]).data)
    base_skim = float(skim_loss([Tensor(pi)]).data)
    for i in range(5):
        smaller = pi.copy()
        smaller[i] -= 0.1
        assert float(norm_loss([h], [Tensor(smaller)]).data) < base_norm
        assert float(skim_loss([Tensor(smaller)]).data) < base_skim


def test_ib_total_reduces_to_ce():
    ce = Tensor(np.array(1.25))
    total, bd = ib_total(ce, Tensor(np.array(-0.4)), Tensor(np.array(2.0)), LossWeights(0.0, 0.0))
    assert float(total.data) == 1.25
    assert bd.total == 1.25 and bd.ce == 1.25


def test_ib_total_arithmetic():
    total, bd = ib_total(
        Tensor(np.array(1.0)), Tensor(np.array(-0.5)), Tensor(np.array(2.0)), LossWeights(1.0, 1.0)
    )
    assert abs(float(total.data) - 2.5) < 1e-12
    assert isinstance(bd, LossBreakdown)


def test_ib_total_matches_unsplit_objective(rng):
    """With gamma1 = gamma2 = beta and normalization off, the split loss equals
    ce + beta * (sum -H(z_i) + 0.5 sum ||diag(pi) h||^2)."""
    beta = 0.37
    pis = [Tensor(rng.uniform(0.1, 0.9, size=5)) for _ in range(3)]
    hs = [Tensor(rng.normal(size=(5, 4))) for _ in range(3)]
    ce = Tensor(np.array(0.8))
    ent = entropy_loss(pis, normalize=False)
    nrm = norm_loss(hs, pis, normalize=False)
    total, _ = ib_total(ce, ent, nrm, LossWeights(beta, beta))
    direct = 0.8
    for pi, h in zip(pis, hs):
        p = pi.data
        direct += beta * float((p * np.log(p) + (1 - p) * np.log(1 - p)).sum())
        direct += beta * 0.5 * float(((h.data * p[:, None]) ** 2).sum())
    assert abs(float(total.data) - direct) < 1e-9


def test_skim_loss_all_kept():
    assert float(skim_loss([Tensor(np.ones(6)), Tensor(np.ones(6))]).data) == 1.0


def test_skim_loss_half_kept():
    pis = [Tensor(np.array([1.0, 0.0, 1.0, 0.0]))] * 3
    assert abs(float(skim_loss(pis).data) - 0.5) < 1e-12


def test_skim_loss_mean_of_entries():
    assert abs(float(skim_loss([Tensor(np.array([0.2, 0.8]))]).data) - 0.5) < 1e-12


def test_enumeration_norm_expectation_all_ones_equals_norm_loss(rng):
    h = rng.normal(size=(5, 3))
    pi = np.ones(5)
    enum = enumeration_norm_expectation(h, pi)
    closed = float(norm_loss([Tensor(h)], [Tensor(pi)], normalize=False).data)
    assert abs(enum - closed) < 1e-12


def test_enumeration_norm_expectation_gap_to_point_estimate():
    """pi = 0.5, ||h||^2 = 4: exact expectation 1.0 vs point estimate 0.5."""
    h = np.array([[2.0]])
    pi = np.array([0.5])
    enum = enumeration_norm_expectation(h, pi)
    point = float(norm_loss([Tensor(h)], [Tensor(pi)], normalize=False).data)
    assert abs(enum - 1.0) < 1e-12
    assert abs(point - 0.5) < 1e-12


def test_enumeration_norm_expectation_closed_form(rng):
    for _ in range(10):
        h = rng.normal(size=(6, 4))
        pi = rng.uniform(size=6)
        enum = enumeration_norm_expectation(h, pi)
        closed = 0.5 * float((pi * (h**2).sum(axis=1)).sum())
        assert abs(enum - closed) < 1e-12


def test_enumeration_length_guard(rng):
    too_long = ENUM_MAX_LEN + 1
    with pytest.raises(ValueError, match="enumeration"):
        enumeration_mask_entropy(np.full(too_long, 0.5))
    with pytest.raises(ValueError, match="enumeration"):
        enumeration_norm_expectation(np.ones((too_long, 2)), np.full(too_long, 0.5))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.0)


def test_token_weighted_losses(rng):
    """0/1 token weights restrict the sums to real tokens."""
    pi = rng.uniform(0.1, 0.9, size=(2, 5))
    h = rng.normal(size=(2, 5, 3))
    w = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
    ent_w = float(entropy_loss([Tensor(pi)], token_weights=[w]).data)
    rows = [(b, l) for b in range(2) for l in range(5) if w[b, l]]
    manual = np.mean([
        pi[b, l] * np.log(pi[b, l]) + (1 - pi[b, l]) * np.log(1 - pi[b, l]) for b, l in rows
    ])
    assert abs(ent_w - manual) < 1e-12
    nrm_w = float(norm_loss([Tensor(h)], [Tensor(pi)], token_weights=[w]).data)
    manual_n = sum(0.5 * pi[b, l] ** 2 * (h[b, l] ** 2).sum() for b, l in rows) / (len(rows) * 3)
    assert abs(nrm_w - manual_n) < 1e-12
