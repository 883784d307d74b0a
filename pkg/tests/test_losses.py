"""Tests for the normalized focal, focal and binary cross-entropy losses."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from adaptis.config.settings import LossConfig
from adaptis.core.losses import bce_loss, build_loss, focal_loss, normalized_focal_loss, normalized_weights


def _oracle_terms(pred: np.ndarray, target: np.ndarray, gamma: float):
    p_t = np.where(target > 0.5, pred, 1.0 - pred)
    nll = -np.log(np.maximum(p_t, 1e-6))
    weights = (1.0 - p_t) ** gamma
    return p_t, nll, weights


def _random_case(rng: np.random.Generator, shape=(6, 7)):
    pred = rng.uniform(0.01, 0.99, size=shape)
    target = (rng.random(shape) < 0.4).astype(np.float64)
    return pred, target


def test_focal_single_pixel_value() -> None:
    """p = 0.5 with gamma = 2 gives 0.25·ln 2."""

    loss = focal_loss(torch.tensor([[0.5]], dtype=torch.float64), torch.tensor([[1.0]], dtype=torch.float64))
    assert float(loss) == pytest.approx(0.25 * math.log(2), abs=1e-9)


def test_bce_half_everywhere_is_ln2() -> None:
    """A flat 0.5 prediction costs ln 2 per pixel."""

    pred = torch.full((5, 5), 0.5, dtype=torch.float64)
    target = torch.from_numpy((np.arange(25).reshape(5, 5) % 2).astype(np.float64))
    assert float(bce_loss(pred, target)) == pytest.approx(math.log(2), abs=1e-9)


def test_nfl_two_pixel_example() -> None:
    """Two positive pixels at 0.5 and 0.9 follow the normalized weighting formula."""

    pred = torch.tensor([[0.5, 0.9]], dtype=torch.float64)
    target = torch.ones(1, 2, dtype=torch.float64)
    w = np.array([0.25, 0.01])
    nll = -np.log([0.5, 0.9])
    expected = float((w * nll).sum() / w.sum())
    assert float(normalized_focal_loss(pred, target)) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.6705, abs=1e-3)


def test_losses_match_scalar_oracles() -> None:
    """Each loss equals a direct numpy evaluation on 100 random masks."""

    rng = np.random.default_rng(0)
    for _ in range(100):
        gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0, 3.0]))
        pred, target = _random_case(rng)
        _, nll, weights = _oracle_terms(pred, target, gamma)
        p, t = torch.from_numpy(pred), torch.from_numpy(target)
        assert float(bce_loss(p, t)) == pytest.approx(nll.mean(), abs=1e-6)
        assert float(focal_loss(p, t, gamma=gamma)) == pytest.approx((weights * nll).mean(), abs=1e-6)
        expected_nfl = (weights * nll).sum() / max(weights.sum(), 1e-6)
        assert float(normalized_focal_loss(p, t, gamma=gamma)) == pytest.approx(expected_nfl, abs=1e-6)


def test_nfl_with_zero_gamma_is_exactly_bce() -> None:
    """With gamma = 0 every weight is one and NFL reduces to mean BCE."""

    rng = np.random.default_rng(1)
    pred, target = _random_case(rng, (3, 8, 8))
    p, t = torch.from_numpy(pred), torch.from_numpy(target)
    assert torch.equal(normalized_focal_loss(p, t, gamma=0.0), bce_loss(p, t))


def test_nfl_is_focal_rescaled() -> None:
    """For one mask NFL equals FL · N / P."""

    rng = np.random.default_rng(2)
    pred, target = _random_case(rng)
    _, _, weights = _oracle_terms(pred, target, 2.0)
    p, t = torch.from_numpy(pred), torch.from_numpy(target)
    rescaled = float(focal_loss(p, t)) * pred.size / weights.sum()
    assert float(normalized_focal_loss(p, t)) == pytest.approx(rescaled, rel=1e-9)


def test_normalized_weights_sum_to_one() -> None:
    """The per-pixel NFL weights of a mask add up to one."""

    rng = np.random.default_rng(3)
    for gamma in (0.5, 2.0, 4.0):
        pred, target = _random_case(rng)
        weights = normalized_weights(torch.from_numpy(pred), torch.from_numpy(target), gamma)
        assert float(weights.sum()) == pytest.approx(1.0, abs=1e-6)


def test_perfect_prediction_is_finite_and_near_zero() -> None:
    """All three losses vanish without NaN when predictions match targets."""

    target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    for loss in (bce_loss(target, target), focal_loss(target, target), normalized_focal_loss(target, target)):
        assert torch.isfinite(loss)
        assert float(loss) == pytest.approx(0.0, abs=1e-5)


def test_losses_are_non_negative() -> None:
    """Random predictions never give a negative loss."""

    rng = np.random.default_rng(4)
    for _ in range(20):
        p, t = (torch.from_numpy(a) for a in _random_case(rng))
        assert float(bce_loss(p, t)) >= 0
        assert float(focal_loss(p, t)) >= 0
        assert float(normalized_focal_loss(p, t)) >= 0


def test_valid_mask_excludes_pixels() -> None:
    """Pixels outside the validity mask do not influence the loss."""

    pred = torch.tensor([[0.9, 0.1, 0.5]], dtype=torch.float64)
    target = torch.tensor([[1.0, 1.0, 0.0]], dtype=torch.float64)
    valid = torch.tensor([[True, False, False]])
    assert float(bce_loss(pred, target, valid)) == pytest.approx(-math.log(0.9), abs=1e-9)
    assert float(normalized_focal_loss(pred, target, valid)) == pytest.approx(-math.log(0.9), abs=1e-9)


def test_batched_reduction_is_mean_over_masks() -> None:
    """An N×H×W batch averages the per-mask losses."""

    rng = np.random.default_rng(5)
    pred, target = _random_case(rng, (4, 5, 5))
    p, t = torch.from_numpy(pred), torch.from_numpy(target)
    for loss in (bce_loss, focal_loss, normalized_focal_loss):
        per_mask = torch.stack([loss(p[i], t[i]) for i in range(4)])
        assert torch.allclose(loss(p, t), per_mask.mean())


def test_shape_mismatch_is_an_error() -> None:
    """Prediction and target shapes must agree."""

    with pytest.raises(ValueError):
        bce_loss(torch.zeros(3, 3), torch.zeros(3, 4))
    with pytest.raises(ValueError):
        normalized_focal_loss(torch.zeros(2, 3, 3), torch.zeros(3, 3))


@pytest.mark.parametrize("name", ["bce", "fl", "nfl"])
def test_gradients_match_finite_differences(name: str) -> None:
    """Analytic gradients agree with central differences in double precision."""

    rng = np.random.default_rng(6)
    pred, target = _random_case(rng, (2, 4, 4))
    p = torch.from_numpy(pred).requires_grad_(True)
    t = torch.from_numpy(target)
    loss_fn = build_loss(LossConfig(kind=name))
    if name == "nfl":
        # the normalizer is detached, so differentiate with P held at its current value
        _, _, weights = _oracle_terms(pred, target, 2.0)
        normalizer = torch.from_numpy(weights.reshape(2, -1).sum(axis=1))

        def fn(x: torch.Tensor) -> torch.Tensor:
            p_t = torch.where(t > 0.5, x, 1 - x)
            terms = (1 - p_t) ** 2 * -torch.log(p_t)
            return (terms.flatten(1).sum(dim=1) / normalizer).mean()

        value = fn(p)
        assert float(value) == pytest.approx(float(loss_fn(p, t)), abs=1e-9)
        analytic = torch.autograd.grad(loss_fn(p, t), p)[0]
        numeric_ref = torch.autograd.grad(fn(p), p)[0]
        assert torch.allclose(analytic, numeric_ref, rtol=1e-4, atol=1e-8)
        assert torch.autograd.gradcheck(fn, (p,), eps=1e-6, atol=1e-4)
    else:
        assert torch.autograd.gradcheck(lambda x: loss_fn(x, t), (p,), eps=1e-6, atol=1e-4)


def test_build_loss_selects_kind() -> None:
    """The configured kind decides which loss function is returned."""

    pred = torch.tensor([[0.3, 0.8]], dtype=torch.float64)
    target = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    assert torch.equal(build_loss(LossConfig(kind="bce"))(pred, target), bce_loss(pred, target))
    assert torch.equal(build_loss(LossConfig(kind="fl", gamma=1.0))(pred, target), focal_loss(pred, target, gamma=1.0))
    assert torch.equal(build_loss(LossConfig())(pred, target), normalized_focal_loss(pred, target))
