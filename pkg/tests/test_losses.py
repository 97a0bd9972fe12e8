import math

import numpy as np
import pytest

from layerseg import tensor as T
from layerseg.losses import (
    CSV_HEADER,
    LOG_EPS,
    LossReport,
    LossWeights,
    discriminator_loss,
    generator_adv_loss,
    info_regularizer,
    mask_area_penalty,
    smooth_l1,
    total_generator_loss,
)
from layerseg.tensor import Tape, Tensor


def val(x):
    return x.item() if hasattr(x, "item") else float(x)


def test_weights_validation():
    LossWeights()
    for bad in (dict(lam=-1), dict(area_target=0.0), dict(area_target=1.0), dict(beta=-0.1), dict(eps=0.0), dict(eps=0.01)):
        with pytest.raises(ValueError):
            LossWeights(**bad)


def test_discriminator_loss_values():
    with T.precision(64):
        assert val(discriminator_loss(0.5, 0.5)) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert val(discriminator_loss(1 - LOG_EPS, LOG_EPS)) == pytest.approx(0.0, abs=1e-5)
        rng = np.random.default_rng(0)
        r, f = rng.uniform(0.01, 0.99, size=2)
        assert val(discriminator_loss(r, f)) == pytest.approx(-(math.log(r) + math.log(1 - f)), rel=1e-12)


def test_losses_finite_at_extremes():
    with T.precision(64):
        for d in (0.0, 1.0):
            assert math.isfinite(val(discriminator_loss(d, d)))
            assert math.isfinite(val(generator_adv_loss(d)))


def test_generator_adv_loss_values_and_monotone():
    with T.precision(64):
        assert val(generator_adv_loss(0.5)) == pytest.approx(math.log(2), abs=1e-12)
        assert val(generator_adv_loss(1 - LOG_EPS)) == pytest.approx(0.0, abs=1e-5)
        grid = [val(generator_adv_loss(d)) for d in np.linspace(0.01, 0.99, 50)]
        assert all(a > b for a, b in zip(grid, grid[1:]))


def test_area_penalty_cases():
    with T.precision(64):
        assert val(mask_area_penalty([np.ones((1, 1, 4, 4))], 0.25)) == 0.5625
        m = np.zeros((1, 1, 4, 5))
        m[..., :1, :] = 1.0  # 5 of 20 pixels
        assert val(mask_area_penalty([m, m], 0.25)) == 0.0
        a = np.full((1, 1, 10, 10), 0.1)
        b = np.full((1, 1, 10, 10), 0.4)
        assert val(mask_area_penalty([a, b], 0.25)) == pytest.approx(0.0225, abs=1e-15)
        with pytest.raises(ValueError):
            mask_area_penalty([], 0.25)


def test_area_penalty_permutation_invariant():
    rng = np.random.default_rng(1)
    masks = [rng.uniform(size=(2, 1, 4, 4)) for _ in range(4)]
    with T.precision(64):
        assert val(mask_area_penalty(masks, 0.3)) == pytest.approx(val(mask_area_penalty(masks[::-1], 0.3)), abs=1e-15)


def test_area_penalty_gradient_is_constant_per_pixel():
    rng = np.random.default_rng(2)
    with T.precision(64):
        masks = [Tensor(rng.uniform(size=(1, 1, 5, 4)), requires_grad=True) for _ in range(3)]
        with Tape() as tape:
            loss = mask_area_penalty(masks, 0.25)
        tape.backward(loss)
        n, area = 3, 20
        for m in masks:
            expected = 2.0 / (n * area) * (m.data.sum() / area - 0.25)
            np.testing.assert_allclose(m.grad, expected, rtol=1e-12)


def test_info_regularizer():
    rng = np.random.default_rng(3)
    z = rng.uniform(-1, 1, size=(4, 5))
    q = rng.uniform(-1, 1, size=(4, 5))
    with T.precision(64):
        assert val(info_regularizer(z, z)) == 0.0
        assert val(info_regularizer(z + 1, z)) == pytest.approx(1.0)
        assert val(info_regularizer(q, z)) == pytest.approx(np.mean((q - z) ** 2), rel=1e-12)
        with pytest.raises(ValueError):
            info_regularizer(q[:, :4], z)


def test_smooth_l1_values():
    with T.precision(64):
        x = np.array([0.0, 0.25, -0.25, -0.5, 0.1, 0.2499999, 0.2500001])
        out = smooth_l1(x).data
        np.testing.assert_allclose(out[:5], [0.0, 0.25, 0.25, 0.5, 0.04], atol=1e-15)
        assert abs(out[5] - out[6]) < 1e-6
        xs = np.random.default_rng(0).uniform(-2, 2, 100)
        np.testing.assert_array_equal(smooth_l1(xs).data, smooth_l1(-xs).data)


def test_total_generator_loss():
    w = LossWeights(1000.0, 0.25, 0.0)
    assert val(total_generator_loss(0.7, 0.0, 123.0, w)) == pytest.approx(0.7)
    w2 = LossWeights(1000.0, 0.25, 50.0)
    assert val(total_generator_loss(0.5, 0.002, 0.1, w2)) == pytest.approx(0.5 + 2.0 + 5.0)


def test_table_defaults():
    w = LossWeights()
    assert w.lam == 1000.0 and w.area_target == 0.25


def test_report_csv():
    r = LossReport(3, 1.5, 0.25, 0.0, 0.0, 0.25)
    assert r.csv_row() == "3,1.5,0.25,0.0,0.0,0.25"
    assert CSV_HEADER.split(",")[0] == "step" and len(CSV_HEADER.split(",")) == 6
    assert r.is_finite()
    assert not LossReport(0, float("nan"), 0, 0, 0, 0).is_finite()
