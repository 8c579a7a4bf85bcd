import math

import numpy as np
import pytest

from ficd.schedule import desk_schedule, linear_schedule, paper_schedule


def test_full_schedule_endpoints():
    s = paper_schedule()
    assert s.T == 1000
    assert s.beta[1] == pytest.approx(0.0005, abs=1e-15)
    assert s.beta[1000] == pytest.approx(0.0195, abs=1e-15)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1] == pytest.approx(0.9995, abs=1e-15)


def test_betas_are_linear():
    s = paper_schedule()
    np.testing.assert_allclose(np.diff(s.beta[1:]), 0.019 / 999, rtol=0, atol=1e-15)


def test_two_step_hand_values():
    s = linear_schedule(2, 0.1, 0.1)
    assert s.alpha_bar[2] == pytest.approx(0.81, abs=1e-15)
    c0, ct, var = s.posterior_coeffs(2)
    # hand: sqrt(0.9) * 0.1 / 0.19 for both weights, 0.1 * 0.1 / 0.19 for the variance
    assert c0 == pytest.approx(math.sqrt(0.9) * 0.1 / 0.19, abs=1e-15)
    assert ct == pytest.approx(math.sqrt(0.9) * 0.1 / 0.19, abs=1e-15)
    assert var == pytest.approx(0.01 / 0.19, abs=1e-15)


def test_posterior_at_first_step_is_x0():
    c0, ct, var = paper_schedule().posterior_coeffs(1)
    assert c0 == pytest.approx(1.0, abs=1e-15)
    assert ct == 0.0 and var == 0.0


def test_alpha_bar_is_product_oracle():
    s = linear_schedule(50, 0.001, 0.05)
    acc = 1.0
    for t in range(1, 51):
        acc *= 1.0 - (0.001 + (t - 1) / 49 * 0.049)
        assert s.alpha_bar[t] == pytest.approx(acc, rel=1e-13)


def test_signal_noise_coeffs_unit_power():
    s = paper_schedule()
    for t in (1, 17, 500, 1000):
        a, b = s.signal_noise_coeffs(t)
        assert a * a + b * b == pytest.approx(1.0, abs=1e-14)


def test_full_chain_ends_near_pure_noise():
    assert math.sqrt(paper_schedule().alpha_bar[1000]) < 0.01


def test_desk_schedule_keeps_endpoints():
    s = desk_schedule()
    assert s.T == 200
    assert (s.beta[1], s.beta[200]) == pytest.approx((0.0005, 0.0195), abs=1e-15)
    oracle = math.prod(1.0 - (0.0005 + k / 199 * 0.019) for k in range(200))
    assert s.alpha_bar[200] == pytest.approx(oracle, rel=1e-12)
    assert math.sqrt(oracle) == pytest.approx(0.365465, abs=1e-6)


def test_arrays_are_read_only():
    with pytest.raises(ValueError):
        paper_schedule().beta[3] = 0.0


@pytest.mark.parametrize("args", [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_bad_schedules_rejected(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


@pytest.mark.parametrize("t", [0, 1001])
def test_timestep_range_checked(t):
    with pytest.raises(ValueError, match="outside"):
        paper_schedule().posterior_coeffs(t)
