import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metamix.autograd import Tensor, precision
from metamix.quant import STEP_FLOOR, QuantSpec, first_last_spec, init_step, quantize, quantize_weights


def spec(bits, step, signed=False, grad_scale=False):
    return QuantSpec(bits, signed=signed, step=step, grad_scale=grad_scale)


class TestForward:
    def test_grid_point(self):
        assert quantize(Tensor(0.5), spec(2, 0.25)).item() == 0.5

    def test_saturation_and_zero_grad(self):
        x = Tensor(10.0, requires_grad=True)
        y = quantize(x, spec(2, 0.25))
        assert y.item() == 0.75
        y.backward()
        assert x.grad == 0.0

    def test_signed_grid_unchanged(self):
        w = Tensor([-0.25, 0.0, 0.25])
        np.testing.assert_array_equal(quantize_weights(w, spec(4, 0.25, signed=True)).data, w.data)

    def test_signed_clamp(self):
        assert quantize_weights(Tensor(1.6), spec(2, 1.0, signed=True)).item() == 1.0
        assert quantize_weights(Tensor(-9.0), spec(2, 1.0, signed=True)).item() == -2.0

    def test_weights_must_be_signed(self):
        with pytest.raises(ValueError, match="signed"):
            quantize_weights(Tensor(1.0), spec(4, 0.1))

    def test_dense_grid_error_bound(self):
        with precision("float64"):
            s = spec(4, 0.1, signed=True)
            w = np.linspace(-0.8, 0.7, 100_001)  # the signed 4-bit range
            err = np.abs(quantize_weights(Tensor(w), s).data - w)
        assert err.max() <= 0.05 + 1e-12

    @pytest.mark.parametrize("bits", [0, 1, 2.5])
    def test_bad_bits(self, bits):
        with pytest.raises(ValueError):
            QuantSpec(bits)

    @pytest.mark.parametrize("step", [0.0, -1.0])
    def test_bad_step(self, step):
        with pytest.raises(ValueError):
            QuantSpec(4, step=step)

    def test_step_going_negative_later_is_caught(self):
        s = spec(4, 0.1)
        s.step.data[...] = -0.1
        with pytest.raises(ValueError):
            quantize(Tensor(1.0), s)
        s.clamp_step()
        assert s.step.item() == pytest.approx(STEP_FLOOR)

    def test_first_last_spec(self):
        s = first_last_spec(signed=False)
        assert s.bits == 8 and (s.qmin, s.qmax) == (0, 255)


class TestGradients:
    """The step gradient follows the LSQ rule, not the derivative of the forward."""

    def _grads(self, x, s, grad_scale=False, n_features=None):
        xt = Tensor(x, requires_grad=True)
        quantize(xt, s, n_features).backward(np.ones_like(x))
        return xt.grad, s.step.grad

    def test_x_gradient_is_exact_indicator(self, f64, rng):
        s = spec(3, 0.3)
        x = rng.uniform(-1, 3, 500)
        gx, _ = self._grads(x, s)
        v = x / 0.3
        inside = (v >= 0) & (v <= 7)
        assert set(np.unique(gx)) <= {0.0, 1.0}
        np.testing.assert_array_equal(gx, inside.astype(float))

    @pytest.mark.parametrize("signed", [False, True])
    def test_step_gradient_matches_lsq_formula_exactly(self, f64, rng, signed):
        s = spec(3, 0.2, signed=signed)
        x = rng.uniform(-2, 2, 400)
        g = rng.standard_normal(400)
        xt = Tensor(x, requires_grad=True)
        quantize(xt, s).backward(g)
        v = x / 0.2
        levels = np.clip(np.round(v), s.qmin, s.qmax)
        inside = (v >= s.qmin) & (v <= s.qmax)
        per_elem = np.where(inside, np.round(v) - v, levels)
        assert s.step.grad == pytest.approx(float(g @ per_elem), rel=1e-13, abs=1e-13)

    def test_gradient_scale(self, f64, rng):
        x = rng.uniform(0, 2, (4, 25))
        a, b = spec(4, 0.1), spec(4, 0.1, grad_scale=True)
        _, g_plain = self._grads(x, a)
        _, g_scaled = self._grads(x, b, n_features=25)
        assert g_scaled == pytest.approx(g_plain / math.sqrt(25 * 15), rel=1e-13)

    def test_step_gradient_vs_finite_differences(self, f64, rng):
        """FD of s * clamp(round(x/s)) gives the level; LSQ subtracts x/s in range."""
        step, eps = 0.17, 1e-9
        x = rng.uniform(-0.5, 3.5, 2000)
        v = x / step
        frac = np.abs(v - np.floor(v) - 0.5)
        keep = (frac > 1e-6) & (np.abs(v - 15.5) > 1e-6)
        x, v = x[keep], v[keep]

        def f(s_val):
            return s_val * np.clip(np.round(x / s_val), 0, 15)

        fd = (f(step + eps) - f(step - eps)) / (2 * eps)
        s = spec(4, step)
        per_elem = np.empty_like(x)
        for i in range(len(x)):
            s.step.grad = None
            quantize(Tensor(x[i:i + 1]), s).backward(np.ones(1))
            per_elem[i] = s.step.grad
        inside = (v >= 0) & (v <= 15)
        np.testing.assert_allclose(per_elem[~inside], fd[~inside], rtol=1e-3)
        np.testing.assert_allclose(per_elem[inside], fd[inside] - v[inside], rtol=1e-3, atol=1e-6)


class TestInit:
    def test_zero_fallback(self):
        assert init_step(np.zeros(10), 4) == 1.0

    def test_direct_formula(self):
        assert init_step(np.ones(4), 2) == pytest.approx(2 / math.sqrt(3))

    def test_standard_normal(self):
        x = np.random.default_rng(0).standard_normal(100_000)
        expected = 2 * math.sqrt(2 / math.pi) / math.sqrt(15)
        assert init_step(x, 4) == pytest.approx(expected, rel=0.02)
        assert expected == pytest.approx(0.4120, abs=1e-4)

    def test_signed_uses_positive_level_count(self):
        assert init_step(np.ones(4), 4, signed=True) == pytest.approx(2 / math.sqrt(7))

    def test_empty(self):
        with pytest.raises(ValueError):
            init_step(np.array([]), 4)

    def test_spec_initialize(self):
        s = QuantSpec(2)
        s.initialize(np.ones(4))
        assert s.step.item() == pytest.approx(1.1547, abs=1e-4)


def test_variance_decreases_with_bits():
    x = np.random.default_rng(0).standard_normal(1_000_000)
    variances = []
    with precision("float64"):
        for b in (2, 3, 4, 8):
            s = QuantSpec(b, signed=True, step=init_step(x, b, signed=True))
            variances.append(quantize(Tensor(x), s).data.var())
    assert all(a > b for a, b in zip(variances, variances[1:]))


# -- properties ---------------------------------------------------------------------

bits_st = st.integers(2, 8)
step_st = st.floats(1e-3, 10.0)
values = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=50)


def _q(x, bits, step, signed):
    # the step is created inside the float64 block so it is not rounded to float32
    with precision("float64"):
        return quantize(Tensor(np.array(x, dtype=np.float64)), spec(bits, step, signed)).data


@settings(max_examples=200, deadline=None)
@given(values, bits_st, step_st, st.booleans())
def test_idempotent(x, bits, step, signed):
    once = _q(x, bits, step, signed)
    np.testing.assert_array_equal(_q(once, bits, step, signed), once)


@settings(max_examples=200, deadline=None)
@given(values, bits_st, step_st, st.booleans())
def test_error_bounded_by_half_step(x, bits, step, signed):
    s = spec(bits, step, signed)
    clamped = np.clip(np.array(x), s.qmin * step, s.qmax * step)
    assert np.all(np.abs(_q(x, bits, step, signed) - clamped) <= step / 2 * (1 + 1e-12))


@settings(max_examples=200, deadline=None)
@given(values, bits_st, step_st, st.booleans())
def test_monotone(x, bits, step, signed):
    xs = np.sort(np.array(x))
    assert np.all(np.diff(_q(xs, bits, step, signed)) >= 0)


@settings(max_examples=100, deadline=None)
@given(bits_st, step_st, st.booleans())
def test_range_width(bits, step, signed):
    with precision("float64"):
        s = spec(bits, step, signed)
    far = np.array([-1e12, 1e12])
    lo, hi = _q(far, bits, step, signed)
    assert hi - lo == pytest.approx((2 ** bits - 1) * step, rel=1e-12)
    assert s.range_width == pytest.approx((2 ** bits - 1) * step, rel=1e-12)
