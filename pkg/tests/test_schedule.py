import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vapdiff.errors import NumericError, ValidationError
from vapdiff.schedule import (
    build_schedule,
    diffusion_loss,
    forward_diffuse,
    forward_step,
    reverse_step,
    sample_loop,
)


def product_oracle(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


def test_constant_schedule_by_hand():
    s = build_schedule("constant", 2, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.81], rtol=1e-12)


def test_single_step_linear():
    s = build_schedule("linear", 1, 0.02, 0.02)
    np.testing.assert_allclose(s.alpha_bars, [0.98], rtol=1e-12)


def test_linear_two_steps_matches_product_oracle():
    s = build_schedule("linear", 2, 1e-4, 0.02)
    np.testing.assert_allclose(s.alpha_bars, product_oracle([1e-4, 0.02]), rtol=1e-12)
    np.testing.assert_allclose(s.alpha_bars, [0.9999, 0.979902], rtol=1e-12)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(T=0), "T"),
        (dict(beta_start=0.0), "beta_start"),
        (dict(beta_end=1.0), "beta_end"),
        (dict(beta_start=0.5, beta_end=0.1), "beta_end"),
        (dict(kind="cosine"), "kind"),
    ],
)
def test_invalid_schedule_names_field(kwargs, field):
    args = dict(kind="linear", T=10, beta_start=1e-4, beta_end=0.02) | kwargs
    with pytest.raises(ValidationError) as exc:
        build_schedule(**args)
    assert exc.value.field == field
    assert field in str(exc.value)


@settings(max_examples=60, deadline=None)
@given(
    T=st.integers(1, 300),
    lo=st.floats(1e-6, 0.5),
    span=st.floats(0.0, 0.49),
    kind=st.sampled_from(["linear", "constant"]),
)
def test_schedule_invariants(T, lo, span, kind):
    s = build_schedule(kind, T, lo, lo + span)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    ratio = s.alpha_bars[1:] / (s.alpha_bars[:-1] * (1 - s.betas[1:]))
    np.testing.assert_allclose(ratio, 1.0, rtol=1e-12)


def test_forward_diffuse_zero_noise_and_zero_signal():
    s = build_schedule("linear", 10, 1e-4, 0.02)
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    zeros = torch.zeros_like(x0)
    assert torch.equal(forward_diffuse(x0, 5, zeros, s), math.sqrt(s.alpha_bar(5)) * x0)
    assert torch.equal(forward_diffuse(zeros, 5, x0, s), math.sqrt(1 - s.alpha_bar(5)) * x0)


def test_forward_diffuse_scalar():
    s = build_schedule("constant", 2, 0.1, 0.1)
    out = forward_diffuse(torch.tensor([1.0], dtype=torch.float64), 2, torch.tensor([1.0], dtype=torch.float64), s)
    assert out.item() == pytest.approx(0.9 + math.sqrt(0.19), abs=1e-12)
    assert out.item() == pytest.approx(1.33589, abs=1e-5)


def test_forward_diffuse_errors():
    s = build_schedule("linear", 10)
    with pytest.raises(ValidationError):
        forward_diffuse(torch.zeros(3), 1, torch.zeros(4), s)
    for t in (0, 11):
        with pytest.raises(ValidationError):
            forward_diffuse(torch.zeros(3), t, torch.zeros(3), s)


def test_forward_diffuse_per_sample_steps():
    s = build_schedule("linear", 10)
    x0 = torch.randn(3, 2, 2, 2, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([1, 5, 10])
    batched = forward_diffuse(x0, t, eps, s)
    for i, ti in enumerate(t.tolist()):
        torch.testing.assert_close(batched[i], forward_diffuse(x0[i], ti, eps[i], s), rtol=0, atol=1e-12)


def test_forward_step_zero_noise_and_scalar():
    s = build_schedule("constant", 3, 0.19, 0.19)
    x = torch.tensor([2.0], dtype=torch.float64)
    assert forward_step(x, 1, torch.zeros(1, dtype=torch.float64), s).item() == pytest.approx(math.sqrt(0.81) * 2.0)
    out = forward_step(torch.tensor([1.0], dtype=torch.float64), 1, torch.tensor([1.0], dtype=torch.float64), s)
    assert out.item() == pytest.approx(0.9 + math.sqrt(0.19), abs=1e-12)
    with pytest.raises(ValidationError):
        forward_step(torch.zeros(2), 1, torch.zeros(3), s)


def test_iterated_steps_match_closed_form_monte_carlo():
    s = build_schedule("linear", 20, 1e-3, 0.2)
    gen = torch.Generator().manual_seed(0)
    n, t, x0 = 20000, 20, 1.5
    x = torch.full((n,), x0, dtype=torch.float64)
    for step in range(1, t + 1):
        x = forward_step(x, step, torch.randn(n, generator=gen, dtype=torch.float64), s)
    closed = forward_diffuse(torch.full((n,), x0, dtype=torch.float64), t, torch.randn(n, generator=gen, dtype=torch.float64), s)
    # analytic targets
    mean, var = math.sqrt(s.alpha_bar(t)) * x0, 1 - s.alpha_bar(t)
    for sample in (x, closed):
        assert sample.mean().item() == pytest.approx(mean, rel=0.02)
        assert sample.var().item() == pytest.approx(var, rel=0.02)
    assert x.mean().item() == pytest.approx(closed.mean().item(), rel=0.02)
    assert x.var().item() == pytest.approx(closed.var().item(), rel=0.02)


def naive_mse(a, b):
    flat_a, flat_b = a.flatten().tolist(), b.flatten().tolist()
    total = 0.0
    for i in range(len(flat_a)):
        total += (flat_a[i] - flat_b[i]) ** 2
    return total / len(flat_a)


def test_diffusion_loss_cases():
    eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert diffusion_loss(eps, eps).item() == 0.0
    assert diffusion_loss(eps + 0.3, eps).item() == pytest.approx(0.09, abs=1e-12)
    other = torch.randn_like(eps)
    assert diffusion_loss(other, eps).item() == pytest.approx(naive_mse(other, eps), abs=1e-10)
    assert diffusion_loss(other, eps).item() >= 0
    with pytest.raises(ValidationError):
        diffusion_loss(eps, eps[0])


def test_reverse_step_final_step_is_noiseless():
    s = build_schedule("linear", 5)
    xt, eps = torch.randn(4), torch.randn(4)
    a = reverse_step(xt, eps, 1, torch.randn(4), s)
    b = reverse_step(xt, eps, 1, torch.zeros(4), s)
    assert torch.equal(a, b)


def test_reverse_step_inverts_single_step_forward():
    s = build_schedule("constant", 1, 0.3, 0.3)
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    xt = forward_diffuse(x0, 1, eps, s)
    rec = reverse_step(xt, eps, 1, torch.zeros_like(x0), s)
    torch.testing.assert_close(rec, x0, rtol=0, atol=1e-6)


def test_reverse_step_scalar():
    s = build_schedule("constant", 1, 0.19, 0.19)
    out = reverse_step(torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64), 1,
                       torch.zeros(1, dtype=torch.float64), s)
    expected = (1 - (0.19 / math.sqrt(0.19)) * 0.5) / 0.9
    assert out.item() == pytest.approx(expected, abs=1e-12)
    assert out.item() == pytest.approx(0.869, abs=1e-3)


def test_reverse_step_rejects_nonfinite():
    s = build_schedule("linear", 5)
    with pytest.raises(NumericError):
        reverse_step(torch.zeros(2), torch.tensor([float("nan"), 0.0]), 3, torch.zeros(2), s)


def test_sample_loop_finite_and_shaped():
    s = build_schedule("linear", 30)
    out = sample_loop(lambda x, t: 0.1 * x, (2, 3, 8, 8), s, torch.Generator().manual_seed(0))
    assert out.shape == (2, 3, 8, 8)
    assert torch.isfinite(out).all()
