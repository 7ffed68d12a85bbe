import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lip2speech.objective import (LossWeights, ObjectiveConfig, ScheduleState, asr_content_loss,
                                  reconstruction_loss, total_loss)


def test_total_loss_gate_examples():
    s = ScheduleState()
    assert total_loss(2.0, 3.0, 0.1, LossWeights(), s).l_tot == pytest.approx(12.0)
    s.asr_loss_enabled = True
    b = total_loss(2.0, 3.0, 0.1, LossWeights(), s)
    assert b.l_tot == pytest.approx(15.0)
    assert b.lambda_asr_eff == 1.0
    for enabled in (False, True):
        assert total_loss(0.0, 0.0, 0.0, LossWeights(), ScheduleState(asr_loss_enabled=enabled)).l_tot == 0


def test_total_loss_matches_formula_in_same_precision():
    t = [torch.tensor(x, dtype=torch.float32) for x in (1.7, 0.3, 0.05)]
    b = total_loss(*t, LossWeights(1, 1, 100), ScheduleState(asr_loss_enabled=True))
    assert b.l_tot.dtype == torch.float32
    assert torch.equal(b.l_tot, 1.0 * t[0] + 1.0 * t[1] + 100.0 * t[2])


def test_weights_must_be_non_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_rec=-1)


def test_asr_loss_examples():
    z = torch.zeros(40, 64)
    assert float(asr_content_loss(z, z)) == 0.0
    assert float(asr_content_loss(z, torch.ones(40, 64))) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        asr_content_loss(z, torch.zeros(40, 63))


def test_asr_loss_gradient_matches_finite_differences(rng):
    z = torch.from_numpy(rng.normal(size=(6, 5)))
    z_hat = torch.from_numpy(rng.normal(size=(6, 5))).requires_grad_()
    asr_content_loss(z, z_hat).backward()
    np.testing.assert_allclose(z_hat.grad.numpy(), 2 * (z_hat - z).detach().numpy() / z.numel(), rtol=1e-12)
    base = z_hat.detach().clone()
    eps = 1e-6
    for k in range(5):
        idx = (int(rng.integers(6)), int(rng.integers(5)))
        plus, minus = base.clone(), base.clone()
        plus[idx] += eps
        minus[idx] -= eps
        numeric = (float(asr_content_loss(z, plus)) - float(asr_content_loss(z, minus))) / (2 * eps)
        assert abs(numeric - float(z_hat.grad[idx])) / abs(numeric) < 1e-6


def test_asr_loss_does_not_backprop_into_target():
    z = torch.ones(3, 4, requires_grad=True)
    z_hat = torch.zeros(3, 4, requires_grad=True)
    asr_content_loss(z, z_hat).backward()
    assert z.grad is None
    assert z_hat.grad is not None


def test_masked_mean_ignores_padding():
    z = torch.zeros(1, 4, 2)
    z_hat = torch.zeros(1, 4, 2)
    z_hat[0, 3] = 10.0
    mask = torch.tensor([[True, True, True, False]])
    assert float(asr_content_loss(z, z_hat, mask)) == 0.0
    assert float(reconstruction_loss(z_hat, z, mask)) == 0.0


def test_reconstruction_examples(rng):
    y = torch.from_numpy(rng.normal(size=(20, 80)))
    assert float(reconstruction_loss(y, y)) == 0.0
    assert float(reconstruction_loss(y + 0.5, y)) == pytest.approx(0.5)
    y_hat = torch.from_numpy(rng.normal(size=(20, 80)))
    for c in (-3.0, 0.5, 2.0):
        assert float(reconstruction_loss(c * y_hat, c * y)) == pytest.approx(
            abs(c) * float(reconstruction_loss(y_hat, y)))
    with pytest.raises(ValueError):
        reconstruction_loss(y[:5], y)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=200), st.integers(0, 30))
def test_gate_is_monotone(losses, fallback):
    s = ScheduleState(fallback_epoch=fallback)
    seen = []
    for step, l in enumerate(losses):
        s.start_epoch(step // 10, step)
        seen.append(s.asr_loss_enabled)
        s.update(l, step + 1)
    # once on, never off
    assert seen == sorted(seen)
    if any(seen):
        first = seen.index(True)
        assert s.flip_step == first


def test_gate_threshold_and_fallback():
    s = ScheduleState(gate_threshold=0.3, fallback_epoch=100, ema_decay=0.0)
    s.update(0.5, 1)
    assert not s.asr_loss_enabled
    s.update(0.2, 2)
    assert s.asr_loss_enabled and s.flip_step == 2
    s = ScheduleState(fallback_epoch=3)
    s.start_epoch(2, 20)
    assert not s.asr_loss_enabled
    s.start_epoch(3, 30)
    assert s.asr_loss_enabled and s.flip_step == 30


def test_schedule_round_trip():
    s = ObjectiveConfig(gate_threshold=0.2).schedule()
    s.update(1.0, 1)
    assert ScheduleState.from_dict(s.to_dict()) == s
