import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lip2speech import _kernels_py, kernels
from lip2speech.objective import CTCInfeasibleError, ctc_loss, ctc_loss_from_probs, ctc_min_frames

from oracles import ctc_brute_force, edit_distance_recursive

BACKENDS = [_kernels_py]
try:
    from lip2speech import _kernels as _compiled

    BACKENDS.append(_compiled)
except ImportError:  # pragma: no cover
    pass


def _random_probs(rng, T, N):
    x = rng.normal(size=(T, N)) * 2
    p = np.exp(x)
    return p / p.sum(1, keepdims=True)


def test_single_forced_path():
    p = np.array([[0.0, 1.0]])
    assert ctc_loss_from_probs(p, [1]) == 0.0


def test_uniform_two_frames_matches_enumeration():
    p = np.full((2, 3), 1 / 3)
    # paths aa, -a, a- each have probability 1/9
    assert ctc_loss_from_probs(p, [1]) == pytest.approx(-np.log(1 / 3), abs=1e-12)
    assert ctc_brute_force(p, [1]) == pytest.approx(1.0986122886681098, abs=1e-12)


def test_infeasible_target_raises():
    p = np.full((2, 3), 1 / 3)
    with pytest.raises(CTCInfeasibleError):
        ctc_loss_from_probs(p, [1, 1])  # needs a separating blank: 3 frames
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(torch.log(torch.full((1, 2, 3), 1 / 3)), torch.tensor([[1, 2, 1]]), [2], [3])


def test_min_frames():
    assert ctc_min_frames([1, 2, 3]) == 3
    assert ctc_min_frames([1, 1, 2, 2]) == 6
    assert ctc_min_frames([]) == 0


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_backends_match_brute_force(backend, rng):
    for _ in range(100):
        T = int(rng.integers(1, 5))
        N = int(rng.integers(2, 4))
        L = int(rng.integers(0, 3))
        target = rng.integers(1, N, size=L)
        if ctc_min_frames(target) > T:
            continue
        p = _random_probs(rng, T, N)
        loss, _ = backend.ctc_forward_backward(np.log(p), target.astype(np.int64), 0)
        assert loss == pytest.approx(ctc_brute_force(p, target), abs=1e-9)


def test_backends_agree_on_gradients(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    for _ in range(50):
        T, N = int(rng.integers(1, 30)), int(rng.integers(2, 8))
        target = rng.integers(1, N, size=int(rng.integers(0, max(1, T // 2))))
        if ctc_min_frames(target) > T:
            continue
        lp = np.log(_random_probs(rng, T, N))
        a = BACKENDS[0].ctc_forward_backward(lp, target.astype(np.int64), 0)
        b = BACKENDS[1].ctc_forward_backward(lp, target.astype(np.int64), 0)
        assert a[0] == pytest.approx(b[0], rel=1e-12, abs=1e-12)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)


def test_matches_torch_reference(rng):
    B, T, N = 4, 12, 6
    logits = torch.from_numpy(rng.normal(size=(B, T, N)))
    lp = torch.log_softmax(logits, -1)
    targets = torch.from_numpy(rng.integers(1, N, size=(B, 4)))
    in_len = torch.tensor([12, 10, 9, 12])
    tgt_len = torch.tensor([4, 3, 2, 1])
    ours = ctc_loss(lp, targets, in_len, tgt_len, reduction="none")
    ref = torch.nn.functional.ctc_loss(lp.transpose(0, 1), targets, in_len, tgt_len,
                                       blank=0, reduction="none", zero_infinity=False)
    torch.testing.assert_close(ours, ref, rtol=1e-10, atol=1e-10)


def test_gradient_matches_finite_differences(rng):
    logits = torch.from_numpy(rng.normal(size=(2, 5, 4))).requires_grad_()
    targets = torch.tensor([[1, 2], [3, 3]])
    def f(x):
        return ctc_loss(torch.log_softmax(x, -1), targets, [5, 5], [2, 2])
    assert torch.autograd.gradcheck(f, (logits,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_gradient_wrt_logits_is_softmax_minus_occupancy(rng):
    # the occupancy rows sum to one, so the logit gradient rows sum to zero
    logits = torch.from_numpy(rng.normal(size=(1, 7, 5))).requires_grad_()
    loss = ctc_loss(torch.log_softmax(logits, -1), torch.tensor([[1, 4, 2]]), [7], [3])
    loss.backward()
    np.testing.assert_allclose(logits.grad.sum(-1).numpy(), 0.0, atol=1e-12)


def test_impossible_alignment_gives_inf():
    with np.errstate(divide="ignore"):
        loss, grad = kernels.ctc_forward_backward(np.log(np.array([[1.0, 0.0], [1.0, 0.0]])), [1])
    assert loss == np.inf
    assert np.all(grad == 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=8), st.lists(st.integers(0, 4), max_size=8))
def test_edit_distance_matches_recursion(a, b):
    assert kernels.edit_distance(a, b) == edit_distance_recursive(a, b)
    assert _kernels_py.edit_distance(a, b) == edit_distance_recursive(a, b)
