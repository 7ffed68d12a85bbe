import numpy as np
import pytest
import torch

from lip2speech import model as model_mod
from lip2speech.model import ConfigError, Lip2Speech, ModelConfig, ctc_head
from lip2speech.objective import ctc_loss, reconstruction_loss

N_REF = 8000


def make_model(seed=0, **kw):
    torch.manual_seed(seed)
    m = Lip2Speech(ModelConfig(**kw))
    m.eval()
    return m


def inputs(B, T, seed=0):
    g = torch.Generator().manual_seed(seed)
    video = torch.rand(B, T, 112, 112, generator=g)
    ref = 0.1 * torch.randn(B, N_REF, generator=g)
    return video, torch.full((B,), T), ref


@pytest.fixture(scope="module")
def m():
    return make_model()


@pytest.mark.parametrize("T", [1, 7, 20, 50])
def test_shape_law(m, T):
    video, lengths, ref = inputs(1, T)
    with torch.no_grad():
        out = m(video, lengths, ref)
    assert out["features"].shape == (1, T, 64)
    assert out["log_probs"].shape == (1, T, 14)
    assert out["speaker"].shape == (1, 64)
    assert out["mel"].shape == (1, 4 * T, 80)
    assert torch.isfinite(out["mel"]).all()


def test_t50_gives_200_frame_window(m):
    video, lengths, ref = inputs(1, 50)
    with torch.no_grad():
        assert m(video, lengths, ref)["mel"].shape[1] == 200


def test_frontend_zero_clip_is_constant_over_time(m):
    with torch.no_grad():
        f = m.frontend(torch.zeros(1, 9, 112, 112))
    assert f.shape == (1, 9, m.frontend.out_dim)
    assert torch.allclose(f, f[:, :1].expand_as(f), atol=1e-6)


def test_frontend_time_invariance(m):
    T, s = 16, 3
    video, _, _ = inputs(1, T, seed=2)
    shifted = torch.roll(video, s, dims=1)
    with torch.no_grad():
        a = m.frontend(video)
        b = m.frontend(shifted)
    # frames whose 5-frame receptive field avoids both the wrap and the padding
    for t in range(s + 2, T - 2):
        torch.testing.assert_close(b[0, t], a[0, t - s], atol=1e-5, rtol=1e-5)


def test_conformer_handles_short_sequences(m):
    for T in (1, 3):
        x = torch.randn(2, T, m.frontend.out_dim)
        with torch.no_grad():
            assert m.encoder(x, torch.tensor([T, T])).shape == (2, T, 64)


def test_eval_forward_is_deterministic(m):
    video, lengths, ref = inputs(2, 6)
    with torch.no_grad():
        a = m(video, lengths, ref)["mel"]
        b = m(video, lengths, ref)["mel"]
    assert torch.equal(a, b)
    other = make_model()
    other.load_state_dict(m.state_dict())
    with torch.no_grad():
        assert torch.equal(other(video, lengths, ref)["mel"], a)


def test_batch_permutation_independence(m):
    video, _, ref = inputs(3, 8, seed=5)
    lengths = torch.tensor([8, 5, 7])
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        a = m(video, lengths, ref)
        b = m(video[perm], lengths[perm], ref[perm])
    for key in ("features", "mel"):
        torch.testing.assert_close(b[key], a[key][perm], atol=1e-5, rtol=1e-5)


def test_padding_does_not_leak(m):
    video, _, ref = inputs(1, 6, seed=7)
    padded = torch.cat([video, torch.rand(1, 4, 112, 112)], dim=1)
    with torch.no_grad():
        a = m.encode(video, torch.tensor([6]))
        b = m.encode(padded, torch.tensor([6]))
    torch.testing.assert_close(b[0, :6], a[0], atol=1e-5, rtol=1e-5)
    assert torch.all(b[0, 6:] == 0)


def test_ctc_head_examples(rng):
    F = torch.from_numpy(rng.normal(size=(5, 64)))
    p = ctc_head(F, torch.zeros(64, 7, dtype=torch.float64), torch.zeros(7, dtype=torch.float64))
    torch.testing.assert_close(p, torch.full((5, 7), 1 / 7, dtype=torch.float64))
    b = torch.zeros(7, dtype=torch.float64)
    b[3] = 100.0
    W = torch.from_numpy(rng.normal(size=(64, 7)) * 0.01)
    assert torch.all(ctc_head(F, W, b)[:, 3] > 0.999)
    p = ctc_head(F, torch.from_numpy(rng.normal(size=(64, 7))), torch.zeros(7, dtype=torch.float64))
    torch.testing.assert_close(p.sum(-1), torch.ones(5, dtype=torch.float64), atol=1e-5, rtol=0)


def test_speaker_encoder_contract(m):
    with torch.no_grad():
        e = m.speaker_embedding(torch.zeros(2, N_REF))
    assert e.shape == (2, 64) and torch.isfinite(e).all()
    with pytest.raises(ValueError):
        m.speaker_embedding(torch.zeros(1, N_REF - 1))


def test_speaker_embedding_changes_mel(m):
    video, lengths, ref = inputs(1, 5)
    with torch.no_grad():
        feats = m.encode(video, lengths)
        e1 = m.speaker_embedding(ref)
        e2 = m.speaker_embedding(torch.roll(ref, 1234, dims=1) * 3)
        y1 = m.synthesize(feats, e1, lengths)
        y2 = m.synthesize(feats, e2, lengths)
    assert (y1 - y2).abs().max() > 1e-6


def test_config_validation():
    with pytest.raises(ConfigError, match="K \\* r|n_mels \\* r"):
        ModelConfig(synth_channels=(256, 128, 300))
    with pytest.raises(ConfigError):
        ModelConfig(image_size=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=0)
    cfg = ModelConfig(vocab_size=20)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    full = model_mod.full_scale_config(30)
    assert (full.d_model, full.conformer_layers, full.heads, full.conv_kernel) == (256, 12, 8, 31)


def test_gradient_flow():
    m = make_model(seed=1)
    m.train()
    video, lengths, ref = inputs(2, 6, seed=1)
    out = m(video, lengths, ref)
    loss = out["mel"].sum() + out["log_probs"].sum() + out["speaker"].sum()
    loss.backward()
    for name, p in m.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


def test_end_to_end_finite_differences():
    """L_rec + L_ctc parameter gradients vs central differences, double precision."""
    m = make_model(seed=2).double()
    video, lengths, ref = inputs(1, 6, seed=3)
    video = video.double()
    target = torch.randn(1, 24, 80, generator=torch.Generator().manual_seed(4), dtype=torch.float64) - 6
    tokens = torch.tensor([[2, 3, 5]])

    def loss_fn():
        out = m(video, lengths, ref)
        return reconstruction_loss(out["mel"], target) + ctc_loss(out["log_probs"], tokens, lengths,
                                                                   torch.tensor([3]))

    m.zero_grad()
    loss_fn().backward()
    params = [(n, p) for n, p in m.named_parameters()]
    rng = np.random.default_rng(0)
    checked = 0
    eps = 1e-6
    while checked < 20:
        name, p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + eps
            lp = float(loss_fn())
            p[idx] = orig - eps
            lm = float(loss_fn())
            p[idx] = orig
        numeric = (lp - lm) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-7:  # parameter outside the active path (e.g. a dead ReLU); skip
            continue
        assert abs(analytic - numeric) / scale < 1e-3, (name, idx, analytic, numeric)
        checked += 1
