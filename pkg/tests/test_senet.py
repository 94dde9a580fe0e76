import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unagan import dsp
from unagan.errors import EmptyPool, IncompatibleCheckpoint, InputTooShort
from unagan.senet import (
    SeConfig,
    SeNet,
    SeTrainConfig,
    enhance,
    finetune_se,
    load_se,
    si_sdr_loss,
    state_fingerprint,
    train_se,
)

from conftest import MINI_SE, fd_gradcheck

SMALL = SeConfig(encoder_filters=32, tcn_hidden=32, tcn_bottleneck=16)


def _pairs(synth):
    return [(n.path, c.path) for n, c in synth.corpus.source_pairs()]


def test_rejects_stride_over_kernel():
    with pytest.raises(ValueError):
        SeConfig(encoder_kernel=8, encoder_stride=16)


@pytest.mark.parametrize("length", [1024, 16000, 16001])
def test_output_length_matches_input(length):
    torch.manual_seed(0)
    model = SeNet().eval()
    with torch.no_grad():
        out = model(torch.randn(length))
    assert out.shape == (length,)


@settings(max_examples=25, deadline=None)
@given(st.integers(16, 700))
def test_length_preserved_for_any_length(length):
    model = SeNet(SMALL).eval()
    with torch.no_grad():
        assert model(torch.randn(2, length)).shape == (2, length)


def test_too_short_input():
    with pytest.raises(InputTooShort):
        SeNet(SMALL)(torch.randn(15))


def test_mask_in_unit_interval():
    torch.manual_seed(1)
    model = SeNet(SMALL).eval()
    with torch.no_grad():
        _, mask = model(10 * torch.randn(3, 4000), return_mask=True)
    assert mask.min() >= 0 and mask.max() <= 1


def test_mask_override_is_decoder_of_encoder():
    torch.manual_seed(2)
    model = SeNet(SMALL).eval()
    x = torch.randn(1, 1000)
    with torch.no_grad():
        out = model(x, mask_override=torch.ones(1))
        padded, left = model._pad(x[:, None])
        direct = model.decoder(model.encoder(padded))[:, 0, left:left + 1000]
    torch.testing.assert_close(out, direct)


def test_identity_mask_autoencoder_reconstructs(synth):
    """Brief autoencoder pretraining of the identity-mask path gives > 10 dB reconstruction."""
    torch.manual_seed(0)
    model = SeNet(SMALL)
    waves = [dsp.read_wav(c.path).samples.astype(np.float32) for c in synth.corpus.pool("clean", "source")]
    opt = torch.optim.Adam(list(model.encoder.parameters()) + list(model.decoder.parameters()), lr=3e-3)
    ones = torch.ones(1)
    rng = np.random.default_rng(0)
    for _ in range(150):
        crops = [w[o:o + 2000] for w in waves for o in rng.integers(0, w.size - 2000, 2)]
        batch = torch.from_numpy(np.stack([c for c in crops if np.abs(c).max() > 1e-3]))
        opt.zero_grad()
        si_sdr_loss(model(batch, mask_override=ones), batch).backward()
        opt.step()
    with torch.no_grad():
        held = torch.from_numpy(waves[0])
        recon = model(held, mask_override=ones)
    assert dsp.si_sdr(recon.double().numpy(), held.double().numpy()) > 10.0


# loss

def test_loss_perfect_estimate_is_minus_cap():
    s = torch.randn(2, 500, dtype=torch.float64)
    assert si_sdr_loss(s, s).item() == -60.0


def test_loss_scale_invariant():
    s = torch.randn(2, 500, dtype=torch.float64)
    est = s + 0.3 * torch.randn(2, 500, dtype=torch.float64)
    np.testing.assert_allclose(si_sdr_loss(3 * est, s).item(), si_sdr_loss(est, s).item(), rtol=1e-10)


def test_loss_hand_case():
    s = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    est = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    np.testing.assert_allclose(si_sdr_loss(est, s, zero_mean=False).item(), 0.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2 ** 31 - 1), st.floats(0.0, 3.0))
def test_loss_is_negative_metric(n, seed, noise):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(n)
    est = s + noise * rng.standard_normal(n)
    loss = si_sdr_loss(torch.from_numpy(est)[None], torch.from_numpy(s)[None]).item()
    np.testing.assert_allclose(-loss, dsp.si_sdr(est, s), rtol=1e-9, atol=1e-9)


def test_loss_averages_batch():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((3, 100))
    est = s + rng.standard_normal((3, 100))
    expected = -np.mean([dsp.si_sdr(e, r) for e, r in zip(est, s)])
    np.testing.assert_allclose(si_sdr_loss(torch.from_numpy(est), torch.from_numpy(s)).item(), expected, rtol=1e-9)


def test_gradient_check_miniature():
    cfg = SeConfig(encoder_filters=8, tcn_hidden=8, tcn_bottleneck=8, n_tcn_blocks=1)
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    model = SeNet(cfg).double()
    noisy = torch.from_numpy(rng.standard_normal((2, 200)))
    clean = torch.from_numpy(rng.standard_normal((2, 200)))

    def loss_fn():
        return si_sdr_loss(model(noisy), clean)

    assert fd_gradcheck(loss_fn, list(model.parameters()), rng) > 15


# receptive field

def test_receptive_field_closed_form():
    cfg = SeConfig()
    assert cfg.dilations == [1, 2, 4, 8]
    assert cfg.receptive_field_frames() == 1 + 2 * (1 + 2 + 4 + 8) == 31
    assert cfg.receptive_field_samples() == 30 * 8 + 16


def test_receptive_field_gradient_footprint():
    cfg = SeConfig(encoder_filters=16, tcn_hidden=16, tcn_bottleneck=8)
    torch.manual_seed(0)
    model = SeNet(cfg).double()
    feats = torch.randn(1, 16, 100, dtype=torch.float64, requires_grad=True)
    t = 50
    model.masker(feats)[0, :, t].sum().backward()
    frames = np.flatnonzero(feats.grad[0].abs().sum(0).numpy())
    assert frames.max() - frames.min() + 1 == cfg.receptive_field_frames()
    assert frames.min() == t - (cfg.receptive_field_frames() - 1) // 2

    x = torch.randn(1, 2000, dtype=torch.float64, requires_grad=True)
    _, mask = model(x, return_mask=True)
    mask[0, :, 100].sum().backward()
    samples = np.flatnonzero(x.grad[0].numpy())
    assert samples.max() - samples.min() + 1 == cfg.receptive_field_samples()


# training

def test_train_deterministic(synth, mini_se):
    a = train_se(_pairs(synth), mini_se, seed=4)
    b = train_se(_pairs(synth), mini_se, seed=4)
    assert a.history == b.history
    assert state_fingerprint(a.model) == state_fingerprint(b.model)
    assert all(np.isfinite(r["loss"]) for r in a.history)


def test_train_empty_pool(mini_se):
    with pytest.raises(EmptyPool):
        train_se([], mini_se)


def test_train_improves_training_pairs(synth):
    cfg = SeTrainConfig(model=SMALL, excerpt_seconds=0.25, steps=150)
    pairs = _pairs(synth)
    run = train_se(pairs, cfg, seed=0)
    before, after = [], []
    for noisy_path, clean_path in pairs:
        noisy, clean = dsp.read_wav(noisy_path), dsp.read_wav(clean_path)
        before.append(dsp.si_sdr(noisy, clean))
        after.append(dsp.si_sdr(enhance(run.model, noisy), clean))
    assert np.mean(after) > np.mean(before) + 1.0


def test_checkpoint_round_trip(synth, mini_se, tmp_path):
    run = train_se(_pairs(synth), mini_se, out_path=tmp_path / "se.pt")
    model, payload = load_se(tmp_path / "se.pt")
    assert payload["provenance"] == "baseline"
    assert payload["parent_fingerprint"] is None
    assert payload["step"] == mini_se.steps
    assert state_fingerprint(model) == state_fingerprint(run.model)


def test_finetune_zero_steps_is_noop(synth, mini_se, tmp_path):
    base = train_se(_pairs(synth), mini_se, out_path=tmp_path / "base.pt")
    run = finetune_se(tmp_path / "base.pt", _pairs(synth), mini_se, steps=0, out_path=tmp_path / "ft.pt")
    for a, b in zip(base.model.state_dict().values(), run.model.state_dict().values()):
        assert torch.equal(a, b)
    model, payload = load_se(tmp_path / "ft.pt")
    assert payload["provenance"] == "adapted"
    assert payload["parent_fingerprint"] == state_fingerprint(base.model)
    assert state_fingerprint(model) == state_fingerprint(base.model)


def test_finetune_records_parent(synth, mini_se, tmp_path):
    base = train_se(_pairs(synth), mini_se, out_path=tmp_path / "base.pt")
    run = finetune_se(tmp_path / "base.pt", _pairs(synth), mini_se, out_path=tmp_path / "ft.pt")
    assert run.provenance == "adapted"
    assert run.parent_fingerprint == state_fingerprint(base.model)
    assert len(run.history) == mini_se.finetune_steps
    _, payload = load_se(tmp_path / "ft.pt")
    assert payload["parent_fingerprint"] == run.parent_fingerprint


def test_finetune_incompatible(synth, mini_se, tmp_path):
    train_se(_pairs(synth), mini_se, out_path=tmp_path / "base.pt")
    other = SeTrainConfig(model=SeConfig(encoder_filters=16, tcn_hidden=16, tcn_bottleneck=8))
    with pytest.raises(IncompatibleCheckpoint):
        finetune_se(tmp_path / "base.pt", _pairs(synth), other, steps=1)


def test_finetune_on_own_pairs_is_stable(synth, tmp_path):
    pairs = _pairs(synth)
    train, held = pairs[:-2], pairs[-2:]
    cfg = SeTrainConfig(model=SMALL, excerpt_seconds=0.25, steps=150, finetune_steps=40)
    base = train_se(train, cfg, seed=0, out_path=tmp_path / "base.pt")
    tuned = finetune_se(tmp_path / "base.pt", train, cfg, seed=1)

    def score(model):
        return np.mean([dsp.si_sdr(enhance(model, dsp.read_wav(n)), dsp.read_wav(c)) for n, c in held])

    assert score(tuned.model) >= score(base.model) - 0.5


def test_enhance_preserves_rate_and_length(synth):
    model = SeNet(SMALL)
    noisy = dsp.read_wav(synth.corpus.pool("noisy", "source")[0].path)
    out = enhance(model, noisy)
    assert out.sample_rate == noisy.sample_rate
    assert out.samples.shape == noisy.samples.shape


def test_training_skips_silent_references(synth, mini_se, tmp_path):
    noisy_path, clean_path = _pairs(synth)[0]
    clean = dsp.read_wav(clean_path)
    silent = dsp.write_wav(tmp_path / "silent.wav", dsp.Waveform(np.zeros_like(clean.samples), clean.sample_rate))
    run = train_se([(noisy_path, silent), (noisy_path, clean_path)], mini_se, seed=0)
    assert all(np.isfinite(r["loss"]) for r in run.history)
