import numpy as np
import pytest
import torch

from unagan.corpus import SynthSpec, generate_synthetic_corpus
from unagan.senet import SeConfig, SeTrainConfig
from unagan.ugan import DiscriminatorConfig, GeneratorConfig, NceConfig, UganConfig

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    report = outcome.get_result()
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True})
    entry["passed"] &= report.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {entry['title']}: {'PASS' if entry['passed'] else 'FAIL'}")


MINI_GEN = GeneratorConfig(n_resnet_blocks=2, n_attention_layers=1, base_channels=8, dropout_rate=0.0)
MINI_UGAN = UganConfig(generator=MINI_GEN, discriminator=DiscriminatorConfig(base_channels=8),
                       nce=NceConfig(n_patches=32, proj_dim=32), batch_size=2, steps=6, checkpoint_every=3)
MINI_SE = SeTrainConfig(model=SeConfig(encoder_filters=32, tcn_hidden=32, tcn_bottleneck=16),
                        excerpt_seconds=0.25, steps=6, finetune_steps=4, checkpoint_every=3)


def _central(loss_fn, bump, h):
    bump(h)
    up = loss_fn().item()
    bump(-2 * h)
    down = loss_fn().item()
    bump(h)
    return (up - down) / (2 * h)


def fd_gradcheck(loss_fn, params, rng, n_entries=2, n_dirs=3, h=1e-5, rtol=1e-3, n_total=None):
    """Compare autograd with central differences on sampled entries and random directions.

    Entries are drawn ``n_entries`` per tensor, or ``n_total`` uniformly over all
    scalars when given. A probe whose differences at ``h`` and ``h / 10``
    disagree straddles a ReLU kink; those are skipped, and at most a tenth of
    probes may be skipped. Returns the number of entries and directions checked.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    checked = skipped = 0

    def close(a, b):
        return abs(a - b) <= rtol * max(abs(a), abs(b)) + 1e-7

    def probe(bump, ana):
        nonlocal checked, skipped
        num = _central(loss_fn, bump, h)
        if not close(num, _central(loss_fn, bump, h / 10)):
            skipped += 1
            return
        assert close(num, ana), (num, ana)
        checked += 1

    if n_total is None:
        picks = [(t, int(i)) for t, p in enumerate(params)
                 for i in rng.choice(p.numel(), size=min(n_entries, p.numel()), replace=False)]
    else:
        offsets = np.cumsum([0] + [p.numel() for p in params])
        flat_ids = rng.choice(offsets[-1], size=min(n_total, offsets[-1]), replace=False)
        picks = [(int(np.searchsorted(offsets, i, side="right") - 1), 0) for i in flat_ids]
        picks = [(t, int(i - offsets[t])) for (t, _), i in zip(picks, flat_ids)]
    with torch.no_grad():
        for t, idx in picks:
            flat, gflat = params[t].view(-1), grads[t].reshape(-1)

            def bump(d, flat=flat, idx=idx):
                flat[idx] += d
            probe(bump, gflat[idx].item())
        for _ in range(n_dirs):
            dirs = [torch.randn_like(p) for p in params]

            def bump(d, dirs=dirs):
                for p, v in zip(params, dirs):
                    p.add_(d * v)
            probe(bump, sum((g * v).sum().item() for g, v in zip(grads, dirs)))
    assert skipped <= (checked + skipped) // 10
    return checked


def perturbed(G):
    """Generator with nonzero egress and attention gain so every parameter matters."""
    with torch.no_grad():
        G.egress[1].weight.normal_(0, 0.05)
        G.egress[1].bias.fill_(0.01)
        for layer in G.attention:
            layer.gain.fill_(0.5)
    return G


def flat_params(modules):
    return [p for m in modules for p in m.parameters()]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth(tmp_path_factory):
    """Small synthetic fixture with the target oracle written (tests poison it)."""
    root = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(n_source_clean=4, n_target_train=3, n_target_test=2, duration=1.0, source_snrs=(0.0, 6.0),
                     test_snrs=(-3.0, 3.0), noise_seconds=4.0, write_oracle=True)
    return generate_synthetic_corpus(spec, root, seed=0)


@pytest.fixture
def mini_ugan():
    return MINI_UGAN


@pytest.fixture
def mini_se():
    return MINI_SE
