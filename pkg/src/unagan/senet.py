"""Mask-based time-domain enhancement network and its SI-SDR training procedures."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import dsp
from .checkpoint import load_checkpoint, save_checkpoint
from .configio import fingerprint, from_dict, to_dict
from .errors import ConfigError, EmptyPool, IncompatibleCheckpoint, InputTooShort, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeConfig:
    encoder_filters: int = 256
    encoder_kernel: int = 16
    encoder_stride: int = 8
    n_tcn_blocks: int = 4
    tcn_hidden: int = 256
    tcn_bottleneck: int = 128
    tcn_kernel: int = 3
    mask_activation: str = "sigmoid"

    def __post_init__(self):
        if self.encoder_stride > self.encoder_kernel:
            raise ConfigError("encoder_stride must not exceed encoder_kernel")
        if self.mask_activation != "sigmoid":
            raise ConfigError(f"unsupported mask activation {self.mask_activation!r}")
        if self.n_tcn_blocks < 1 or self.tcn_kernel < 1:
            raise ConfigError("n_tcn_blocks and tcn_kernel must be >= 1")

    @property
    def dilations(self) -> list[int]:
        return [2 ** i for i in range(self.n_tcn_blocks)]

    def receptive_field_frames(self) -> int:
        return 1 + (self.tcn_kernel - 1) * sum(self.dilations)

    def receptive_field_samples(self) -> int:
        return (self.receptive_field_frames() - 1) * self.encoder_stride + self.encoder_kernel


@dataclass(frozen=True)
class SeTrainConfig:
    model: SeConfig = field(default_factory=SeConfig)
    lr: float = 0.001
    finetune_lr: float | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    excerpt_seconds: float = 1.0
    grad_clip: float = 5.0
    steps: int = 20000
    finetune_steps: int = 5000
    checkpoint_every: int = 1000


class ChannelNorm(nn.Module):
    """Layer normalization over channels, independently at every frame."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class TcnBlock(nn.Module):
    def __init__(self, bottleneck, hidden, kernel, dilation):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(bottleneck, hidden, 1),
            nn.PReLU(),
            ChannelNorm(hidden),
            nn.Conv1d(hidden, hidden, kernel, dilation=dilation, padding=dilation * (kernel - 1) // 2, groups=hidden),
            nn.PReLU(),
            ChannelNorm(hidden),
            nn.Conv1d(hidden, bottleneck, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class SeNet(nn.Module):
    """Encoder -> dilated TCN mask estimator -> masked features -> transposed-conv decoder."""

    def __init__(self, cfg: SeConfig = SeConfig()):
        super().__init__()
        self.cfg = cfg
        n = cfg.encoder_filters
        self.encoder = nn.Sequential(nn.Conv1d(1, n, cfg.encoder_kernel, stride=cfg.encoder_stride, bias=False),
                                     nn.ReLU())
        blocks = [TcnBlock(cfg.tcn_bottleneck, cfg.tcn_hidden, cfg.tcn_kernel, d) for d in cfg.dilations]
        self.masker = nn.Sequential(
            ChannelNorm(n),
            nn.Conv1d(n, cfg.tcn_bottleneck, 1),
            *blocks,
            nn.Conv1d(cfg.tcn_bottleneck, n, 1),
            nn.Sigmoid(),
        )
        self.decoder = nn.ConvTranspose1d(n, 1, cfg.encoder_kernel, stride=cfg.encoder_stride, bias=False)

    def _pad(self, x):
        length = x.shape[-1]
        if length < self.cfg.encoder_kernel:
            raise InputTooShort(f"input of {length} samples is shorter than the encoder kernel")
        k, s = self.cfg.encoder_kernel, self.cfg.encoder_stride
        left = k - s
        padded = length + 2 * left
        extra = (-(padded - k)) % s
        return nn.functional.pad(x, (left, left + extra)), left

    def forward(self, noisy, mask_override=None, return_mask=False):
        squeeze = noisy.dim() == 1
        x = noisy[None] if squeeze else noisy
        length = x.shape[-1]
        x, left = self._pad(x[:, None])
        feats = self.encoder(x)
        mask = self.masker(feats) if mask_override is None else mask_override.expand_as(feats)
        out = self.decoder(feats * mask)[:, 0, left:left + length]
        out = out[0] if squeeze else out
        return (out, mask) if return_mask else out


def si_sdr_loss(enhanced: torch.Tensor, clean: torch.Tensor, zero_mean: bool = True) -> torch.Tensor:
    """Negative SI-SDR (dB) averaged over the batch."""
    return -dsp.si_sdr_torch(enhanced, clean, zero_mean=zero_mean).mean()


def state_fingerprint(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]


@dataclass
class SeRun:
    model: SeNet
    history: list[dict]
    checkpoint_path: Path | None
    provenance: str
    parent_fingerprint: str | None
    seconds: float = 0.0


class PairLoader:
    def __init__(self, pairs):
        self.pairs = list(pairs)
        self._cache = {}

    def __len__(self):
        return len(self.pairs)

    def load(self, i):
        if i not in self._cache:
            noisy_path, clean_path = self.pairs[i]
            noisy, clean = dsp.read_wav(noisy_path).samples, dsp.read_wav(clean_path).samples
            if noisy.size != clean.size:
                raise ValueError(f"pair {noisy_path}: length {noisy.size} != {clean.size}")
            self._cache[i] = (noisy.astype(np.float32), clean.astype(np.float32))
        return self._cache[i]

    def excerpt_batch(self, rng: np.random.Generator, batch_size: int, length: int):
        noisy_b, clean_b = np.zeros((batch_size, length), np.float32), np.zeros((batch_size, length), np.float32)
        for b, i in enumerate(rng.integers(0, len(self.pairs), batch_size)):
            noisy, clean = self.load(int(i))
            if noisy.size > length:
                off = int(rng.integers(0, noisy.size - length + 1))
                noisy, clean = noisy[off:off + length], clean[off:off + length]
            noisy_b[b, :noisy.size], clean_b[b, :clean.size] = noisy, clean
        return torch.from_numpy(noisy_b), torch.from_numpy(clean_b)


def _checkpoint_config(cfg: SeTrainConfig) -> dict:
    return {"senet": to_dict(cfg.model), "training": to_dict(cfg)}


def _train(model, pairs, cfg: SeTrainConfig, steps, lr, seed, ckpt_path, provenance, parent, sample_rate, tag):
    if len(pairs) == 0:
        raise EmptyPool("no training pairs")
    loader = PairLoader(pairs)
    rng = np.random.default_rng([seed, 7])
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=cfg.adam_betas)
    length = int(round(cfg.excerpt_seconds * sample_rate))
    history = []
    arch_fp = fingerprint(cfg.model)
    last_good = None
    model.train()
    t0 = time.perf_counter()
    for step in range(steps):
        noisy, clean = loader.excerpt_batch(rng, cfg.batch_size, length)
        # silent reference excerpts have no defined SI-SDR; redraw until one is usable
        while not bool((clean.abs().sum(-1) > 0).any()):
            noisy, clean = loader.excerpt_batch(rng, cfg.batch_size, length)
        keep = clean.abs().sum(-1) > 0
        noisy, clean = noisy[keep], clean[keep]
        opt.zero_grad(set_to_none=True)
        loss = si_sdr_loss(model(noisy), clean)
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite {tag} loss at step {step + 1}", last_good)
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        history.append({"step": step + 1, "loss": loss.item()})
        if (step + 1) % 200 == 0:
            log.info("%s step %d  loss=%.3f", tag, step + 1, history[-1]["loss"])
        if ckpt_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            last_good = _save_se(ckpt_path, cfg, arch_fp, model, opt, step + 1, provenance, parent, history)
    model.eval()
    if ckpt_path is not None:
        _save_se(ckpt_path, cfg, arch_fp, model, opt, steps, provenance, parent, history)
    return history, time.perf_counter() - t0


def _save_se(path, cfg, arch_fp, model, opt, step, provenance, parent, history):
    return save_checkpoint(path, "se", _checkpoint_config(cfg), arch_fp, {"senet": model}, {"senet": opt},
                           step=step, provenance=provenance, parent_fingerprint=parent,
                           extra={"history": history, "state_fingerprint": state_fingerprint(model)})


def train_se(pairs, cfg: SeTrainConfig = SeTrainConfig(), steps: int | None = None, seed: int = 0, out_path=None,
             sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> SeRun:
    """Train a baseline enhancer on (noisy path, clean path) pairs with Adam on random excerpts."""
    steps = cfg.steps if steps is None else steps
    if len(pairs) == 0:
        raise EmptyPool("no source training pairs")
    torch.manual_seed(seed)
    model = SeNet(cfg.model)
    history, secs = _train(model, pairs, cfg, steps, cfg.lr, seed, out_path, "baseline", None, sample_rate, "se")
    return SeRun(model, history, Path(out_path) if out_path else None, "baseline", None, secs)


def load_se(path) -> tuple[SeNet, dict]:
    payload = load_checkpoint(path, "se")
    model_cfg = from_dict(SeConfig, payload["config"]["senet"], "senet.model")
    model = SeNet(model_cfg)
    model.load_state_dict(payload["modules"]["senet"])
    model.eval()
    return model, payload


def finetune_se(baseline_path, pairs, cfg: SeTrainConfig = SeTrainConfig(), steps: int | None = None, seed: int = 0,
                out_path=None, sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> SeRun:
    """Continue training a baseline checkpoint on simulated (noisy, clean) pairs."""
    steps = cfg.finetune_steps if steps is None else steps
    model, payload = load_se(baseline_path)
    if payload["fingerprint"] != fingerprint(cfg.model):
        raise IncompatibleCheckpoint(
            f"{baseline_path}: architecture fingerprint {payload['fingerprint']} "
            f"does not match {fingerprint(cfg.model)}")
    parent = payload["extra"].get("state_fingerprint") or state_fingerprint(model)
    torch.manual_seed(seed)
    lr = cfg.finetune_lr if cfg.finetune_lr is not None else cfg.lr
    if steps == 0:
        if out_path is not None:
            _save_se(out_path, cfg, payload["fingerprint"], model, torch.optim.Adam(model.parameters(), lr=lr), 0,
                     "adapted", parent, [])
        return SeRun(model, [], Path(out_path) if out_path else None, "adapted", parent)
    history, secs = _train(model, pairs, cfg, steps, lr, seed, out_path, "adapted", parent, sample_rate, "finetune")
    return SeRun(model, history, Path(out_path) if out_path else None, "adapted", parent, secs)


@torch.no_grad()
def enhance(model: SeNet, noisy: dsp.Waveform) -> dsp.Waveform:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(torch.from_numpy(noisy.samples).to(dtype))
    return dsp.Waveform(out.double().numpy(), noisy.sample_rate)
