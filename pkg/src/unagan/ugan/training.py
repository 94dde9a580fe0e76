"""Alternating adversarial training of the magnitude translator."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import dsp
from ..checkpoint import load_checkpoint, save_checkpoint
from ..configio import fingerprint, from_dict, to_dict
from ..corpus import UnpairedSampler
from ..errors import ConfigError, TrainingDiverged
from .losses import NceConfig, UnaLossWeights, discriminator_loss, generator_loss
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, PatchProjector

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "L_adv_d", "L_adv_g", "L_cl_Y", "L_cl_X", "L_total")


@dataclass(frozen=True)
class UganConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    nce: NceConfig = field(default_factory=NceConfig)
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 0.002
    # fraction of ``steps`` after which the rate falls linearly to zero; 1.0 keeps it constant
    lr_decay_start: float = 1.0
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 8
    steps: int = 20000
    segment_width: int = 128
    adversarial: str = "bce"
    checkpoint_every: int = 1000

    def __post_init__(self):
        UnaLossWeights(self.alpha, self.beta)
        if self.adversarial not in ("bce", "lsgan"):
            raise ConfigError(f"unknown adversarial mode {self.adversarial!r}")
        if self.generator.n_bins != self.discriminator.n_bins:
            raise ConfigError("generator and discriminator must agree on n_bins")
        if not 0.0 <= self.lr_decay_start <= 1.0:
            raise ConfigError("lr_decay_start must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        self.nce.resolve_layers(self.generator)

    @property
    def weights(self) -> UnaLossWeights:
        return UnaLossWeights(self.alpha, self.beta)


@dataclass
class UganRun:
    generator: Generator
    discriminator: Discriminator
    projector: PatchProjector
    history: list[dict]
    fingerprint: str
    checkpoint_path: Path | None = None
    used_target_ids: set = field(default_factory=set)
    used_clean_ids: set = field(default_factory=set)
    seconds: float = 0.0


def build_models(cfg: UganConfig):
    layers = cfg.nce.resolve_layers(cfg.generator)
    return (Generator(cfg.generator), Discriminator(cfg.discriminator),
            PatchProjector(cfg.generator, layers, cfg.nce.proj_dim))


def ugan_fingerprint(cfg: UganConfig, stft_cfg: dsp.StftConfig) -> str:
    return fingerprint({"ugan": cfg, "stft": stft_cfg})


def write_history(path, history: list[dict], columns=HISTORY_COLUMNS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in columns})
    return path


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def lr_factor(cfg: UganConfig, step: int) -> float:
    """Constant rate, then linear decay reaching zero at ``cfg.steps``."""
    knee = cfg.lr_decay_start * cfg.steps
    if step < knee or cfg.steps <= knee:
        return 1.0
    return max(0.0, (cfg.steps - step) / (cfg.steps - knee))


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def _save(path, cfg, stft_cfg, fp, G, D, P, opt_g, opt_d, step, history, sampler, patch_gen, used_t, used_c):
    return save_checkpoint(
        path, "ugan", {"ugan": to_dict(cfg), "stft": to_dict(stft_cfg)}, fp,
        {"generator": G, "discriminator": D, "projector": P}, {"generator": opt_g, "discriminator": opt_d},
        step=step,
        extra={"history": history, "sampler_state": sampler.state(), "torch_rng": torch.get_rng_state(),
               "patch_rng": patch_gen.get_state(), "used_target_ids": sorted(used_t),
               "used_clean_ids": sorted(used_c)},
    )


def train_una_gan(clean_records, target_records, cfg: UganConfig = UganConfig(),
                  stft_cfg: dsp.StftConfig = dsp.StftConfig(), steps: int | None = None, seed: int = 0,
                  out_dir=None, resume: bool = False, log_every: int = 100) -> UganRun:
    """Train generator, discriminator and projection heads on unpaired crops.

    Each step makes one discriminator update followed by one generator +
    projection update. A checkpoint is written to ``out_dir/ugan.pt`` every
    ``cfg.checkpoint_every`` steps and at the end.
    """
    steps = cfg.steps if steps is None else steps
    if cfg.generator.n_bins != stft_cfg.n_bins:
        raise ConfigError(f"generator expects {cfg.generator.n_bins} bins, STFT gives {stft_cfg.n_bins}")
    fp = ugan_fingerprint(cfg, stft_cfg)
    torch.manual_seed(seed)
    G, D, P = build_models(cfg)
    layers = cfg.nce.resolve_layers(cfg.generator)
    opt_g = torch.optim.Adam(list(G.parameters()) + list(P.parameters()), lr=cfg.lr, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    sampler = UnpairedSampler(clean_records, target_records, stft_cfg, cfg.segment_width, seed=seed)
    patch_gen = torch.Generator()
    patch_gen.manual_seed(seed + 1)
    history, used_t, used_c = [], set(), set()
    start = 0
    ckpt_path = Path(out_dir) / "ugan.pt" if out_dir is not None else None

    if resume and ckpt_path is not None and ckpt_path.exists():
        payload = load_checkpoint(ckpt_path, "ugan")
        if payload["fingerprint"] != fp:
            log.warning("ignoring %s: config fingerprint changed", ckpt_path)
        else:
            G.load_state_dict(payload["modules"]["generator"])
            D.load_state_dict(payload["modules"]["discriminator"])
            P.load_state_dict(payload["modules"]["projector"])
            opt_g.load_state_dict(payload["optimizers"]["generator"])
            opt_d.load_state_dict(payload["optimizers"]["discriminator"])
            extra = payload["extra"]
            history = list(extra["history"])
            sampler.set_state(extra["sampler_state"])
            torch.set_rng_state(extra["torch_rng"])
            patch_gen.set_state(extra["patch_rng"])
            used_t, used_c = set(extra["used_target_ids"]), set(extra["used_clean_ids"])
            start = payload["step"]

    G.train(), D.train(), P.train()
    last_good = ckpt_path if ckpt_path is not None and ckpt_path.exists() else None
    t0 = time.perf_counter()
    for step in range(start, steps):
        ys, xs, cids, tids = sampler.sample(cfg.batch_size)
        used_c.update(cids)
        used_t.update(tids)
        y = torch.from_numpy(ys)[:, None]
        x = torch.from_numpy(xs)[:, None]
        for group in opt_d.param_groups + opt_g.param_groups:
            group["lr"] = cfg.lr * lr_factor(cfg, step)

        fake = G(y)
        _set_requires_grad(D, True)
        opt_d.zero_grad(set_to_none=True)
        loss_d = discriminator_loss(D, x, fake, cfg.adversarial)
        loss_d.backward()
        opt_d.step()

        _set_requires_grad(D, False)
        opt_g.zero_grad(set_to_none=True)
        loss_g, parts = generator_loss(G, D, P, y, x, cfg.weights, cfg.nce, layers, patch_gen,
                                       cfg.adversarial, fake)
        loss_g.backward()
        opt_g.step()

        row = {"step": step + 1, "L_adv_d": loss_d.item(), "L_adv_g": parts["adv_g"].item(),
               "L_cl_Y": parts["nce_y"].item(), "L_cl_X": parts["nce_x"].item(), "L_total": loss_g.item()}
        if not all(math.isfinite(row[k]) for k in HISTORY_COLUMNS[1:]):
            raise TrainingDiverged(f"non-finite loss at step {step + 1}: {row}", last_good)
        history.append(row)
        if log_every and (step + 1) % log_every == 0:
            log.info("ugan step %d  d=%.4f g=%.4f nce_y=%.4f nce_x=%.4f", step + 1, row["L_adv_d"],
                     row["L_adv_g"], row["L_cl_Y"], row["L_cl_X"])
        if ckpt_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            last_good = _save(ckpt_path, cfg, stft_cfg, fp, G, D, P, opt_g, opt_d, step + 1, history, sampler,
                              patch_gen, used_t, used_c)
    _set_requires_grad(D, True)
    if ckpt_path is not None:
        _save(ckpt_path, cfg, stft_cfg, fp, G, D, P, opt_g, opt_d, max(steps, start), history, sampler, patch_gen,
              used_t, used_c)
        write_history(Path(out_dir) / "ugan_history.csv", history)
    G.eval(), D.eval(), P.eval()
    return UganRun(G, D, P, history, fp, ckpt_path, used_t, used_c, time.perf_counter() - t0)


def load_generator(path) -> tuple[Generator, dict]:
    payload = load_checkpoint(path, "ugan")
    cfg = from_dict(UganConfig, payload["config"]["ugan"], "ugan")
    G = Generator(cfg.generator)
    G.load_state_dict(payload["modules"]["generator"])
    G.eval()
    return G, payload
