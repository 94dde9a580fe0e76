"""Adversarial and patch-contrastive objectives for the magnitude translator."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from ..errors import ConfigError, DegenerateNce
from .networks import GeneratorConfig


@dataclass(frozen=True)
class NceConfig:
    n_patches: int = 256
    temperature: float = 0.07
    # None resolves to input, every downsampling layer, the first and the middle residual block
    nce_layers: tuple[str, ...] | None = None
    proj_dim: int = 256
    normalize_embeddings: bool = True
    detach_keys: bool = False

    def __post_init__(self):
        if self.n_patches < 2:
            raise ConfigError("n_patches must be >= 2")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.nce_layers is not None and len(self.nce_layers) == 0:
            raise ConfigError("nce_layers must not be empty")

    def resolve_layers(self, gen_cfg: GeneratorConfig) -> list[str]:
        if self.nce_layers is not None:
            layers = list(self.nce_layers)
        else:
            layers = ["input"] + [f"downsample-{i + 1}" for i in range(gen_cfg.n_downsample)]
            for idx in (1, gen_cfg.n_resnet_blocks // 2 + 1):
                if f"resblock-{idx}" not in layers:
                    layers.append(f"resblock-{idx}")
        for name in layers:
            gen_cfg.layer_channels(name)
        return layers


@dataclass(frozen=True)
class UnaLossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class PatchSet:
    """Per-layer query/key embeddings sampled at shared spatial sites.

    ``query[l]`` and ``key[l]`` are ``[batch, n_patches, dim]``; row i of both
    comes from site ``indices[l][i]`` of layer ``layers[l]``.
    """
    layers: list[str]
    indices: list[torch.Tensor]
    query: list[torch.Tensor]
    key: list[torch.Tensor]
    with_replacement: dict[str, bool] = field(default_factory=dict)

    @property
    def locations(self) -> list[tuple[str, int]]:
        return [(name, int(i)) for name, idx in zip(self.layers, self.indices) for i in idx]


def _generator_from(seed):
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(0 if seed is None else int(seed))
    return gen


def sample_sites(n_sites: int, n_patches: int, generator: torch.Generator) -> tuple[torch.Tensor, bool]:
    if n_sites >= n_patches:
        return torch.randperm(n_sites, generator=generator)[:n_patches], False
    return torch.randint(n_sites, (n_patches,), generator=generator), True


def sample_patch_set(features_query, features_key, n_patches: int, seed=None, projector=None,
                     layers=None, normalize: bool = True) -> PatchSet:
    """Draw sites once per layer from the key maps and gather the same sites from the query maps."""
    generator = _generator_from(seed)
    if layers is None:
        layers = [f"layer-{i}" for i in range(len(features_query))]
    indices, queries, keys, replaced = [], [], [], {}
    for name, fq, fk in zip(layers, features_query, features_key):
        if fq.shape != fk.shape:
            raise ValueError(f"layer {name}: query {tuple(fq.shape)} and key {tuple(fk.shape)} differ")
        n_sites = fk.shape[2] * fk.shape[3]
        ids, with_replacement = sample_sites(n_sites, n_patches, generator)
        ids = ids.to(fk.device)
        replaced[name] = with_replacement
        pq = fq.flatten(2)[:, :, ids].transpose(1, 2)
        pk = fk.flatten(2)[:, :, ids].transpose(1, 2)
        if projector is not None:
            pq, pk = projector(name, pq), projector(name, pk)
        if normalize:
            pq, pk = F.normalize(pq, dim=-1), F.normalize(pk, dim=-1)
        indices.append(ids)
        queries.append(pq)
        keys.append(pk)
    return PatchSet(list(layers), indices, queries, keys, replaced)


def nce_from_embeddings(query: torch.Tensor, key: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean softmax cross-entropy where key i is the positive for query i.

    Negatives are the other keys of the same item, so each row has
    ``n_patches`` classes: one positive and ``n_patches - 1`` negatives.
    """
    if query.dim() == 2:
        query, key = query[None], key[None]
    b, p, _ = query.shape
    if p < 2:
        raise DegenerateNce(f"need at least 2 patches, got {p}")
    logits = torch.bmm(query, key.transpose(1, 2)) / temperature
    targets = torch.arange(p, device=query.device).repeat(b)
    return F.cross_entropy(logits.reshape(b * p, p), targets)


def patch_nce_loss(patch_set: PatchSet, temperature: float = 0.07) -> torch.Tensor:
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    losses = [nce_from_embeddings(q, k, temperature) for q, k in zip(patch_set.query, patch_set.key)]
    return torch.stack(losses).mean()


def una_objective(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """E log D(x) + E log(1 - D(G(y))) with D = sigmoid(logit)."""
    return F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()


def adversarial_loss_d(real_logits, fake_logits, mode: str = "bce") -> torch.Tensor:
    if mode == "bce":
        return -una_objective(real_logits, fake_logits)
    if mode == "lsgan":
        return 0.5 * ((real_logits - 1) ** 2).mean() + 0.5 * (fake_logits ** 2).mean()
    raise ConfigError(f"unknown adversarial mode {mode!r}")


def adversarial_loss_g(fake_logits, mode: str = "bce") -> torch.Tensor:
    if mode == "bce":
        return -F.logsigmoid(fake_logits).mean()
    if mode == "lsgan":
        return ((fake_logits - 1) ** 2).mean()
    raise ConfigError(f"unknown adversarial mode {mode!r}")


def contrastive_loss(G, projector, source, translated, layers, nce_cfg: NceConfig, generator) -> torch.Tensor:
    """Patch NCE between G's features of ``translated`` (queries) and ``source`` (keys)."""
    feat_k = G.features(source, layers)
    if nce_cfg.detach_keys:
        feat_k = [f.detach() for f in feat_k]
    feat_q = G.features(translated, layers)
    patches = sample_patch_set(feat_q, feat_k, nce_cfg.n_patches, generator, projector, layers,
                               nce_cfg.normalize_embeddings)
    return patch_nce_loss(patches, nce_cfg.temperature)


@dataclass
class UnaLosses:
    scalar_g: torch.Tensor
    scalar_d: torch.Tensor
    diagnostics: dict


def discriminator_loss(D, real, fake, mode="bce") -> torch.Tensor:
    return adversarial_loss_d(D(real), D(fake.detach()), mode)


def generator_loss(G, D, projector, clean, noisy, weights: UnaLossWeights, nce_cfg: NceConfig, layers,
                   generator, mode="bce", fake=None):
    """Return (scalar_g, components) with scalar_g = adv + alpha * L_cl(G, Y) + beta * L_cl(G, X)."""
    if fake is None:
        fake = G(clean)
    adv = adversarial_loss_g(D(fake), mode)
    zero = adv.new_zeros(())
    nce_y = contrastive_loss(G, projector, clean, fake, layers, nce_cfg, generator) if weights.alpha > 0 else zero
    nce_x = zero
    if weights.beta > 0:
        nce_x = contrastive_loss(G, projector, noisy, G(noisy), layers, nce_cfg, generator)
    total = adv + weights.alpha * nce_y + weights.beta * nce_x
    return total, {"adv_g": adv, "nce_y": nce_y, "nce_x": nce_x}


def total_una_loss(G, D, projector, clean, noisy, weights: UnaLossWeights = UnaLossWeights(),
                   nce_cfg: NceConfig = NceConfig(), seed=None, mode: str = "bce") -> UnaLosses:
    """Evaluate both players' objectives on one unpaired batch (clean Y, target noisy X)."""
    generator = _generator_from(seed)
    layers = nce_cfg.resolve_layers(G.cfg)
    fake = G(clean)
    scalar_d = discriminator_loss(D, noisy, fake, mode)
    scalar_g, parts = generator_loss(G, D, projector, clean, noisy, weights, nce_cfg, layers, generator, mode, fake)
    diagnostics = {key: float(val.detach()) for key, val in parts.items()}
    diagnostics["adv_d"] = float(scalar_d.detach())
    diagnostics["total"] = float(scalar_g.detach())
    return UnaLosses(scalar_g, scalar_d, diagnostics)
