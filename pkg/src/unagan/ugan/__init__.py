"""Unpaired clean-to-noisy magnitude translation (generator, discriminator, losses, training)."""
from .losses import (
    NceConfig,
    PatchSet,
    UnaLossWeights,
    adversarial_loss_d,
    adversarial_loss_g,
    patch_nce_loss,
    sample_patch_set,
    total_una_loss,
    una_objective,
)
from .networks import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    PatchProjector,
    receptive_field,
)
from .training import UganConfig, UganRun, load_generator, train_una_gan

__all__ = [
    "Discriminator", "DiscriminatorConfig", "Generator", "GeneratorConfig", "NceConfig", "PatchProjector",
    "PatchSet", "UganConfig", "UganRun", "UnaLossWeights", "adversarial_loss_d", "adversarial_loss_g",
    "load_generator", "patch_nce_loss", "receptive_field", "sample_patch_set", "total_una_loss",
    "train_una_gan", "una_objective",
]
