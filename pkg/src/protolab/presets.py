"""Named training presets and the three training regimes.

``paper`` keeps the published learning rates. ``reference`` is the desk-scale
preset used by the acceptance runs: the backbone here starts from random
weights instead of ImageNet features, so it gets the add-on learning rate and
twice as many joint epochs, and the last layer gets a larger rate for its 20
passes.
"""

from __future__ import annotations

from dataclasses import replace

from .data import AugmentConfig
from .training import AdvTrainConfig, TrainConfig

PAPER_TRAIN = TrainConfig()
REFERENCE_TRAIN = TrainConfig(joint_epochs=12, lr_joint_backbone=3e-3, lr_last_layer=3e-3)
PRESETS = {"paper": PAPER_TRAIN, "reference": REFERENCE_TRAIN}

REGIMES = ("standard", "adv", "jpeg-aug")


def regime_settings(regime: str, preset: str = "reference", seed: int = 7):
    """Return ``(TrainConfig, AugmentConfig, AdvTrainConfig | None)`` for a regime.

    ``adv`` runs FGSM on every warmup and joint batch; the joint stage is
    shortened so the two stages together last ``AdvTrainConfig.epochs``.
    ``jpeg-aug`` compresses each training image with probability 0.5 at Q=20.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {tuple(PRESETS)}")
    train = replace(PRESETS[preset], seed=seed)
    augment = AugmentConfig()
    adversarial = None
    if regime == "adv":
        adversarial = AdvTrainConfig()
        train = replace(train, joint_epochs=max(adversarial.epochs - train.warmup_epochs, 0))
    elif regime == "jpeg-aug":
        augment = replace(augment, jpeg_prob=0.5, jpeg_quality=20)
    return train, augment, adversarial
