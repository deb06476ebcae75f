"""FGSM and PGD on position-added embedded features, and robustness sweeps.

The attack surface is the ``(B, 14, 14, dim)`` feature grid produced by
:meth:`VisionTransformer.embed_with_positions`, so epsilon is measured in
embedding units.  The foveated model is attacked along the fixation path it
took on the clean input; at evaluation it re-runs its policy on the
perturbed features and may wander off that path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import numeric as nc
from .episode import EpisodeConfig, as_image_tensor, run_episodes
from .vit import VisionTransformer

Forward = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.1
    pgd_steps: int = 10
    pgd_step_size: float | None = None  # defaults to epsilon / 4
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")
        if self.pgd_step_size is not None and self.pgd_step_size <= 0:
            raise ValueError("pgd_step_size must be > 0")

    @property
    def step_size(self) -> float:
        return self.epsilon / 4 if self.pgd_step_size is None else self.pgd_step_size


def loss_gradient(model: Forward, features: torch.Tensor, target) -> torch.Tensor:
    x = features.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = nc.cross_entropy(model(x), target, reduction="sum")
        (grad,) = torch.autograd.grad(loss, [x])
    return grad


def project_linf(x: torch.Tensor, center: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp ``x`` into the closed l-inf ball, exact in real arithmetic.

    The bounds ``center +- eps`` are formed in float64 and rounded to the
    working dtype; a bound that rounded outward is pulled back one ulp.
    """
    c64 = center.double()

    def bound(sign: float) -> torch.Tensor:
        b = (c64 + sign * epsilon).to(x.dtype)
        return torch.where((b.double() - c64).abs() > epsilon, torch.nextafter(b, center), b)

    x = torch.minimum(torch.maximum(x, bound(-1.0)), bound(1.0))
    # guard; the bounds above already satisfy the check
    while True:
        over = (x.double() - center.double()).abs() > float(epsilon)
        if not bool(over.any()):
            return x
        x = torch.where(over, torch.nextafter(x, center), x)


def fgsm(model: Forward, features: torch.Tensor, target, epsilon: float) -> torch.Tensor:
    """One signed-gradient ascent step of size ``epsilon``."""
    features = features.detach()
    grad = loss_gradient(model, features, target)
    return project_linf(features + epsilon * grad.sign(), features, epsilon)


def pgd(model: Forward, features: torch.Tensor, target, cfg: AttackConfig) -> torch.Tensor:
    """Iterated signed-gradient ascent with projection after every step."""
    features = features.detach()
    x = features
    if cfg.random_start:
        gen = torch.Generator().manual_seed(cfg.seed)
        noise = torch.rand(features.shape, generator=gen, dtype=features.dtype) * 2 - 1
        x = project_linf(features + cfg.epsilon * noise, features, cfg.epsilon)
    for _ in range(cfg.pgd_steps):
        grad = loss_gradient(model, x, target)
        x = project_linf(x + cfg.step_size * grad.sign(), features, cfg.epsilon)
    return x


def attack(model: Forward, features, target, cfg: AttackConfig) -> torch.Tensor:
    if cfg.epsilon == 0:
        return features.detach().clone()
    if cfg.kind == "fgsm":
        return fgsm(model, features, target, cfg.epsilon)
    return pgd(model, features, target, cfg)


def unfoveated_forward(model: VisionTransformer) -> Forward:
    return model.forward_unfoveated_features


def frozen_path_forward(model: VisionTransformer, path: np.ndarray, cfg: EpisodeConfig) -> Forward:
    """Final-fixation logits of the foveated model replaying ``path``."""
    replay = EpisodeConfig(path.shape[1], cfg.policy, None, cfg.seed)

    def forward(features: torch.Tensor) -> torch.Tensor:
        return run_episodes(model, features, replay, fixed_path=path, keep_grad=True).logits_grad[-1]

    return forward


def _foveated_accuracy(model, feats, labels, cfg, idx):
    with torch.no_grad():
        batch = run_episodes(model, feats, cfg, idx)
    return batch.final_logits().argmax(-1) == labels


def robustness_sweep(
    models: dict[str, tuple[str, VisionTransformer]],
    images: np.ndarray,
    labels: np.ndarray,
    epsilons: list[float],
    kinds: tuple[str, ...] = ("fgsm", "pgd"),
    base: AttackConfig | None = None,
    episode: EpisodeConfig | None = None,
    batch_size: int = 100,
) -> list[dict]:
    """Accuracy table over model x attack x epsilon.

    ``models`` maps a display name to ``("foveated" | "unfoveated", model)``.
    Every model sees the same clean inputs and seeds.
    """
    base = base or AttackConfig()
    episode = episode or EpisodeConfig()
    labels = np.asarray(labels)
    rows = []
    for name, (kind_of_model, model) in models.items():
        scale = embedding_scale(model, images)
        for kind in kinds:
            for eps in epsilons:
                cfg = AttackConfig(kind, eps, base.pgd_steps, base.pgd_step_size, base.random_start, base.seed)
                hits = []
                for s in range(0, len(images), batch_size):
                    idx = np.arange(s, min(s + batch_size, len(images)))
                    y = labels[idx]
                    with torch.no_grad():
                        feats = model.embed_with_positions(as_image_tensor(images[idx]))
                    if kind_of_model == "foveated":
                        with torch.no_grad():
                            clean = run_episodes(model, feats, episode, idx)
                        fwd = frozen_path_forward(model, clean.fixations, episode)
                        adv = attack(fwd, feats, y, cfg)
                        hits.append(_foveated_accuracy(model, adv, y, episode, idx))
                    else:
                        adv = attack(unfoveated_forward(model), feats, y, cfg)
                        with torch.no_grad():
                            hits.append(model.forward_unfoveated_features(adv).argmax(-1).numpy() == y)
                rows.append(
                    {
                        "model": name,
                        "attack": kind,
                        "epsilon": float(eps),
                        "accuracy": float(np.concatenate(hits).mean()),
                        "embedding_scale": scale,
                    }
                )
    return rows


def embedding_scale(model: VisionTransformer, images: np.ndarray, n: int = 200) -> float:
    """Mean absolute value of position-added features, for reading epsilon."""
    with torch.no_grad():
        feats = model.embed_with_positions(as_image_tensor(images[:n]))
    return float(feats.abs().mean())
