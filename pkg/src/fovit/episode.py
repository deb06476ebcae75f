"""Multi-fixation episodes, training, the confidence threshold and the cascade.

An episode embeds the image once, then for each fixation: pools the
features around the fixation, runs the encoder and penultimate block,
deposits the class-token attention into the confidence map, aggregates all
class outputs so far with the final block, and picks the next fixation.

All functions take batches.  Episodes for different images never interact
and every image draws from its own generator seeded by ``(seed, index)``, so
results do not depend on batch size or order.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import numeric as nc
from .policy import ConfidenceState, next_fixation, random_fixation, register_fixation, update_accumulator
from .vit import VisionTransformer, save_model

logger = logging.getLogger(__name__)

POLICIES = ("guided", "random")


@dataclass
class EpisodeConfig:
    n_fixations: int = 5
    policy: str = "guided"
    stop_threshold: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_fixations < 1:
            raise ValueError("n_fixations must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        # 0 (always stop) and values above 1 (never stop) are accepted as degenerate cases
        if self.stop_threshold is not None and self.stop_threshold < 0:
            raise ValueError("stop_threshold must be non-negative")


def image_rng(seed: int, index: int, epoch: int | None = None) -> np.random.Generator:
    key = [seed, index] if epoch is None else [seed, epoch, index]
    return np.random.default_rng(key)


def as_image_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``[0, 255]`` or float ``[0, 1]`` images to centred model input."""
    if isinstance(images, torch.Tensor):
        x = images
    else:
        x = torch.from_numpy(np.ascontiguousarray(images))
    if x.dtype == torch.uint8:
        x = x.to(dtype) / 255.0
    else:
        x = x.to(dtype)
    return (x - 0.5) / 0.25


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - np.nanmax(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class EpisodeTrace:
    """Record of one image's episode."""

    fixations: list[tuple[int, int]]
    logits: np.ndarray  # (executed, K)
    stop_index: int | None
    cost: int
    capacity: int
    confidence_maps: np.ndarray | None = None  # (executed, 14, 14)
    ior_maps: np.ndarray | None = None
    label: int | None = None

    @property
    def probabilities(self) -> np.ndarray:
        return softmax_np(self.logits)

    @property
    def max_prob(self) -> np.ndarray:
        return self.probabilities.max(axis=-1)

    @property
    def predicted(self) -> np.ndarray:
        return self.logits.argmax(axis=-1)


@dataclass
class EpisodeBatch:
    fixations: np.ndarray  # (B, n, 2); -1 where not executed
    logits: np.ndarray  # (B, n, K); nan where not executed
    executed: np.ndarray  # (B,)
    stop_index: np.ndarray  # (B,) 0-based fixation index where the threshold fired, -1 if never
    capacity: int
    cost_per_fixation: int
    accumulators: np.ndarray | None = None
    iors: np.ndarray | None = None
    logits_grad: list[torch.Tensor] = field(default_factory=list, repr=False)

    @property
    def probabilities(self) -> np.ndarray:
        return softmax_np(self.logits)

    @property
    def cost(self) -> np.ndarray:
        return self.executed * self.cost_per_fixation

    def final_logits(self) -> np.ndarray:
        rows = np.arange(len(self.executed))
        return self.logits[rows, self.executed - 1]

    def trace(self, i: int, label: int | None = None) -> EpisodeTrace:
        n = int(self.executed[i])
        return EpisodeTrace(
            fixations=[tuple(int(v) for v in f) for f in self.fixations[i, :n]],
            logits=self.logits[i, :n].copy(),
            stop_index=None if self.stop_index[i] < 0 else int(self.stop_index[i]),
            cost=int(self.cost[i]),
            capacity=self.capacity,
            confidence_maps=None if self.accumulators is None else self.accumulators[i, :n].copy(),
            ior_maps=None if self.iors is None else self.iors[i, :n].copy(),
            label=label,
        )


def run_episodes(
    model: VisionTransformer,
    features: torch.Tensor,
    cfg: EpisodeConfig,
    indices: Sequence[int] | None = None,
    *,
    epoch: int | None = None,
    fixed_path: np.ndarray | None = None,
    record_maps: bool = False,
    keep_grad: bool = False,
) -> EpisodeBatch:
    """Run episodes on position-added features ``(B, 14, 14, dim)``.

    ``fixed_path`` (``(B, n, 2)``) replays a given fixation sequence instead
    of consulting the policy.  ``keep_grad`` keeps per-fixation logits on
    the autograd tape (``logits_grad``); early stopping is then disallowed.
    """
    b = features.shape[0]
    n = cfg.n_fixations
    k_cls = model.config.n_classes
    side = model.config.grid_side
    indices = np.arange(b) if indices is None else np.asarray(indices)
    tau = cfg.stop_threshold
    if keep_grad and tau is not None:
        raise ValueError("early stopping is not differentiable")
    rngs = [image_rng(cfg.seed, int(i), epoch) for i in indices]

    fix_out = np.full((b, n, 2), -1, dtype=np.int64)
    logit_out = np.full((b, n, k_cls), np.nan)
    stop = np.full(b, -1, dtype=np.int64)
    executed = np.zeros(b, dtype=np.int64)
    accs = np.zeros((b, n, side, side)) if record_maps else None
    iors = np.zeros((b, n, side, side)) if record_maps else None
    grads: list[torch.Tensor] = []

    state = ConfidenceState.fresh(b, side)
    if fixed_path is not None:
        current = np.asarray(fixed_path[:, 0], dtype=np.int64)
    else:
        current = np.stack([random_fixation(r, side) for r in rngs]) if b else np.zeros((0, 2), np.int64)
    active = np.ones(b, dtype=bool)
    cls_cols: list[torch.Tensor] = []

    for k in range(n):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        rows_t = torch.from_numpy(rows)
        state = register_fixation(state, current)
        fix_out[rows, k] = current[rows]
        executed[rows] += 1

        cls, weights, mask = model.fixation_step(features[rows_t], current[rows])
        col = cls.new_zeros((b, cls.shape[-1])).index_copy(0, rows_t, cls)
        cls_cols.append(col)
        hist = torch.stack(cls_cols, dim=1)[rows_t]
        logits = model.aggregate_fixations(hist)
        if keep_grad:
            grads.append(logits)
        logit_out[rows, k] = logits.detach().double().numpy()

        w_full = np.zeros((b, mask.shape[1]))
        w_full[rows] = weights.detach().double().numpy()
        valid = np.zeros((b, mask.shape[1]), dtype=bool)
        valid[rows] = mask.numpy()
        centers = np.zeros((b, mask.shape[1], 2), dtype=np.int64)
        centers[rows] = model.pool_centers[current[rows, 1] * side + current[rows, 0]]
        centers[~valid] = 0
        state = update_accumulator(state, w_full, centers, valid)
        if record_maps:
            accs[rows, k] = state.accumulator[rows]
            iors[rows, k] = state.ior[rows]

        if tau is not None:
            confident = softmax_np(logit_out[rows, k]).max(axis=-1) >= tau
            stop[rows[confident]] = k
            active[rows[confident]] = False

        if k + 1 < n:
            if fixed_path is not None:
                current = np.asarray(fixed_path[:, k + 1], dtype=np.int64)
            elif cfg.policy == "guided":
                current = next_fixation(state)
            else:
                current = current.copy()
                for i in np.flatnonzero(active):
                    current[i] = random_fixation(rngs[i], side)

    return EpisodeBatch(
        fixations=fix_out,
        logits=logit_out,
        executed=executed,
        stop_index=stop,
        capacity=model.config.capacity,
        cost_per_fixation=model.cost_per_fixation,
        accumulators=accs,
        iors=iors,
        logits_grad=grads,
    )


def run_episode(model, image, cfg: EpisodeConfig, index: int = 0, record_maps: bool = True) -> EpisodeTrace:
    """Single-image convenience wrapper around :func:`run_episodes`."""
    with torch.no_grad():
        feats = model.embed_with_positions(as_image_tensor(np.asarray(image)[None]))
        batch = run_episodes(model, feats, cfg, [index], record_maps=record_maps)
    return batch.trace(0)


def multi_fixation_loss(per_fixation_logits: Sequence[torch.Tensor], target) -> torch.Tensor:
    """Sum over fixations of softmax cross-entropy, averaged over images."""
    if len(per_fixation_logits) == 0:
        raise ValueError("no fixation logits")
    target = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    total = 0
    for logits in per_fixation_logits:
        total = total + nc.cross_entropy(logits, target, reduction="none")
    return total.mean()


# --- training -------------------------------------------------------------


@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 64
    lr_init: float = 3e-4
    lr_min: float = 3e-5
    weight_decay: float = 1e-8
    n_fixations: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class TrainHistory:
    step_loss: list[float] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(
    model: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    schedule: TrainSchedule,
    *,
    foveated: bool = True,
    checkpoint_dir: str | Path | None = None,
    callback: Callable[[int, TrainHistory], None] | None = None,
) -> TrainHistory:
    """AdamW + per-step cosine schedule on guided multi-fixation episodes.

    Each image starts from a random fixation drawn fresh every epoch.  The
    full-resolution model (``foveated=False``) uses plain cross-entropy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    steps_per_epoch = -(-n // schedule.batch_size)
    total_steps = steps_per_epoch * schedule.epochs
    opt = nc.AdamW(model.parameters(), lr=schedule.lr_init, weight_decay=schedule.weight_decay)
    order_rng = np.random.default_rng([schedule.seed, 7919])
    ep_cfg = EpisodeConfig(n_fixations=schedule.n_fixations, policy="guided", seed=schedule.seed)
    hist = TrainHistory()
    start = time.perf_counter()
    step = 0
    model.train()
    for epoch in range(schedule.epochs):
        order = order_rng.permutation(n)
        ep_losses, correct = [], 0
        for s in range(steps_per_epoch):
            idx = order[s * schedule.batch_size : (s + 1) * schedule.batch_size]
            x = as_image_tensor(images[idx])
            y = torch.from_numpy(labels[idx])
            opt.lr = nc.cosine_lr(step, total_steps, schedule.lr_init, schedule.lr_min)
            feats = model.embed_with_positions(x)
            if foveated:
                batch = run_episodes(model, feats, ep_cfg, idx, epoch=epoch, keep_grad=True)
                loss = multi_fixation_loss(batch.logits_grad, y)
                final = batch.logits_grad[-1]
            else:
                final = model.forward_unfoveated_features(feats)
                loss = nc.cross_entropy(final, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            value = float(loss.detach())
            hist.step_loss.append(value)
            ep_losses.append(value * len(idx))
            correct += int((final.detach().argmax(-1) == y).sum())
            logger.debug("epoch %d step %d lr %.3g loss %.4f", epoch, step, opt.lr, value)
        hist.epoch_loss.append(sum(ep_losses) / n)
        hist.epoch_accuracy.append(correct / n)
        hist.seconds = time.perf_counter() - start
        logger.info(
            "epoch %d/%d loss %.4f train-acc %.4f (%.0fs)",
            epoch + 1, schedule.epochs, hist.epoch_loss[-1], hist.epoch_accuracy[-1], hist.seconds,
        )
        if checkpoint_dir is not None:
            save_model(model, Path(checkpoint_dir) / f"epoch-{epoch + 1:03d}.ckpt", {"epoch": epoch + 1})
        if callback is not None:
            callback(epoch, hist)
    model.eval()
    return hist


# --- evaluation -----------------------------------------------------------


def episodes_over(
    model: VisionTransformer,
    images: np.ndarray,
    cfg: EpisodeConfig,
    batch_size: int = 250,
    record_maps: bool = False,
) -> EpisodeBatch:
    """Run episodes over a whole array of images in chunks and concatenate."""
    parts = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            idx = np.arange(s, min(s + batch_size, len(images)))
            feats = model.embed_with_positions(as_image_tensor(images[idx]))
            parts.append(run_episodes(model, feats, cfg, idx, record_maps=record_maps))
    return concat_batches(parts, model)


def concat_batches(parts: list[EpisodeBatch], model: VisionTransformer) -> EpisodeBatch:
    if not parts:
        raise ValueError("no episodes")
    cat = lambda name: None if getattr(parts[0], name) is None else np.concatenate([getattr(p, name) for p in parts])
    return EpisodeBatch(
        fixations=cat("fixations"),
        logits=cat("logits"),
        executed=cat("executed"),
        stop_index=cat("stop_index"),
        capacity=model.config.capacity,
        cost_per_fixation=model.cost_per_fixation,
        accumulators=cat("accumulators"),
        iors=cat("iors"),
    )


def predict_unfoveated(model: VisionTransformer, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model.forward_unfoveated(as_image_tensor(images[s : s + batch_size])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def evaluate(model: VisionTransformer, images, labels, cfg: EpisodeConfig) -> np.ndarray:
    """Top-1 accuracy after each fixation, all read from the same episodes."""
    batch = episodes_over(model, images, EpisodeConfig(cfg.n_fixations, cfg.policy, None, cfg.seed))
    pred = batch.logits.argmax(axis=-1)
    return (pred == np.asarray(labels)[:, None]).mean(axis=0)


def compute_confidence_threshold(model: VisionTransformer, images, labels, seed: int = 0) -> float:
    """Mean predicted-class probability over correct predictions after two fixations.

    The first fixation is random and the second guided.
    """
    batch = episodes_over(model, images, EpisodeConfig(2, "guided", None, seed))
    return mean_correct_confidence(batch.probabilities[:, 1], labels)


def mean_correct_confidence(probs: np.ndarray, labels) -> float:
    """Mean predicted-class probability over the rows whose prediction is correct."""
    correct = probs.argmax(axis=-1) == np.asarray(labels)
    if not correct.any():
        raise RuntimeError("no correct predictions; is the model trained?")
    return float(probs[correct].max(axis=-1).mean())


@dataclass
class CostLedger:
    """Exact integer compute accounting in transformer-input units."""

    per_image: np.ndarray
    fixations: int
    escalations: int
    cost_per_fixation: int
    cost_unfoveated: int

    @property
    def total(self) -> int:
        return int(self.per_image.sum())

    @property
    def baseline(self) -> int:
        return self.cost_unfoveated * len(self.per_image)

    @property
    def relative(self) -> Fraction:
        return Fraction(self.total, self.baseline)

    def merge(self, other: "CostLedger") -> "CostLedger":
        if (self.cost_per_fixation, self.cost_unfoveated) != (other.cost_per_fixation, other.cost_unfoveated):
            raise ValueError("ledgers use different cost units")
        return CostLedger(
            np.concatenate([self.per_image, other.per_image]),
            self.fixations + other.fixations,
            self.escalations + other.escalations,
            self.cost_per_fixation,
            self.cost_unfoveated,
        )


@dataclass
class CascadeResult:
    predictions: np.ndarray
    stage: np.ndarray  # 1..n for foveated stages, n + 1 for the full-resolution model
    episodes: EpisodeBatch
    ledger: CostLedger
    table: list[dict]
    accuracy: float | None


def ensemble_evaluate(
    fov_model: VisionTransformer,
    unfov_model: VisionTransformer,
    images,
    labels,
    tau: float,
    n_stages: int = 5,
    seed: int = 0,
) -> CascadeResult:
    """Cascade: 1..n fixations, then the full-resolution model for what is left.

    Stage ``k + 1`` extends the same episode by one fixation.  Images whose
    maximum probability never reaches ``tau`` take the full-resolution
    prediction regardless of its confidence.
    """
    episodes = episodes_over(fov_model, images, EpisodeConfig(n_stages, "guided", tau, seed))
    n_img = len(episodes.executed)
    stage = np.where(episodes.stop_index >= 0, episodes.stop_index + 1, n_stages + 1)
    escalated = np.flatnonzero(stage == n_stages + 1)
    pred = np.full(n_img, -1, dtype=np.int64)
    done = episodes.stop_index >= 0
    pred[done] = episodes.logits[np.flatnonzero(done), episodes.stop_index[done]].argmax(axis=-1)
    if escalated.size:
        pred[escalated] = predict_unfoveated(unfov_model, images[escalated]).argmax(axis=-1)

    per_image = episodes.executed * fov_model.cost_per_fixation
    per_image = per_image + (stage == n_stages + 1) * unfov_model.cost_unfoveated
    ledger = CostLedger(
        per_image.astype(np.int64),
        int(episodes.executed.sum()),
        int(escalated.size),
        fov_model.cost_per_fixation,
        unfov_model.cost_unfoveated,
    )
    labels = None if labels is None else np.asarray(labels)
    table = cascade_table(stage, pred, labels, n_stages, ledger)
    acc = None if labels is None else float((pred == labels).mean())
    return CascadeResult(pred, stage, episodes, ledger, table, acc)


def cascade_table(stage, pred, labels, n_stages: int, ledger: CostLedger) -> list[dict]:
    n_img = len(stage)
    rows = []
    for k in range(1, n_stages + 2):
        classified = stage <= k
        # every image still unclassified before stage k pays for stage k
        paid_fix = np.minimum(stage, k).clip(max=n_stages)
        cost = int(paid_fix.sum()) * ledger.cost_per_fixation
        if k == n_stages + 1:
            cost += int((stage == n_stages + 1).sum()) * ledger.cost_unfoveated
        row = {
            "stage": str(k) if k <= n_stages else "unfoveated",
            "classified_pct": 100.0 * classified.mean(),
            "unclassified_pct": 100.0 * (1 - classified.mean()),
            "correct_pct": float("nan") if labels is None else 100.0 * (classified & (pred == labels)).mean(),
            "relative_cost_pct": 100.0 * cost / (ledger.cost_unfoveated * n_img),
        }
        rows.append(row)
    return rows
