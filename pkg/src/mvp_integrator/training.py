"""Losses, the prompt/integrator training loop, checkpoints and gradient checks."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, SampleRecord, targets_from_labels
from .integrator import NumericFailure
from .model import Scores, stack_features


def _check_targets(logits: torch.Tensor, targets: torch.Tensor) -> None:
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if (targets.sum(dim=-1) < 1).any():
        raise ValueError("every sample needs at least one positive target")


def attr_bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Sigmoid BCE summed over attributes, averaged over the batch."""
    targets = targets.to(logits.dtype)
    _check_targets(logits, targets)
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="none").sum(dim=-1).mean()


def obj_ce_loss(logits: torch.Tensor, object_targets: torch.Tensor) -> torch.Tensor:
    object_targets = torch.as_tensor(object_targets, dtype=torch.long)
    if logits.dim() != 2 or logits.shape[0] != object_targets.shape[0]:
        raise ValueError("logits must be (B, |O|) with one target per row")
    if (object_targets < 0).any() or (object_targets >= logits.shape[1]).any():
        raise ValueError("object target out of range")
    return F.cross_entropy(logits, object_targets)


def pair_bce_loss(logits: torch.Tensor, pair_targets: torch.Tensor) -> torch.Tensor:
    """Multi-label BCE over the pair table (composition baseline)."""
    pair_targets = pair_targets.to(logits.dtype)
    _check_targets(logits, pair_targets)
    return F.binary_cross_entropy_with_logits(logits, pair_targets, reduction="none").sum(dim=-1).mean()


def total_loss(loss_a: torch.Tensor, loss_o: torch.Tensor) -> torch.Tensor:
    for t in (loss_a, loss_o):
        if not torch.isfinite(torch.as_tensor(t)).all():
            raise NumericFailure(f"non-finite branch loss: attr={float(loss_a.detach())}, obj={float(loss_o.detach())}")
    return loss_a + loss_o


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    optimizer: str = "adamw"
    use_logit_scale: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("epochs, batch_size, lr must be positive; weight_decay non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Batch:
    cls: torch.Tensor
    patches: torch.Tensor
    attr_targets: torch.Tensor
    obj_targets: torch.Tensor
    pair_targets: torch.Tensor | None = None

    def subset(self, idx: torch.Tensor) -> "Batch":
        pt = None if self.pair_targets is None else self.pair_targets[idx]
        return Batch(self.cls[idx], self.patches[idx], self.attr_targets[idx], self.obj_targets[idx], pt)

    def __len__(self):
        return self.cls.shape[0]


def make_batch(samples: Sequence[SampleRecord], n_attrs: int, n_objects: int, with_pairs: bool = False) -> Batch:
    cls, patches = stack_features(samples)
    labels = [s.label for s in samples]
    attr_t = torch.as_tensor(targets_from_labels(labels, n_attrs))
    obj_t = torch.as_tensor([lab.object for lab in labels], dtype=torch.long)
    pair_t = None
    if with_pairs:
        pair_t = torch.zeros(len(samples), n_attrs * n_objects, dtype=torch.float64)
        for i, lab in enumerate(labels):
            for a in lab.attr_set:
                pair_t[i, a * n_objects + lab.object] = 1.0
    return Batch(cls, patches, attr_t, obj_t, pair_t)


def branch_losses(model, batch: Batch, use_logit_scale: bool = True) -> dict[str, torch.Tensor]:
    """Per-branch losses for whichever branches ``model`` has."""
    scores: Scores = model(batch.cls, batch.patches)
    scale = model.logit_scale if use_logit_scale else 1.0
    out = {}
    if scores.attr is not None:
        out["loss_a"] = attr_bce_loss(scale * scores.attr, batch.attr_targets)
    if scores.obj is not None:
        out["loss_o"] = obj_ce_loss(scale * scores.obj, batch.obj_targets)
    if scores.pair is not None:
        if batch.pair_targets is None:
            raise ValueError("composition model needs pair targets")
        out["loss_p"] = pair_bce_loss(scale * scores.pair, batch.pair_targets)
    return out


def combined_loss(losses: dict[str, torch.Tensor]) -> torch.Tensor:
    if "loss_a" in losses and "loss_o" in losses:
        total = total_loss(losses["loss_a"], losses["loss_o"])
        return total + losses["loss_p"] if "loss_p" in losses else total
    total = sum(losses.values())
    if not torch.isfinite(total):
        raise NumericFailure(f"non-finite loss {float(total)}")
    return total


class Trainer:
    """Owns the optimizer, shuffling generator and step counter for one model.

    Only parameters with ``requires_grad`` (prompt contexts, integrator) are
    handed to the optimizer; vocab embeddings and backbone weights are buffers.
    """

    def __init__(self, model, config: TrainConfig):
        self.model = model
        self.config = config
        params = model.trainable_parameters()
        if config.optimizer == "adamw":
            self.optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        else:
            self.optimizer = torch.optim.SGD(params, lr=config.lr, weight_decay=config.weight_decay)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self.epoch = 0

    def train_step(self, batch: Batch) -> dict[str, float]:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        losses = branch_losses(self.model, batch, self.config.use_logit_scale)
        loss = combined_loss(losses)
        loss.backward()
        self.optimizer.step()
        self.step += 1
        rec = {k: float(v.detach()) for k, v in losses.items()}
        rec["loss_total"] = float(loss.detach())
        return rec

    def train_epoch(self, data: Batch) -> list[dict]:
        if len(data) == 0:
            raise ValueError("empty training set")
        order = torch.randperm(len(data), generator=self.generator)
        log = []
        for start in range(0, len(data), self.config.batch_size):
            rec = self.train_step(data.subset(order[start : start + self.config.batch_size]))
            log.append({"epoch": self.epoch, "step": self.step, **rec})
        self.epoch += 1
        return log

    def state_dict(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "step": self.step,
            "epoch": self.epoch,
        }

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        self.step = state["step"]
        self.epoch = state["epoch"]


def training_batch(model, manifest: DatasetManifest, split: str = "train") -> Batch:
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    v = manifest.vocab
    return make_batch(samples, v.n_attrs, v.n_objects, with_pairs=getattr(model, "kind", "") == "composition")


def train_epoch(model, manifest: DatasetManifest, config: TrainConfig, trainer: Trainer | None = None) -> list[dict]:
    trainer = trainer or Trainer(model, config)
    return trainer.train_epoch(training_batch(model, manifest))


def fit(model, manifest: DatasetManifest, config: TrainConfig, callback=None) -> tuple[Trainer, list[dict]]:
    trainer = Trainer(model, config)
    data = training_batch(model, manifest)
    log = []
    for _ in range(config.epochs):
        recs = trainer.train_epoch(data)
        log.extend(recs)
        if callback is not None:
            callback(trainer, recs)
    return trainer, log


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_log(records: Sequence[dict], path, mode: str = "w") -> None:
    with open(path, mode) as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


# --- gradient verification ---------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    worst: str

    def to_dict(self) -> dict:
        return asdict(self)


def _loss_value(model, batch: Batch, use_logit_scale: bool) -> torch.Tensor:
    return combined_loss(branch_losses(model, batch, use_logit_scale))


def grad_check(
    model,
    batch: Batch,
    epsilon: float = 1e-5,
    n_params: int | None = 64,
    seed: int = 0,
    use_logit_scale: bool = True,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    Checks ``n_params`` randomly chosen scalar entries of the trainable
    parameters (all of them when ``n_params`` is None). The relative error is
    ``|g - fd| / max(|g|, |fd|, floor)``; the floor keeps structurally zero
    gradients (e.g. attention key biases) from dividing noise by ~0. Run the
    model in float64.
    """
    model.train()
    params = [p for p in model.trainable_parameters()]
    names = {id(p): n for n, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)
    _loss_value(model, batch, use_logit_scale).backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    model.zero_grad(set_to_none=True)

    index = [(k, j) for k, p in enumerate(params) for j in range(p.numel())]
    if n_params is not None and n_params < len(index):
        rng = np.random.default_rng(seed)
        index = [index[i] for i in sorted(rng.choice(len(index), size=n_params, replace=False))]

    worst_rel, worst_abs, worst = 0.0, 0.0, ""
    with torch.no_grad():
        for k, j in index:
            flat = params[k].data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + epsilon
            up = _loss_value(model, batch, use_logit_scale).item()
            flat[j] = orig - epsilon
            down = _loss_value(model, batch, use_logit_scale).item()
            flat[j] = orig
            fd = (up - down) / (2 * epsilon)
            g = analytic[k].view(-1)[j].item()
            err = abs(g - fd)
            rel = err / max(abs(g), abs(fd), floor)
            worst_abs = max(worst_abs, err)
            if rel > worst_rel:
                worst_rel, worst = rel, f"{names.get(id(params[k]), k)}[{j}]"
    if math.isnan(worst_rel):
        raise NumericFailure("NaN in gradient check")
    return GradCheckReport(worst_rel, worst_abs, len(index), worst)
