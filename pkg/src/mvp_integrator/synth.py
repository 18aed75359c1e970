"""Deterministic synthetic multi-attribute datasets with held-out compositions.

Every attribute and object gets a random unit prototype. An image of
``<S, o>`` has a class feature ``normalize(w_o + sum_{a in S} u_a + noise)``
and one patch per true attribute (``normalize(u_a + noise)``) padded with
pure-noise distractor patches, so attribute and object evidence is
linearly recoverable from the features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import (
    DatasetManifest,
    MultiAttrLabel,
    PrimitiveVocab,
    SampleRecord,
    SyntheticFeatures,
)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_attrs: int = 12
    n_objects: int = 8
    dim: int = 32
    n_train: int = 2000
    n_val: int = 0
    n_test: int = 400
    n_compositions: int = 64
    holdout: float = 0.2
    min_attrs: int = 1
    max_attrs: int = 3
    noise: float = 0.1
    n_distractors: int = 4
    unseen_eval_fraction: float = 0.5

    @property
    def n_patches(self) -> int:
        return self.max_attrs + self.n_distractors

    @property
    def n_unseen(self) -> int:
        return int(math.floor(self.holdout * self.n_compositions + 0.5))

    def validate(self) -> None:
        for name in ("n_attrs", "n_objects", "dim", "n_train", "n_test", "n_compositions", "min_attrs"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be positive")
        if self.n_val < 0 or self.n_distractors < 0 or self.noise < 0:
            raise SynthError("n_val, n_distractors and noise must be non-negative")
        if not 0.0 < self.holdout < 1.0:
            raise SynthError("holdout must lie in (0, 1)")
        if not 0.0 <= self.unseen_eval_fraction <= 1.0:
            raise SynthError("unseen_eval_fraction must lie in [0, 1]")
        if not 1 <= self.min_attrs <= self.max_attrs <= self.n_attrs:
            raise SynthError("need 1 <= min_attrs <= max_attrs <= n_attrs")
        possible = self.n_objects * sum(math.comb(self.n_attrs, k) for k in range(self.min_attrs, self.max_attrs + 1))
        if possible < self.n_compositions:
            raise SynthError(f"only {possible} distinct compositions exist, {self.n_compositions} requested")
        if not 1 <= self.n_unseen < self.n_compositions:
            raise SynthError(
                f"holdout {self.holdout} of {self.n_compositions} compositions gives {self.n_unseen} unseen; "
                "need at least one seen and one unseen composition"
            )
        if self.n_train < self.n_compositions - self.n_unseen:
            raise SynthError("n_train must cover every seen composition at least once")


@dataclass(frozen=True)
class LatentTruth:
    attr_prototypes: np.ndarray  # (|A|, D)
    obj_prototypes: np.ndarray  # (|O|, D)
    seen: tuple[MultiAttrLabel, ...]
    unseen: tuple[MultiAttrLabel, ...]

    def to_dict(self, vocab: PrimitiveVocab) -> dict:
        def enc(label: MultiAttrLabel) -> dict:
            return {"object": vocab.objects[label.object], "attrs": [vocab.attributes[a] for a in sorted(label.attr_set)]}

        return {
            "attr_prototypes": self.attr_prototypes.tolist(),
            "obj_prototypes": self.obj_prototypes.tolist(),
            "seen_compositions": [enc(c) for c in self.seen],
            "unseen_compositions": [enc(c) for c in self.unseen],
        }


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _draw_compositions(cfg: SynthConfig, rng: np.random.Generator) -> list[MultiAttrLabel]:
    comps: list[MultiAttrLabel] = []
    seen: set[MultiAttrLabel] = set()
    while len(comps) < cfg.n_compositions:
        size = int(rng.integers(cfg.min_attrs, cfg.max_attrs + 1))
        attrs = rng.choice(cfg.n_attrs, size=size, replace=False)
        label = MultiAttrLabel(frozenset(int(a) for a in attrs), int(rng.integers(cfg.n_objects)))
        if label not in seen:
            seen.add(label)
            comps.append(label)
    return comps


def _partition(cfg: SynthConfig, comps: list[MultiAttrLabel], rng: np.random.Generator):
    # Prefer a split whose seen part covers every primitive so unseen
    # compositions are novel combinations of known attributes and objects.
    first = None
    for _ in range(100):
        order = rng.permutation(len(comps))
        unseen = [comps[i] for i in order[: cfg.n_unseen]]
        seen = [comps[i] for i in order[cfg.n_unseen :]]
        if first is None:
            first = (seen, unseen)
        attrs = set().union(*(c.attr_set for c in seen))
        objs = {c.object for c in seen}
        if len(attrs) == cfg.n_attrs and len(objs) == cfg.n_objects:
            return seen, unseen
    return first


def _features(cfg: SynthConfig, label: MultiAttrLabel, u: np.ndarray, w: np.ndarray, rng: np.random.Generator):
    attrs = sorted(label.attr_set)
    cls = w[label.object] + u[attrs].sum(axis=0) + cfg.noise * rng.standard_normal(cfg.dim)
    cls = cls / np.linalg.norm(cls)
    n_noise = cfg.n_patches - len(attrs)
    patches = np.concatenate(
        [
            u[attrs] + cfg.noise * rng.standard_normal((len(attrs), cfg.dim)),
            rng.standard_normal((n_noise, cfg.dim)),
        ]
    )
    patches = _unit_rows(patches)[rng.permutation(cfg.n_patches)]
    return SyntheticFeatures(cls, patches)


def generate_synthetic(cfg: SynthConfig, seed: int) -> tuple[DatasetManifest, LatentTruth]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    vocab = PrimitiveVocab(
        tuple(f"attr{i:02d}" for i in range(cfg.n_attrs)),
        tuple(f"obj{j:02d}" for j in range(cfg.n_objects)),
    )
    u = _unit_rows(rng.standard_normal((cfg.n_attrs, cfg.dim)))
    w = _unit_rows(rng.standard_normal((cfg.n_objects, cfg.dim)))
    comps = _draw_compositions(cfg, rng)
    seen, unseen = _partition(cfg, comps, rng)

    def train_labels():
        rest = rng.integers(len(seen), size=cfg.n_train - len(seen))
        return list(seen) + [seen[i] for i in rest]

    def eval_labels(n: int, cover_unseen: bool):
        labels = list(unseen[:n]) if cover_unseen else []
        for _ in range(n - len(labels)):
            pool = unseen if rng.random() < cfg.unseen_eval_fraction else seen
            labels.append(pool[int(rng.integers(len(pool)))])
        return labels

    plan = [
        ("train", train_labels()),
        ("val", eval_labels(cfg.n_val, cover_unseen=False)),
        ("test", eval_labels(cfg.n_test, cover_unseen=True)),
    ]
    samples = []
    for split, labels in plan:
        order = rng.permutation(len(labels))
        for k, idx in enumerate(order):
            label = labels[idx]
            samples.append(SampleRecord(f"{split}-{k:05d}", label, split, _features(cfg, label, u, w, rng)))

    manifest = DatasetManifest(vocab, tuple(samples))
    return manifest, LatentTruth(u, w, tuple(seen), tuple(unseen))


def write_synthetic(cfg: SynthConfig, seed: int, manifest_path, truth_path) -> tuple[DatasetManifest, LatentTruth]:
    from .data import save_manifest

    manifest, truth = generate_synthetic(cfg, seed)
    save_manifest(manifest, manifest_path)
    with open(truth_path, "w") as f:
        json.dump({"seed": seed, "config": asdict(cfg), **truth.to_dict(manifest.vocab)}, f, separators=(",", ":"))
    return manifest, truth
