"""Vocabularies, labels, manifests, solution spaces and dataset statistics.

Manifests are JSON files with top-level keys ``attributes``, ``objects`` and
``samples``; each sample is ``{id, split, object, attrs, features?|image_path?}``
where ``features`` is ``{"cls": [...], "patches": [[...], ...]}``.
Names are stored canonically (lowercase, single spaces); everything at
runtime uses integer ids.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised for invalid manifests. ``code`` distinguishes the failure kind."""

    MALFORMED = "malformed"
    UNKNOWN_PRIMITIVE = "unknown_primitive"
    DUPLICATE_ID = "duplicate_sample_id"
    EMPTY_SPLIT = "empty_split"

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


def canonical_name(name: str) -> str:
    return " ".join(str(name).lower().split())


@dataclass(frozen=True)
class PrimitiveVocab:
    attributes: tuple[str, ...]
    objects: tuple[str, ...]

    def __post_init__(self):
        attrs = tuple(canonical_name(a) for a in self.attributes)
        objs = tuple(canonical_name(o) for o in self.objects)
        if not attrs or not objs:
            raise ManifestError(ManifestError.MALFORMED, "vocabulary must have attributes and objects")
        for kind, names in (("attribute", attrs), ("object", objs)):
            dupes = [n for n, c in Counter(names).items() if c > 1]
            if dupes:
                raise ManifestError(ManifestError.MALFORMED, f"duplicate {kind} names: {dupes}")
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "_attr_index", {n: i for i, n in enumerate(attrs)})
        object.__setattr__(self, "_obj_index", {n: i for i, n in enumerate(objs)})

    @property
    def n_attrs(self) -> int:
        return len(self.attributes)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def attr_id(self, name: str) -> int:
        try:
            return self._attr_index[canonical_name(name)]
        except KeyError:
            raise ManifestError(ManifestError.UNKNOWN_PRIMITIVE, f"unknown attribute {name!r}") from None

    def obj_id(self, name: str) -> int:
        try:
            return self._obj_index[canonical_name(name)]
        except KeyError:
            raise ManifestError(ManifestError.UNKNOWN_PRIMITIVE, f"unknown object {name!r}") from None


@dataclass(frozen=True, order=True)
class PairComposition:
    attribute: int
    object: int


@dataclass(frozen=True)
class MultiAttrLabel:
    attr_set: frozenset[int]
    object: int

    def __post_init__(self):
        object.__setattr__(self, "attr_set", frozenset(int(a) for a in self.attr_set))
        if not self.attr_set:
            raise ValueError("attr_set must be non-empty")

    def validate(self, vocab: PrimitiveVocab) -> None:
        if not 0 <= self.object < vocab.n_objects:
            raise ManifestError(ManifestError.UNKNOWN_PRIMITIVE, f"object id {self.object} out of range")
        bad = [a for a in self.attr_set if not 0 <= a < vocab.n_attrs]
        if bad:
            raise ManifestError(ManifestError.UNKNOWN_PRIMITIVE, f"attribute ids out of range: {bad}")


@dataclass(frozen=True)
class SyntheticFeatures:
    cls: np.ndarray  # (D,)
    patches: np.ndarray  # (P, D)

    def __post_init__(self):
        cls = np.asarray(self.cls, dtype=np.float64)
        patches = np.asarray(self.patches, dtype=np.float64)
        if cls.ndim != 1 or patches.ndim != 2 or patches.shape[1] != cls.shape[0]:
            raise ManifestError(ManifestError.MALFORMED, "features need cls (D,) and patches (P, D)")
        if patches.shape[0] < 1:
            raise ManifestError(ManifestError.MALFORMED, "at least one patch vector is required")
        if not (np.isfinite(cls).all() and np.isfinite(patches).all()):
            raise ManifestError(ManifestError.MALFORMED, "feature vectors must be finite")
        cls.setflags(write=False)
        patches.setflags(write=False)
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "patches", patches)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    label: MultiAttrLabel
    split: str
    features: SyntheticFeatures | None = None
    image_path: str | None = None


def expand_pairs(label: MultiAttrLabel) -> set[PairComposition]:
    """All ``(a, o)`` pairs implied by a multi-attribute label."""
    return {PairComposition(a, label.object) for a in label.attr_set}


@dataclass(frozen=True)
class DatasetManifest:
    vocab: PrimitiveVocab
    samples: tuple[SampleRecord, ...]
    seen_compositions: frozenset[MultiAttrLabel] = field(init=False)
    unseen_compositions: frozenset[MultiAttrLabel] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = Counter(s.sample_id for s in self.samples)
        dupes = sorted(i for i, c in ids.items() if c > 1)
        if dupes:
            raise ManifestError(ManifestError.DUPLICATE_ID, f"duplicate sample ids: {dupes[:5]}")
        for s in self.samples:
            if s.split not in SPLITS:
                raise ManifestError(ManifestError.MALFORMED, f"sample {s.sample_id!r}: bad split {s.split!r}")
            s.label.validate(self.vocab)
        if not any(s.split == "train" for s in self.samples):
            raise ManifestError(ManifestError.EMPTY_SPLIT, "train split is empty")
        if not any(s.split != "train" for s in self.samples):
            raise ManifestError(ManifestError.EMPTY_SPLIT, "no val or test samples")
        seen = frozenset(s.label for s in self.samples if s.split == "train")
        unseen = frozenset(s.label for s in self.samples if s.split != "train") - seen
        object.__setattr__(self, "seen_compositions", seen)
        object.__setattr__(self, "unseen_compositions", unseen)

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]

    def to_dict(self) -> dict:
        out = []
        for s in self.samples:
            rec = {
                "id": s.sample_id,
                "split": s.split,
                "object": self.vocab.objects[s.label.object],
                "attrs": [self.vocab.attributes[a] for a in sorted(s.label.attr_set)],
            }
            if s.features is not None:
                rec["features"] = {"cls": s.features.cls.tolist(), "patches": s.features.patches.tolist()}
            if s.image_path is not None:
                rec["image_path"] = s.image_path
            out.append(rec)
        return {"attributes": list(self.vocab.attributes), "objects": list(self.vocab.objects), "samples": out}


def manifest_from_dict(data: dict) -> DatasetManifest:
    if not isinstance(data, dict):
        raise ManifestError(ManifestError.MALFORMED, "manifest root must be an object")
    try:
        vocab = PrimitiveVocab(tuple(data["attributes"]), tuple(data["objects"]))
        raw_samples = data["samples"]
    except (KeyError, TypeError) as exc:
        raise ManifestError(ManifestError.MALFORMED, f"missing or invalid top-level key: {exc}") from None
    if not isinstance(raw_samples, list):
        raise ManifestError(ManifestError.MALFORMED, "samples must be an array")
    samples = []
    for i, rec in enumerate(raw_samples):
        try:
            sid, split, obj, attrs = str(rec["id"]), rec["split"], rec["object"], rec["attrs"]
        except (KeyError, TypeError):
            raise ManifestError(ManifestError.MALFORMED, f"sample #{i} lacks id/split/object/attrs") from None
        if not isinstance(attrs, list) or not attrs:
            raise ManifestError(ManifestError.MALFORMED, f"sample {sid!r}: attrs must be a non-empty array")
        label = MultiAttrLabel(frozenset(vocab.attr_id(a) for a in attrs), vocab.obj_id(obj))
        feats = None
        if rec.get("features") is not None:
            f = rec["features"]
            try:
                feats = SyntheticFeatures(np.asarray(f["cls"], dtype=float), np.asarray(f["patches"], dtype=float))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ManifestError):
                    raise
                raise ManifestError(ManifestError.MALFORMED, f"sample {sid!r}: bad features ({exc})") from None
        samples.append(SampleRecord(sid, label, split, feats, rec.get("image_path")))
    return DatasetManifest(vocab, tuple(samples))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ManifestError(ManifestError.MALFORMED, f"{path}: invalid JSON ({exc})") from None
    return manifest_from_dict(data)


def dumps_manifest(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.to_dict(), separators=(",", ":"))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        f.write(dumps_manifest(manifest))


@dataclass(frozen=True)
class SolutionSpace:
    world: str
    pairs: tuple[PairComposition, ...]

    def __contains__(self, pair: PairComposition) -> bool:
        return pair in self.pair_set

    @property
    def pair_set(self) -> frozenset[PairComposition]:
        cached = self.__dict__.get("_pair_set")
        if cached is None:
            cached = frozenset(self.pairs)
            object.__setattr__(self, "_pair_set", cached)
        return cached

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Attribute and object id arrays, one entry per pair in order."""
        a = np.fromiter((p.attribute for p in self.pairs), dtype=np.int64, count=len(self.pairs))
        o = np.fromiter((p.object for p in self.pairs), dtype=np.int64, count=len(self.pairs))
        return a, o


def build_solution_space(manifest: DatasetManifest, world: str) -> SolutionSpace:
    vocab = manifest.vocab
    if world == "open":
        pairs = [PairComposition(a, o) for a in range(vocab.n_attrs) for o in range(vocab.n_objects)]
    elif world == "closed":
        found: set[PairComposition] = set()
        for label in manifest.seen_compositions | manifest.unseen_compositions:
            found |= expand_pairs(label)
        pairs = sorted(found)
    else:
        raise ValueError(f"world must be 'closed' or 'open', got {world!r}")
    return SolutionSpace(world, tuple(pairs))


def build_pair_seen_set(manifest: DatasetManifest) -> frozenset[PairComposition]:
    train = manifest.split("train")
    if not train:
        raise ManifestError(ManifestError.EMPTY_SPLIT, "train split is empty")
    seen: set[PairComposition] = set()
    for s in train:
        seen |= expand_pairs(s.label)
    return frozenset(seen)


@dataclass(frozen=True)
class DatasetStats:
    avg_attr: float
    avg_obj: float
    label_count_histogram: dict[int, int]
    cooccurrence: np.ndarray
    attr_counts: np.ndarray
    obj_counts: np.ndarray
    n_images: int
    splits: tuple[str, ...]

    def to_dict(self, vocab: PrimitiveVocab | None = None) -> dict:
        out = {
            "avg_attr": self.avg_attr,
            "avg_obj": self.avg_obj,
            "label_count_histogram": {str(k): v for k, v in sorted(self.label_count_histogram.items())},
            "label_count_proportions": {
                str(k): v / self.n_images for k, v in sorted(self.label_count_histogram.items())
            },
            "cooccurrence": self.cooccurrence.tolist(),
            "per_attribute_counts": self.attr_counts.tolist(),
            "per_object_counts": self.obj_counts.tolist(),
            "n_images": self.n_images,
            # Table-I style averages: distinct classes counted over these splits,
            # averaged over classes that occur at least once.
            "meta": {"splits_counted": list(self.splits), "average_over": "occurring_classes"},
        }
        if vocab is not None:
            out["attributes"] = list(vocab.attributes)
            out["objects"] = list(vocab.objects)
        return out


def compute_stats(manifest: DatasetManifest, splits: Iterable[str] = SPLITS) -> DatasetStats:
    splits = tuple(splits)
    vocab = manifest.vocab
    samples = [s for s in manifest.samples if s.split in splits]
    n_a, n_o = vocab.n_attrs, vocab.n_objects

    incidence = np.zeros((len(samples), n_a), dtype=np.int64)
    pair_seen = np.zeros((n_a, n_o), dtype=bool)
    obj_counts = np.zeros(n_o, dtype=np.int64)
    hist: Counter[int] = Counter()
    for i, s in enumerate(samples):
        attrs = sorted(s.label.attr_set)
        incidence[i, attrs] = 1
        pair_seen[attrs, s.label.object] = True
        obj_counts[s.label.object] += 1
        hist[len(attrs)] += 1

    cooc = incidence.T @ incidence
    attrs_per_obj = pair_seen.sum(axis=0)
    objs_per_attr = pair_seen.sum(axis=1)
    avg_attr = float(attrs_per_obj[attrs_per_obj > 0].mean()) if attrs_per_obj.any() else 0.0
    avg_obj = float(objs_per_attr[objs_per_attr > 0].mean()) if objs_per_attr.any() else 0.0
    return DatasetStats(
        avg_attr=avg_attr,
        avg_obj=avg_obj,
        label_count_histogram=dict(hist),
        cooccurrence=cooc,
        attr_counts=incidence.sum(axis=0),
        obj_counts=obj_counts,
        n_images=len(samples),
        splits=splits,
    )


def stats_summary(stats: DatasetStats) -> str:
    lines = [
        f"images        {stats.n_images}",
        f"Avg. attr     {stats.avg_attr:.2f}",
        f"Avg. obj      {stats.avg_obj:.2f}",
        "",
        "#attrs  images  proportion",
    ]
    total = max(stats.n_images, 1)
    for k, v in sorted(stats.label_count_histogram.items()):
        lines.append(f"{k:>6}  {v:>6}  {v / total:.4f}")
    return "\n".join(lines)


def targets_from_labels(labels: Sequence[MultiAttrLabel], n_attrs: int) -> np.ndarray:
    """Binary attribute target matrix, one row per label."""
    y = np.zeros((len(labels), n_attrs), dtype=np.float64)
    for i, lab in enumerate(labels):
        y[i, sorted(lab.attr_set)] = 1.0
    return y
