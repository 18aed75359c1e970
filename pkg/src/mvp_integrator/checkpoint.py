"""Model construction from run configs and checkpoint files.

A checkpoint is a ``torch.save`` dict holding the model kind, the
model-relevant config sections, their hash, the vocabulary, the state dict
and (optionally) the trainer state for resuming.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import torch

from .config import ConfigError, model_config, model_hash
from .data import DatasetManifest, PrimitiveVocab
from .encoders import SyntheticBackbone
from .model import CompositionBaseline, MVPIntegrator, OracleScorer


def truth_path_for(manifest_path: str | os.PathLike) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + ".truth.json")


def load_word_table(truth_path, vocab: PrimitiveVocab) -> dict:
    with open(truth_path) as f:
        truth = json.load(f)
    table = dict(zip(vocab.attributes, truth["attr_prototypes"]))
    table.update(zip(vocab.objects, truth["obj_prototypes"]))
    return table


def build_backbone(cfg: dict, feature_dim: int, vocab: PrimitiveVocab, manifest_path=None) -> SyntheticBackbone:
    bc = cfg["backbone"]
    if bc["kind"] != "synthetic":
        raise ConfigError("external backbones are adapters built in code (see encoders.CallableBackbone)")
    table = None
    if bc["word_table"] == "latent":
        truth = cfg["data"]["truth"] or (truth_path_for(manifest_path) if manifest_path else None)
        if not truth or not Path(truth).exists():
            raise ConfigError("backbone.word_table = 'latent' needs the synthetic truth sidecar")
        table = load_word_table(truth, vocab)
    return SyntheticBackbone(
        feature_dim, bc["embed_dim"] or None, projection=bc["projection"], word_table=table, seed=bc["seed"]
    )


def feature_dim_of(manifest: DatasetManifest) -> int:
    for s in manifest.samples:
        if s.features is not None:
            return s.features.cls.shape[0]
    raise ConfigError("manifest has no synthetic feature payloads")


def build_model(cfg: dict, manifest: DatasetManifest, manifest_path=None, kind: str | None = None):
    kind = kind or cfg["model"]["kind"]
    bb = build_backbone(cfg, feature_dim_of(manifest), manifest.vocab, manifest_path)
    mc = model_config(cfg, bb.embed_dim)
    if kind == "mvp":
        return MVPIntegrator(manifest.vocab, bb, mc, seed=cfg["seed"])
    if kind == "composition":
        from dataclasses import replace

        return CompositionBaseline(manifest.vocab, bb, replace(mc, fusion="none"), seed=cfg["seed"])
    raise ConfigError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model, cfg: dict, trainer=None) -> None:
    payload = {
        "model_kind": model.kind,
        "config": {k: cfg[k] for k in ("seed", "backbone", "model", "integrator")},
        "config_hash": model_hash(cfg),
        "vocab": {"attributes": list(model.vocab.attributes), "objects": list(model.vocab.objects)},
    }
    if model.kind != "oracle":
        payload["state_dict"] = model.state_dict()
    if trainer is not None:
        payload["trainer"] = trainer.state_dict()
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def save_oracle_checkpoint(path, vocab: PrimitiveVocab) -> None:
    torch.save({"model_kind": "oracle", "config": {}, "config_hash": "", "vocab": {
        "attributes": list(vocab.attributes), "objects": list(vocab.objects)}}, path)


def load_checkpoint(path, manifest: DatasetManifest, base_cfg: dict, manifest_path=None):
    """Rebuild the model stored at ``path``; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    vocab = PrimitiveVocab(tuple(payload["vocab"]["attributes"]), tuple(payload["vocab"]["objects"]))
    if vocab != manifest.vocab:
        raise ConfigError("checkpoint vocabulary does not match the manifest")
    if payload["model_kind"] == "oracle":
        return OracleScorer(vocab), payload
    cfg = dict(base_cfg)
    cfg.update(payload["config"])
    model = build_model(cfg, manifest, manifest_path, kind=payload["model_kind"])
    model.load_state_dict(payload["state_dict"])
    return model, payload
