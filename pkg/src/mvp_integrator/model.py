"""The dual-branch integrator model and the composition-branch baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import PrimitiveVocab, SampleRecord
from .encoders import (
    Backbone,
    PrimitiveTextTable,
    encode_pairs,
    encode_primitives,
    init_context,
)
from .integrator import Integrator, IntegratorConfig, assemble_tokens, cosine_scores

FUSION_MODES = ("cls+patch", "cls", "patch", "none")


@dataclass(frozen=True)
class ModelConfig:
    n_ctx: int = 4
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    fusion: str = "cls+patch"
    prompt_tuning: bool = True

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")

    @property
    def logit_scale(self) -> float:
        return self.integrator.logit_scale


@dataclass
class Scores:
    """Cosine scores per branch; a branch the model lacks is ``None``."""

    attr: object = None
    obj: object = None
    pair: object = None

    def numpy(self) -> "Scores":
        f = lambda t: None if t is None else t.detach().cpu().double().numpy()  # noqa: E731
        return Scores(f(self.attr), f(self.obj), f(self.pair))


class _PromptModel(nn.Module):
    kind = ""

    def __init__(self, vocab: PrimitiveVocab, backbone: Backbone, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.backbone = backbone
        for p in backbone.parameters():
            p.requires_grad_(False)
        self.register_buffer("attr_vocab", backbone.word_vectors(vocab.attributes))
        self.register_buffer("obj_vocab", backbone.word_vectors(vocab.objects))
        self.generator = torch.Generator().manual_seed(seed)

    @property
    def logit_scale(self) -> float:
        return self.config.logit_scale

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def frozen_state(self) -> dict[str, torch.Tensor]:
        """Copies of every frozen tensor (vocab embeddings, backbone weights)."""
        out = {f"buffer:{k}": v.detach().clone() for k, v in self.named_buffers()}
        out.update({f"param:{k}": p.detach().clone() for k, p in self.named_parameters() if not p.requires_grad})
        return out

    def encode_images(self, cls: torch.Tensor, patches: torch.Tensor):
        dt = self.backbone_dtype
        return self.backbone.image_encode(cls.to(dt), patches.to(dt))

    @property
    def backbone_dtype(self) -> torch.dtype:
        return self.attr_vocab.dtype


class MVPIntegrator(_PromptModel):
    """Dual-branch prompt tuning plus the masked fusion transformer."""

    kind = "mvp"

    def __init__(self, vocab: PrimitiveVocab, backbone: Backbone, config: ModelConfig | None = None, seed: int = 0):
        config = config or ModelConfig(integrator=IntegratorConfig(dim=backbone.embed_dim))
        super().__init__(vocab, backbone, config, seed)
        if config.integrator.dim != backbone.embed_dim:
            raise ValueError(f"integrator dim {config.integrator.dim} != backbone embed dim {backbone.embed_dim}")
        torch.manual_seed(seed)
        self.attr_ctx = init_context(backbone, "attribute", config.n_ctx, self.generator)
        self.obj_ctx = init_context(backbone, "object", config.n_ctx, self.generator)
        if not config.prompt_tuning:
            self.attr_ctx.ctx.requires_grad_(False)
            self.obj_ctx.ctx.requires_grad_(False)
        self.integrator = Integrator(config.integrator) if config.fusion != "none" else None

    def text_table(self) -> PrimitiveTextTable:
        return encode_primitives(self.backbone, self.attr_ctx, self.obj_ctx, self.attr_vocab, self.obj_vocab)

    def refine(self, cls: torch.Tensor, patches: torch.Tensor, table: PrimitiveTextTable, flags=None):
        if self.integrator is None:
            return cls, None
        mode = self.config.fusion
        if mode == "patch":
            cls_in = patches.mean(dim=1)
        else:
            cls_in = cls
        if mode == "cls":
            patches = patches[:, :0]
        seq = assemble_tokens(cls_in, patches, table.t_attr, table.t_obj, require_patches=mode != "cls")
        out = self.integrator(seq, flags)
        return out.cls, out

    def forward(self, cls: torch.Tensor, patches: torch.Tensor, table: PrimitiveTextTable | None = None) -> Scores:
        table = self.text_table() if table is None else table
        c, i = self.encode_images(cls, patches)
        refined, _ = self.refine(c, i, table)
        return Scores(attr=cosine_scores(refined, table.t_attr), obj=cosine_scores(refined, table.t_obj))


class CompositionBaseline(_PromptModel):
    """Single prompt per ``(a, o)`` pair scored against the class token.

    Needs ``|A| x |O|`` text-encoder calls per text table.
    """

    kind = "composition"

    def __init__(self, vocab: PrimitiveVocab, backbone: Backbone, config: ModelConfig | None = None, seed: int = 0):
        config = config or ModelConfig(integrator=IntegratorConfig(dim=backbone.embed_dim), fusion="none")
        super().__init__(vocab, backbone, config, seed)
        torch.manual_seed(seed)
        self.pair_ctx = init_context(backbone, "pair", config.n_ctx, self.generator)
        if not config.prompt_tuning:
            self.pair_ctx.ctx.requires_grad_(False)
        a, o = np.divmod(np.arange(vocab.n_attrs * vocab.n_objects), vocab.n_objects)
        self.register_buffer("pair_attr", torch.as_tensor(a), persistent=False)
        self.register_buffer("pair_obj", torch.as_tensor(o), persistent=False)

    def text_table(self) -> PrimitiveTextTable:
        t = encode_pairs(self.backbone, self.pair_ctx, self.attr_vocab, self.obj_vocab, self.pair_attr, self.pair_obj)
        return PrimitiveTextTable(None, None, t)

    def forward(self, cls, patches, table: PrimitiveTextTable | None = None) -> Scores:
        table = self.text_table() if table is None else table
        c, _ = self.encode_images(cls, patches)
        return Scores(pair=cosine_scores(c, table.t_pairs))

    def frozen_state(self):
        out = super().frozen_state()
        out.pop("buffer:pair_attr", None)
        out.pop("buffer:pair_obj", None)
        return out


class OracleScorer:
    """Perfect scores read from ground-truth labels; an evaluation upper bound."""

    kind = "oracle"
    logit_scale = 1 / 0.07

    def __init__(self, vocab: PrimitiveVocab):
        self.vocab = vocab

    def score_samples(self, samples: Sequence[SampleRecord]) -> Scores:
        attr = -np.ones((len(samples), self.vocab.n_attrs))
        obj = -np.ones((len(samples), self.vocab.n_objects))
        for i, s in enumerate(samples):
            attr[i, sorted(s.label.attr_set)] = 1.0
            obj[i, s.label.object] = 1.0
        return Scores(attr, obj)


def stack_features(samples: Sequence[SampleRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    missing = [s.sample_id for s in samples if s.features is None]
    if missing:
        raise ValueError(f"samples without a synthetic feature payload: {missing[:5]}")
    n_patches = {s.features.patches.shape[0] for s in samples}
    if len(n_patches) > 1:
        raise ValueError(f"samples must share one patch count, got {sorted(n_patches)}")
    cls = torch.as_tensor(np.stack([s.features.cls for s in samples]))
    patches = torch.as_tensor(np.stack([s.features.patches for s in samples]))
    return cls, patches


@torch.no_grad()
def predict_scores(model, samples: Sequence[SampleRecord], batch_size: int = 256, table=None) -> Scores:
    """Scores for ``samples`` as numpy arrays, encoding the text table once."""
    if hasattr(model, "score_samples"):
        return model.score_samples(samples)
    was_training = model.training
    model.eval()
    try:
        table = model.text_table() if table is None else table
        parts = []
        for start in range(0, len(samples), batch_size):
            cls, patches = stack_features(samples[start : start + batch_size])
            parts.append(model(cls, patches, table).numpy())
    finally:
        model.train(was_training)
    cat = lambda xs: None if xs[0] is None else np.concatenate(xs)  # noqa: E731
    return Scores(cat([p.attr for p in parts]), cat([p.obj for p in parts]), cat([p.pair for p in parts]))
