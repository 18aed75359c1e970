"""Backbones, learnable prompt contexts and text-side encoding.

A backbone exposes ``image_encode`` (features -> class token + patch tokens)
and ``text_encode`` (token-embedding sequences -> one vector each) and keeps
call counters. Text counters count encoded sequences, so encoding the whole
primitive vocabulary in one batched call still registers ``|A| + |O|`` calls.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn


class Backbone(nn.Module):
    """Frozen image/text encoder pair with call accounting."""

    embed_dim: int
    token_dim: int
    frozen = True

    def __init__(self):
        super().__init__()
        self._lock = threading.Lock()
        self.image_calls = 0
        self.text_calls = 0

    def _count(self, image: int = 0, text: int = 0) -> None:
        with self._lock:
            self.image_calls += image
            self.text_calls += text

    def __getstate__(self):
        state = super().__getstate__() if hasattr(super(), "__getstate__") else self.__dict__.copy()
        state = dict(state)
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        super().__setstate__(state)
        self._lock = threading.Lock()

    def reset_counters(self) -> None:
        with self._lock:
            self.image_calls = 0
            self.text_calls = 0

    def word_vectors(self, names: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def image_encode(self, cls: torch.Tensor, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def text_encode(self, sequences: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def text_flops_per_call(self, seq_len: int) -> float:
        raise NotImplementedError

    def image_flops(self, n_patches: int) -> float:
        raise NotImplementedError


def _hashed_vector(word: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([zlib.crc32(word.encode("utf-8")), seed])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class SyntheticBackbone(Backbone):
    """Stand-in for a pretrained vision-language backbone on synthetic features.

    Images carry stored features; the encoder only applies a fixed linear map
    ``proj`` (identity or random orthonormal-ish, ``D -> d``). Text is the mean of
    the token embeddings pushed through the same map. Word vectors come from
    ``word_table`` when a word is present there and otherwise from a
    deterministic hash-seeded Gaussian.
    """

    def __init__(
        self,
        feature_dim: int,
        embed_dim: int | None = None,
        projection: str = "identity",
        word_table: Mapping[str, np.ndarray] | None = None,
        seed: int = 0,
    ):
        super().__init__()
        embed_dim = feature_dim if embed_dim is None else embed_dim
        if projection == "identity":
            if embed_dim != feature_dim:
                raise ValueError("identity projection needs embed_dim == feature_dim")
            proj = torch.eye(feature_dim, dtype=torch.float64)
        elif projection == "random":
            g = torch.Generator().manual_seed(seed)
            proj = torch.randn(feature_dim, embed_dim, generator=g, dtype=torch.float64) / feature_dim**0.5
        else:
            raise ValueError(f"unknown projection {projection!r}")
        self.register_buffer("proj", proj.float())
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.token_dim = feature_dim
        self.seed = seed
        self.word_table = {k: np.asarray(v, dtype=np.float64) for k, v in (word_table or {}).items()}

    def has_words(self, words: Sequence[str]) -> bool:
        return all(w in self.word_table for w in words)

    def word_vectors(self, names: Sequence[str]) -> torch.Tensor:
        rows = []
        for name in names:
            words = name.split()
            if name in self.word_table:
                rows.append(self.word_table[name])
                continue
            # multi-word names collapse to the mean so the primitive fills one slot
            vecs = [self.word_table.get(w, None) for w in words]
            vecs = [v if v is not None else _hashed_vector(w, self.token_dim, self.seed) for v, w in zip(vecs, words)]
            rows.append(np.mean(vecs, axis=0))
        return torch.as_tensor(np.stack(rows), dtype=self.proj.dtype)

    def image_encode(self, cls: torch.Tensor, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if cls.shape[-1] != self.feature_dim or patches.shape[-1] != self.feature_dim:
            raise ValueError(f"expected feature dim {self.feature_dim}")
        self._count(image=cls.shape[0] if cls.dim() > 1 else 1)
        return cls @ self.proj, patches @ self.proj

    def text_encode(self, sequences: torch.Tensor) -> torch.Tensor:
        if sequences.dim() != 3 or sequences.shape[-1] != self.token_dim:
            raise ValueError(f"text_encode expects (N, L, {self.token_dim}) token embeddings, got {tuple(sequences.shape)}")
        self._count(text=sequences.shape[0])
        return sequences.mean(dim=1) @ self.proj

    def text_flops_per_call(self, seq_len: int) -> float:
        return float(seq_len * self.token_dim + 2 * self.token_dim * self.embed_dim)

    def image_flops(self, n_patches: int) -> float:
        return float(2 * (1 + n_patches) * self.feature_dim * self.embed_dim)


class CallableBackbone(Backbone):
    """Adapter for externally supplied encoders (e.g. a pretrained CLIP).

    ``image_fn(cls, patches)`` and ``text_fn(sequences)`` must be deterministic
    and must not require gradients on their own weights.
    """

    def __init__(
        self,
        image_fn: Callable,
        text_fn: Callable,
        word_fn: Callable[[Sequence[str]], torch.Tensor],
        embed_dim: int,
        token_dim: int,
        text_flops: float = 0.0,
        image_flops: float = 0.0,
    ):
        super().__init__()
        self._image_fn, self._text_fn, self._word_fn = image_fn, text_fn, word_fn
        self.embed_dim, self.token_dim = embed_dim, token_dim
        self._text_flops, self._image_flops = text_flops, image_flops

    def word_vectors(self, names):
        return self._word_fn(names)

    def image_encode(self, cls, patches):
        self._count(image=cls.shape[0])
        return self._image_fn(cls, patches)

    def text_encode(self, sequences):
        self._count(text=sequences.shape[0])
        return self._text_fn(sequences)

    def text_flops_per_call(self, seq_len):
        return self._text_flops

    def image_flops(self, n_patches):
        return self._image_flops


class PromptContext(nn.Module):
    """K learnable context vectors shared by every primitive of one branch."""

    def __init__(self, branch: str, n_ctx: int, token_dim: int, init: torch.Tensor | None = None, generator=None):
        super().__init__()
        if n_ctx < 1:
            raise ValueError("n_ctx must be >= 1")
        self.branch = branch
        if init is not None:
            ctx = init.detach().clone().float().reshape(n_ctx, token_dim)
        else:
            ctx = torch.randn(n_ctx, token_dim, generator=generator) * 0.02
        self.ctx = nn.Parameter(ctx)

    @property
    def n_ctx(self) -> int:
        return self.ctx.shape[0]


def init_context(backbone: Backbone, branch: str, n_ctx: int, generator=None) -> PromptContext:
    """Template init from "a photo of a" when K=4 and the words are known."""
    words = ("a", "photo", "of", "a")
    init = None
    if n_ctx == 4 and isinstance(backbone, SyntheticBackbone) and backbone.has_words(words[:3]):
        init = backbone.word_vectors(list(words))
    return PromptContext(branch, n_ctx, backbone.token_dim, init=init, generator=generator)


def build_primitive_prompts(context: PromptContext, vocab_vectors: torch.Tensor) -> torch.Tensor:
    """``[p_1 .. p_K, v]`` for each row of ``vocab_vectors``: (N, K+1, e)."""
    n = vocab_vectors.shape[0]
    ctx = context.ctx.unsqueeze(0).expand(n, -1, -1)
    return torch.cat([ctx, vocab_vectors.to(ctx.dtype).unsqueeze(1)], dim=1)


def build_primitive_prompt(context: PromptContext, vocab_vectors: torch.Tensor, primitive_id: int) -> torch.Tensor:
    if not 0 <= primitive_id < vocab_vectors.shape[0]:
        raise IndexError(f"{context.branch} id {primitive_id} out of range")
    return build_primitive_prompts(context, vocab_vectors[primitive_id : primitive_id + 1])[0]


def build_pair_prompts(
    context: PromptContext, attr_vectors: torch.Tensor, obj_vectors: torch.Tensor, attr_ids, obj_ids
) -> torch.Tensor:
    """``[p_1 .. p_K, v_a, v_o]`` per pair: (N, K+2, e)."""
    attr_ids = torch.as_tensor(attr_ids, dtype=torch.long)
    obj_ids = torch.as_tensor(obj_ids, dtype=torch.long)
    if attr_ids.numel() and (attr_ids.min() < 0 or attr_ids.max() >= attr_vectors.shape[0]):
        raise IndexError("attribute id out of range")
    if obj_ids.numel() and (obj_ids.min() < 0 or obj_ids.max() >= obj_vectors.shape[0]):
        raise IndexError("object id out of range")
    n = attr_ids.shape[0]
    ctx = context.ctx.unsqueeze(0).expand(n, -1, -1)
    dt = ctx.dtype
    return torch.cat([ctx, attr_vectors[attr_ids].to(dt).unsqueeze(1), obj_vectors[obj_ids].to(dt).unsqueeze(1)], dim=1)


def build_pair_prompt(context, attr_vectors, obj_vectors, attribute_id: int, object_id: int) -> torch.Tensor:
    return build_pair_prompts(context, attr_vectors, obj_vectors, [attribute_id], [object_id])[0]


@dataclass
class PrimitiveTextTable:
    t_attr: torch.Tensor | None  # (|A|, d)
    t_obj: torch.Tensor | None  # (|O|, d)
    t_pairs: torch.Tensor | None = None  # (|pairs|, d), composition baseline only

    def detach(self) -> "PrimitiveTextTable":
        f = lambda t: None if t is None else t.detach()  # noqa: E731
        return PrimitiveTextTable(f(self.t_attr), f(self.t_obj), f(self.t_pairs))


def _check_token_dim(backbone: Backbone, prompts: torch.Tensor) -> None:
    if prompts.shape[-1] != backbone.token_dim:
        raise ValueError(f"prompt dim {prompts.shape[-1]} does not match backbone token dim {backbone.token_dim}")


def encode_primitives(
    backbone: Backbone,
    attr_context: PromptContext,
    obj_context: PromptContext,
    attr_vectors: torch.Tensor,
    obj_vectors: torch.Tensor,
) -> PrimitiveTextTable:
    pa = build_primitive_prompts(attr_context, attr_vectors)
    po = build_primitive_prompts(obj_context, obj_vectors)
    _check_token_dim(backbone, pa)
    _check_token_dim(backbone, po)
    return PrimitiveTextTable(backbone.text_encode(pa), backbone.text_encode(po))


def encode_pairs(
    backbone: Backbone,
    pair_context: PromptContext,
    attr_vectors: torch.Tensor,
    obj_vectors: torch.Tensor,
    attr_ids,
    obj_ids,
    chunk: int = 8192,
) -> torch.Tensor:
    attr_ids = torch.as_tensor(attr_ids, dtype=torch.long)
    obj_ids = torch.as_tensor(obj_ids, dtype=torch.long)
    out = []
    for start in range(0, attr_ids.shape[0], chunk):
        prompts = build_pair_prompts(
            pair_context, attr_vectors, obj_vectors, attr_ids[start : start + chunk], obj_ids[start : start + chunk]
        )
        _check_token_dim(backbone, prompts)
        out.append(backbone.text_encode(prompts))
    return torch.cat(out, dim=0)
