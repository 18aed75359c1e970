"""Encoder-call accounting, analytic FLOPs and wall-clock timing.

FLOP model (multiply and add counted separately):

* fusion transformer: ``12*n*d**2 + 2*n**2*d`` per layer, ``n = 1 + P + |A| + |O|``
* cosine scoring: ``2*d`` per text row
* backbone: whatever the backbone reports for one image and one text call

Only ratios between models are meaningful; absolute values depend on the
backbone cost model.
"""

from __future__ import annotations

import resource
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import torch

from .data import SampleRecord
from .model import MVPIntegrator, stack_features


@dataclass
class EfficiencyReport:
    model: str
    n_attrs: int
    n_objects: int
    text_encode_calls: int
    image_encode_calls: int
    cached_text_calls_per_image: int
    flops_per_image_cold: float
    flops_per_image_cached: float
    ms_per_image_cold_mean: float
    ms_per_image_cold_median: float
    ms_per_image_cached_mean: float
    ms_per_image_cached_median: float
    n_timed: int
    peak_rss_mb: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def fusion_flops(seq_len: int, dim: int, layers: int) -> float:
    return float(layers * (12 * seq_len * dim**2 + 2 * seq_len**2 * dim))


def analytic_flops(model, n_patches: int, text_flops: float | None = None, image_flops: float | None = None):
    """``(cold, cached)`` FLOPs for one image; cold includes building the text table."""
    bb = model.backbone
    n_a, n_o = model.vocab.n_attrs, model.vocab.n_objects
    k = model.config.n_ctx
    img = bb.image_flops(n_patches) if image_flops is None else image_flops
    if isinstance(model, MVPIntegrator):
        per_text = bb.text_flops_per_call(k + 1) if text_flops is None else text_flops
        n_text = n_a + n_o
        head = 2 * bb.embed_dim * n_text
        if model.integrator is not None:
            cfg = model.config.integrator
            p = 0 if model.config.fusion == "cls" else n_patches
            head += fusion_flops(1 + p + n_text, cfg.dim, cfg.layers)
    else:
        per_text = bb.text_flops_per_call(k + 2) if text_flops is None else text_flops
        n_text = n_a * n_o
        head = 2 * bb.embed_dim * n_text
    cached = img + head
    return cached + n_text * per_text, cached


def _peak_rss_mb() -> float | None:
    try:
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    except (AttributeError, OSError):
        return None


@torch.no_grad()
def _time_per_image(model, samples: Sequence[SampleRecord], warmup: int, n: int, cached: bool):
    model.eval()
    table = model.text_table() if cached else None
    feats = [stack_features([s]) for s in samples]
    times = []
    calls_before = None
    for i in range(warmup + n):
        if i == warmup:
            calls_before = model.backbone.text_calls
        cls, patches = feats[i % len(feats)]
        t0 = time.perf_counter()
        model(cls, patches, table)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt * 1e3)
    return times, (model.backbone.text_calls - calls_before) // n


@torch.no_grad()
def benchmark(
    model,
    samples: Sequence[SampleRecord],
    n_samples: int = 100,
    warmup: int = 10,
    text_flops: float | None = None,
    image_flops: float | None = None,
) -> EfficiencyReport:
    if n_samples < 1:
        raise ValueError("need at least one bench sample")
    if not samples:
        raise ValueError("no samples to benchmark on")
    bb = model.backbone
    bb.reset_counters()
    model.eval()
    table = model.text_table()
    text_calls = bb.text_calls
    cls, patches = stack_features([samples[0]])
    model(cls, patches, table)
    image_calls = bb.image_calls

    cached_times, cached_calls = _time_per_image(model, samples, warmup, n_samples, cached=True)
    cold_times, _ = _time_per_image(model, samples, warmup, n_samples, cached=False)

    cold, cached = analytic_flops(model, samples[0].features.patches.shape[0], text_flops, image_flops)
    return EfficiencyReport(
        model=model.kind,
        n_attrs=model.vocab.n_attrs,
        n_objects=model.vocab.n_objects,
        text_encode_calls=text_calls,
        image_encode_calls=image_calls,
        cached_text_calls_per_image=cached_calls,
        flops_per_image_cold=cold,
        flops_per_image_cached=cached,
        ms_per_image_cold_mean=statistics.fmean(cold_times),
        ms_per_image_cold_median=statistics.median(cold_times),
        ms_per_image_cached_mean=statistics.fmean(cached_times),
        ms_per_image_cached_median=statistics.median(cached_times),
        n_timed=n_samples,
        peak_rss_mb=_peak_rss_mb(),
    )


def compare(dual: EfficiencyReport, baseline: EfficiencyReport) -> dict:
    return {
        "text_call_ratio": baseline.text_encode_calls / dual.text_encode_calls,
        "cold_flop_ratio": baseline.flops_per_image_cold / dual.flops_per_image_cold,
        "cold_time_ratio": baseline.ms_per_image_cold_median / dual.ms_per_image_cold_median,
    }

