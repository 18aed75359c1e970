"""Multi-attribute compositional zero-shot learning with dual-branch prompts
and a visual-primitive fusion transformer."""

from .data import (
    DatasetManifest,
    DatasetStats,
    ManifestError,
    MultiAttrLabel,
    PairComposition,
    PrimitiveVocab,
    SampleRecord,
    SolutionSpace,
    build_pair_seen_set,
    build_solution_space,
    compute_stats,
    expand_pairs,
    load_manifest,
    save_manifest,
    stats_summary,
)
from .bench import EfficiencyReport, benchmark, compare
from .encoders import PrimitiveTextTable, PromptContext, SyntheticBackbone
from .evaluation import (
    MetricsReport,
    RankedPrediction,
    aggregate_report,
    bias_sweep_auc,
    combine_and_rank,
    evaluate,
    instance_metrics,
    partition_report,
)
from .integrator import (
    Integrator,
    IntegratorConfig,
    MaskFlags,
    NumericFailure,
    assemble_tokens,
    build_attention_mask,
)
from .model import CompositionBaseline, ModelConfig, MVPIntegrator, OracleScorer
from .synth import LatentTruth, SynthConfig, generate_synthetic
from .training import TrainConfig, Trainer, fit, grad_check

__version__ = "0.1.0"
