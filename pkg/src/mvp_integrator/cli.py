"""Command line: ``synth``, ``train``, ``eval``, ``stats``, ``bench``.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from .bench import EfficiencyReport, benchmark, compare
from .checkpoint import build_model, load_checkpoint, save_checkpoint, truth_path_for
from .config import ConfigError, load_config, model_hash, synth_config, train_config
from .data import ManifestError, compute_stats, load_manifest, stats_summary
from .evaluation import evaluate
from .integrator import NumericFailure
from .synth import SynthError, write_synthetic
from .training import Trainer, training_batch, write_log

log = logging.getLogger("mvp_integrator")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_path(cfg: dict, args) -> Path:
    path = getattr(args, "manifest", None) or cfg["data"]["manifest"]
    if not path:
        path = Path(cfg["out"]) / "manifest.json"
    return Path(path)


def _dump(obj, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_synth(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    path = Path(args.manifest) if args.manifest else out / "manifest.json"
    try:
        manifest, _ = write_synthetic(synth_config(cfg), cfg["seed"], path, truth_path_for(path))
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from None
    print(f"wrote {path}")
    print(stats_summary(compute_stats(manifest)))
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    mpath = _manifest_path(cfg, args)
    manifest = load_manifest(mpath)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pt"
    tcfg = train_config(cfg)
    if args.resume:
        model, payload = load_checkpoint(ckpt, manifest, cfg, mpath)
        trainer = Trainer(model, tcfg)
        if "trainer" in payload:
            trainer.load_state_dict(payload["trainer"])
        log_mode = "a"
    else:
        model = build_model(cfg, manifest, mpath)
        trainer = Trainer(model, tcfg)
        log_mode = "w"
    frozen_before = model.frozen_state()
    data = training_batch(model, manifest)
    log_path = out / "train_log.jsonl"
    records = []
    for _ in range(tcfg.epochs):
        recs = trainer.train_epoch(data)
        records.extend(recs)
        print(f"epoch {trainer.epoch} step {trainer.step} loss {recs[-1]['loss_total']:.4f}")
    write_log(records, log_path, log_mode)
    save_checkpoint(ckpt, model, cfg, trainer)
    print(f"wrote {ckpt}")
    if args.freeze_check:
        after = model.frozen_state()
        changed = [k for k, v in frozen_before.items() if not torch.equal(v, after[k])]
        if changed:
            print(f"freeze check FAILED: {changed}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"freeze check ok ({len(after)} frozen tensors unchanged)")
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    mpath = _manifest_path(cfg, args)
    manifest = load_manifest(mpath)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pt"
    model, payload = load_checkpoint(ckpt, manifest, cfg, mpath)
    ev = cfg["evaluation"]
    world = args.world or ev["world"]
    worlds = ["closed", "open"] if world == "both" else [world]
    expected = model_hash(cfg)
    mismatch = bool(payload["config_hash"]) and payload["config_hash"] != expected
    if mismatch:
        log.warning("checkpoint config hash %s differs from current config %s", payload["config_hash"], expected)
    report = {
        "checkpoint": str(ckpt),
        "model_kind": payload["model_kind"],
        "config_hash": payload["config_hash"],
        "config_hash_mismatch": mismatch,
        "split": ev["split"],
        "worlds": {},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    for w in worlds:
        rep = evaluate(model, manifest, ev["split"], w, primitive_top1=ev["primitive_top1"], batch_size=ev["batch_size"])
        report["worlds"][w] = rep.to_dict()
        print(f"[{w}] exact {rep.exact_match:.4f} top1-P {rep.top1_p:.4f} top5-R {rep.top5_r:.4f} "
              f"coverage {rep.coverage:.3f} attr {rep.top1_p_attr:.4f} obj {rep.top1_p_obj:.4f} auc {rep.auc:.4f}")
    path = Path(args.report) if args.report else out / "metrics.json"
    _dump(report, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_stats(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    manifest = load_manifest(_manifest_path(cfg, args))
    stats = compute_stats(manifest)
    _dump(stats.to_dict(manifest.vocab), out / "stats.json")
    print(stats_summary(stats))
    return EXIT_OK


def cmd_bench(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    mpath = _manifest_path(cfg, args)
    manifest = load_manifest(mpath)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pt"
    model, _ = load_checkpoint(ckpt, manifest, cfg, mpath)
    bc = cfg["bench"]
    samples = manifest.split(cfg["evaluation"]["split"]) or list(manifest.samples)
    kw = dict(
        n_samples=bc["n_samples"],
        warmup=bc["warmup"],
        text_flops=bc["text_flops_per_call"] or None,
        image_flops=bc["image_flops"] or None,
    )
    result = {"dual_branch": benchmark(model, samples, **kw).to_dict()}
    if bc["baseline"]:
        base = build_model(cfg, manifest, mpath, kind="composition")
        result["composition_baseline"] = benchmark(base, samples, **kw).to_dict()
        result["ratios"] = compare(
            EfficiencyReport(**result["dual_branch"]), EfficiencyReport(**result["composition_baseline"])
        )
    for name in ("dual_branch", "composition_baseline"):
        if name in result:
            r = result[name]
            print(f"{name:22s} text calls {r['text_encode_calls']:>7d}  cold FLOPs {r['flops_per_image_cold']:.3e}  "
                  f"median ms cold {r['ms_per_image_cold_median']:.3f} cached {r['ms_per_image_cached_median']:.3f}")
    _dump(result, out / "bench.json")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "stats": cmd_stats, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--manifest", help="manifest path (overrides data.manifest)")
    parser = argparse.ArgumentParser(prog="mvp-integrator", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic manifest")
    p = sub.add_parser("train", parents=[common], help="train prompts and integrator")
    p.add_argument("--checkpoint")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--freeze-check", action="store_true")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--world", choices=["closed", "open", "both"])
    p.add_argument("--report")
    sub.add_parser("stats", parents=[common], help="dataset statistics")
    p = sub.add_parser("bench", parents=[common], help="efficiency benchmark")
    p.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, seed=args.seed, out=args.out)
        torch.manual_seed(cfg["seed"])
        return COMMANDS[args.command](cfg, args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ManifestError, SynthError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
