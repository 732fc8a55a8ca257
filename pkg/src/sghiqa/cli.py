"""Command-line entry point.

Configuration comes from one JSON file (``--config``) with the sections
``train``, ``patch`` and ``split``; command-line flags override it. Every
output artifact embeds the resolved configuration and the tool version.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from . import __version__
from .datakit import (
    DatasetManifest,
    PatchSpec,
    SplitPlan,
    load_sources,
    make_split,
    procedural_sources,
    synth_benchmark,
)
from .errors import InvalidConfigError, SGHError
from .evalstats import (
    PER_METHOD_AVG,
    POOLED,
    scale_effect_test,
    similarity_csv,
    violin_data,
    weight_similarity,
)
from .perception import EncoderConfig
from .training import Checkpoint, TrainConfig, evaluate, run_trials, summarize_trials, train

log = logging.getLogger("sghiqa")

CONFIG_SECTIONS = ("train", "patch", "split")


def _dump(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text)
        tmp.replace(path)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidConfigError(f"expected comma-separated integers, got {text!r}") from None


def _scale_list(text: str) -> list[Fraction]:
    try:
        return [Fraction(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidConfigError(f"expected comma-separated scale factors, got {text!r}") from None


def load_run_config(args) -> dict:
    """Merge the config file with flag overrides into a fully resolved dict."""
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        unknown = set(raw) - set(CONFIG_SECTIONS)
        if unknown:
            raise InvalidConfigError(f"unknown config sections: {sorted(unknown)}")
    train_raw = dict(raw.get("train", {}))
    patch_raw = dict(raw.get("patch", {}))
    split_raw = dict(raw.get("split", {}))

    for flag, key in (("framework", "framework"), ("seed", "seed"), ("epochs", "epochs"),
                      ("lr", "learning_rate"), ("workers", "workers")):
        value = getattr(args, flag, None)
        if value is not None:
            train_raw[key] = value
    for flag, key in (("patch_size", "size"), ("stride", "stride")):
        value = getattr(args, flag, None)
        if value is not None:
            patch_raw[key] = value
    if getattr(args, "ratio", None) is not None:
        split_raw["ratio"] = args.ratio

    if "size" in patch_raw:
        train_raw["patch_size"] = patch_raw["size"]
    config = TrainConfig.from_json(train_raw)
    patch = PatchSpec(size=config.patch_size, stride=int(patch_raw.get("stride", 64)),
                      count=int(patch_raw.get("count", config.batch_patches)))
    split = {"ratio": float(split_raw.get("ratio", 0.8)), "key": split_raw.get("key", "content")}
    return {"train": config.to_json(), "patch": {"size": patch.size, "stride": patch.stride,
                                                  "count": patch.count}, "split": split}


def _configs(run: dict):
    config = TrainConfig.from_json(run["train"])
    patch = PatchSpec(**run["patch"])
    return config, patch, EncoderConfig(input_size=patch.size)


def _provenance(command: str, run: dict | None = None, **extra) -> dict:
    out = {"command": command, "tool_version": __version__}
    if run is not None:
        out["run_config"] = run
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    scales = _int_list(args.scales)
    if args.sources:
        sources = load_sources(args.sources)
    else:
        sources = procedural_sources(args.n_sources, args.size, args.seed)
    manifest = synth_benchmark(sources, scales, args.seed, args.out_dir, name=args.name)
    log.info("wrote %d records to %s", len(manifest.records), Path(args.out_dir) / "manifest.jsonl")
    print(Path(args.out_dir) / "manifest.jsonl")


def _split_for(args, manifest, run, seed):
    if getattr(args, "split", None):
        return SplitPlan.from_json(json.loads(Path(args.split).read_text()))
    return make_split(manifest, seed, run["split"]["ratio"], run["split"]["key"])


def cmd_train(args):
    manifest = DatasetManifest.load(args.manifest)
    run = load_run_config(args)
    config, _, enc = _configs(run)
    split = _split_for(args, manifest, run, config.seed)
    ckpt = train(manifest, split, config, enc, log=log.info)
    ckpt.meta = {"run_config": run, "split": split.to_json()}
    out = Path(args.out)
    ckpt.save(out)
    _write(out.with_suffix(".split.json"), split.dumps())
    print(out)


def cmd_eval(args):
    manifest = DatasetManifest.load(args.manifest)
    ckpt = Checkpoint.load(args.checkpoint)
    run = load_run_config(args)
    run["train"] = ckpt.config.to_json()
    run["patch"]["size"] = ckpt.encoder_config.input_size
    _, patch, _ = _configs(run)
    split = _split_for(args, manifest, run, ckpt.config.seed)
    report = evaluate(manifest, split, ckpt, patch)
    _dump(_provenance("eval", run, report=report.to_json(), split=split.to_json()), args.out)


def cmd_trials(args):
    manifest = DatasetManifest.load(args.manifest)
    run = load_run_config(args)
    config, patch, enc = _configs(run)
    reports = run_trials(manifest, config, args.trials, patch, run["split"]["ratio"],
                         run["split"]["key"], enc, log=log.info)
    splits = [make_split(manifest, s, run["split"]["ratio"], run["split"]["key"]).to_json()
              for s in range(args.trials)]
    body = {"framework": config.framework, "trials": [r.to_json() for r in reports],
            "splits": splits, "summary": summarize_trials(reports)}
    _dump(_provenance("trials", run, **body), args.out)


def cmd_stats(args):
    manifest = DatasetManifest.load(args.manifest)
    result = scale_effect_test(manifest, args.mode, args.alpha)
    result["decision"] = "significant" if result["significant"] else "not significant"
    _dump(_provenance("stats", None, **result), args.out)


def cmd_violin(args):
    manifest = DatasetManifest.load(args.manifest)
    data = violin_data(manifest)
    out = Path(args.out_dir)
    _dump(_provenance("violin", None, dataset=manifest.name, **data.to_json()), out / "violin.json")
    _write(out / "violin_observations.csv", data.observations_csv())
    _write(out / "violin_summary.csv", data.summary_csv())
    print(out / "violin.json")


def cmd_weights(args):
    ckpt = Checkpoint.load(args.checkpoint)
    scales = _scale_list(args.scales)
    mats = weight_similarity(ckpt, scales)
    out = Path(args.out_dir)
    _dump(_provenance("weights", None, scales=[str(s) for s in scales],
                      matrices=[m.tolist() for m in mats]), out / "weights.json")
    _write(out / "weights.csv", similarity_csv(mats, scales))
    print(out / "weights.json")


# ---------------------------------------------------------------------------


def _add_run_flags(p, framework=True):
    p.add_argument("--config", help="JSON config file with train/patch/split sections")
    if framework:
        p.add_argument("--framework", choices=("sgh", "fusion", "blind"))
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--workers", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--ratio", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sghiqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sghiqa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic SR benchmark")
    p.add_argument("out_dir")
    p.add_argument("--scales", default="2,3,4,8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sources", nargs="*", help="source images (default: procedural)")
    p.add_argument("--n-sources", type=int, default=20)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one framework on a seeded split")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--split", help="split JSON (default: derived from --seed)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test side of a split")
    p.add_argument("manifest")
    p.add_argument("checkpoint")
    p.add_argument("--split", help="split JSON (default: derived from the checkpoint seed)")
    p.add_argument("--out")
    _add_run_flags(p, framework=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trials", help="repeated split/train/evaluate protocol")
    p.add_argument("manifest")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--out")
    _add_run_flags(p)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("stats", help="Alexander-Govern test of the scale effect on labels")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=(PER_METHOD_AVG, POOLED), default=PER_METHOD_AVG)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("violin", help="export per-scale label distributions")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_violin)

    p = sub.add_parser("weights", help="cosine similarity of generated weights across scales")
    p.add_argument("checkpoint")
    p.add_argument("--scales", default="2,3,4,8")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except SGHError as exc:
        print(f"sghiqa: error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"sghiqa: error[io]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
