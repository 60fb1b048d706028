"""Command-line entry points: gen-data, gen-instruct, train, eval, segment, ablate."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .instruct import CorpusSampler, MixerConfig, export_corpus
from .synth import DatasetConfig, generate_dataset, load_manifest
from .train import (
    DEFAULT_INSTRUCTION, TrainConfig, config_from_kv, config_hash, config_to_kv,
    dataset_config, load_model_from_checkpoint, run_ablation, run_eval,
    run_segment, train,
)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="key = value config file; flags below override it")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            parser.add_argument(flag, type=str, default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, type=str, default=None)


def _config_from_args(args) -> TrainConfig:
    text = args.config.read_text(encoding="utf-8") if args.config else ""
    overrides = []
    for f in fields(TrainConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            overrides.append(f"{f.name} = {val}")
    return config_from_kv(text + "\n" + "\n".join(overrides))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="anchorseg",
                                     description="anchor-guided anomaly segmentation, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic defect dataset")
    p.add_argument("--out", type=Path, required=True)
    _add_config_args(p)

    p = sub.add_parser("gen-instruct", help="materialize an instruction corpus")
    p.add_argument("--data", type=Path, required=True, help="dataset root (with manifest.tsv)")
    p.add_argument("--out", type=Path, required=True, help="corpus .jsonl path")
    p.add_argument("--count", type=int, default=1000)
    _add_config_args(p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--out", type=Path, required=True, help="root for run directories")
    p.add_argument("--data", type=Path, default=None, help="existing dataset root")
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--instruction", default=DEFAULT_INSTRUCTION)

    p = sub.add_parser("segment", help="segment one image with any instruction")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--instruction", default=DEFAULT_INSTRUCTION)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2")
    _add_config_args(p)

    args = parser.parse_args(argv)

    if args.command == "gen-data":
        cfg = _config_from_args(args)
        records = generate_dataset(args.out, dataset_config(cfg))
        print(f"wrote {len(records)} samples under {args.out}")
        return 0

    if args.command == "gen-instruct":
        cfg = _config_from_args(args)
        records = load_manifest(args.data / "manifest.tsv")
        sampler = CorpusSampler(args.data, records,
                                MixerConfig(cfg.source_weights, cfg.seed),
                                rejection_templates=cfg.rejection_templates)
        samples = sampler.batch(0, args.count)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        export_corpus(samples, args.out)
        print(f"wrote {len(samples)} instruction samples to {args.out}")
        return 0

    if args.command == "train":
        cfg = _config_from_args(args)
        print(f"config hash {config_hash(cfg)}")
        run_dir = train(cfg, args.out, data_root=args.data)
        print(f"run directory: {run_dir}")
        return 0

    if args.command == "eval":
        model, cfg = load_model_from_checkpoint(args.checkpoint)
        run_eval(model, cfg, args.data, args.out, instruction=args.instruction,
                 split=args.split)
        return 0

    if args.command == "segment":
        model, cfg = load_model_from_checkpoint(args.checkpoint)
        result = run_segment(model, cfg, args.image, args.instruction, args.out)
        print(f"Assistant: {result.response}")
        for flag in result.flags:
            print(f"[flag] {flag}")
        return 0

    if args.command == "ablate":
        cfg = _config_from_args(args)
        seeds = tuple(int(s) for s in args.seeds.split(",") if s)
        run_ablation(cfg, args.out, seeds=seeds)
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
