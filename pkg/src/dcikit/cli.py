"""Command-line surface: train, eval, report, synth, selftest."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import metrics as mt
from . import training as tr
from .connector import ConnectorConfig, connector_param_count
from .decoder import DecoderConfig, Vocab
from .errors import ConfigurationError
from .figures import save_loss_figure, save_score_figure
from .vision import VisionConfig


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--dci", choices=("on", "off"), help="toggle the dense channel connector")
    p.add_argument("--layers", type=int, help="vision encoder blocks")
    p.add_argument("--groups", type=int, help="connector groups (must divide layers)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--split-ratio", type=float, help="train fraction (default 0.9)")
    p.add_argument("--paper-lr", action="store_true",
                   help=f"use lr {tr.PAPER_STYLE_LR} instead of the toy default")
    p.add_argument("--epochs", type=int, help="training epochs (default 1)")
    p.add_argument("--batch-size", type=int, help="batch size (default 8)")


def _build_config(args: argparse.Namespace) -> tr.RunConfig:
    if args.config:
        cfg = tr.RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = tr.default_run_config()
    overrides: dict = {}
    if args.manifest:
        overrides["manifest"] = args.manifest
    if args.out:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.split_ratio is not None:
        overrides["split_ratio"] = args.split_ratio
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    vision = cfg.vision
    if args.layers is not None:
        vision = dataclasses.replace(vision, layers=args.layers)
    conn_changes = {}
    if args.layers is not None:
        conn_changes["layers"] = args.layers
    if args.groups is not None:
        conn_changes["groups"] = args.groups
    if args.dci is not None:
        conn_changes["dci_enabled"] = args.dci == "on"
    # apply together so intermediate layer/group combinations never validate
    conn = dataclasses.replace(cfg.connector, **conn_changes) if conn_changes \
        else cfg.connector
    if args.paper_lr:
        overrides["optimizer"] = dataclasses.replace(cfg.optimizer, lr=tr.PAPER_STYLE_LR)
    return dataclasses.replace(cfg, vision=vision, connector=conn, **overrides)


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    if not cfg.manifest:
        raise ConfigurationError("train needs --manifest (or a config with one)")
    if not cfg.out_dir:
        raise ConfigurationError("train needs --out (or a config with one)")

    def progress(step: int, loss: float) -> None:
        if step == 1 or step % 10 == 0:
            print(f"step {step:5d}  loss {loss:.4f}", flush=True)

    result = tr.train(cfg, progress=progress)
    counts = connector_param_count(cfg.connector)
    total = sum(p.size for p in result.params.values())
    print(f"\ntrained {total} parameters "
          f"(connector base {counts.base}, with fusion {counts.with_dci}, "
          f"delta {counts.delta}, fraction of total {counts.delta_fraction_of(total):.5f})")
    print(f"artifacts in {cfg.out_dir}")
    print()
    print(mt.render_report(result.report), end="")
    return 0


def _load_params_dir(path: str) -> tuple[dict, Vocab, tr.RunConfig]:
    p = Path(path)
    if p.is_dir():
        params_path, base = p / "params.bin", p
    else:
        params_path, base = p, p.parent
    params = tr.load_params(params_path)
    vocab = Vocab.from_json(json.loads((base / "vocab.json").read_text()))
    cfg = tr.RunConfig.from_dict(json.loads((base / "run_config.json").read_text()))
    return params, vocab, cfg


def _cmd_eval(args: argparse.Namespace) -> int:
    params, vocab, cfg = _load_params_dir(args.params)
    records = dt.load_manifest(args.manifest)
    report, scored = tr.evaluate(params, records, Path(args.manifest).parent, vocab,
                                 cfg.vision, cfg.connector, cfg.decoder,
                                 max_new=args.max_new)
    text = mt.render_report(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        tr.write_scores_csv(scored, out / "scores.csv",
                            {r.dataset: r.task for r in records})
        print(f"wrote {out / 'report.txt'} and {out / 'scores.csv'}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    if not args.scores and not args.compare:
        raise ConfigurationError("report needs --scores and/or --compare")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if args.scores:
        samples, task_by_dataset = tr.read_scores_csv(args.scores)
        report = mt.report_from_samples(samples, task_by_dataset)
        text = mt.render_report(report, layout=args.layout)
        print(text, end="")
        if out:
            (out / "report.txt").write_text(text, encoding="utf-8")
            fig = save_score_figure(report, out / "scores.png")
            print(f"wrote {out / 'report.txt'} and {fig}")

    if args.compare:
        log_a = tr.LossLog.from_csv(args.compare[0])
        log_b = tr.LossLog.from_csv(args.compare[1])
        comparison = tr.compare_loss_curves(log_a, log_b, args.first_k)
        print(f"\nloss comparison over first/last {comparison.first_k} steps")
        for key, value in comparison.to_dict().items():
            if key == "first_k":
                continue
            print(f"  {key:18s} {value: .6f}")
        if out:
            (out / "comparison.csv").write_text(
                "quantity,value\n" + "".join(
                    f"{k},{v!r}\n" for k, v in comparison.to_dict().items()),
                encoding="utf-8")
            fig = save_loss_figure(
                [(Path(args.compare[0]).stem, log_a), (Path(args.compare[1]).stem, log_b)],
                out / "loss_curves.png", first_k=args.first_k)
            print(f"wrote {out / 'comparison.csv'} and {fig}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    records = dt.synth_generate(args.kind, args.n, args.seed, args.image_size, out)
    dt.write_manifest(records, out / "manifest.jsonl")
    bad = [r.id for r in records if not dt.verify_sample(r, out)]
    if bad:
        raise ConfigurationError(f"self-check failed for {bad[:3]}")
    print(f"wrote {len(records)} {args.kind} samples to {out / 'manifest.jsonl'}")
    return 0


def _cmd_selftest(args: argparse.Namespace) -> int:
    del args
    failures = 0

    def check(name: str, ok: bool) -> None:
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1

    report = ad.grad_check(lambda t: ad.reduce_sum(ad.multiply(t, t)),
                           np.array([1.0, 2.0, 3.0]))
    check("gradient of sum of squares vs finite differences", report.passed)

    check("rouge worked example scores 80",
          abs(mt.rouge_l("the cat on mat", "the cat sat on the mat") - 80.0) < 1e-9)

    spec = dt.SplitSpec(ratio=0.9, seed=1)
    recs = [dt.SampleRecord(id=f"s{i}", task="doc_knowledge", dataset="d",
                            images=[], prompt="q", answer="a", answer_type="open")
            for i in range(20)]
    train, val = dt.split_train_val(recs, spec)
    check("20 records split 18/2", (len(train), len(val)) == (18, 2))

    cfg = ConnectorConfig(layers=6, groups=3, width=8, hidden=16, lm_width=16)
    counts = connector_param_count(cfg)
    check("connector parameter delta is groups*width*hidden",
          counts.delta == cfg.groups * cfg.width * cfg.hidden)

    print("selftest", "FAILED" if failures else "OK")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcikit",
        description="Toy interleaved multi-image pipeline with a switchable "
                    "dense channel integration connector.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a manifest and report on the val split")
    p_train.add_argument("--manifest", help="JSONL manifest path")
    p_train.add_argument("--out", help="output directory")
    _add_run_flags(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate saved parameters on a manifest")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--params", required=True,
                        help="params.bin or a training output directory")
    p_eval.add_argument("--out", help="directory for report.txt and scores.csv")
    p_eval.add_argument("--max-new", type=int, default=8)
    p_eval.set_defaults(func=_cmd_eval)

    p_report = sub.add_parser("report", help="render tables, figures and run comparisons")
    p_report.add_argument("--scores", help="scores.csv from eval or train")
    p_report.add_argument("--layout", choices=("auto", "table1", "test_tables"),
                          default="auto")
    p_report.add_argument("--compare", nargs=2, metavar=("LOG_A", "LOG_B"),
                          help="two loss_log.csv files to compare")
    p_report.add_argument("--first-k", type=int, default=10,
                          help="window size for the loss comparison")
    p_report.add_argument("--out", help="directory for text, csv and png outputs")
    p_report.set_defaults(func=_cmd_report)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--kind", choices=dt.SYNTH_KINDS, required=True)
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--image-size", type=int, default=8)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth)

    p_self = sub.add_parser("selftest", help="run quick internal checks")
    p_self.set_defaults(func=_cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, LookupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
