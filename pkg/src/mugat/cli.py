"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import corpus as corpus_mod
from . import harness
from .corpus import CorpusError, GenConfig
from .harness import CorpusData, TrainConfig
from .model import load_checkpoint
from .tensor import NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _train_config(path) -> tuple[TrainConfig, dict]:
    """Read a TrainConfig (plus optional model overrides under "model")."""
    if path is None:
        return TrainConfig(), {}
    raw = _load_json(path)
    model_overrides = raw.pop("model", {})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise CorpusError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**raw), model_overrides


def build_parser() -> _Parser:
    p = _Parser(prog="mugat", description="Multi-page context document parsing toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    c = sub.add_parser("corpus").add_subparsers(dest="sub", required=True)
    g = c.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)

    t = sub.add_parser("train").add_subparsers(dest="sub", required=True)
    tp = t.add_parser("pretrain", help="train encoder+decoder on single pages")
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config")
    ta = t.add_parser("adapter", help="train the context adapter from a base checkpoint")
    ta.add_argument("--base", required=True)
    ta.add_argument("--corpus", required=True)
    ta.add_argument("--out", required=True)
    ta.add_argument("--config")

    e = sub.add_parser("eval", help="parse a split and report metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), required=True)
    e.add_argument("--report", required=True)

    a = sub.add_parser("ablate", help="adapter depth/width grid")
    a.add_argument("--corpus", required=True)
    a.add_argument("--base", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")

    x = sub.add_parser("experiment").add_subparsers(dest="sub", required=True)
    xc = x.add_parser("context", help="baseline-vs-context experiment")
    xc.add_argument("--corpus", required=True)
    xc.add_argument("--out", required=True)
    xc.add_argument("--seeds", type=int, default=3)
    xc.add_argument("--config")
    return p


def run(args) -> int:
    if args.cmd == "corpus" and args.sub == "gen":
        cfg = GenConfig(**_load_json(args.config)) if args.config else GenConfig()
        manifest = corpus_mod.build_corpus(args.seed, cfg, args.out)
        n = len(manifest.all_samples())
        print(f"wrote {n} samples to {args.out}")
        return EXIT_OK

    if args.cmd == "train":
        cfg, overrides = _train_config(args.config)
        data = CorpusData.load(args.corpus)
        if args.sub == "pretrain":
            model_cfg = data.model_config(**overrides)
            _, losses = harness.pretrain_single_page(data, model_cfg, cfg, out_ckpt=args.out)
            print(f"pretrain done; final loss {losses[-1]:.4f}; checkpoint {args.out}")
            return EXIT_OK
        if args.sub == "adapter":
            model_cfg = data.model_config(**overrides)
            _, losses = harness.train_adapter(args.base, data, model_cfg, cfg,
                                              out_ckpt=args.out)
            print(f"adapter training done; final loss {losses[-1]:.4f}; checkpoint {args.out}")
            return EXIT_OK

    if args.cmd == "eval":
        data = CorpusData.load(args.corpus)
        model, _ = load_checkpoint(args.ckpt)
        for fld, want in (("image_h", data.gen_cfg.page_h),
                          ("image_w", data.gen_cfg.page_w),
                          ("vocab_size", data.tokenizer.vocab_size)):
            got = getattr(model.cfg, fld)
            if got != want:
                raise CorpusError(
                    f"checkpoint/corpus mismatch: {fld} = {got} vs corpus {want}")
        result = harness.evaluate(model, data.manifest.split(args.split), data)
        harness.write_eval_report(result, args.report)
        print(f"report written next to {args.report}")
        return EXIT_OK

    if args.cmd == "ablate":
        cfg, _ = _train_config(args.config)
        data = CorpusData.load(args.corpus)
        rows = harness.ablate_grid(data, args.base, cfg, args.out)
        print(f"grid complete: {len(rows)} cells; reports in {args.out}")
        return EXIT_OK

    if args.cmd == "experiment" and args.sub == "context":
        cfg, _ = _train_config(args.config)
        data = CorpusData.load(args.corpus)
        report = harness.context_experiment(data, cfg, args.out, seeds=args.seeds)
        print(json.dumps(report["mean"], indent=2, sort_keys=True))
        return EXIT_OK

    return EXIT_USAGE


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (CorpusError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
