"""Command-line entry point: gen-data, train, eval, report, verify.

Every command is a pure function of (config, seeds, input files); outputs
are byte-reproducible, with timestamps confined to stderr log lines. Exit
codes: 0 success, 1 usage, 2 config, 3 data, 4 numeric/invariant failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, canonical_json, fill_config, parse_config
from .ctc import EvalReport
from .data import generate_corpus, load_manifest, split_corpus, write_manifest
from .errors import (AccdatError, ConfigError, DataError, InfeasibleTarget,
                     InternalInvariantError, InvalidArgument, NumericError,
                     ResourceLimit, StateError)
from .train import (REGIMES, RegimeData, evaluate_model, load_checkpoint,
                    params_from_checkpoint, run_regime)

SPLIT_RATIOS = (0.70, 0.20, 0.10)  # train / test / validation


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", file=sys.stderr)


def _dtype(default: str):
    name = os.environ.get("ACCDAT_PRECISION", default)
    table = {"f32": np.float32, "f64": np.float64}
    if name not in table:
        raise ConfigError(f"ACCDAT_PRECISION must be f32 or f64, got {name!r}")
    return table[name]


def _maybe_print_config(cfg: ExperimentConfig, args) -> None:
    if getattr(args, "print_config", False):
        print(canonical_json(cfg.filled))


# -- subcommands ---------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        doc = json.loads(Path(args.config).read_text())
        doc.setdefault("corpus", {}).setdefault("base", {})["seed"] = args.seed
        doc["corpus"].setdefault("new", {})["seed"] = args.seed + 1000003
        cfg = fill_config(doc)
    _maybe_print_config(cfg, args)
    out = Path(args.out)
    for domain in ("base", "new"):
        cc = cfg.corpus_config(domain)
        utts = generate_corpus(cc, out / domain)
        splits = split_corpus(utts, SPLIT_RATIOS, cc.seed)
        for name, group in splits.items():
            write_manifest(out / domain / f"{name}.jsonl", group)
        _log(f"{domain}: {len(utts)} utterances "
             f"({', '.join(f'{k}={len(v)}' for k, v in splits.items())})")
    (out / "experiment.json").write_text(canonical_json(cfg.filled) + "\n")
    _log(f"corpus written to {out} (config digest {cfg.digest[:12]})")
    return 0


def _regime_data(cfg: ExperimentConfig, data_root: Path, regime: str) -> RegimeData:
    domain = "base" if regime == "pretrain_base" else "new"
    root = data_root / domain
    if not (root / "train.jsonl").exists():
        raise DataError(f"{root}/train.jsonl not found; run gen-data first")
    train = load_manifest(root / "train.jsonl")
    val = load_manifest(root / "validation.jsonl")
    subsets = {"seen": [0]} if domain == "base" else cfg.subsets
    return RegimeData(root, train, val, cfg.alphabet, subsets)


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    _maybe_print_config(cfg, args)
    dtype = _dtype("f32")
    init = load_checkpoint(args.init) if args.init else None
    data = _regime_data(cfg, Path(args.data), args.regime)
    train_cfg = cfg.train_config(args.regime)
    _log(f"regime {args.regime}: {len(data.train)} train / "
         f"{len(data.validation)} validation utterances")
    result = run_regime(train_cfg, cfg.model_config(), data, init,
                        Path(args.out), dtype, cfg.digest)
    last = result.metrics[-1] if result.metrics else {}
    _log(f"final checkpoint: {result.final_checkpoint} "
         f"(val_wer_seen={last.get('val_wer_seen')}, "
         f"val_wer_unseen={last.get('val_wer_unseen')})")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dtype = _dtype("f32")
    params = params_from_checkpoint(ckpt, dtype)
    root = Path(args.data) / args.domain
    manifest = root / f"{args.split}.jsonl"
    if not manifest.exists():
        raise DataError(f"manifest {manifest} not found")
    utts = load_manifest(manifest)
    if args.config:
        cfg = parse_config(args.config)
        subsets, weighting = cfg.subsets, cfg.weighting
    else:
        accents = sorted({u.accent_id for u in utts})
        subsets = {"seen": [0], "unseen": [a for a in accents if a > 0],
                   "all": accents}
        if not subsets["unseen"]:
            subsets.pop("unseen")
        weighting = "utterances"
    report = evaluate_model(params, root, utts, subsets,
                            ckpt.meta["alphabet"], weighting, dtype)
    report.meta = {
        "regime": ckpt.meta.get("regime"),
        "config_digest": ckpt.meta.get("config_digest"),
        "checkpoint_step": ckpt.meta.get("step"),
        "split": args.split,
        "domain": args.domain,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), sort_keys=True,
                              separators=(",", ":")) + "\n")
    _log(f"report written to {out}: " +
         " ".join(f"{k}={v * 100:.2f}%" for k, v in report.averages.items()))
    return 0


def _cmd_report(args) -> int:
    from .report import write_report
    reports = []
    for i, path in enumerate(args.inputs):
        doc = json.loads(Path(path).read_text())
        rep = EvalReport.from_dict(doc)
        if args.labels and i < len(args.labels):
            label = args.labels[i]
        else:
            label = rep.meta.get("regime") or Path(path).stem
        reports.append((label, rep))
    outputs = write_report(reports, Path(args.out), figures=not args.no_figures)
    print(Path(args.out).read_text(), end="")
    _log("wrote " + ", ".join(str(p) for p in outputs.values()))
    return 0


def _cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} verification suites passed")
    return 0 if not failed else 4


# -- dispatch ----------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="accdat",
                     description="Accent-adversarial CTC training, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpora and splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the corpus sampling seeds")
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training regime")
    p.add_argument("--config", required=True)
    p.add_argument("--regime", required=True, choices=REGIMES)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None,
                   help="checkpoint to transfer from (or resume, if same regime)")
    p.add_argument("--out", required=True)
    p.add_argument("--print-config", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="decode a split and write a WER report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "test", "validation"])
    p.add_argument("--domain", default="new", choices=["base", "new"])
    p.add_argument("--config", default=None,
                   help="optional config for subset definitions")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report", help="render a WER table from eval reports")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="*", default=None)
    p.add_argument("--no-figures", action="store_true",
                   help="skip the PNG chart next to the table")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("verify", help="run the 64-bit verification suites")
    p.set_defaults(fn=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, InvalidArgument) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, StateError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericError, InternalInvariantError, InfeasibleTarget,
            ResourceLimit) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except AccdatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
