"""Command-line entry point.

Every subcommand works on one run directory (``--out``). Stages read what
earlier stages left there, so ``synth``, ``metrics``, ``encode``, ``match``,
``evaluate`` and ``gate`` run in sequence reproduce ``run``.

Exit status: 0 on success, 1 for usage or configuration errors, 2 when a
stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .evaluation import ComparisonPair
from .gate import FEATURES
from .model import ManifestError, load_manifest
from .pipeline import (
    ArtifactMissing,
    ExperimentConfig,
    StageError,
    load_codes,
    read_matches_csv,
    read_metrics_csv,
    read_pairs_csv,
    run_pipeline,
    stage_encode,
    stage_evaluate,
    stage_gate,
    stage_match,
    stage_metrics,
    stage_synth,
    write_matches_csv,
)
from .report import report

log = logging.getLogger("irisgate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this tool reserves 2 for stage failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_rates(text: str) -> tuple:
    """``0:0.07:0.01`` (inclusive range) or a comma list ``0,0.05``."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(round((stop - start) / step))
            return tuple(round(start + k * step, 10) for k in range(n + 1))
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate spec {text!r}; use start:stop:step or a,b,c") from None


def parse_features(text: str) -> tuple:
    feats = tuple(f.strip().lower() for f in text.split(",") if f.strip())
    bad = [f for f in feats if f not in FEATURES]
    if bad or not feats:
        raise argparse.ArgumentTypeError(f"features must be drawn from {','.join(FEATURES)}")
    return feats


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", type=Path, help="run directory (default: the config's output_dir)")
    common.add_argument("--manifest", type=Path, help="capture manifest (default: <out>/cohort/manifest.csv)")
    common.add_argument("--workers", type=int, help="matcher threads")

    parser = _Parser(prog="irisgate", description="Iris image quality gating experiments.")
    parser.add_argument("--version", action="version", version=f"irisgate {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="render a synthetic cohort")
    sub.add_parser("metrics", parents=[common], help="compute quality metrics and validation")
    sub.add_parser("encode", parents=[common], help="encode passing captures into iris codes")
    sub.add_parser("match", parents=[common], help="score the enrollment policy's pairs")
    sub.add_parser("evaluate", parents=[common], help="decision environments and correlations")
    g = sub.add_parser("gate", parents=[common], help="quality-gate discard sweep")
    g.add_argument("--features", type=parse_features,
                   help="features of a single gating model, e.g. via,pir (default: compare all models)")
    g.add_argument("--rates", type=parse_rates, help="discard rates, e.g. 0:0.07:0.01")
    g.add_argument("--fmr-target", type=float)
    g.add_argument("--resamples", type=int)
    sub.add_parser("run", parents=[common], help="run every stage")
    sub.add_parser("report", parents=[common], help="summarize a finished run")
    return parser


def load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
        data = cfg.to_dict()
        if args.seed is not None:
            data["master_seed"] = args.seed
        if args.out is not None:
            data["output_dir"] = str(args.out)
        if args.manifest is not None:
            data["manifest"] = str(args.manifest)
        if args.workers is not None:
            data["matcher"]["workers"] = args.workers
        gate = data["gate"]
        if getattr(args, "rates", None) is not None:
            gate["rates"] = list(args.rates)
        if getattr(args, "fmr_target", None) is not None:
            gate["fmr_target"] = args.fmr_target
        if getattr(args, "resamples", None) is not None:
            gate["resamples"] = args.resamples
        return ExperimentConfig.from_dict(data)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _records(cfg: ExperimentConfig, out: Path):
    manifest = Path(cfg.manifest) if cfg.manifest else out / "cohort" / "manifest.csv"
    if not manifest.is_file():
        raise ArtifactMissing(f"missing artifact: {manifest} (run `irisgate synth` first or pass --manifest)")
    return sorted(load_manifest(manifest), key=lambda r: r.capture_id)


def _records_with_metrics(cfg, out):
    records = _records(cfg, out)
    table = read_metrics_csv(out / "metrics.csv")
    passed = set()
    for rec in records:
        if rec.capture_id not in table:
            raise ArtifactMissing(f"metrics.csv has no row for {rec.capture_id}")
        rec.metrics, ok, _ = table[rec.capture_id]
        if ok:
            passed.add(rec.capture_id)
    return records, passed


def _scored_pairs(records, out: Path) -> list:
    by_id = {r.capture_id: r for r in records}
    pairs = []
    for row in read_matches_csv(out / "matches.csv"):
        e, p = by_id[row["enroll_id"]], by_id[row["probe_id"]]
        pairs.append(ComparisonPair(
            e.capture_id, p.capture_id, e.iris_key == p.iris_key, float(row["hd"]), int(row["shift"]),
            int(row["overlap_bits"]), row["flags"] != "Unreliable", p.metrics, e.metrics,
        ))
    return pairs


def dispatch(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.output_dir)
    cmd = args.command
    if cmd == "run":
        run_pipeline(cfg)
        print(f"run complete: {out}")
        return 0
    if cmd == "report":
        sys.stdout.write(report(out))
        return 0
    out.mkdir(parents=True, exist_ok=True)
    try:
        if cmd == "synth":
            if cfg.manifest is not None:
                raise UsageError("synth renders a cohort; drop --manifest")
            records = stage_synth(cfg, out)
            print(f"rendered {len(records)} captures into {out / 'cohort'}")
        elif cmd == "metrics":
            records = _records(cfg, out)
            reports = stage_metrics(cfg, records, out)
            print(f"metrics for {len(records)} captures, {sum(r.passed for r in reports.values())} pass")
        elif cmd == "encode":
            records, passed = _records_with_metrics(cfg, out)
            codes = stage_encode(cfg, records, passed, out)
            print(f"encoded {len(codes)} captures into {out / 'codes'}")
        elif cmd == "match":
            records, _ = _records_with_metrics(cfg, out)
            codes = load_codes(out / "codes", records)
            pairs = stage_match(cfg, records, codes)
            write_matches_csv(out / "matches.csv", pairs)
            print(f"scored {len(pairs)} pairs")
        elif cmd == "evaluate":
            records, _ = _records_with_metrics(cfg, out)
            codes = load_codes(out / "codes", records)
            pairs = _scored_pairs(records, out)
            ev = stage_evaluate(cfg, records, codes, pairs, out)
            for cond, env in ev["environments"].items():
                d = "undefined" if env is None or env.d_prime != env.d_prime else f"{env.d_prime:.3f}"
                print(f"{cond:<18} d'={d}")
        elif cmd == "gate":
            pairs = read_pairs_csv(out / "pairs.csv")
            models = {"+".join(args.features): args.features} if args.features else None
            result = stage_gate(cfg, pairs, out, models)
            if result["skipped"]:
                print(f"gate skipped: {result['skipped']}")
            for name, sw in result["sweeps"].items():
                cells = " ".join(f"{r.discard_rate:.2f}:{100 * r.mean_fnmr:.2f}%" for r in sw.rows)
                print(f"{name:<10} FNMR {cells}")
    except (ArtifactMissing, ManifestError, UsageError):
        raise
    except Exception as exc:
        raise StageError(cmd, exc) from exc
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except UsageError as exc:
        print(f"irisgate: {exc}", file=sys.stderr)
        return 1
    except (StageError, ArtifactMissing, ManifestError) as exc:
        print(f"irisgate: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
