"""End-to-end experiment runs and the artifacts they leave behind.

A run directory holds, after a full pipeline::

    cohort/            images, masks, manifest.csv, cohort.json (synthetic runs)
    config.json        the resolved experiment config
    metrics.csv        one row per capture, validator failures as tokens
    codes/<id>.ircd    iris codes of the captures that passed validation
    matches.csv        scored pairs of the configured enrollment policy
    pairs.csv          the same pairs with labels and probe features
    decision_env.json  moments, d' and histograms per enrollment condition
    correlations.csv   feature-HD Pearson r per enrollment condition and split
    gate_sweep.csv     discard sweep per gating model
    models.json        per-model logistic coefficient summaries
    summary.json       counts, d', correlations and sweep in one file

Every file is a deterministic function of the config (seed included).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .encoding import EmptyCode, GaborParams, code_length, encode_capture, read_code, write_code
from .evaluation import (
    DEFAULT_BIN_WIDTH,
    ComparisonPair,
    CorrelationRow,
    EmptyPairing,
    EnrollmentPolicy,
    build_pairs,
    correlation_report,
    decision_environment,
    fmr_fnmr,
    score_pairs,
    split_hds,
    threshold_for_fmr,
)
from .gate import DEFAULT_RATES, FEATURES, MODELS, PairTable, SweepResult, gate_sweep
from .matching import DEFAULT_MAX_SHIFT, DEFAULT_MIN_OVERLAP, pack
from .metrics import ValidatorConfig, compute_metrics, validate_metrics
from .model import CONDITIONS, CaptureRecord, MetricSet, condition_name, load_manifest
from .synth import CohortConfig, generate_cohort

log = logging.getLogger(__name__)

SUMMARY_VERSION = 1
# Lowest variance-of-Laplacian seen on the default synthetic cohort is ~190;
# 200 rejects only the blurriest renders.
SYNTHETIC_SHARPNESS_MIN = 200.0
CORRELATION_FEATURES = ("via", "pir", "mrd1", "code_length", "delta_via")


def synthetic_validator() -> ValidatorConfig:
    """Relaxed validator for synthetic cohorts.

    Occlusion checks are off entirely: a squint lid that sits below the
    pupil top covers the whole top sector (fraction exactly 1), and those
    captures must survive for the squint enrollment conditions to exist.
    """
    return ValidatorConfig.relaxed(
        sharpness_min=SYNTHETIC_SHARPNESS_MIN, occlusion90_max=1.0, occlusion30_max=1.0
    )


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class ArtifactMissing(FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# Configuration


@dataclass
class MatcherConfig:
    max_shift: int = DEFAULT_MAX_SHIFT
    min_overlap: int = DEFAULT_MIN_OVERLAP
    workers: int = 1


@dataclass
class PairingConfig:
    """Enrollment condition and impostor scope; labels use the master seed."""

    lid: str = "wide"
    dilation: str = "undilated"
    impostor_scope: str = "all"


@dataclass
class GateConfig:
    features: tuple = ("via",)
    rates: tuple = DEFAULT_RATES
    fmr_target: float = 0.001
    resamples: int = 500
    refit: bool = True
    reg: float = 1e-6
    models: tuple = tuple(MODELS)

    def __post_init__(self):
        self.features = tuple(self.features)
        self.rates = tuple(float(r) for r in self.rates)
        self.models = tuple(self.models)
        unknown = [f for f in self.features if f not in FEATURES]
        if unknown:
            raise ValueError(f"unknown gate features {unknown}; choose from {FEATURES}")
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ValueError(f"unknown gate models {bad}; choose from {tuple(MODELS)}")
        if not 0.0 < self.fmr_target < 1.0:
            raise ValueError("fmr_target must lie in (0, 1)")
        if any(not 0.0 <= r < 1.0 for r in self.rates):
            raise ValueError("discard rates must lie in [0, 1)")
        if self.resamples < 1:
            raise ValueError("resamples must be positive")


@dataclass
class ExperimentConfig:
    """Everything a run needs. ``cohort`` and ``manifest`` are alternatives:
    with a manifest the synth stage is skipped and captures are read from it.
    """

    master_seed: int = 0
    output_dir: str = "irisgate-run"
    cohort: Optional[CohortConfig] = field(default_factory=CohortConfig)
    manifest: Optional[str] = None
    validator: ValidatorConfig = field(default_factory=synthetic_validator)
    encoder: GaborParams = field(default_factory=GaborParams)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    bin_width: float = DEFAULT_BIN_WIDTH
    gate: GateConfig = field(default_factory=GateConfig)

    def __post_init__(self):
        if self.master_seed is None:
            raise ValueError("master_seed is required")
        if self.cohort is None and self.manifest is None:
            raise ValueError("config needs either a cohort or a manifest")
        self.policy  # validates the pairing section

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "validator": ValidatorConfig,
            "encoder": GaborParams,
            "matcher": MatcherConfig,
            "pairing": PairingConfig,
            "gate": GateConfig,
        }
        for key, typ in nested.items():
            if key in data:
                data[key] = typ(**data[key])
        if data.get("cohort") is not None:
            data["cohort"] = CohortConfig.from_dict(data["cohort"])
        elif "manifest" in data and "cohort" not in data:
            data["cohort"] = None
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with ``seed`` driving the cohort, pair labels and bootstrap."""
        data = self.to_dict()
        data["master_seed"] = seed
        return ExperimentConfig.from_dict(data)

    @property
    def policy(self) -> EnrollmentPolicy:
        p = self.pairing
        return EnrollmentPolicy(p.lid, p.dilation, p.impostor_scope, self.master_seed)

    def cohort_config(self) -> CohortConfig:
        data = self.cohort.to_dict()
        data["master_seed"] = self.master_seed
        return CohortConfig.from_dict(data)


# --------------------------------------------------------------------------
# Artifact files


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _float(s: str) -> float:
    return math.nan if s == "" else float(s)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_csv(path: Path) -> list[dict]:
    if not path.is_file():
        raise ArtifactMissing(f"missing artifact: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


METRIC_COLUMNS = ("via", "pir", "mrd1", "mrd2", "iris_diameter", "pupil_diameter", "sharpness",
                  "occlusion_90", "occlusion_30")


def write_metrics_csv(path, records, reports) -> None:
    rows = []
    for rec in sorted(records, key=lambda r: r.capture_id):
        m = rec.metrics
        rep = reports[rec.capture_id]
        rows.append([rec.capture_id, rec.condition, *(getattr(m, c) for c in METRIC_COLUMNS),
                     int(rep.passed), rep.tokens()])
    _write_csv(Path(path), ("capture_id", "condition", *METRIC_COLUMNS, "passed", "failures"), rows)


def read_metrics_csv(path) -> dict:
    """capture_id -> (MetricSet, passed, failure tokens)."""
    out = {}
    for row in _read_csv(Path(path)):
        values = {c: _float(row[c]) for c in METRIC_COLUMNS}
        values["via"] = int(values["via"])
        out[row["capture_id"]] = (MetricSet(**values), row["passed"] == "1", row["failures"])
    return out


MATCH_COLUMNS = ("enroll_id", "probe_id", "hd", "shift", "overlap_bits", "flags")


def write_matches_csv(path, pairs) -> None:
    _write_csv(Path(path), MATCH_COLUMNS,
               ([p.enrollment_id, p.probe_id, p.hd, p.shift, p.overlap_bits, "" if p.reliable else "Unreliable"]
                for p in pairs))


def read_matches_csv(path) -> list[dict]:
    return _read_csv(Path(path))


PAIR_COLUMNS = ("enrollment_id", "probe_id", "genuine", "hd", "shift", "overlap_bits", "flags",
                "enrollment_condition", "probe_condition", "via", "pir", "mrd1", "code_length",
                "enrollment_via")


def write_pairs_csv(path, pairs, conditions: dict) -> None:
    def row(p):
        m, e = p.probe_metrics, p.enrollment_metrics
        return [p.enrollment_id, p.probe_id, int(p.genuine), p.hd, p.shift, p.overlap_bits,
                "" if p.reliable else "Unreliable", conditions[p.enrollment_id], conditions[p.probe_id],
                m.via, m.pir, m.mrd1, m.code_length, e.via]
    _write_csv(Path(path), PAIR_COLUMNS, (row(p) for p in pairs))


def read_pairs_csv(path) -> list[ComparisonPair]:
    pairs = []
    nan = math.nan
    for row in _read_csv(Path(path)):
        code_len = row["code_length"]
        probe = MetricSet(int(row["via"]), _float(row["pir"]), _float(row["mrd1"]), nan, nan, nan, nan, nan, nan,
                          int(code_len) if code_len else None)
        enroll = MetricSet(int(row["enrollment_via"]), nan, nan, nan, nan, nan, nan, nan, nan)
        pairs.append(ComparisonPair(
            row["enrollment_id"], row["probe_id"], row["genuine"] == "1", float(row["hd"]), int(row["shift"]),
            int(row["overlap_bits"]), row["flags"] != "Unreliable", probe, enroll,
        ))
    return pairs


def write_correlations_csv(path, rows: list[CorrelationRow]) -> None:
    _write_csv(Path(path), ("enrollment_condition", "split", "feature", "n", "r"),
               ([r.group, r.split, r.feature, r.n, r.r if r.defined else "Undefined"] for r in rows))


GATE_COLUMNS = ("model", "discard_rate", "mean_fmr", "mean_fnmr", "fmr_ci_low", "fmr_ci_high",
                "fnmr_ci_low", "fnmr_ci_high")


def write_gate_csv(path, sweeps: dict) -> None:
    rows = []
    for name, sw in sweeps.items():
        for r in sw.rows:
            rows.append([name, r.discard_rate, r.mean_fmr, r.mean_fnmr, *r.fmr_ci95, *r.fnmr_ci95])
    _write_csv(Path(path), GATE_COLUMNS, rows)


def read_gate_csv(path) -> list[dict]:
    return _read_csv(Path(path))


def _dump_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


def load_summary(path) -> dict:
    data = json.loads(Path(path).read_text())
    version = data.get("schema_version")
    if version != SUMMARY_VERSION:
        raise ValueError(f"{path}: unsupported summary schema_version {version!r}")
    return data


def _clean(x):
    """JSON-safe copy: NaN becomes null, tuples become lists."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if math.isnan(x) else x
    if isinstance(x, np.integer):
        return int(x)
    return x


# --------------------------------------------------------------------------
# Stages


def stage_synth(cfg: ExperimentConfig, out: Path) -> list[CaptureRecord]:
    if cfg.manifest is not None:
        return load_manifest(cfg.manifest)
    return generate_cohort(cfg.cohort_config(), out / "cohort")


def stage_metrics(cfg: ExperimentConfig, records, out: Path) -> dict:
    """Compute metrics and validation for every record; writes metrics.csv."""
    reports = {}
    for rec in records:
        rec.metrics = compute_metrics(rec.image, rec.masks)
        reports[rec.capture_id] = validate_metrics(rec.metrics, cfg.validator)
        rec._image = rec._masks = None
    write_metrics_csv(out / "metrics.csv", records, reports)
    return reports


def stage_encode(cfg: ExperimentConfig, records, passed_ids, out: Path) -> dict:
    """Encode the passing captures into codes/; returns id -> packed code."""
    code_dir = out / "codes"
    code_dir.mkdir(parents=True, exist_ok=True)
    codes = {}
    for rec in records:
        if rec.capture_id not in passed_ids:
            continue
        try:
            code = encode_capture(rec.image, rec.masks, cfg.encoder)
        except EmptyCode as exc:
            log.warning("%s: %s", rec.capture_id, exc)
            continue
        finally:
            rec._image = rec._masks = None
        write_code(code_dir / f"{rec.capture_id}.ircd", code)
        rec.metrics.code_length = code_length(code)
        codes[rec.capture_id] = pack(code)
    return codes


def load_codes(code_dir, records) -> dict:
    code_dir = Path(code_dir)
    if not code_dir.is_dir():
        raise ArtifactMissing(f"missing artifact: {code_dir}")
    codes = {}
    for rec in records:
        path = code_dir / f"{rec.capture_id}.ircd"
        if path.is_file():
            code = read_code(path)
            if rec.metrics is not None:
                rec.metrics.code_length = code_length(code)
            codes[rec.capture_id] = pack(code)
    return codes


def stage_match(cfg: ExperimentConfig, records, codes, policy=None) -> list[ComparisonPair]:
    eligible = [r for r in records if r.capture_id in codes]
    pairs = build_pairs(eligible, policy or cfg.policy)
    m = cfg.matcher
    return score_pairs(pairs, codes, m.max_shift, m.min_overlap, workers=m.workers)


def stage_evaluate(cfg: ExperimentConfig, records, codes, main_pairs, out: Path) -> dict:
    """Decision environments and correlations for every enrollment condition."""
    conditions = {r.capture_id: r.condition for r in records}
    write_pairs_csv(out / "pairs.csv", main_pairs, conditions)
    envs, corr = {}, []
    for lid, dil in CONDITIONS:
        cond = condition_name(lid, dil)
        policy = EnrollmentPolicy(lid.value, dil.value, cfg.pairing.impostor_scope, cfg.master_seed)
        if policy == cfg.policy:
            pairs = main_pairs
        else:
            try:
                pairs = stage_match(cfg, records, codes, policy)
            except EmptyPairing:
                envs[cond] = None
                continue
        gen, imp = split_hds(pairs)
        if gen.size == 0 or imp.size == 0:
            envs[cond] = None
            continue
        envs[cond] = decision_environment(pairs, cfg.bin_width, cfg.master_seed)
        corr.extend(correlation_report(pairs, CORRELATION_FEATURES, group=cond))
    env_json = {
        "enrollment_condition": cfg.policy.condition,
        "environments": {c: (e.to_dict() if e is not None else None) for c, e in envs.items()},
    }
    _dump_json(out / "decision_env.json", _clean(env_json))
    write_correlations_csv(out / "correlations.csv", corr)
    return {"environments": envs, "correlations": corr}


def gate_ready(pairs, fmr_target: float) -> Optional[str]:
    """Why the gate cannot run on these pairs, or None when it can."""
    gen, imp = split_hds(pairs)
    if gen.size == 0 or imp.size == 0:
        return "pairs lack a genuine or impostor class"
    t = threshold_for_fmr(imp, fmr_target)
    accepted = int(np.sum(gen <= t))
    if accepted < 2 or gen.size - accepted < 2:
        return (f"only {accepted} accepted and {gen.size - accepted} rejected genuine pairs at the "
                f"FMR target; the quality model needs two of each")
    return None


def stage_gate(cfg: ExperimentConfig, pairs, out: Path, models: Optional[dict] = None) -> dict:
    """Discard sweeps; writes gate_sweep.csv and models.json."""
    g = cfg.gate
    if models is None:
        models = {name: MODELS[name] for name in g.models}
        if g.features not in models.values():
            models["+".join(g.features)] = g.features
    reason = gate_ready(pairs, g.fmr_target)
    sweeps: dict[str, SweepResult] = {}
    if reason is None:
        table = PairTable.from_pairs(pairs, FEATURES)
        for name, feats in models.items():
            sweeps[name] = gate_sweep(table, feats, g.rates, g.fmr_target, g.resamples, cfg.master_seed,
                                      reg=g.reg, refit=g.refit, model_name=name)
    else:
        log.warning("quality gate skipped: %s", reason)
    write_gate_csv(out / "gate_sweep.csv", sweeps)
    models_json = {
        "skipped": reason,
        "fmr_target": g.fmr_target,
        "resamples": g.resamples,
        "refit": g.refit,
        "reg": g.reg,
        "models": {name: {"features": list(sw.features), "coefficients": sw.coefficient_summary()}
                   for name, sw in sweeps.items()},
    }
    _dump_json(out / "models.json", _clean(models_json))
    return {"sweeps": sweeps, "skipped": reason}


# --------------------------------------------------------------------------
# Orchestration


def capture_accounting(records, reports, encoded_ids) -> dict:
    """Generated/failed counts per condition, with failure tokens tallied."""
    by_cond: dict[str, dict] = {}
    for lid, dil in CONDITIONS:
        by_cond[condition_name(lid, dil)] = {"generated": 0, "failed": 0, "failures": {}}
    for rec in records:
        entry = by_cond.setdefault(rec.condition, {"generated": 0, "failed": 0, "failures": {}})
        entry["generated"] += 1
        tokens = [f.value for f in reports[rec.capture_id].failures]
        if not tokens and encoded_ids is not None and rec.capture_id not in encoded_ids:
            tokens = ["EmptyCode"]
        if tokens:
            entry["failed"] += 1
            tally = Counter(entry["failures"])
            tally.update(tokens)
            entry["failures"] = dict(sorted(tally.items()))
    total = sum(e["generated"] for e in by_cond.values())
    failed = sum(e["failed"] for e in by_cond.values())
    return {"total": total, "failed": failed, "passed": total - failed, "by_condition": by_cond}


class _Summary:
    """summary.json, rewritten after each stage so partial runs keep what they had."""

    def __init__(self, path: Path, cfg: ExperimentConfig):
        self.path = path
        self.data = {"schema_version": SUMMARY_VERSION, "master_seed": cfg.master_seed, "status": "running"}

    def update(self, **items) -> None:
        self.data.update(_clean(items))
        _dump_json(self.path, self.data)


def run_pipeline(cfg: ExperimentConfig) -> Path:
    """Run every stage into ``cfg.output_dir``; returns that directory.

    Raises:
        StageError: naming the failed stage. A ``FAILED`` file in the output
            directory records the same message; finished artifacts are kept.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    _dump_json(out / "config.json", cfg.to_dict())
    summary = _Summary(out / "summary.json", cfg)
    stage = "synth"
    try:
        records = sorted(stage_synth(cfg, out), key=lambda r: r.capture_id)
        stage = "metrics"
        reports = stage_metrics(cfg, records, out)
        passed = {cid for cid, rep in reports.items() if rep.passed}
        summary.update(captures=capture_accounting(records, reports, None))
        stage = "encode"
        codes = stage_encode(cfg, records, passed, out)
        summary.update(captures=capture_accounting(records, reports, set(codes)))
        stage = "match"
        if not codes:
            raise EmptyPairing("no capture passed validation and encoding")
        pairs = stage_match(cfg, records, codes)
        write_matches_csv(out / "matches.csv", pairs)
        gen, imp = split_hds(pairs)
        summary.update(pairs={"genuine": int(gen.size), "impostor": int(imp.size)})
        stage = "evaluate"
        ev = stage_evaluate(cfg, records, codes, pairs, out)
        envs = ev["environments"]
        op = {}
        if gen.size and imp.size:
            t = threshold_for_fmr(imp, cfg.gate.fmr_target)
            fmr, fnmr = fmr_fnmr(gen, imp, t)
            op = {"fmr_target": cfg.gate.fmr_target, "hd_threshold": t, "fmr": fmr, "fnmr": fnmr}
        summary.update(
            operating_point=op,
            decidability={c: (e.d_prime if e is not None else None) for c, e in envs.items()},
            correlations=[asdict(r) for r in ev["correlations"]],
        )
        stage = "gate"
        gt = stage_gate(cfg, pairs, out)
        summary.update(
            gate={
                "skipped": gt["skipped"],
                "models": {name: [asdict(r) for r in sw.rows] for name, sw in gt["sweeps"].items()},
            },
            status="ok",
        )
    except Exception as exc:
        summary.update(status="failed", failed_stage=stage, error=str(exc))
        (out / "FAILED").write_text(f"stage: {stage}\ncause: {type(exc).__name__}: {exc}\n")
        raise StageError(stage, exc) from exc
    return out
