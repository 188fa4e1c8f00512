"""Experiment driver.

Subcommands:

    gen-data   write a synthetic corpus (trace files + manifest)
    train      run the centralized or federated pipeline on a corpus and
               emit machine-readable reports
    compare    merge run summaries into one aligned CSV
    gradcheck  run the finite-difference gradient oracle

The config file is YAML with one section per subsystem; every training
hyperparameter defaults to the pipeline's standard value, so `train` with
an empty config runs the default protocol. Exit codes: 0 success,
1 validation error, 2 runtime error. The output directory can also be set
through the FEDIDS_OUTPUT_DIR environment variable (a --out flag wins).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from . import fed, nn, traces
from .errors import CorpusError, FedidsError, ValidationError
from .features import FeatureConfig, SplitSpec
from .traces import BENIGN, MALICIOUS, GeneratorSpec

SCHEMA_VERSION = 1

MODES = ("centralized", "federated")


@dataclass
class ExperimentConfig:
    seed: int = 42
    mode: str = "federated"
    output_dir: str = "runs/default"
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    split: SplitSpec | None = None  # derived from seed when omitted
    model: nn.ModelConfig = field(default_factory=nn.ModelConfig)
    fed: fed.FedConfig = field(default_factory=fed.FedConfig)
    centralized_epochs: int = 20

    def validate(self) -> list[str]:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.centralized_epochs < 0:
            problems.append(f"centralized_epochs: must be >= 0, got {self.centralized_epochs}")
        problems += self.generator.validate()
        problems += self.features.validate()
        if self.split is not None:
            problems += self.split.validate()
        problems += self.model.validate()
        problems += self.fed.validate()
        return problems

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise ValidationError(problems)

    def hash(self) -> str:
        blob = json.dumps(_config_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    # tuples do not survive YAML/JSON round-trips; normalize to lists
    return json.loads(json.dumps(out, default=list))


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(
            [f"{section}.{k}: unknown key" for k in sorted(unknown)])
    kwargs = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(f.default, tuple):
            value = kwargs[f.name]
            if isinstance(value, list):
                kwargs[f.name] = tuple(
                    tuple(v) if isinstance(v, list) else v for v in value)
    return cls(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Build an ExperimentConfig from a YAML file; every key is optional."""
    data = {}
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(raw) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"config root must be a mapping, got {type(data).__name__}")
    sections = {
        "generator": GeneratorSpec,
        "features": FeatureConfig,
        "split": SplitSpec,
        "model": nn.ModelConfig,
        "fed": fed.FedConfig,
    }
    top_known = {"seed", "mode", "output_dir", "centralized_epochs"} | set(sections)
    unknown = set(data) - top_known
    if unknown:
        raise ValidationError([f"{k}: unknown config key" for k in sorted(unknown)])
    kwargs = {k: data[k] for k in ("seed", "mode", "output_dir", "centralized_epochs") if k in data}
    for name, cls in sections.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name] or {}, name)
    cfg = ExperimentConfig(**kwargs)
    if "seed" in data:
        cfg = _apply_seed(cfg, int(data["seed"]))
    return cfg


def _apply_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Propagate one root seed into every sub-config that carries one."""
    cfg = dataclasses.replace(cfg, seed=seed)
    cfg.fed = dataclasses.replace(cfg.fed, seed=seed)
    return cfg


# --- emitted artifacts ----------------------------------------------------

def _schema(name: str) -> dict:
    text = resources.files("fedids.schemas").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text)


def _write_json(path: Path, payload: dict, schema_name: str) -> None:
    jsonschema.validate(payload, _schema(schema_name))
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _metric_pair_dict(pair: dict) -> dict:
    return {"window": pair["window"].to_dict(), "trace": pair["trace"].to_dict()}


def _round_record(report: fed.RoundReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "round": report.round,
        "val": _metric_pair_dict(report.global_metrics),
        "train_accuracy_trace": report.train_accuracy_trace,
        "per_client": [
            {"client_id": cid, "n_samples": n, "local_accuracy": acc}
            for cid, n, acc in report.per_client
        ],
    }


def _corpus_summary(corpus) -> dict:
    n_benign = sum(1 for t in corpus if t.label == BENIGN)
    return {
        "n_traces": len(corpus),
        "n_benign": n_benign,
        "n_malicious": len(corpus) - n_benign,
    }


def _resolve_out(cfg: ExperimentConfig, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get("FEDIDS_OUTPUT_DIR")
    if env:
        return Path(env)
    return Path(cfg.output_dir)


# --- subcommands ------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out_dir: Path) -> int:
    corpus = traces.generate_corpus(cfg.generator, cfg.seed)
    manifest = traces.write_corpus(corpus, out_dir)
    jsonschema.validate(json.loads(manifest.read_text()), _schema("manifest.schema.json"))
    info = _corpus_summary(corpus)
    print(f"wrote {info['n_traces']} traces to {out_dir} "
          f"({info['n_benign']} benign, {info['n_malicious']} malicious)")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(cfg: ExperimentConfig, data_dir: Path, out_dir: Path) -> int:
    cfg.check()
    corpus = traces.read_corpus(data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    if cfg.mode == "federated":
        params, reports = fed.run_federated(
            corpus, cfg.fed, cfg.model, split=cfg.split, feat=cfg.features)
        wall = time.perf_counter() - started
        with open(out_dir / "rounds.jsonl", "w", encoding="utf-8") as fh:
            for report in reports:
                record = _round_record(report)
                jsonschema.validate(record, _schema("round.schema.json"))
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "accuracy"])
            for report in reports:
                writer.writerow([report.round, f"{report.global_metrics['trace'].accuracy:.6f}"])
        final = reports[-1].global_metrics
        rounds_or_epochs = reports[-1].round
        distribution = cfg.fed.partition
        clients = cfg.fed.n_clients
        history = None
    else:
        params, history, final = fed.run_centralized(
            corpus, cfg.model, epochs=cfg.centralized_epochs, seed=cfg.seed,
            split=cfg.split, feat=cfg.features)
        wall = time.perf_counter() - started
        with open(out_dir / "history.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "train_accuracy",
                             "train_accuracy_trace", "val_accuracy_trace"])
            for rec in history:
                writer.writerow([
                    rec["epoch"], f"{rec['loss']:.6f}", f"{rec['accuracy']:.6f}",
                    f"{rec.get('train_accuracy_trace', float('nan')):.6f}",
                    f"{rec.get('val_accuracy_trace', float('nan')):.6f}",
                ])
        with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "accuracy"])
            for rec in history:
                writer.writerow([rec["epoch"],
                                 f"{rec.get('val_accuracy_trace', float('nan')):.6f}"])
        rounds_or_epochs = len(history)
        distribution = "centralized"
        clients = 1

    summary = {
        "schema_version": SCHEMA_VERSION,
        "mode": cfg.mode,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "distribution": distribution,
        "clients": clients,
        "rounds_or_epochs": rounds_or_epochs,
        "wall_time_s": wall,
        "vocab_size": params.view("gru1/W_z").shape[0],
        "corpus": _corpus_summary(corpus),
        "final": _metric_pair_dict(final),
    }
    _write_json(out_dir / "summary.json", summary, "summary.schema.json")
    confusion = {
        "schema_version": SCHEMA_VERSION,
        "threshold": 0.5,
        "window": _metric_pair_dict(final)["window"]["confusion"],
        "trace": _metric_pair_dict(final)["trace"]["confusion"],
    }
    _write_json(out_dir / "confusion.json", confusion, "confusion.schema.json")

    model_cfg = dataclasses.replace(cfg.model, input_dim=summary["vocab_size"])
    nn.save_checkpoint(params, model_cfg, out_dir / "params.bin")

    trace_final = final["trace"]
    print(f"{cfg.mode} run finished in {wall:.1f}s "
          f"({rounds_or_epochs} {'rounds' if cfg.mode == 'federated' else 'epochs'})")
    print(f"trace-level: accuracy={trace_final.accuracy:.4f} "
          f"precision={trace_final.precision:.4f} recall={trace_final.recall:.4f} "
          f"f1={trace_final.f1:.4f}")
    print(f"outputs in {out_dir}")
    return 0


def cmd_compare(run_dirs: list[Path], out_path: Path | None) -> int:
    if len(run_dirs) < 2:
        raise ValidationError("compare: need at least 2 run directories")
    rows = []
    versions = set()
    for run in run_dirs:
        summary_path = run / "summary.json"
        if not summary_path.is_file():
            raise CorpusError(f"compare: no summary.json in {run}")
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        versions.add(summary.get("schema_version"))
        trace = summary["final"]["trace"]
        rows.append([
            summary["clients"], summary["rounds_or_epochs"], summary["distribution"],
            f"{trace['accuracy']:.4f}", f"{trace['precision']:.4f}",
            f"{trace['recall']:.4f}", f"{trace['f1']:.4f}",
        ])
    if len(versions) > 1:
        raise ValidationError(
            f"compare: summaries carry incompatible schema versions {sorted(versions)}")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["clients", "rounds", "distribution", "A", "P", "R", "F1"])
    writer.writerows(rows)
    text = buf.getvalue()
    if out_path is not None:
        out_path.write_text(text, encoding="utf-8")
        print(f"wrote {out_path}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(n_configs: int, seed: int, threshold: float = 1e-4) -> int:
    started = time.perf_counter()
    results = nn.gradient_check(n_configs=n_configs, seed=seed, progress=print)
    worst = max(r["max_rel_error"] for r in results)
    elapsed = time.perf_counter() - started
    print(f"max relative error over {n_configs} configs: {worst:.3e} "
          f"(threshold {threshold:.0e}, {elapsed:.1f}s)")
    if worst >= threshold:
        print("gradient check FAILED")
        return 2
    print("gradient check passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedids",
        description="Synthetic syscall-trace intrusion detection: centralized "
                    "and federated training experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p_gen.add_argument("--config", type=Path, default=None)
    p_gen.add_argument("--out", type=Path, required=True, help="corpus directory")
    p_gen.add_argument("--seed", type=int, default=None, help="override config seed")

    p_train = sub.add_parser("train", help="train on an existing corpus")
    p_train.add_argument("--config", type=Path, default=None)
    p_train.add_argument("--data", type=Path, required=True, help="corpus directory")
    p_train.add_argument("--out", type=Path, default=None,
                         help="run directory (default: config output_dir or FEDIDS_OUTPUT_DIR)")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")

    p_cmp = sub.add_parser("compare", help="merge run summaries into one CSV")
    p_cmp.add_argument("runs", nargs="+", type=Path)
    p_cmp.add_argument("--out", type=Path, default=None)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    p_gc.add_argument("--configs", type=int, default=5)
    p_gc.add_argument("--seed", type=int, default=7)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("gen-data", "train"):
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = _apply_seed(cfg, args.seed)
            cfg.check()
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.data, _resolve_out(cfg, args.out))
        if args.command == "compare":
            return cmd_compare(args.runs, args.out)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.configs, args.seed)
        raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    except (FedidsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
