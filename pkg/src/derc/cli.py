"""``derc`` command line: generate | train | evaluate | gradcheck.

Settings come from a YAML (or JSON) file with the sections ``generator``,
``model``, ``loss``, ``optim``, ``schedule`` and ``eval`` plus a top-level
``seed``; ``--set section.key=value`` overrides single entries. Artifacts land
in ``<runs-dir>/<command>-<config hash>-seed<seed>/`` next to a
``manifest.json`` describing what produced them.

Exit codes: 0 ok, 1 gradient check failed, 2 configuration or usage error,
3 I/O or corpus format error, 4 training diverged, 5 AUPR undefined.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import gzip
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

import derc
from derc import checkpoint, corpus as corpus_io
from derc.corpus import Corpus, GeneratorConfig, atomic_write_bytes, generate
from derc.distributions import LossConfig
from derc.errors import ConfigError, DataError, DivergenceError, MetricUndefinedError, UsageError
from derc.evaluation import build_report, predict_dialogues
from derc.model import ModelConfig
from derc.numerics import RngStream, inject_fault
from derc.numerics import gradcheck as gc
from derc.training import OptimConfig, Schedule, train

log = logging.getLogger("derc")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_METRIC = 0, 1, 2, 3, 4, 5

DEFAULT_TRAIN_SEED = 1

SECTIONS = {
    "generator": GeneratorConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "schedule": Schedule,
}
EVAL_DEFAULTS = {"split": "test", "batch_size": 32}
TRAIN_DEFAULTS = {"split": "train"}

# full-scale architecture and optimiser (peak rate and run length are our picks)
FULL_SCALE_OVERRIDES = {
    "model": {"model_dim": 256, "encoder_blocks": 4, "decoder_blocks": 4, "heads": 4, "dropout": 0.1,
              "feature_dim": 768, "fusion_rank": 256, "fusion_dim": 256, "feedforward_dim": 1024},
    "optim": {"peak_lr": 1e-4, "warmup_updates": 2000, "total_updates": 20000},
    "schedule": {"kind": "exponential", "k": 0.9995},
}


# ------------------------------------------------------------------ config
def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = None
    return out


def default_config() -> dict:
    cfg = {name: _field_defaults(cls) for name, cls in SECTIONS.items()}
    cfg["optim"].pop("schedule")
    cfg["loss"]["mode"] = cfg["loss"]["mode"].value
    cfg["train"] = dict(TRAIN_DEFAULTS)
    cfg["eval"] = dict(EVAL_DEFAULTS)
    cfg["seed"] = DEFAULT_TRAIN_SEED
    return cfg


def _coerce(value, default, key: str):
    """Bring a raw YAML / --set value to the type of the field default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int) or (default is None and key == "model.feedforward_dim"):
        if value is None and default is None:
            return None
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key} expects a value like {default!r}, got {value!r}")


def _merge(cfg: dict, patch: dict, origin: str) -> None:
    if not isinstance(patch, dict):
        raise ConfigError(f"{origin}: top level must be a mapping of sections")
    for section, body in patch.items():
        if section == "seed":
            cfg["seed"] = _coerce(body, 0, "seed")
            continue
        if section not in cfg or not isinstance(cfg[section], dict):
            raise ConfigError(f"{origin}: unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        for key, value in body.items():
            full = f"{section}.{key}"
            if key not in cfg[section]:
                raise ConfigError(f"{origin}: unknown config key {full!r}")
            cfg[section][key] = _coerce(value, cfg[section][key], full)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    value = _parse_scalar(raw.strip())
    if parts == ["seed"]:
        return {"seed": value}
    if len(parts) != 2:
        raise ConfigError(f"--set key must look like section.key, got {key!r}")
    return {parts[0]: {parts[1]: value}}


def load_config(path: str | None, overrides: list[str], full_scale: bool = False) -> dict:
    cfg = default_config()
    if full_scale:
        _merge(cfg, FULL_SCALE_OVERRIDES, "--paper-config")
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        _merge(cfg, data, path)
    for item in overrides:
        _merge(cfg, parse_override(item), "--set")
    return cfg


def build(cfg: dict):
    """Validate every section by constructing the typed configs."""
    gen = GeneratorConfig(**cfg["generator"])
    model = ModelConfig(**cfg["model"])
    loss = LossConfig(**cfg["loss"])
    optim = OptimConfig(**cfg["optim"], schedule=Schedule(**cfg["schedule"]))
    if not (isinstance(cfg["seed"], int) and 0 <= cfg["seed"] < 2**64):
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg['seed']!r}")
    if cfg["eval"]["batch_size"] < 1:
        raise ConfigError("eval.batch_size must be a positive integer")
    for sec in ("train", "eval"):
        if cfg[sec]["split"] not in corpus_io.SPLITS:
            raise ConfigError(f"{sec}.split must be one of {corpus_io.SPLITS}, got {cfg[sec]['split']!r}")
    return gen, model, loss, optim


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- run dirs
def run_dir(args, command: str, material: dict, seed: int) -> tuple[Path, str]:
    digest = hashlib.sha256(canonical({"command": command, **material}).encode()).hexdigest()
    if args.run_dir:
        return Path(args.run_dir), digest
    return Path(args.runs_dir) / f"{command}-{digest[:12]}-seed{seed}", digest


def write_manifest(path: Path, command: str, digest: str, seed: int, material: dict, outputs: dict,
                   summary: dict) -> None:
    manifest = {
        "command": command,
        "derc_version": derc.__version__,
        "corpus_format": {"name": corpus_io.FORMAT_NAME, "version": corpus_io.FORMAT_VERSION},
        "checkpoint_format": {"magic": checkpoint.MAGIC.decode(), "version": checkpoint.FORMAT_VERSION},
        "config_hash": digest,
        "seed": seed,
        **material,
        "outputs": outputs,
        "summary": summary,
    }
    atomic_write_bytes(path / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _load_corpus(path) -> Corpus:
    try:
        return corpus_io.load(path)
    except OSError as exc:
        raise IOError(f"cannot read corpus {path}: {exc.strerror or exc}") from None
    except (gzip.BadGzipFile, EOFError) as exc:
        raise DataError(f"corpus {path} is not a valid gzip file: {exc}") from None


# ---------------------------------------------------------------- commands
def cmd_generate(args, cfg: dict) -> int:
    gen, *_ = build(cfg)
    material = {"config": {"generator": cfg["generator"]}}
    out, digest = run_dir(args, "generate", material, gen.seed)
    corpus = generate(gen, workers=args.workers)
    name = "corpus.jsonl.gz" if args.gzip else "corpus.jsonl"
    corpus_io.save(corpus, out / name)
    utts = list(corpus.utterances())
    summary = {
        "dialogues": len(corpus.dialogues),
        "utterances": len(utts),
        "no_majority_fraction": corpus.no_majority_fraction(),
        "splits": {s: len(corpus.split(s)) for s in corpus_io.SPLITS},
    }
    write_manifest(out, "generate", digest, gen.seed, material, {"corpus": name}, summary)
    print(out / name)
    return EXIT_OK


def _check_dims(model_cfg: ModelConfig, corpus: Corpus, where: str) -> None:
    if corpus.Q != model_cfg.feature_dim:
        raise ConfigError(f"corpus feature dimension Q={corpus.Q} does not match {where} "
                          f"model.feature_dim={model_cfg.feature_dim}")
    if corpus.K != model_cfg.K:
        raise ConfigError(f"corpus class count K={corpus.K} does not match {where} model.K={model_cfg.K}")


def cmd_train(args, cfg: dict) -> int:
    _, model_cfg, loss, optim = build(cfg)
    corpus = _load_corpus(args.corpus)
    _check_dims(model_cfg, corpus, "configured")
    dialogues = corpus.split(cfg["train"]["split"])
    if not dialogues:
        raise ConfigError(f"corpus has no dialogues in split {cfg['train']['split']!r}")
    seed = cfg["seed"]
    material = {
        "config": {k: cfg[k] for k in ("model", "loss", "optim", "schedule", "train", "seed")},
        "inputs": {"corpus_sha256": file_sha256(args.corpus)},
    }
    out, digest = run_dir(args, "train", material, seed)
    result = train(dialogues, loss, optim, model_cfg, RngStream(seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "updates", "loss", "tf_ratio"])
    for r in result.log:
        w.writerow([r.epoch, r.updates, repr(r.loss), repr(r.tf_ratio)])
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "loss_log.csv", buf.getvalue())
    checkpoint.save(result.model, out / "model.ckpt", meta={"loss_mode": loss.mode.value, "seed": seed})
    summary = {"epochs": len(result.log), "updates": result.log[-1].updates,
               "initial_loss": result.log[0].loss, "final_loss": result.log[-1].loss}
    write_manifest(out, "train", digest, seed, material,
                   {"checkpoint": "model.ckpt", "loss_log": "loss_log.csv"}, summary)
    print(out / "model.ckpt")
    return EXIT_OK


def _oracle_predictions(dialogues, which: str) -> list[np.ndarray]:
    out = []
    for d in dialogues:
        if which == "truth":
            if any(u.true_distribution is None for u in d.utterances):
                raise UsageError("--debug-oracle truth needs a corpus with true distributions")
            out.append(np.stack([u.true_distribution for u in d.utterances]))
        else:
            out.append(np.stack([u.soft_label for u in d.utterances]))
    return out


def cmd_evaluate(args, cfg: dict) -> int:
    build(cfg)
    try:
        model, meta = checkpoint.load(args.checkpoint)
    except OSError as exc:
        raise IOError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}") from None
    corpus = _load_corpus(args.corpus)
    _check_dims(model.config, corpus, "checkpoint")
    split = cfg["eval"]["split"]
    dialogues = corpus.split(split)
    if not dialogues:
        raise ConfigError(f"corpus has no dialogues in split {split!r}")
    material = {
        "config": {"eval": cfg["eval"], "debug_oracle": args.debug_oracle},
        "inputs": {"checkpoint_sha256": file_sha256(args.checkpoint), "corpus_sha256": file_sha256(args.corpus)},
    }
    out, digest = run_dir(args, "evaluate", material, int(meta.get("seed", 0)))
    if args.debug_oracle:
        preds = _oracle_predictions(dialogues, args.debug_oracle)
    else:
        preds = predict_dialogues(model, dialogues, cfg["eval"]["batch_size"], workers=args.workers)
    with np.errstate(divide="ignore"):
        report = build_report(dialogues, preds)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "report.txt", report.to_text())
    _write_text(out / "pr_maxp.csv", report.pr_csv("maxp"))
    _write_text(out / "pr_ent.csv", report.pr_csv("ent"))
    _write_text(out / "entropy_trace.csv", report.trace_csv())
    write_manifest(out, "evaluate", digest, int(meta.get("seed", 0)), material,
                   {"report": "report.txt", "pr_points": ["pr_maxp.csv", "pr_ent.csv"],
                    "entropy_trace": "entropy_trace.csv"}, report.summary())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args, cfg: dict) -> int:
    if args.instances < 1:
        raise ConfigError("--instances must be at least 1")
    inject_fault(args.inject_fault)
    try:
        results = gc.run_suite(seed=args.seed, instances=args.instances)
    finally:
        inject_fault(None)
    print(gc.format_table(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# -------------------------------------------------------------------- main
def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="derc", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"derc {derc.__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--config", help="YAML or JSON settings file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting, e.g. --set optim.total_updates=500")
        p.add_argument("--paper-config", action="store_true",
                       help="start from the full-scale architecture (768-dim inputs, 256/4+4/4)")
        if runs:
            p.add_argument("--runs-dir", default="runs", help="parent of the per-run directories")
            p.add_argument("--run-dir", help="write artifacts here instead of the hashed run directory")

    g = sub.add_parser("generate", help="write a synthetic corpus")
    common(g)
    g.add_argument("--gzip", action="store_true", help="gzip the corpus file")
    g.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="train a model on a corpus")
    common(t)
    t.add_argument("--corpus", required=True)

    e = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--debug-oracle", choices=("truth", "soft"),
                   help="replace model output with the true distributions or the soft labels")

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--inject-fault", choices=("tanh",), help="debug hook: corrupt one backward rule")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = None
        if args.command != "gradcheck":
            cfg = load_config(args.config, args.set, args.paper_config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"derc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"derc: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MetricUndefinedError as exc:
        print(f"derc: metric undefined: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (OSError, DataError) as exc:
        print(f"derc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
