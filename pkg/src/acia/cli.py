"""Command line entry point: gen, train, eval, verify, report, rerun.

Exit codes: 0 success, 1 configuration error, 2 verification failure,
3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
import tempfile
from typing import Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .causal_space import build_finite_scm
from .datasets import GenConfig, dataset_to_json, generate, load_dataset, save_dataset
from .errors import AciaError, ConfigError, DivergenceDetected, ParseError, ValidationError
from .intervention import DataIntervention
from .model import load_model, save_model
from .trainer import TrainConfig, evaluate, train
from .verify import run_suite

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3
SEED_ENV = "ACIA_SEED"


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    lli_mode: str = "between"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    gen: Optional[GenConfig] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    intervention: Optional[DataIntervention] = None
    eval: EvalConfig = Field(default_factory=EvalConfig)


def parse_config(data) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except pydantic.ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ValidationError(path, err["msg"]) from None


def load_config(path) -> ExperimentConfig:
    """Parse and validate a JSON experiment config; defaults are filled in."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seed(flag: Optional[int], default: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return default


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def write_manifest(out: str, command: str, config: dict, seed: int, inputs: list[str], started: str) -> dict:
    """Sidecar ``<out>.manifest.json``: everything needed to re-run the command."""
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [[p, file_digest(p)] for p in inputs],
        "outputs": {out: file_digest(out)},
        "started": started,
        "finished": _now(),
    }
    with open(out + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _embedded(command: str, config: dict, seed: int, inputs: dict) -> dict:
    # Timestamp-free so artifact bytes depend only on configs, seeds and inputs.
    return {"tool_version": __version__, "command": command, "config": config, "seed": seed, "inputs": inputs}


# --- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    if cfg.gen is None:
        raise ValidationError("gen", "the gen section is required")
    seed = resolve_seed(args.seed, cfg.seed)
    ds = generate(cfg.gen, seed)
    config = dump_config(cfg)
    manifest = _embedded("gen", config, seed, {})
    if args.out.endswith(".json"):
        doc = dataset_to_json(ds)
        doc["header"]["manifest"] = manifest
        with open(args.out, "w") as fh:
            json.dump(doc, fh, sort_keys=True)
    else:
        save_dataset(ds, args.out, manifest)
    write_manifest(args.out, "gen", config, seed, [], started)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def _load_all(paths):
    return [load_dataset(p) for p in paths]


def cmd_train(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    seed = resolve_seed(args.seed, cfg.train.seed)
    tcfg = cfg.train.model_copy(update={"seed": seed})
    config = dump_config(cfg.model_copy(update={"train": tcfg}))
    datasets = _load_all(args.data)
    try:
        model, history = train(tcfg, datasets, cfg.intervention)
    except DivergenceDetected as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    inputs = {p: file_digest(p) for p in args.data}
    extra = {
        "manifest": _embedded("train", config, seed, inputs),
        "intervention": None if cfg.intervention is None else cfg.intervention.model_dump(mode="json"),
        "family": datasets[0].family,
    }
    save_model(model, args.out, extra)
    hist_path = args.history or args.out + ".history.jsonl"
    with open(hist_path, "w") as fh:
        fh.write(history.jsonl())
    write_manifest(args.out, "train", config, seed, list(args.data), started)
    print(f"trained {len(history.steps)} steps, final objective {history.steps[-1].total if history.steps else float('nan'):.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    model, header = load_model(args.model)
    cfg = load_config(args.config) if args.config else None
    spec = cfg.intervention if cfg and cfg.intervention else None
    if spec is None and header.get("intervention"):
        spec = DataIntervention.model_validate(header["intervention"])
    ecfg = cfg.eval if cfg else EvalConfig()
    seed = resolve_seed(args.seed, ecfg.seed)
    ds = load_dataset(args.data)
    report = evaluate(model, ds, spec, seed, ecfg.lli_mode)
    config = {"eval": ecfg.model_dump(), "intervention": None if spec is None else spec.model_dump(mode="json")}
    doc = {
        "report": report.to_dict(),
        "per_env": report.per_env,
        "position_error": report.position_error,
        "manifest": _embedded("eval", config, seed, {args.model: file_digest(args.model), args.data: file_digest(args.data)}),
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    write_manifest(args.out, "eval", config, seed, [args.model, args.data], started)
    r = report
    print(f"accuracy={r.accuracy:.4f} ei={r.ei:.4f} lli={r.lli:.4f} ir={r.ir:.4f} n={r.n}")
    return EXIT_OK


def cmd_verify(args) -> int:
    extra = []
    for path in args.scm or []:
        try:
            with open(path) as fh:
                spec = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: {exc}") from None
        build_finite_scm(spec)
        extra.append(spec)
    report = run_suite(extra, n_random=args.n_random, seed=resolve_seed(args.seed, 0))
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"verify: {'pass' if report['passed'] else 'FAIL'} ({report['n_scms']} SCMs, {report['seconds']:.2f}s)")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


REPORT_COLUMNS = ["run", "family", "Acc", "EI", "LLI", "IR"]


def cmd_report(args) -> int:
    rows, versions = [], set()
    for path in args.inputs:
        with open(path) as fh:
            doc = json.load(fh)
        versions.add(doc.get("manifest", {}).get("tool_version"))
        r = doc["report"]
        rows.append([os.path.splitext(os.path.basename(path))[0], r["family"], r["accuracy"], r["ei"], r["lli"], r["ir"]])
    if len(versions) > 1 and not args.force:
        raise ConfigError(f"eval files come from different tool versions {sorted(map(str, versions))}; use --force")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_rerun(args) -> int:
    """Re-execute a recorded gen/train/eval run and compare output digests."""
    with open(args.manifest) as fh:
        m = json.load(fh)
    (orig_out, digest), = m["outputs"].items()
    inputs = [p for p, _ in m["inputs"]]
    for p, d in m["inputs"]:
        if file_digest(p) != d:
            print(f"input {p} changed since the recorded run", file=sys.stderr)
            return EXIT_VERIFY
    with tempfile.TemporaryDirectory() as tmp:
        argv = [m["command"]]
        if m["command"] in ("gen", "train"):
            cfg_path = os.path.join(tmp, "config.json")
            with open(cfg_path, "w") as fh:
                json.dump(m["config"], fh)
            argv += ["--config", cfg_path]
        if m["command"] == "train":
            argv += ["--data", *inputs]
        elif m["command"] == "eval":
            cfg_path = os.path.join(tmp, "config.json")
            with open(cfg_path, "w") as fh:
                json.dump({"eval": m["config"]["eval"], "intervention": m["config"]["intervention"]}, fh)
            argv += ["--config", cfg_path, "--model", inputs[0], "--data", inputs[1]]
        argv += ["--seed", str(m["seed"]), "--out", args.out]
        code = main(argv)
    if code != EXIT_OK:
        return code
    same = file_digest(args.out) == digest
    print(f"rerun of {orig_out}: {'identical' if same else 'DIFFERENT'}")
    return EXIT_OK if same else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acia", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset file")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model, write checkpoint and history")
    t.add_argument("--config", required=True)
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the kernel and intervention property suite")
    v.add_argument("--scm", action="append")
    v.add_argument("--out", required=True)
    v.add_argument("--n-random", type=int, default=20)
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="aggregate eval files into a CSV grid")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)

    rr = sub.add_parser("rerun", help="re-run a recorded command from its manifest")
    rr.add_argument("--manifest", required=True)
    rr.add_argument("--out", required=True)
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AciaError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
