"""Command-line entry point: ``fivo estimate|verify|train|sweep|replay``.

Every run writes into its own directory under ``--out`` (named by start
time and config digest) containing CSV/JSON artifacts and a
``manifest.json`` that embeds the effective config and seed, so the run can
be repeated with ``fivo replay --manifest <path>``.

Exit codes: 0 success, 1 a verification assertion failed, 2 usage or
config error, 3 estimator collapse, 4 training aborted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import DegenerateEnsemble, TrainingDiverged, UsageError
from .objectives import estimate_bound
from .oracles import oracle_log_marginal
from .numerics import RngStream
from .suites import SUITES, run_suite
from .trainer import LR_GRID, TrainConfig, lr_grid_search, train

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_COLLAPSE, EXIT_TRAIN = 0, 1, 2, 3, 4
CSV_FORMAT_VERSION = 1
MANIFEST_FORMAT = "fivo.manifest"


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["format_version"] + list(header))
    for r in rows:
        w.writerow([CSV_FORMAT_VERSION] + [_fmt(v) for v in r])
    return buf.getvalue()


class Run:
    """One output directory plus its manifest."""

    def __init__(self, out, command, cfg, seed, jobs):
        self.command, self.cfg, self.seed, self.jobs = command, cfg, seed, jobs
        self.digest = cfgmod.digest(cfg)
        self.started = datetime.now(timezone.utc)
        stamp = self.started.strftime("%Y%m%dT%H%M%S%fZ")
        base = Path(out) / f"{stamp}-{command}-{self.digest[:8]}"
        path, k = base, 1
        while path.exists():
            path, k = Path(f"{base}-{k}"), k + 1
        path.mkdir(parents=True)
        self.dir = path
        self.outputs = []

    def write(self, name, text):
        (self.dir / name).write_text(text, encoding="utf-8")
        self.outputs.append(name)

    def finish(self, status, extra=None):
        doc = {"format": MANIFEST_FORMAT, "format_version": 1, "command": self.command,
               "config": self.cfg, "config_digest": self.digest, "seed": self.seed, "jobs": self.jobs,
               "library_version": _version(), "started": self.started.isoformat(),
               "finished": datetime.now(timezone.utc).isoformat(), "status": status,
               "outputs": list(self.outputs)}
        if extra:
            doc.update(extra)
        # written once and never rewritten
        (self.dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
        return self.dir / "manifest.json"


def _out_dir(args):
    return args.out or os.environ.get("FIVO_OUT") or "runs"


def _jobs(args):
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get("FIVO_JOBS")
    return int(env) if env else 1


# --------------------------------------------------------------------------
# commands


def do_estimate(cfg, out, jobs):
    if "estimate" not in cfg:
        raise cfgmod.ConfigError("missing 'estimate' section", "estimate")
    model = cfgmod.build_model(cfg["model"])
    xs, _ = cfgmod.load_data(cfg, model)
    replicates = cfg["estimate"].get("replicates", 1000)
    seed = cfg["seed"]
    root = RngStream(seed)
    run = Run(out, "estimate", cfg, seed, jobs)
    rows = []
    status = "ok"
    try:
        for s in range(xs.shape[0]):
            x = xs[s]
            try:
                oracle = oracle_log_marginal(model, x).log_marginal
            except UsageError:
                oracle = ""
            for i, (name, N, spec) in enumerate(cfgmod.objective_specs(cfg, model, x)):
                est = estimate_bound(spec, x, replicates, root.split(("estimate", s, i, N)), jobs=jobs)
                rows.append((s, name, N, spec.policy_label(), est.mean, est.std_error, est.replicates, seed,
                             oracle))
    except DegenerateEnsemble:
        status = "collapse"
        raise
    finally:
        run.write("estimates.csv", _csv(["sequence", "objective", "N", "policy", "mean", "se", "replicates",
                                         "seed", "oracle"], rows))
        manifest = run.finish(status)
    return EXIT_OK, manifest


def do_verify(cfg, out, jobs, suite, scale=1.0, offset=0.0):
    seed = cfg["seed"]
    run = Run(out, "verify", cfg, seed, jobs)
    results = run_suite(suite, seed, scale, offset)
    rows = [(a.suite, a.assertion, a.measured, a.threshold, a.claim, "PASS" if a.passed else "FAIL")
            for a in results]
    run.write("report.csv", _csv(["suite", "assertion", "measured", "threshold", "claim", "result"], rows))
    failed = sum(not a.passed for a in results)
    manifest = run.finish("ok" if not failed else "failed",
                          {"suite": suite, "scale": scale, "normalization_offset": offset})
    for a in results:
        print(f"{'PASS' if a.passed else 'FAIL'}  {a.assertion}: {a.measured:.6g} (threshold {a.threshold:g})")
    print(f"{suite}: {len(results) - failed}/{len(results)} assertions passed")
    return (EXIT_FAILED if failed else EXIT_OK), manifest


def _train_config(cfg, lr=None):
    d = dict(cfg.get("train", {}))
    d["seed"] = cfg["seed"]
    if lr is not None:
        d["learning_rate"] = lr
    return TrainConfig.from_dict(d)


def _train_artifacts(run, result):
    run.write("history.csv", result.history.to_csv())
    ckpt = {"model": result.model.to_dict(), "proposal": result.proposal.to_dict(),
            "best_step": result.history.best_step, "best_valid": result.best_valid}
    run.write("checkpoint.json", json.dumps(ckpt, indent=2, sort_keys=True))


def _train_inputs(cfg):
    model = cfgmod.build_model(cfg["model"])
    train_xs, valid_xs = cfgmod.load_data(cfg, model)
    proposal = cfgmod.build_proposal(cfg.get("proposal"), model, train_xs[:1])
    return model, proposal, train_xs, (valid_xs if valid_xs.shape[0] else None)


def do_train(cfg, out, jobs):
    model, proposal, train_xs, valid_xs = _train_inputs(cfg)
    tc = _train_config(cfg)
    run = Run(out, "train", cfg, cfg["seed"], jobs)
    try:
        result = train(model, proposal, train_xs, tc, valid_xs)
    except TrainingDiverged as e:
        if e.history is not None:
            run.write("history.csv", e.history.to_csv())
        manifest = run.finish("diverged", {"error": str(e)})
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_TRAIN, manifest
    _train_artifacts(run, result)
    return EXIT_OK, run.finish("ok", {"train_config": tc.to_dict()})


def do_sweep(cfg, out, jobs):
    model, proposal, train_xs, valid_xs = _train_inputs(cfg)
    grid = cfg.get("sweep", {}).get("learning_rates", list(LR_GRID))
    sweep = Run(out, "sweep", cfg, cfg["seed"], jobs)
    try:
        results, best = lr_grid_search(model, proposal, train_xs, _train_config(cfg), valid_xs, grid)
    except TrainingDiverged as e:
        manifest = sweep.finish("diverged", {"error": str(e)})
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_TRAIN, manifest
    runs = []
    for i, (lr, res) in enumerate(zip(grid, results)):
        cell = dict(cfg)
        cell["train"] = dict(cfg.get("train", {}), learning_rate=lr)
        run = Run(sweep.dir, "train", cell, cfg["seed"], jobs)
        _train_artifacts(run, res)
        m = run.finish("ok", {"selected": i == best, "train_config": res.config.to_dict()})
        runs.append({"learning_rate": lr, "best_valid": res.best_valid, "best_step": res.history.best_step,
                     "selected": i == best, "run_dir": run.dir.name, "manifest": str(m.relative_to(sweep.dir))})
    summary = {"selected_learning_rate": grid[best], "selection": "argmax validation bound", "runs": runs}
    sweep.write("summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK, sweep.finish("ok")


def do_replay(manifest_path, out, jobs_override):
    doc = json.loads(Path(manifest_path).read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise cfgmod.ConfigError("not a run manifest", "manifest")
    cfg = cfgmod.validate(doc["config"])
    jobs = doc.get("jobs", 1) if jobs_override is None else jobs_override
    command = doc["command"]
    if command == "estimate":
        return do_estimate(cfg, out, jobs)
    if command == "verify":
        return do_verify(cfg, out, jobs, doc["suite"], doc.get("scale", 1.0), doc.get("normalization_offset", 0.0))
    if command == "train":
        return do_train(cfg, out, jobs)
    if command == "sweep":
        return do_sweep(cfg, out, jobs)
    raise cfgmod.ConfigError(f"cannot replay command {command!r}", "manifest.command")


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="fivo", description="Particle-filter variational bounds: "
                                "estimation, verification and training.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="JSON experiment config")
        sp.add_argument("--out", help="output root (env FIVO_OUT, default ./runs)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--jobs", type=int, help="worker threads (env FIVO_JOBS, default 1)")

    common(sub.add_parser("estimate", help="bound estimates with standard errors"))
    v = sub.add_parser("verify", help="run a verification suite")
    common(v, needs_config=False)
    v.add_argument("--suite", required=True, choices=SUITES)
    v.add_argument("--scale", type=float, default=1.0, help="multiplier on replicate counts")
    v.add_argument("--test-corrupt-normalization", type=float, default=0.0, help=argparse.SUPPRESS)
    common(sub.add_parser("train", help="train on one objective"))
    common(sub.add_parser("sweep", help="learning-rate grid search"))
    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out")
    r.add_argument("--jobs", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        out = _out_dir(args)
        if args.command == "replay":
            code, manifest = do_replay(args.manifest, out, args.jobs)
        else:
            jobs = _jobs(args)
            if jobs < 1:
                raise cfgmod.ConfigError("must be at least 1", "--jobs")
            if args.config:
                cfg = cfgmod.load_config(args.config)
            else:
                cfg = {"model": {"kind": "lgssm"}}
            cfg = cfgmod.with_seed(cfg, args.seed)
            if args.command == "estimate":
                code, manifest = do_estimate(cfg, out, jobs)
            elif args.command == "verify":
                code, manifest = do_verify(cfg, out, jobs, args.suite, args.scale,
                                           args.test_corrupt_normalization)
            elif args.command == "train":
                code, manifest = do_train(cfg, out, jobs)
            else:
                code, manifest = do_sweep(cfg, out, jobs)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateEnsemble as e:
        print(f"estimator collapse: {e}", file=sys.stderr)
        return EXIT_COLLAPSE
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"manifest: {manifest}")
    return code


if __name__ == "__main__":
    sys.exit(main())
