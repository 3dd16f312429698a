"""Experiment configuration: schema validation and construction of models, proposals and data."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import UsageError
from .models import (ConjugateIndependenceModel, ExactPosteriorProposal, LearnedGaussianProposal,
                     LgssmParams, LinearGaussianSSM, NonlinearToySSM, OptimalFilterProposal,
                     PriorProposal, SmoothingProposalWrapper, as_observations)
from .numerics import RngStream
from .objectives import AisSchedule, MisMixture, ObjectiveSpec
from .smc import ResamplingPolicy

FORMAT_VERSION = 1


class ConfigError(UsageError):
    """Configuration rejected; ``field`` names the offending location."""

    def __init__(self, message, field=""):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


def schema():
    text = resources.files("fivo").joinpath("schemas/config.schema.json").read_text()
    return json.loads(text)


def _field_path(err):
    out = ""
    for p in err.absolute_path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def validate(cfg):
    validator = jsonschema.Draft202012Validator(schema())
    err = jsonschema.exceptions.best_match(validator.iter_errors(cfg))
    if err is not None:
        raise ConfigError(err.message, _field_path(err))
    return cfg


def load_config(path):
    """Read, validate and normalize a JSON config. Data paths become absolute."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", "config") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", "config") from None
    validate(cfg)
    data = cfg.get("data", {})
    for key in ("path", "valid_path"):
        if key in data and not os.path.isabs(data[key]):
            data[key] = str((path.parent / data[key]).resolve())
    return cfg


def digest(cfg) -> str:
    """SHA-256 of the canonical JSON form."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def with_seed(cfg, seed):
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    return cfg


def build_model(spec):
    kind = spec["kind"]
    params = spec.get("params", {})
    try:
        if kind == "conjugate":
            return ConjugateIndependenceModel(**params)
        lp = LgssmParams(**{k: v for k, v in params.items()})
        return LinearGaussianSSM(lp) if kind == "lgssm" else NonlinearToySSM(lp)
    except TypeError as e:
        raise ConfigError(str(e), "model.params") from None


def build_proposal(spec, model, x=None, where="proposal"):
    kind = (spec or {"kind": "bootstrap"})["kind"]
    if kind == "bootstrap":
        return PriorProposal(model)
    if kind == "learned":
        return LearnedGaussianProposal(model, spec.get("params"))
    if kind == "exact_posterior" and isinstance(model, ConjugateIndependenceModel):
        return ExactPosteriorProposal(model)
    if not isinstance(model, LinearGaussianSSM):
        raise ConfigError(f"proposal {kind!r} needs the lgssm model", f"{where}.kind")
    base = OptimalFilterProposal(model.lgssm)
    if kind == "optimal":
        return base
    # smoothing and exact_posterior: the optimal filter times backward messages
    if x is None or as_observations(x).shape[0] != 1:
        raise ConfigError(f"proposal {kind!r} needs a single sequence", f"{where}.kind")
    return SmoothingProposalWrapper.for_lgssm(base, model.lgssm, x)


def _read_sequences(path, where):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"dataset file {path} not found", where)
    try:
        if p.suffix == ".json":
            doc = json.loads(p.read_text())
            arr = np.asarray(doc["sequences"] if isinstance(doc, dict) else doc, dtype=float)
        else:
            arr = np.loadtxt(p, delimiter=",", ndmin=2)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"cannot read sequences from {path}: {e}", where) from None
    return as_observations(arr)


def load_data(cfg, model):
    """``(train, valid)`` sequence arrays; ``valid`` may have zero rows."""
    data = cfg.get("data", {"kind": "synthetic"})
    if data["kind"] == "file":
        if "path" not in data:
            raise ConfigError("file data needs a path", "data.path")
        train = _read_sequences(data["path"], "data.path")
        valid = (_read_sequences(data["valid_path"], "data.valid_path") if "valid_path" in data
                 else np.zeros((0, train.shape[1])))
        return train, valid
    gen = build_model(data["generator"]) if "generator" in data else model
    T = data.get("T", 10)
    n, nv = data.get("n_sequences", 1), data.get("n_valid", 0)
    x, _ = gen.sample(T, RngStream(data.get("seed", 0)).split("data"), n + nv)
    return x[:n], x[n:]


def _policy(spec):
    return ResamplingPolicy.from_dict(spec) if spec else ResamplingPolicy.ess()


def objective_specs(cfg, model, x):
    """``(label, N, ObjectiveSpec)`` for every objective and particle count in the config."""
    out = []
    for i, o in enumerate(cfg["estimate"]["objectives"]):
        where = f"estimate.objectives[{i}]"
        name = o["name"]
        Ns = o.get("N", 1)
        Ns = Ns if isinstance(Ns, list) else [Ns]
        proposal = build_proposal(cfg.get("proposal"), model, x)
        for N in Ns:
            try:
                if name == "ais":
                    sch = o.get("schedule", {})
                    if "betas" in sch:
                        schedule = AisSchedule(tuple(sch["betas"]), sch.get("step_size"), sch.get("n_steps", 1))
                    else:
                        schedule = AisSchedule.linear(sch.get("n_intermediate", 10), sch.get("step_size"),
                                                      sch.get("n_steps", 1))
                    spec = ObjectiveSpec("ais", model, proposal, 1, schedule=schedule)
                elif name == "mis":
                    comps = [build_proposal(c, model, x, f"{where}.components[{k}]")
                             for k, c in enumerate(o.get("components", [cfg.get("proposal")]))]
                    weights = o.get("weights", [1.0 / len(comps)] * len(comps))
                    spec = ObjectiveSpec("mis", model, None, len(comps), mixture=MisMixture(comps, weights))
                else:
                    spec = ObjectiveSpec(name, model, proposal, N, _policy(o.get("policy")),
                                         resampler=o.get("resampler", "multinomial"))
            except ConfigError:
                raise
            except UsageError as e:
                raise ConfigError(str(e), where) from None
            out.append((name, spec.n_particles, spec))
    return out
