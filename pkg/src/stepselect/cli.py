"""Command-line front end: ``stepselect simulate | fit | explain | bench | config``.

Settings resolve in three layers: built-in defaults, then an optional strict
JSON config (``--config``), then explicit flags.  Exit codes are stable:

====  ==========================================
0     success
2     configuration or argument error
3     dataset failed validation
4     fit did not converge
5     model and data or command are incompatible
6     bench completed fewer than 90% of repetitions
====  ==========================================
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .baselines import (ConvergenceError, FormulaSpec, GlmFitter, RankDeficientError,
                        SplineFitter, SplineSettings, fit_clogit_glm, fit_clogit_spline,
                        model_from_dict, model_to_dict, wald_inference)
from .core import DatasetError, StrataDataset, read_csv, validate_dataset, write_csv
from .net import (ArchSpec, DnnFitter, EmbeddingSpec, TrainConfig, TrainingDiverged,
                  build_network, network_from_dict, network_to_dict, train)
from .simkit import (MovementKernel, SelectionSpec, SocialSpec, simulate_selection,
                     simulate_social, truth_document, write_truth)
from .svgplot import PALETTE, Figure

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE, EXIT_CAPABILITY, EXIT_SHORTFALL = 0, 2, 3, 4, 5, 6

# (type, default, help); "threads" 0 means available parallelism
SCHEMA: dict[str, dict[str, tuple[str, Any, str]]] = {
    "common": {
        "seed": ("int", 0, "random seed"),
        "output": ("str", ".", "output directory"),
        "threads": ("int", 0, "worker processes; 0 uses all available cores"),
    },
    "simulate": {
        "scenario": ("int", 1, "experiment design 1-5"),
        "beta": ("float", 1.0, "true slope (scenario 1)"),
        "strata": ("int", 2000, "number of strata (scenarios 1-4)"),
        "controls": ("int", 9, "control candidates per stratum"),
        "groups": ("int?", None, "number of groups; default 4 (scenario 4) or 3 (scenario 5)"),
        "truth": ("str", "hump", "nonlinear truth of scenario 2: identity, hump, wiggle, zero"),
        "steps": ("int", 200, "steps per individual (scenario 5)"),
        "null_control": ("bool", False, "give every group the same response (scenarios 4, 5)"),
    },
    "fit": {
        "data": ("str", "data.csv", "dataset CSV"),
        "model": ("str", "dnn", "dnn, glm or spline"),
        "formula": ("str?", None, "glm terms, e.g. 'x1 + x2 + x1:x2'; default all main effects"),
        "feature": ("str?", None, "spline covariate; default the first"),
        "hidden": ("intlist", [32, 32], "hidden layer widths, comma separated"),
        "activation": ("str", "relu", "relu, selu or tanh"),
        "lr": ("float", 0.01, "learning rate"),
        "epochs": ("int", 150, "training epochs"),
        "batch_strata": ("int", 100, "strata per minibatch"),
        "optimizer": ("str", "adam", "adam or sgd"),
        "l2": ("float", 0.0, "L2 penalty on weights"),
        "l1": ("float", 0.0, "L1 penalty on weights"),
        "dropout": ("float", 0.0, "dropout rate of hidden layers"),
        "embed": ("str?", None, "embedding TARGET:DIM[:WIRING], e.g. individual:2"),
    },
    "explain": {
        "data": ("str", "data.csv", "dataset CSV"),
        "model": ("str", "model.json", "model JSON written by fit"),
        "bootstrap": ("int", 20, "bootstrap replicates for ace; 0 skips inference"),
        "feature": ("str?", None, "covariate for ale; default the first"),
        "bins": ("int", 20, "ale quantile bins"),
        "permutations": ("int", 10, "permutations per importance score"),
        "epsilon": ("float?", None, "finite-difference step; default 0.1 SD per covariate"),
        "svg": ("bool", False, "also render an SVG plot"),
        "truth": ("str?", None, "truth JSON whose group labels colour the biplot"),
    },
    "bench": {
        "scenario": ("str", "all", "scenario 1-5 or all"),
        "reps": ("int", 100, "repetitions per scenario"),
        "strata": ("int", 0, "strata per dataset; 0 uses the scenario default"),
        "bootstrap": ("int", 20, "bootstrap replicates in scenario 1; 0 skips inference"),
        "truth": ("str", "hump", "nonlinear truth of scenario 2"),
        "null_control": ("bool", False, "shared response in scenarios 4 and 5"),
        "save_artifacts": ("bool", False, "keep per-repetition datasets and models"),
    },
}


class ConfigError(Exception):
    pass


class CliExit(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code


def defaults() -> dict:
    return {sec: {k: v[1] for k, v in keys.items()} for sec, keys in SCHEMA.items()}


# ---------------------------------------------------------------------- #
# Config parsing
# ---------------------------------------------------------------------- #


def _check_type(kind: str, value: Any, where: str) -> Any:
    if kind.endswith("?"):
        if value is None:
            return None
        kind = kind[:-1]
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "str": isinstance(value, str),
        "bool": isinstance(value, bool),
        "intlist": isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool)
                                                  for v in value),
    }[kind]
    if not ok:
        raise ConfigError(f"{where}: expected {kind}, got {json.dumps(value)}")
    return float(value) if kind == "float" else value


def _line_of(text: str, key: str) -> int:
    needle = json.dumps(key)
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return 0


def load_config(path: str | Path) -> dict:
    """Read a strict JSON config: top-level sections of ``SCHEMA``, known keys only."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    out: dict = {}
    for sec, body in doc.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{path}:{_line_of(text, sec)}: unknown key {sec!r} "
                              f"(sections: {', '.join(SCHEMA)})")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: {sec!r} must be an object")
        out[sec] = {}
        for k, v in body.items():
            if k not in SCHEMA[sec]:
                raise ConfigError(f"{path}:{_line_of(text, k)}: unknown key '{sec}.{k}'")
            out[sec][k] = _check_type(SCHEMA[sec][k][0], v, f"{path}:{_line_of(text, k)}: '{sec}.{k}'")
    return out


def resolve(section: str, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    conf = load_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for sec in ("common", section):
        for k, (_, default, _) in SCHEMA[sec].items():
            v = default
            if k in conf.get(sec, {}):
                v = conf[sec][k]
            flag = getattr(args, k, None)
            if flag is not None:
                v = flag
            out[k] = v
    if out["threads"] == 0:
        out["threads"] = os.cpu_count() or 1
    return out


# ---------------------------------------------------------------------- #
# Parser
# ---------------------------------------------------------------------- #


def _fmt_default(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "off" if not v else "on"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


_TYPES = {"int": int, "float": float, "str": str, "intlist": _int_list}


def _add(p: argparse.ArgumentParser, section: str, key: str, *flags: str) -> None:
    kind, default, text = SCHEMA[section][key]
    names = flags or (f"--{key.replace('_', '-')}",)
    help_ = f"{text} (default: {_fmt_default(default)})"
    if kind == "bool":
        p.add_argument(*names, dest=key, action="store_const", const=True, default=None, help=help_)
    else:
        p.add_argument(*names, dest=key, type=_TYPES[kind.rstrip("?")], default=None, help=help_)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=88, max_help_position=30)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="strict JSON config file (default: none)")
    _add(p, "common", "seed")
    _add(p, "common", "output", "-o", "--output")
    _add(p, "common", "threads")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stepselect", formatter_class=_formatter,
                                 description="Simulate, fit and explain step-selection models.")
    ap.add_argument("--version", action="version", version=f"stepselect {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", formatter_class=_formatter,
                       help="write a simulated dataset and its truth sidecar",
                       description="Write data.csv and truth.json for one simulated dataset.")
    _common(p)
    for k in SCHEMA["simulate"]:
        _add(p, "simulate", k)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", formatter_class=_formatter, help="fit a model to a dataset",
                       description="Fit a network, conditional-logit or spline model; write "
                                   "model.json, trace.csv and (glm) wald.csv.")
    _common(p)
    for k in SCHEMA["fit"]:
        _add(p, "fit", k)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("explain", formatter_class=_formatter, help="explain a fitted model",
                       description="Effect estimates, importance scores, ALE curves and "
                                   "embedding bi-plots for a fitted model.")
    actions = p.add_subparsers(dest="action", required=True, metavar="ACTION")
    for name, text in (("ace", "average conditional effects with bootstrap inference"),
                       ("importance", "single-feature permutation importance"),
                       ("interactions", "pairwise permutation interaction importance"),
                       ("ale", "accumulated local effect curve of one covariate"),
                       ("biplot", "embedding positions with back-projected effect arrows")):
        q = actions.add_parser(name, formatter_class=_formatter, help=text, description=text)
        _common(q)
        for k in SCHEMA["explain"]:
            _add(q, "explain", k)
        q.set_defaults(func=cmd_explain)

    p = sub.add_parser("bench", formatter_class=_formatter, help="run simulation experiments",
                       description="Run repetitions of the simulation experiments and write "
                                   "per-scenario results plus summary.csv.")
    _common(p)
    for k in SCHEMA["bench"]:
        _add(p, "bench", k)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("config", formatter_class=_formatter, help="inspect configuration",
                       description="Inspect configuration.")
    cs = p.add_subparsers(dest="action", required=True, metavar="ACTION")
    q = cs.add_parser("show-defaults", formatter_class=_formatter,
                      help="print every default as a JSON config",
                      description="Print every default as a JSON config.")
    q.set_defaults(func=cmd_show_defaults)
    return ap


def help_texts() -> dict[str, str]:
    """``--help`` output of every command, keyed by command path."""
    ap = build_parser()
    out = {"stepselect": ap.format_help()}

    def walk(parser, path):
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                for name, child in action.choices.items():
                    key = f"{path} {name}"
                    out[key] = child.format_help()
                    walk(child, key)

    walk(ap, "stepselect")
    return out


# ---------------------------------------------------------------------- #
# Helpers
# ---------------------------------------------------------------------- #


def _dump_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _r(v) -> str:
    return repr(float(v))


def _bound(name: str, value, low, high=None) -> None:
    if value < low or (high is not None and value > high):
        rng = f">= {low}" if high is None else f"in [{low}, {high}]"
        raise CliExit(EXIT_CONFIG, f"--{name.replace('_', '-')} must be {rng} (got {value})")


def _load_data(path: str) -> StrataDataset:
    try:
        d = read_csv(path)
    except OSError as e:
        raise CliExit(EXIT_CONFIG, f"{path}: {e.strerror}") from None
    except DatasetError as e:
        raise CliExit(EXIT_DATA, f"{path}: {e}") from None
    n_ind = int(d.individual_id.max()) + 1 if d.individual_id is not None else 0
    n_opp = int(d.opponent_id.max()) + 1 if d.opponent_id is not None else 0
    d = replace(d, n_individuals=n_ind, n_opponents=n_opp)
    report = validate_dataset(d)
    if not report.ok:
        raise CliExit(EXIT_DATA, f"{path}: dataset failed validation\n{report}")
    return d


# ---------------------------------------------------------------------- #
# simulate
# ---------------------------------------------------------------------- #


def _scenario4_spec(seed: int, groups: int, strata: int, controls: int, null: bool) -> SelectionSpec:
    from .bench import scenario4_truth
    return SelectionSpec(20, (0.0,) * 20, group_betas=scenario4_truth(seed, groups, null),
                         individuals_per_group=5, n_controls=controls, n_strata=strata)


def cmd_simulate(args) -> int:
    c = resolve("simulate", args)
    _bound("scenario", c["scenario"], 1, 5)
    _bound("strata", c["strata"], 1)
    _bound("controls", c["controls"], 1)
    _bound("steps", c["steps"], 1)
    k, seed = c["scenario"], c["seed"]
    groups = c["groups"] if c["groups"] is not None else (3 if k == 5 else 4)
    _bound("groups", groups, 2)
    try:
        if k == 1:
            spec = SelectionSpec(1, (c["beta"],), n_controls=c["controls"], n_strata=c["strata"])
        elif k == 2:
            spec = SelectionSpec(1, (1.0,), nonlinear_transforms=((0, c["truth"]),),
                                 n_controls=c["controls"], n_strata=c["strata"])
        elif k == 3:
            from .bench import SCENARIO3_INTERACTIONS, SCENARIO3_MAINS
            spec = SelectionSpec(9, SCENARIO3_MAINS, SCENARIO3_INTERACTIONS,
                                 n_controls=c["controls"], n_strata=c["strata"])
        elif k == 4:
            spec = _scenario4_spec(seed, groups, c["strata"], c["controls"], c["null_control"])
        else:
            if c["null_control"]:
                effects = (0.0,) * groups
            elif groups == 3:
                effects = (0.0, -2.0, 2.0)
            else:
                effects = tuple(float(v) for v in np.linspace(-2.0, 2.0, groups))
            spec = SocialSpec(groups, 5, effects, kernel=MovementKernel(), n_steps=c["steps"],
                              n_controls=c["controls"])
        d = simulate_social(spec, seed) if k == 5 else simulate_selection(spec, seed)
    except (ValueError, KeyError) as e:
        raise CliExit(EXIT_CONFIG, f"invalid simulation settings: {e}") from None
    out = Path(c["output"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(d, out / "data.csv")
    write_truth(out / "truth.json", truth_document(spec, seed, d))
    print(f"wrote {out / 'data.csv'} ({d.n_strata} strata, {d.n_records} rows) and {out / 'truth.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------- #
# fit
# ---------------------------------------------------------------------- #


def parse_embed(text: str, d: StrataDataset) -> EmbeddingSpec:
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise CliExit(EXIT_CONFIG, f"--embed expects TARGET:DIM[:WIRING], got {text!r}")
    target = parts[0]
    if target not in ("individual", "opponent"):
        raise CliExit(EXIT_CONFIG, f"--embed target must be individual or opponent, got {target!r}")
    try:
        dim = int(parts[1])
    except ValueError:
        raise CliExit(EXIT_CONFIG, f"--embed dimension must be an integer, got {parts[1]!r}") from None
    if d.ids_for(target) is None:
        raise CliExit(EXIT_CAPABILITY, f"--embed {target}: the dataset has no {target} ids")
    wiring = parts[2] if len(parts) == 3 else "concat"
    try:
        return EmbeddingSpec(d.vocab_for(target), dim, target, wiring)
    except ValueError as e:
        raise CliExit(EXIT_CONFIG, f"--embed: {e}") from None


def cmd_fit(args) -> int:
    c = resolve("fit", args)
    if c["model"] not in ("dnn", "glm", "spline"):
        raise CliExit(EXIT_CONFIG, f"--model must be dnn, glm or spline (got {c['model']!r})")
    d = _load_data(c["data"])
    out = Path(c["output"])
    seed = c["seed"]
    try:
        if c["model"] == "dnn":
            emb = parse_embed(c["embed"], d) if c["embed"] else None
            try:
                arch = ArchSpec(d.n_features, tuple(c["hidden"]), c["activation"], emb,
                                c["dropout"], c["l2"], c["l1"])
                cfg = TrainConfig(c["epochs"], c["lr"], c["batch_strata"], c["optimizer"], seed)
            except ValueError as e:
                raise CliExit(EXIT_CONFIG, str(e)) from None
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                net, trace = train(build_network(arch, seed), d, cfg)
            doc = network_to_dict(net)
            doc["feature_names"] = list(d.feature_names)
            doc["fit"] = {"train": asdict(cfg), "init_seed": seed}
            _dump_json(out / "model.json", doc)
            _write_csv(out / "trace.csv", ["epoch", "train_nll"],
                       [[i + 1, _r(v)] for i, v in enumerate(trace.train_nll)])
            print(f"trained {net.n_params} parameters for {len(trace)} epochs; "
                  f"final NLL {trace.train_nll[-1]:.4f}")
        elif c["model"] == "glm":
            try:
                f = FormulaSpec.parse(c["formula"], d.feature_names) if c["formula"] else None
            except ValueError as e:
                raise CliExit(EXIT_CONFIG, f"--formula: {e}") from None
            fit = fit_clogit_glm(d, f)
            _dump_json(out / "model.json", model_to_dict(fit))
            _write_csv(out / "trace.csv", ["n_iterations", "loglik", "gradient_norm", "converged"],
                       [[fit.n_iterations, _r(fit.loglik), _r(fit.gradient_norm), int(fit.converged)]])
            if not fit.converged:
                raise ConvergenceError(f"Newton iterations did not converge "
                                       f"(gradient norm {fit.gradient_norm:.3g})")
            rows = wald_inference(fit)
            _write_csv(out / "wald.csv", ["term", "estimate", "se", "z", "p_value", "ci_low", "ci_high"],
                       [[w.term, _r(w.estimate), _r(w.se), _r(w.z), _r(w.p_value), _r(w.ci_low),
                         _r(w.ci_high)] for w in rows])
            for w in rows:
                print(f"{w.term:>16s} {w.estimate:9.4f} (SE {w.se:.4f}, p={w.p_value:.3g})")
        else:
            feature = c["feature"] if c["feature"] is not None else 0
            try:
                j = d.feature_index(feature)
            except (KeyError, ValueError, IndexError) as e:
                raise CliExit(EXIT_CONFIG, f"--feature: {e}") from None
            fit = fit_clogit_spline(d, j, SplineSettings(seed=seed))
            _dump_json(out / "model.json", model_to_dict(fit))
            _write_csv(out / "trace.csv", ["penalty", "cv_nll"],
                       [[_r(k), _r(v)] for k, v in sorted(fit.cv_nll.items())])
            if not fit.converged:
                raise ConvergenceError("penalized Newton iterations did not converge")
            print(f"spline on {d.feature_names[j]}: penalty {fit.penalty:g}")
    except (ConvergenceError, TrainingDiverged) as e:
        raise CliExit(EXIT_CONVERGENCE, f"fit did not converge: {e}") from None
    except RankDeficientError as e:
        raise CliExit(EXIT_DATA, f"design is rank deficient: {e}") from None
    return EXIT_OK


# ---------------------------------------------------------------------- #
# explain
# ---------------------------------------------------------------------- #


def load_model_document(path: str) -> tuple[Any, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CliExit(EXIT_CONFIG, f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise CliExit(EXIT_CONFIG, f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    kind = doc.get("kind") if isinstance(doc, dict) else None
    try:
        if kind == "dnn":
            return network_from_dict(doc), doc
        if kind in ("glm", "spline"):
            return model_from_dict(doc), doc
    except (KeyError, TypeError, ValueError) as e:
        raise CliExit(EXIT_CONFIG, f"{path}: malformed {kind} model: {e}") from None
    raise CliExit(EXIT_CAPABILITY, f"{path}: unknown model kind {kind!r}")


def _check_compatible(model, doc: dict, d: StrataDataset) -> None:
    n = model.arch.n_features if doc["kind"] == "dnn" else len(model.feature_names)
    if n != d.n_features:
        raise CliExit(EXIT_CAPABILITY, f"model expects {n} covariates, dataset has {d.n_features}")
    names = doc.get("feature_names")
    if names is not None and tuple(names) != tuple(d.feature_names):
        raise CliExit(EXIT_CAPABILITY, f"model covariates {names} do not match dataset "
                                       f"covariates {list(d.feature_names)}")
    emb = model.arch.embedding if doc["kind"] == "dnn" else None
    if emb is not None:
        ids = d.ids_for(emb.target)
        if ids is None:
            raise CliExit(EXIT_CAPABILITY, f"model embeds {emb.target} ids but the dataset has none")
        if ids.max() >= emb.vocab_size:
            raise CliExit(EXIT_CAPABILITY, f"dataset {emb.target} id {int(ids.max())} exceeds the "
                                           f"model's embedding table of {emb.vocab_size}")


def _fitter_for(model, doc: dict, seed: int):
    if doc["kind"] == "glm":
        return GlmFitter(model.formula)
    if doc["kind"] == "spline":
        return SplineFitter(model.feature, SplineSettings(seed=seed))
    fit = doc.get("fit")
    if fit is None:
        raise CliExit(EXIT_CAPABILITY, "model file lacks its training settings; refit with "
                                       "`stepselect fit` to enable bootstrap inference")
    return DnnFitter(model.arch, TrainConfig(**fit["train"]), int(fit["init_seed"]))


def _feature(d: StrataDataset, feature) -> int:
    if feature is None:
        return 0
    try:
        return d.feature_index(feature)
    except (KeyError, ValueError, IndexError):
        raise CliExit(EXIT_CONFIG, f"--feature {feature!r} is not a covariate of the dataset "
                                   f"({', '.join(d.feature_names)})") from None


def _group_labels(path: str | None, target: str) -> list[int] | None:
    if path is None:
        return None
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CliExit(EXIT_CONFIG, f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise CliExit(EXIT_CONFIG, f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    key = f"{target}_group"
    if key not in doc:
        raise CliExit(EXIT_CAPABILITY, f"{path}: truth document has no {key} labels")
    return [int(g) for g in doc[key]]


def cmd_explain(args) -> int:
    from . import xai

    c = resolve("explain", args)
    _bound("bins", c["bins"], 1)
    _bound("permutations", c["permutations"], 1)
    _bound("bootstrap", c["bootstrap"], 0)
    if c["bootstrap"] == 1:
        raise CliExit(EXIT_CONFIG, "--bootstrap must be 0 (off) or >= 2 (got 1)")
    if c["epsilon"] is not None and c["epsilon"] <= 0:
        raise CliExit(EXIT_CONFIG, f"--epsilon must be > 0 (got {c['epsilon']})")
    model, doc = load_model_document(c["model"])
    d = _load_data(c["data"])
    _check_compatible(model, doc, d)
    out = Path(c["output"])
    out.mkdir(parents=True, exist_ok=True)
    action, seed = args.action, c["seed"]
    fig = None
    try:
        if action == "ace":
            if c["bootstrap"]:
                reports = xai.bootstrap_inference(_fitter_for(model, doc, seed), d, None, c["bootstrap"],
                                                  seed, c["epsilon"], n_jobs=c["threads"], model=model)
            else:
                reports = [xai.EffectReport(name, xai.average_conditional_effect(model, d, j, c["epsilon"]),
                                            math.nan, math.nan, math.nan, math.nan, 0)
                           for j, name in enumerate(d.feature_names)]
            xai.write_effects_csv(reports, out / "ace.csv")
            for r in reports:
                print(f"{r.feature:>12s} {r.estimate:9.4f} (SE {r.se:.4f}, p={r.p_value:.3g})")
            fig = Figure("average conditional effect", "covariate", "effect").bars(
                [r.feature for r in reports], [r.estimate for r in reports])
        elif action in ("importance", "interactions"):
            table = xai.importance_table(model, d, pairs=action == "interactions",
                                         n_permutations=c["permutations"], seed=seed)
            if action == "importance":
                xai.write_importance_csv(table, out / "importance.csv")
                fig = Figure("permutation importance", "covariate", "NLL increase").bars(
                    list(table.singles), [max(v, 0.0) for v in table.singles.values()])
            else:
                xai.write_interactions_csv(table, out / "interactions.csv")
                top = table.ranked_pairs()[:10]
                fig = Figure("interaction importance (top 10)", "pair", "NLL increase").bars(
                    [f"{a}:{b}" for a, b in top], [max(table.pair(a, b), 0.0) for a, b in top])
        elif action == "ale":
            j = _feature(d, c["feature"])
            curve = xai.ale_curve(model, d, j, c["bins"])
            xai.write_ale_csv(curve, out / "ale.csv")
            fig = Figure(f"accumulated local effect of {d.feature_names[j]}", d.feature_names[j],
                         "centered effect").line(curve.bin_mids, curve.centered_effect)
        else:
            emb = getattr(getattr(model, "arch", None), "embedding", None)
            if emb is None:
                raise CliExit(EXIT_CAPABILITY, "biplot needs a network with an embedding layer; "
                                               "refit with --embed individual:2 or opponent:2")
            if emb.dim != 2:
                raise CliExit(EXIT_CAPABILITY, f"biplot draws 2-D embeddings; the model has dim {emb.dim}")
            res = xai.embedding_biplot(model, d, epsilon=c["epsilon"],
                                       group_labels=_group_labels(c["truth"], emb.target))
            xai.write_biplot_csv(res, out / "biplot_positions.csv", out / "biplot_arrows.csv")
            scale = np.abs(res.positions).max() / max(np.abs(res.arrows).max(), 1e-300)
            colors = ([PALETTE[int(g) % len(PALETTE)] for g in res.group_labels]
                      if res.group_labels is not None else [PALETTE[0]] * len(res.ids))
            fig = Figure("embedding bi-plot", "dim1", "dim2").points(
                res.positions[:, 0], res.positions[:, 1], colors,
                [str(int(i)) for i in res.ids]).arrows(
                res.arrows[:, 0] * scale, res.arrows[:, 1] * scale, list(res.features))
    except ValueError as e:
        raise CliExit(EXIT_CAPABILITY, str(e)) from None
    if c["svg"] and fig is not None:
        fig.save(out / f"{action}.svg")
    print(f"wrote {action} results to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- #
# bench
# ---------------------------------------------------------------------- #


def cmd_bench(args) -> int:
    from .bench import ScenarioConfig, format_table, run_scenario, summarize, write_bench_manifest

    c = resolve("bench", args)
    if c["scenario"] == "all":
        scenarios = [1, 2, 3, 4, 5]
    else:
        try:
            scenarios = [int(c["scenario"])]
        except ValueError:
            raise CliExit(EXIT_CONFIG, f"--scenario must be 1-5 or all (got {c['scenario']!r})") from None
        _bound("scenario", scenarios[0], 1, 5)
    _bound("reps", c["reps"], 1)
    _bound("strata", c["strata"], 0)
    try:
        configs = [ScenarioConfig(k, n_repetitions=c["reps"], n_strata=c["strata"], truth=c["truth"],
                                  bootstrap=c["bootstrap"], seed=c["seed"], null_control=c["null_control"],
                                  save_artifacts=c["save_artifacts"], threads=c["threads"])
                   for k in scenarios]
    except (ValueError, KeyError) as e:
        raise CliExit(EXIT_CONFIG, f"invalid bench settings: {e}") from None
    root = Path(c["output"])
    results = []
    for cfg in configs:
        print(f"scenario {cfg.scenario}: {cfg.n_repetitions} repetitions", flush=True)
        results.append(run_scenario(cfg, root))
    write_bench_manifest(root, configs, results, c["seed"])
    _, table = summarize(root)
    print(table)
    short = [r for r in results if r.completion < 0.9]
    for r in short:
        print(f"scenario {r.scenario}: only {r.n_completed} of {r.n_requested} repetitions completed",
              file=sys.stderr)
    return EXIT_SHORTFALL if short else EXIT_OK


def cmd_show_defaults(args) -> int:
    print(json.dumps(defaults(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliExit as e:
        if str(e):
            print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
