"""
Command-line front end.

Every subcommand reads one JSON run config, optionally adjusted with
``--set dotted.key=value`` overrides (applied in order, last one wins)::

    otsi generate run.json
    otsi train run.json --set train.epochs=20 --seeds 0..9
    otsi evaluate run.json --model out/model.json
    otsi align run.json --baseline
    otsi plot-data run.json --model out/model.json

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical failure.
"""

import argparse
import copy
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import AlignmentProblem, solve
from .costs import PolyCostModel, cost_matrix, default_init, load_model, save_model
from .data import (SPLITS, CsvSchema, LabeledDataset, MoonSpec, Standardizer, fit_pca,
                   load_csv, make_two_moons, save_csv, split)
from .errors import (ConfigError, DegenerateGeometryError, InfeasibleMaskError, InputError,
                     InstanceError, NumericalError, ParseError, SchemaError)
from .side_info import (Correspondence, hard_assignment, load_correspondence,
                        load_pairs_csv, save_correspondence)
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPARSE_PLAN_CELLS = 10 ** 6

DEFAULT_CONFIG = {
    "dataset": {
        "kind": "two_moons",
        "moons": {},
        "files": None,
        "schema": {"features": None, "label": "label", "pair_id": "pair_id"},
        "split": None,
        "side_info": {"kind": "labels", "count": 10},
        "standardize": False,
        "pca_components": None,
    },
    "model": {"family": "poly", "init": "euclidean", "dims": None,
              "hidden": [100, 5], "activation": "tanh"},
    "train": {},
    "output_dir": "otsi-run",
    "seed": 0,
}

_MOON_KEYS = {f.name for f in dataclasses.fields(MoonSpec)} - {"seed"}
_SIDE_KINDS = ("labels", "pairs", "file")


# ---------------------------------------------------------------- config

def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("moons", "train", "files"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _set_path(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not an object")
    node[keys[-1]] = value


def parse_override(text):
    """``"a.b=3"`` into ``("a.b", 3)``; the value is JSON when it parses as JSON."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; see `DEFAULT_CONFIG` for the layout."""

    doc: dict
    train: TrainConfig
    moons: MoonSpec
    base_dir: str = "."

    @property
    def dataset(self):
        return self.doc["dataset"]

    @property
    def model(self):
        return self.doc["model"]

    @property
    def seed(self):
        return self.doc["seed"]

    @property
    def output_dir(self):
        return self._path(self.doc["output_dir"])

    def _path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def with_seed(self, seed, output_dir=None):
        doc = copy.deepcopy(self.doc)
        doc["seed"] = seed
        if output_dir is not None:
            doc["output_dir"] = output_dir
        return validate_config(doc, self.base_dir)


def validate_config(doc, base_dir="."):
    """Check every field before any work starts; raises `ConfigError`."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = _merge(DEFAULT_CONFIG, doc)
    ds = doc["dataset"]
    if ds["kind"] not in ("two_moons", "csv"):
        raise ConfigError("dataset.kind must be 'two_moons' or 'csv'")
    bad = set(ds["moons"]) - _MOON_KEYS
    if bad:
        raise ConfigError(f"unknown dataset.moons keys: {sorted(bad)}")
    if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
        raise ConfigError("seed must be an integer")
    try:
        moons = MoonSpec(seed=doc["seed"], **ds["moons"])
    except (InputError, TypeError) as exc:
        raise ConfigError(f"dataset.moons: {exc}") from exc
    side = ds["side_info"]
    if side["kind"] not in _SIDE_KINDS:
        raise ConfigError(f"dataset.side_info.kind must be one of {_SIDE_KINDS}")
    if side["kind"] == "pairs" and (not isinstance(side["count"], int) or side["count"] < 1):
        raise ConfigError("dataset.side_info.count must be a positive integer")
    if ds["split"] is not None:
        sp = ds["split"]
        if not isinstance(sp, dict) or set(sp) - {"ratios", "stratify"}:
            raise ConfigError("dataset.split takes only 'ratios' and 'stratify'")
        r = sp.get("ratios", [0.5, 0.2, 0.3])
        if (not isinstance(r, list) or len(r) != 3
                or not all(isinstance(x, (int, float)) and x >= 0 for x in r)
                or abs(sum(r) - 1.0) > 1e-9):
            raise ConfigError("dataset.split.ratios must be three nonnegative numbers summing to 1")
    if ds["kind"] == "csv":
        files = ds["files"]
        if not isinstance(files, dict):
            raise ConfigError("dataset.files is required for csv datasets")
        layout = {"all"} if ds["split"] is not None else set(SPLITS)
        if set(files) != layout:
            raise ConfigError(f"dataset.files must have exactly the keys {sorted(layout)}")
        for name, entry in files.items():
            if not isinstance(entry, dict) or not {"source", "target"} <= set(entry):
                raise ConfigError(f"dataset.files.{name} needs 'source' and 'target' paths")
            extra = set(entry) - {"source", "target", "correspondence", "pairs"}
            if extra:
                raise ConfigError(f"unknown dataset.files.{name} keys: {sorted(extra)}")
        if side["kind"] == "file" and ds["split"] is not None:
            raise ConfigError("side_info.kind 'file' needs per-split files, not dataset.split")
    elif side["kind"] == "file":
        raise ConfigError("side_info.kind 'file' is only valid for csv datasets")
    pca = ds["pca_components"]
    if pca is not None and (not isinstance(pca, int) or pca < 1):
        raise ConfigError("dataset.pca_components must be a positive integer or null")
    m = doc["model"]
    if m["family"] not in ("poly", "mlp"):
        raise ConfigError("model.family must be 'poly' or 'mlp'")
    if m["init"] not in ("euclidean", "default"):
        raise ConfigError("model.init must be 'euclidean' or 'default'")
    if m["init"] == "euclidean" and m["family"] != "poly":
        raise ConfigError("model.init 'euclidean' needs the poly family")
    if not isinstance(doc["output_dir"], str) or not doc["output_dir"]:
        raise ConfigError("output_dir must be a non-empty string")
    train_doc = dict(doc["train"])
    train_doc.setdefault("seed", doc["seed"])
    try:
        tc = TrainConfig.from_dict(train_doc)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc
    return RunConfig(doc, tc, moons, base_dir)


def load_config(path, overrides=()):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for item in overrides:
        key, value = parse_override(item)
        _set_path(doc, key, value)
    return validate_config(doc, os.path.dirname(os.path.abspath(path)))


# ------------------------------------------------------------------ data

@dataclass
class SplitData:
    source: LabeledDataset
    target: LabeledDataset
    side_info: Correspondence  # what training may see
    eval_corr: Correspondence  # what subset accuracy is measured against
    pairs: list  # known true matches, or None

    def problem(self, tc):
        return AlignmentProblem(self.source.cloud, self.target.cloud, tc.lam, tc.sinkhorn_iters)


def _true_pairs(src, tgt):
    if src.pair_ids is None or tgt.pair_ids is None:
        return None
    where = {int(p): j for j, p in enumerate(tgt.pair_ids)}
    return [(i, where[int(p)]) for i, p in enumerate(src.pair_ids) if int(p) in where]


def _label_corr(src, tgt):
    if src.labels is None or tgt.labels is None:
        return None
    return Correspondence.from_labels(src.labels, tgt.labels)


def _side_info(cfg, name, src, tgt, pairs, file_corr):
    side = cfg.dataset["side_info"]
    if side["kind"] == "labels":
        corr = _label_corr(src, tgt)
        if corr is None:
            raise InputError(f"{name} split has no labels for label side information")
        return corr
    if side["kind"] == "pairs":
        if not pairs:
            raise InputError(f"{name} split has no known pairs")
        rng = np.random.default_rng([cfg.seed, SPLITS.index(name)])
        k = min(side["count"], len(pairs))
        chosen = sorted(rng.choice(len(pairs), size=k, replace=False))
        return Correspondence.from_pairs([pairs[c] for c in chosen])
    if file_corr is None:
        raise InputError(f"{name} split has no correspondence file")
    return file_corr


def _read_split_files(cfg, entry):
    schema = CsvSchema(**cfg.dataset["schema"])
    src = load_csv(cfg._path(entry["source"]), schema)
    tgt = load_csv(cfg._path(entry["target"]), schema)
    corr = None
    if entry.get("correspondence"):
        corr = load_correspondence(cfg._path(entry["correspondence"]))
        corr.validate(len(src), len(tgt))
    pairs = None
    if entry.get("pairs"):
        pairs = load_pairs_csv(cfg._path(entry["pairs"]))
    return src, tgt, corr, pairs


def load_run_data(cfg):
    """``{split: SplitData}`` for the configured dataset."""
    ds = cfg.dataset
    raw = {}
    if ds["kind"] == "two_moons":
        for name in SPLITS:
            src, tgt = make_two_moons(cfg.moons, name)
            raw[name] = (src, tgt, None, None)
    elif ds["split"] is not None:
        entry = ds["files"]["all"]
        src, tgt, _, _ = _read_split_files(cfg, entry)
        ratios = ds["split"].get("ratios", [0.5, 0.2, 0.3])
        strat = bool(ds["split"].get("stratify", False))
        parts_s = split(src, ratios, strat, cfg.seed)
        parts_t = split(tgt, ratios, strat, cfg.seed)
        for name, s, t in zip(SPLITS, parts_s, parts_t):
            raw[name] = (s, t, None, None)
    else:
        for name in SPLITS:
            entry = ds["files"][name]
            if ds["side_info"]["kind"] == "file" and not entry.get("correspondence"):
                raise InputError(f"dataset.files.{name}.correspondence is required")
            raw[name] = _read_split_files(cfg, entry)

    # standardize and/or project each domain with statistics from its train split
    sources = {k: v[0] for k, v in raw.items()}
    targets = {k: v[1] for k, v in raw.items()}
    for side in (sources, targets):
        if ds["standardize"]:
            st = Standardizer.fit(side["train"].points)
            for k in side:
                side[k] = side[k].with_points(st.transform(side[k].points), side[k].feature_names)
        if ds["pca_components"] is not None:
            pca = fit_pca(side["train"].points, ds["pca_components"])
            names = tuple(f"pc{j}" for j in range(ds["pca_components"]))
            for k in side:
                side[k] = side[k].with_points(pca.transform(side[k].points), names)

    out = {}
    for name in SPLITS:
        src, tgt = sources[name], targets[name]
        _, _, file_corr, file_pairs = raw[name]
        pairs = file_pairs if file_pairs is not None else _true_pairs(src, tgt)
        side = _side_info(cfg, name, src, tgt, pairs, file_corr)
        evc = _label_corr(src, tgt) or file_corr or side
        out[name] = SplitData(src, tgt, side, evc, pairs)
    dims = out["train"].source.points.shape[1], out["train"].target.points.shape[1]
    for name, sd in out.items():
        if (sd.source.points.shape[1], sd.target.points.shape[1]) != dims:
            raise InstanceError(f"{name} split feature dims differ from train {dims}")
    want = cfg.model["dims"]
    if want is not None and tuple(want) != dims:
        raise InstanceError(f"model.dims {tuple(want)} does not match data dims {dims}")
    return out


def initial_model(cfg, dims):
    m = cfg.model
    if m["family"] == "mlp":
        return default_init("mlp", dims, seed=cfg.seed, hidden=tuple(m["hidden"]),
                            activation=m["activation"])
    if m["init"] == "euclidean":
        if dims[0] != dims[1]:
            raise InstanceError(f"euclidean init needs equal dims, got {dims}")
        return default_init("poly", dims)
    return PolyCostModel(dims)


def _resolve_model(args, cfg, dims):
    if args.baseline:
        return initial_model(cfg, dims)
    if not args.model:
        raise ConfigError("a model path (--model) or --baseline is required")
    if not os.path.exists(args.model):
        raise ConfigError(f"model file {args.model!r} not found")
    model = load_model(args.model)
    if tuple(model.dims) != tuple(dims):
        raise InstanceError(f"model dims {tuple(model.dims)} do not match data dims {tuple(dims)}")
    return model


# -------------------------------------------------------------- commands

def cmd_generate(cfg, args, out):
    if cfg.dataset["kind"] != "two_moons":
        raise ConfigError("generate needs dataset.kind 'two_moons'")
    target_dir = args.out or os.path.join(cfg.output_dir, "data")
    os.makedirs(target_dir, exist_ok=True)
    files = {}
    for name in SPLITS:
        src, tgt = make_two_moons(cfg.moons, name)
        paths = {k: os.path.join(target_dir, f"{name}_{k}.csv") for k in ("source", "target")}
        save_csv(src, paths["source"])
        save_csv(tgt, paths["target"])
        paths["correspondence"] = os.path.join(target_dir, f"{name}_correspondence.json")
        save_correspondence(Correspondence.from_labels(src.labels, tgt.labels),
                            paths["correspondence"])
        files[name] = {k: os.path.basename(v) for k, v in paths.items()}
    json.dump({"directory": target_dir, "files": files}, out, sort_keys=True)
    out.write("\n")


def _train_one(cfg, resume):
    data = load_run_data(cfg)
    tr, va = data["train"], data["val"]
    dims = tr.source.points.shape[1], tr.target.points.shape[1]
    model = initial_model(cfg, dims)
    od = cfg.output_dir
    os.makedirs(od, exist_ok=True)
    ckpt = os.path.join(od, "checkpoint")
    model, report = train(tr.problem(cfg.train), va.problem(cfg.train), tr.side_info,
                          va.side_info, model, cfg.train, val_pairs=va.pairs,
                          checkpoint_dir=ckpt, resume=resume)
    save_model(model, os.path.join(od, "model.json"))
    report.write_csv(os.path.join(od, "report.csv"))
    with open(os.path.join(od, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    te = data["test"]
    metrics = evaluate(te.problem(cfg.train), model, te.eval_corr, te.pairs)
    return {"seed": cfg.seed, "output_dir": od, "best_epoch": report.best_epoch,
            "epochs_run": len(report) - 1, "test": metrics}


def parse_seeds(text):
    """``"3"`` or ``"a..b"`` (inclusive) into a list of ints."""
    try:
        if ".." in text:
            a, b = (int(x) for x in text.split("..", 1))
            if b < a:
                raise ValueError
            return list(range(a, b + 1))
        return [int(text)]
    except ValueError:
        raise ConfigError(f"--seeds must be an integer or a range a..b, got {text!r}") from None


def cmd_train(cfg, args, out):
    if args.seeds is None:
        result = _train_one(cfg, args.resume)
    else:
        seeds = parse_seeds(args.seeds)
        runs = [cfg.with_seed(s, os.path.join(cfg.output_dir, f"seed_{s}")) for s in seeds]
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(lambda c: _train_one(c, args.resume), runs))
        result = {"runs": results}
    json.dump(result, out, sort_keys=True)
    out.write("\n")


def _problem_and_plan(cfg, args):
    data = load_run_data(cfg)
    sd = data[args.split]
    dims = sd.source.points.shape[1], sd.target.points.shape[1]
    model = _resolve_model(args, cfg, dims)
    prob = sd.problem(cfg.train)
    return sd, model, prob


def cmd_evaluate(cfg, args, out):
    sd, model, prob = _problem_and_plan(cfg, args)
    metrics = evaluate(prob, model, sd.eval_corr, sd.pairs)
    metrics = {"split": args.split, "n_source": prob.shape[0], "n_target": prob.shape[1], **metrics}
    json.dump(metrics, out, sort_keys=True)
    out.write("\n")


def write_plan(gamma, path_dense, path_sparse):
    """Dense CSV, or ``source,target,mass`` triplets above `SPARSE_PLAN_CELLS`."""
    n, m = gamma.shape
    if n * m > SPARSE_PLAN_CELLS:
        rows, cols = np.nonzero(gamma)
        with open(path_sparse, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "target", "mass"])
            for i, j in zip(rows, cols):
                w.writerow([int(i), int(j), repr(float(gamma[i, j]))])
        return path_sparse
    np.savetxt(path_dense, gamma, delimiter=",", fmt="%.17g")
    return path_dense


def read_plan(path):
    """Inverse of `write_plan` for either format (sparse needs the header)."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("source,target,mass"):
        trip = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n, m = int(trip[:, 0].max()) + 1, int(trip[:, 1].max()) + 1
        G = np.zeros((n, m))
        G[trip[:, 0].astype(int), trip[:, 1].astype(int)] = trip[:, 2]
        return G
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _inference_plan(prob, model, args):
    """Plan for output files: annealed and run to ``--tol`` unless it is 0."""
    C = cost_matrix(model, prob.source, prob.target)
    if args.tol == 0:
        return solve(prob, C)
    if not args.tol > 0 or args.max_iters < 1:
        raise ConfigError("--tol must be >= 0 and --max-iters positive")
    return solve(replace(prob, sinkhorn_iters=args.max_iters), C, tol=args.tol, anneal=True)


def cmd_align(cfg, args, out):
    sd, model, prob = _problem_and_plan(cfg, args)
    plan = _inference_plan(prob, model, args)
    target_dir = args.out or os.path.join(cfg.output_dir, "align")
    os.makedirs(target_dir, exist_ok=True)
    plan_path = write_plan(plan.gamma, os.path.join(target_dir, "plan.csv"),
                           os.path.join(target_dir, "plan_sparse.csv"))
    assign_path = os.path.join(target_dir, "assignment.csv")
    with open(assign_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target"])
        for i, j in enumerate(hard_assignment(plan)):
            w.writerow([i, int(j)])
    json.dump({"plan": plan_path, "assignment": assign_path, "converged": plan.converged,
               "marginal_error": plan.marginal_error}, out, sort_keys=True)
    out.write("\n")


def cmd_plot_data(cfg, args, out):
    sd, model, prob = _problem_and_plan(cfg, args)
    plan = _inference_plan(prob, model, args)
    match = hard_assignment(plan)
    truth = dict(sd.pairs) if sd.pairs else None
    X, Y = sd.source.points, sd.target.points
    header = (["source_index", "target_index"]
              + [f"source_{k}" for k in range(X.shape[1])]
              + [f"target_{k}" for k in range(Y.shape[1])]
              + ["source_label", "target_label", "correct", "mass"])
    target_dir = args.out or os.path.join(cfg.output_dir, "plot")
    os.makedirs(target_dir, exist_ok=True)
    path = os.path.join(target_dir, "matches.csv")
    n_correct = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, j in enumerate(match):
            ls = "" if sd.source.labels is None else sd.source.labels[i]
            lt = "" if sd.target.labels is None else sd.target.labels[j]
            if sd.source.labels is not None and sd.target.labels is not None:
                ok = ls == lt
            elif truth is not None:
                ok = truth.get(i) == j
            else:
                ok = False
            n_correct += bool(ok)
            w.writerow([i, int(j)] + [repr(float(v)) for v in X[i]] + [repr(float(v)) for v in Y[j]]
                       + [ls, lt, int(bool(ok)), repr(float(plan.gamma[i, j]))])
    json.dump({"matches": path, "fraction_correct": n_correct / len(match)}, out, sort_keys=True)
    out.write("\n")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "align": cmd_align, "plot-data": cmd_plot_data}


def build_parser():
    p = argparse.ArgumentParser(prog="otsi", description="Learn OT ground costs from subset correspondences.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="JSON run config")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry; repeatable, last one wins")
        s.add_argument("--out", help="output directory (defaults under output_dir)")
        if name in ("evaluate", "align", "plot-data"):
            s.add_argument("--model", help="model JSON written by train")
            s.add_argument("--baseline", action="store_true",
                           help="use the configured initial model instead of a file")
            s.add_argument("--split", choices=SPLITS, default="test")
        if name in ("align", "plot-data"):
            s.add_argument("--tol", type=float, default=1e-9,
                           help="marginal tolerance of the plan solve; 0 runs exactly "
                                "train.sinkhorn_iters iterations like evaluate")
            s.add_argument("--max-iters", type=int, default=20000,
                           help="iteration cap per annealing stage")
        if name == "train":
            s.add_argument("--seeds", help="run every seed in a..b, one thread each")
            s.add_argument("--workers", type=int, default=None)
            s.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    return p


def _exit_code(exc):
    if isinstance(exc, (ConfigError, SchemaError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericalError, DegenerateGeometryError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ParseError, InputError, InstanceError, InfeasibleMaskError, OSError)):
        return EXIT_DATA
    return None


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg, args, out)
    except Exception as exc:  # map library errors onto the exit-code contract
        code = _exit_code(exc)
        if code is None:
            raise
        kind = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}[code]
        print(f"otsi {args.command}: {kind} error: {exc}", file=err)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
