"""
Full-batch training of the cost parameters on the side-information loss,
with optional mimic initialization, validation-based model selection and
on-disk checkpoints.
"""

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import sinkhorn
from .costs import cost_matrix, load_model, save_model
from .errors import ConfigError, InputError, NumericalError
from .mimic import mimic_init
from .side_info import (Correspondence, ForbiddenSet, build_forbidden, pair_accuracy,
                        side_info_loss, subset_accuracy)
from .unrolled import DEFAULT_MEMORY_BUDGET, loss_grad

OPTIMIZERS = ("plain_gd", "adaptive")
STOP_METRICS = ("val_loss", "val_subset_accuracy")


@dataclass(frozen=True)
class MimicConfig:
    """Mimic initialization settings.

    ``solver_iters``, ``tol``, ``relaxation`` and ``anneal`` control the two
    plan solves of every mimic step; ``solver_iters=None`` reuses the
    training solver.
    """

    enabled: bool = True
    steps: int = 10
    step_size: float = 1.0
    solver_iters: int = 5000
    tol: float = 1e-9
    relaxation: float = 1.8
    anneal: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("mimic.steps must be nonnegative")
        if not self.step_size > 0:
            raise ConfigError("mimic.step_size must be positive")
        if self.solver_iters is not None and self.solver_iters < 1:
            raise ConfigError("mimic.solver_iters must be positive")
        if self.tol is not None and not self.tol > 0:
            raise ConfigError("mimic.tol must be positive")
        if not 0 < self.relaxation < 2:
            raise ConfigError("mimic.relaxation must lie in (0, 2)")


@dataclass(frozen=True)
class EarlyStopping:
    metric: str = "val_loss"
    patience: int = 100

    def __post_init__(self):
        if self.metric not in STOP_METRICS:
            raise ConfigError(f"early_stopping.metric must be one of {STOP_METRICS}")
        if int(self.patience) != self.patience or self.patience < 1:
            raise ConfigError("early_stopping.patience must be an integer >= 1")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e3
    sinkhorn_iters: int = 200
    epochs: int = 100
    step_size: float = 1.0
    mimic: MimicConfig = field(default_factory=MimicConfig)
    early_stopping: EarlyStopping = field(default_factory=EarlyStopping)
    seed: int = 0
    optimizer: str = "plain_gd"
    clip_norm: float = None
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        if isinstance(self.mimic, dict):
            object.__setattr__(self, "mimic", MimicConfig(**self.mimic))
        if isinstance(self.early_stopping, dict):
            object.__setattr__(self, "early_stopping", EarlyStopping(**self.early_stopping))
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ConfigError("lam must be positive and finite")
        if int(self.sinkhorn_iters) != self.sinkhorn_iters or self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_iters must be a positive integer")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError("epochs must be a nonnegative integer")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        doc = dict(doc)
        for key, sub in (("mimic", MimicConfig), ("early_stopping", EarlyStopping)):
            if key in doc:
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(doc[key]) - sub_known
                if bad:
                    raise ConfigError(f"unknown train.{key} keys: {sorted(bad)}")
                doc[key] = sub(**doc[key])
        return cls(**doc)


REPORT_COLUMNS = ("epoch", "train_loss", "val_loss", "val_subset_accuracy",
                  "val_pair_accuracy", "wall_time")


@dataclass
class TrainReport:
    """Per-epoch metrics. Row 0 describes the initialization (after mimic)."""

    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_subset_accuracy: list = field(default_factory=list)
    val_pair_accuracy: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = 0
    theta: np.ndarray = None
    mimic_loss: list = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.epoch)

    def append(self, **row):
        for key in REPORT_COLUMNS:
            getattr(self, key).append(row[key])

    def rows(self):
        return [dict(zip(REPORT_COLUMNS, vals)) for vals in
                zip(*(getattr(self, k) for k in REPORT_COLUMNS))]

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for row in self.rows():
                w.writerow(["" if v is None else repr(v) for v in row.values()])

    @classmethod
    def read_csv(cls, path):
        rep = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                vals = {k: (None if row[k] == "" else float(row[k])) for k in REPORT_COLUMNS}
                vals["epoch"] = int(vals["epoch"])
                rep.append(**vals)
        return rep


def _forbidden(problem, side_info):
    if isinstance(side_info, ForbiddenSet):
        return side_info
    return build_forbidden(side_info, *problem.shape)


def evaluate(problem, model, corr, pairs=None, *, forb=None):
    """Plan at the problem's ``lam`` and iteration count, and its metrics.

    Returns a dict with ``subset_accuracy``, ``pair_accuracy`` (None
    without `pairs`), ``side_info_loss`` and ``marginal_error``.
    """
    plan = sinkhorn(problem, cost_matrix(model, problem.source, problem.target))
    if forb is None:
        forb = _forbidden(problem, corr)
    return {
        "subset_accuracy": subset_accuracy(plan, corr),
        "pair_accuracy": None if pairs is None else pair_accuracy(plan, pairs),
        "side_info_loss": side_info_loss(plan, forb),
        "marginal_error": plan.marginal_error,
    }


class _Optimizer:
    """Plain gradient descent, or RMS-normalized steps without momentum."""

    def __init__(self, config, size):
        self.kind = config.optimizer
        self.alpha = config.step_size
        self.clip = config.clip_norm
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        if self.clip is not None:
            norm = np.linalg.norm(grad)
            if norm > self.clip:
                grad = grad * (self.clip / norm)
        if self.kind == "plain_gd":
            return theta - self.alpha * grad
        self.t += 1
        self.v = 0.9 * self.v + 0.1 * grad ** 2
        vhat = self.v / (1.0 - 0.9 ** self.t)
        return theta - self.alpha * grad / (np.sqrt(vhat) + 1e-12)

    def state(self):
        return {"v": self.v.tolist(), "t": self.t}

    def load(self, doc):
        self.v = np.array(doc["v"], dtype=float)
        self.t = int(doc["t"])


def _score(metric, row):
    return row["val_loss"] if metric == "val_loss" else -row["val_subset_accuracy"]


def _write_checkpoint(directory, model, config, report, state):
    os.makedirs(directory, exist_ok=True)
    save_model(model, os.path.join(directory, "model.json"))
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    report.write_csv(os.path.join(directory, "metrics.csv"))
    tmp = os.path.join(directory, "state.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state, fh)
    os.replace(tmp, os.path.join(directory, "state.json"))


def train(train_problem, val_problem, corr_train, corr_val, model, config=None, *,
          val_pairs=None, checkpoint_dir=None, resume=False, callback=None):
    """Learn the cost parameters from subset correspondences.

    Parameters
    ----------
    train_problem, val_problem : AlignmentProblem
        Only their point clouds are used; ``lam`` and the iteration count
        come from `config`.
    corr_train, corr_val : Correspondence or ForbiddenSet
        ``corr_val`` must be a `Correspondence` when early stopping tracks
        subset accuracy.
    model : PolyCostModel or MlpCostModel
        Supplies the family and the initial parameters.
    config : TrainConfig, optional
    val_pairs : sequence of (int, int), optional
        Known validation matches; adds a pair-accuracy column to the report.
    checkpoint_dir : str, optional
        Directory receiving ``model.json`` (best parameters so far),
        ``config.json``, ``metrics.csv`` and a resume state after every
        epoch that improves the validation metric.
    resume : bool
        Continue from the state stored in `checkpoint_dir`.
    callback : callable, optional
        Called as ``callback(epoch, row)`` after every logged epoch.

    Returns
    -------
    model : cost model with the best-epoch parameters
    report : TrainReport

    Raises
    ------
    NumericalError
        On a non-finite loss or gradient. The last finite parameters are
        attached and, with `checkpoint_dir`, written to ``last_good.json``.
    """
    config = config or TrainConfig()
    P = replace(train_problem, lam=config.lam, sinkhorn_iters=config.sinkhorn_iters)
    V = replace(val_problem, lam=config.lam, sinkhorn_iters=config.sinkhorn_iters)
    forb = _forbidden(P, corr_train)
    forb_val = _forbidden(V, corr_val)
    metric = config.early_stopping.metric
    if metric == "val_subset_accuracy" and not isinstance(corr_val, Correspondence):
        raise ConfigError("subset-accuracy early stopping needs a validation Correspondence")

    report = TrainReport()
    opt = _Optimizer(config, len(model.theta))
    theta = np.array(model.theta, dtype=float)
    start = 0
    best_theta, best_score, since_best = None, math.inf, 0

    if resume:
        if checkpoint_dir is None:
            raise ConfigError("resume needs a checkpoint directory")
        with open(os.path.join(checkpoint_dir, "state.json"), encoding="utf-8") as fh:
            state = json.load(fh)
        report = TrainReport.read_csv(os.path.join(checkpoint_dir, "metrics.csv"))
        report.mimic_loss = state["mimic_loss"]
        report.best_epoch = state["best_epoch"]
        theta = np.array(state["theta"], dtype=float)
        best_theta = np.array(load_model(os.path.join(checkpoint_dir, "model.json")).theta)
        best_score = state["best_score"]
        since_best = state["since_best"]
        opt.load(state["optimizer"])
        start = state["epoch"] + 1
        if since_best >= config.early_stopping.patience:
            start = config.epochs + 1
    elif config.mimic.enabled and config.mimic.steps > 0 and len(forb):
        m = config.mimic
        st = mimic_init(P, model.with_theta(theta), forb, m.steps, m.step_size,
                        solver_iters=m.solver_iters, tol=m.tol, relaxation=m.relaxation,
                        anneal=m.anneal, return_state=True)
        theta = st.theta
        report.mimic_loss = list(st.loss_history)

    last_good = theta.copy()
    for epoch in range(start, config.epochs + 1):
        t0 = time.perf_counter()
        current = model.with_theta(theta)
        try:
            if epoch < config.epochs:
                loss, grad, plan = loss_grad(P, current, forb, return_plan=True,
                                             memory_budget=config.memory_budget)
            else:
                plan = sinkhorn(P, cost_matrix(current, P.source, P.target))
                loss, grad = side_info_loss(plan, forb), np.zeros_like(theta)
        except InputError:
            # the parameters produced a cost matrix with NaN or Inf entries
            loss, grad = math.nan, np.full_like(theta, math.nan)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            if checkpoint_dir is not None:
                os.makedirs(checkpoint_dir, exist_ok=True)
                save_model(model.with_theta(last_good), os.path.join(checkpoint_dir, "last_good.json"))
            raise NumericalError(
                f"non-finite {'loss' if not math.isfinite(loss) else 'gradient'} at epoch {epoch}",
                last_good=last_good, epoch=epoch)
        last_good = theta.copy()
        ev = evaluate(V, current, corr_val, val_pairs, forb=forb_val) \
            if isinstance(corr_val, Correspondence) else None
        vplan = None if ev is not None else sinkhorn(V, cost_matrix(current, V.source, V.target))
        row = {
            "epoch": epoch,
            "train_loss": loss,
            "val_loss": ev["side_info_loss"] if ev else side_info_loss(vplan, forb_val),
            "val_subset_accuracy": ev["subset_accuracy"] if ev else None,
            "val_pair_accuracy": ev["pair_accuracy"] if ev else None,
            "wall_time": time.perf_counter() - t0,
        }
        score = _score(metric, row)
        improved = score < best_score or best_theta is None
        if improved:
            best_theta, best_score, since_best = theta.copy(), score, 0
            report.best_epoch = epoch
        else:
            since_best += 1
        report.append(**row)
        if callback is not None:
            callback(epoch, row)
        next_theta = theta if epoch == config.epochs else opt.step(theta, grad)
        if checkpoint_dir is not None and (improved or epoch == config.epochs
                                           or since_best >= config.early_stopping.patience):
            state = {"epoch": epoch, "theta": next_theta.tolist(), "best_epoch": report.best_epoch,
                     "best_score": best_score, "since_best": since_best,
                     "optimizer": opt.state(), "mimic_loss": report.mimic_loss}
            _write_checkpoint(checkpoint_dir, model.with_theta(best_theta), config, report, state)
        if since_best >= config.early_stopping.patience:
            report.stopped_early = True
            break
        theta = next_theta

    if best_theta is None:
        best_theta = theta
    report.theta = best_theta.copy()
    return model.with_theta(best_theta), report
