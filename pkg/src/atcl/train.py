"""Training drivers.

All drivers share one epoch loop (:func:`_fit`); they differ only in how a
batch's attack/training objective is built and how the per-epoch budget is
chosen:

* :func:`train_atcl` - warm-up attack plus pseudo-label attack with the
  cached-prediction table;
* :func:`train_direct` - PGD and the update both on a complementary loss at
  the full budget;
* :func:`train_natural_cl` - the same with no attack;
* :func:`train_oracle` - standard AT with ordinary labels;
* :func:`train_two_stage` - complementary learning, relabel, then oracle AT.

Complementary drivers read only ``x`` and ``cl_mask`` of the training set;
ordinary labels are touched solely to report pseudo-label and relabel
accuracy and, for the two-stage baseline, to pick the stage-1 checkpoint
on the validation split.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from atcl import __version__
from atcl.attack import AttackBudget, AttackObjective, pgd
from atcl.config import RunConfig, config_hash, to_dict
from atcl.diagnostics import first_layer_cov_trace, layer_grad_norm, pseudo_label_accuracy, robust_eval
from atcl.labels import ComplementaryDataset
from atcl.losses import COMPLEMENTARY, PLA, LossSpec, per_sample_losses
from atcl.nn import AdamConfig, AdamState, MlpModel, SgdConfig, adam_step, init_velocity, sgd_step
from atcl.persist import MetricsLog, decode_checkpoint, encode_checkpoint
from atcl.rng import stream
from atcl.schedule import PredictionCache, ScheduleSpec, budget_at_epoch, schedule_value
from atcl.tensor import Tensor

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


class Optimizer:
    """SGD with momentum (default) or Adam, as selected by ``OptimConfig``."""

    def __init__(self, cfg, model: MlpModel):
        self.kind = cfg.kind
        if cfg.kind == "sgd":
            self.cfg = SgdConfig(cfg.lr, cfg.momentum, cfg.weight_decay)
            self.velocity = init_velocity(model)
        else:
            self.cfg = AdamConfig(learning_rate=cfg.lr, weight_decay=cfg.weight_decay)
            self.adam = AdamState(model)

    def step(self, model: MlpModel, lr: float):
        if self.kind == "sgd":
            sgd_step(model, self.cfg, self.velocity, lr)
        else:
            adam_step(model, self.cfg, self.adam, lr)

    def buffers(self) -> list:
        return [self.velocity] if self.kind == "sgd" else [self.adam.m, self.adam.v]

    def load(self, buffers: list, state: dict):
        if self.kind == "sgd":
            self.velocity = [b.copy() for b in buffers[0]]
        else:
            self.adam.m = [b.copy() for b in buffers[0]]
            self.adam.v = [b.copy() for b in buffers[1]]
            self.adam.t = state.get("adam_t", 0)


@dataclass
class TrainState:
    model: MlpModel
    optimizer: Optimizer
    cache: PredictionCache | None = None
    epoch: int = 0
    best_metric: float = -1.0
    best_epoch: int = -1
    best_model: MlpModel | None = None
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        state = {
            "epoch": self.epoch,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "optimizer": self.optimizer.kind,
            "extra": self.extra,
        }
        if self.optimizer.kind == "adam":
            state["adam_t"] = self.optimizer.adam.t
        table = None
        if self.cache is not None:
            state["cache_frozen"] = self.cache.frozen
            state["cache_skipped"] = self.cache.skipped_updates
            table = self.cache.table
        return encode_checkpoint(self.model, self.optimizer.buffers(), state, table)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, cfg: RunConfig, cl_mask: np.ndarray | None = None) -> "TrainState":
        ck = decode_checkpoint(raw, np.dtype(cfg.model.dtype))
        st = ck["state"]
        model = ck["model"]
        opt = Optimizer(replace(cfg.optim, kind=st.get("optimizer", cfg.optim.kind)), model)
        opt.load(ck["buffers"], st)
        cache = None
        if ck["cache"] is not None:
            if cl_mask is None:
                raise TrainConfigError("checkpoint carries a prediction cache; pass the training cl_mask")
            cache = PredictionCache(cl_mask, cfg.ema.beta)
            cache.table = ck["cache"]
            cache.frozen = st.get("cache_frozen", False)
            cache.skipped_updates = st.get("cache_skipped", 0)
        return cls(model, opt, cache, st["epoch"], st["best_metric"], st["best_epoch"], None, st.get("extra", {}))

    @classmethod
    def load(cls, path, cfg: RunConfig, cl_mask=None) -> "TrainState":
        return cls.from_bytes(Path(path).read_bytes(), cfg, cl_mask)


def new_state(cfg: RunConfig, d: int, K: int, stream_name: str = "init") -> TrainState:
    dims = [d] + list(cfg.model.hidden) + [K]
    model = MlpModel.init(dims, stream(cfg.seed, stream_name), np.dtype(cfg.model.dtype))
    return TrainState(model, Optimizer(cfg.optim, model))


def lr_at(cfg: RunConfig, epoch: int) -> float:
    drops = sum(1 for m in cfg.optim.lr_milestones if epoch >= m)
    return cfg.optim.lr * cfg.optim.lr_decay**drops


def full_budget(cfg: RunConfig) -> AttackBudget:
    a = cfg.attack
    vr = tuple(a.value_range) if a.value_range is not None else None
    return AttackBudget(a.eps, a.alpha, a.steps, a.init, vr)


def eval_budget(cfg: RunConfig) -> AttackBudget:
    a, vr = cfg.eval, cfg.attack.value_range
    return AttackBudget(a.eps, a.alpha, a.steps, a.init, tuple(vr) if vr is not None else None)


# batch objectives ---------------------------------------------------------


class _Direct:
    """Complementary loss in both loops at a fixed budget."""

    def __init__(self, kind: str, cl_mask: np.ndarray, budget: AttackBudget):
        if kind not in COMPLEMENTARY:
            raise TrainConfigError(f"{kind!r} is not a complementary loss")
        self.spec = LossSpec(kind)
        self.cl_mask = cl_mask
        self.budget = budget

    def epoch_setup(self, e: int, state: TrainState) -> dict:
        return {"budget": self.budget, "gamma": None}

    def objective(self, idx, xb, state, setup) -> AttackObjective:
        return AttackObjective(self.spec, cl_mask=self.cl_mask[idx])


class _Oracle:
    def __init__(self, y: np.ndarray, budget: AttackBudget):
        self.y = np.asarray(y)
        self.budget = budget
        self.spec = LossSpec("ce")

    def epoch_setup(self, e, state):
        return {"budget": self.budget, "gamma": None}

    def objective(self, idx, xb, state, setup):
        return AttackObjective(self.spec, y=self.y[idx])


class _Atcl:
    """Warm-up attack budget plus the gamma-mixed pseudo-label loss."""

    def __init__(self, cfg: RunConfig, cl_mask: np.ndarray):
        if cfg.loss not in PLA:
            raise TrainConfigError(f"train_atcl needs a pla_* loss, got {cfg.loss!r}")
        self.cfg = cfg
        self.cl_mask = cl_mask
        self.full = full_budget(cfg)
        w = cfg.warmup
        self.eps_sched = ScheduleSpec("warmup_cos", cfg.attack.eps, w.Es, w.Ei)
        self.gamma_sched = ScheduleSpec("pla_linear", cfg.pla.gamma_max, w.Es, w.Ei)

    def epoch_setup(self, e: int, state: TrainState) -> dict:
        cfg = self.cfg
        if not cfg.pla.enabled:
            gamma = 1.0
        elif cfg.pla.gamma is not None:
            gamma = cfg.pla.gamma
        else:
            gamma = schedule_value(self.gamma_sched, e)
        if cfg.warmup.enabled and self.full.epsilon > 0:
            budget = budget_at_epoch(self.full, self.eps_sched, cfg.warmup.variant, e)
            ramp_eps = schedule_value(self.eps_sched, e)
        else:
            budget = self.full
            ramp_eps = self.full.epsilon
        state.cache.maybe_freeze(ramp_eps, cfg.attack.eps, cfg.ema.freeze_ratio)
        return {"budget": budget, "gamma": gamma}

    def objective(self, idx, xb, state, setup) -> AttackObjective:
        cache = state.cache
        cache.ema_update(idx, state.model.predict_proba(xb))
        pseudo = cache.pseudo_labels(idx)
        return AttackObjective(LossSpec(self.cfg.loss, setup["gamma"]), cl_mask=self.cl_mask[idx], pseudo=pseudo)


# the shared loop ------------------------------------------------------------


def _batch_dz(state: TrainState, xa: np.ndarray, objective: AttackObjective, pre, n: int) -> np.ndarray:
    """Per-sample loss gradient at the first pre-activation."""
    if objective.spec.kind != "nn":
        return pre[0].grad * n  # training loss is a batch mean of separable terms
    frozen = state.model.frozen()
    _, pre1 = frozen.forward_trace(Tensor(xa, requires_grad=True))
    per_sample_losses(objective.spec, pre1[-1], objective.cl_mask).sum().backward()
    return pre1[0].grad


def _fit(
    cfg: RunConfig,
    method,
    x: np.ndarray,
    test: tuple | None,
    state: TrainState,
    mlog: MetricsLog,
    epochs: int,
    max_epochs: int | None = None,
    selector=None,
    pl_labels: np.ndarray | None = None,
    epoch_offset: int = 0,
    tag: dict | None = None,
    out_dir: Path | None = None,
    ckpt_prefix: str = "",
):
    n = len(x)
    bs = cfg.batch_size
    ev_budget = eval_budget(cfg)
    stop = epochs if max_epochs is None else min(epochs, state.epoch + max_epochs)
    for e in range(state.epoch, stop):
        t0 = time.perf_counter()
        lr = lr_at(cfg, e + epoch_offset)
        setup = method.epoch_setup(e, state)
        budget = setup["budget"]
        order = stream(cfg.seed, "shuffle", e + epoch_offset).permutation(n)
        losses, traces, gfirst, glast = [], [], [], []
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            xb = x[idx]
            objective = method.objective(idx, xb, state, setup)
            rng = stream(cfg.seed, "attack", e + epoch_offset, b)
            xa = pgd(state.model, xb, objective, budget, rng)
            state.model.zero_grad()
            logits, pre = state.model.forward_trace(xa)
            loss = objective(logits)
            loss.backward()
            losses.append(loss.item())
            if cfg.diagnostics.grad_stats:
                gfirst.append(layer_grad_norm(state.model, "first"))
                glast.append(layer_grad_norm(state.model, "last"))
                if len(idx) >= 2:
                    dz = _batch_dz(state, xa, objective, pre, len(idx))
                    traces.append(first_layer_cov_trace(xa, dz, not cfg.diagnostics.raw_directions))
            state.optimizer.step(state.model, lr)

        rec = {
            "epoch": e + epoch_offset,
            "train_loss": float(np.mean(losses)),
            "eps_e": budget.epsilon,
            "alpha_e": budget.alpha,
            "k_e": budget.steps,
            "gamma": setup["gamma"],
            "beta": cfg.ema.beta if state.cache is not None else None,
            "pl_acc": None,
            "grad_trace_first": float(np.mean(traces)) if traces else None,
            "grad_norm_first": float(np.mean(gfirst)) if gfirst else None,
            "grad_norm_last": float(np.mean(glast)) if glast else None,
            "frozen": state.cache.frozen if state.cache is not None else None,
            "lr": lr,
        }
        if state.cache is not None and pl_labels is not None:
            rec["pl_acc"] = pseudo_label_accuracy(state.cache, pl_labels)
        last = e == epochs - 1
        if test is not None and ((e + 1) % cfg.eval.every == 0 or last):
            ev_rng = stream(cfg.seed, "eval", e + epoch_offset) if ev_budget.init == "random" else None
            res = robust_eval(state.model, test[0], test[1], ev_budget, cfg.eval.batch_size, ev_rng)
            rec["nat_acc"], rec["pgd_acc"] = res["natural_acc"], res["robust_acc"]
        score = selector(state.model) if selector is not None else rec.get("pgd_acc")
        if selector is not None:
            rec["select_metric"] = score
        if score is not None and score > state.best_metric:  # strict: ties keep the earlier epoch
            state.best_metric, state.best_epoch = score, e + epoch_offset
            state.best_model = state.model.copy()
            if out_dir is not None and cfg.output.checkpoint:
                state.save(out_dir / f"{ckpt_prefix}best.ckpt")
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        if tag:
            rec.update(tag)
        state.epoch = e + 1
        mlog.append(rec)
        if out_dir is not None and cfg.output.checkpoint:
            state.save(out_dir / f"{ckpt_prefix}last.ckpt")
        log.info("epoch %d loss %.4f nat %s pgd %s eps %.4f gamma %s (%.1fs)", rec["epoch"], rec["train_loss"],
                 rec.get("nat_acc"), rec.get("pgd_acc"), budget.epsilon, setup["gamma"], rec["seconds"])
    return state, mlog


def _prepare_output(cfg: RunConfig, method_name: str, extra: dict | None = None):
    if cfg.output.dir is None:
        return None, MetricsLog()
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {"method": method_name, "config_hash": config_hash(cfg), "seed": cfg.seed,
              "version": __version__, "config": to_dict(cfg)}
    header.update(extra or {})
    (out / "run.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    metrics = out / "metrics.jsonl"
    return out, MetricsLog(metrics)


def _finish(cfg, out, mlog):
    if out is not None and cfg.output.csv:
        mlog.to_csv(out / "metrics.csv")


def _check_dataset(cfg: RunConfig, train: ComplementaryDataset, state: TrainState | None):
    if train.K != cfg.data.K:
        raise TrainConfigError(f"dataset has {train.K} classes, config says {cfg.data.K}")
    if state is not None and state.model.num_classes != train.K:
        raise TrainConfigError(f"model emits {state.model.num_classes} classes, dataset has {train.K}")
    if state is not None and state.model.dims[0] != train.d:
        raise TrainConfigError(f"model expects {state.model.dims[0]} features, dataset has {train.d}")


def train_atcl(cfg: RunConfig, train: ComplementaryDataset, test=None, state: TrainState | None = None,
               mlog: MetricsLog | None = None, max_epochs: int | None = None):
    """Warm-up attack plus pseudo-label attack on a complementary dataset."""
    _check_dataset(cfg, train, state)
    out, fresh_log = _prepare_output(cfg, "atcl") if mlog is None else (_out(cfg), mlog)
    mlog = mlog or fresh_log
    if state is None:
        state = new_state(cfg, train.d, train.K)
    if state.cache is None:
        state.cache = PredictionCache(train.cl_mask, cfg.ema.beta)
    method = _Atcl(cfg, train.cl_mask)
    _fit(cfg, method, train.x, test, state, mlog, cfg.epochs, max_epochs, pl_labels=train.y, out_dir=out)
    _finish(cfg, out, mlog)
    return state, mlog


def _out(cfg):
    return Path(cfg.output.dir) if cfg.output.dir is not None else None


def train_direct(kind: str, cfg: RunConfig, train: ComplementaryDataset, test=None,
                 state: TrainState | None = None, mlog: MetricsLog | None = None,
                 max_epochs: int | None = None, budget: AttackBudget | None = None):
    """Adversarial training with a complementary loss in both loops."""
    _check_dataset(cfg, train, state)
    out, fresh_log = _prepare_output(cfg, f"direct:{kind}") if mlog is None else (_out(cfg), mlog)
    mlog = mlog or fresh_log
    state = state or new_state(cfg, train.d, train.K)
    method = _Direct(kind, train.cl_mask, budget or full_budget(cfg))
    _fit(cfg, method, train.x, test, state, mlog, cfg.epochs, max_epochs, out_dir=out)
    _finish(cfg, out, mlog)
    return state, mlog


def train_natural_cl(kind: str, cfg: RunConfig, train: ComplementaryDataset, test=None, **kw):
    """Complementary learning on clean inputs (``train_direct`` with a zero ball)."""
    return train_direct(kind, cfg, train, test, budget=replace(full_budget(cfg), epsilon=0.0), **kw)


def train_oracle(cfg: RunConfig, x: np.ndarray, y: np.ndarray, test=None, state: TrainState | None = None,
                 mlog: MetricsLog | None = None, max_epochs: int | None = None):
    """Standard adversarial training with cross entropy on ordinary labels."""
    K = cfg.data.K
    if state is not None and state.model.num_classes != K:
        raise TrainConfigError(f"model emits {state.model.num_classes} classes, config says {K}")
    out, fresh_log = _prepare_output(cfg, "oracle") if mlog is None else (_out(cfg), mlog)
    mlog = mlog or fresh_log
    state = state or new_state(cfg, x.shape[1], K)
    _fit(cfg, _Oracle(y, full_budget(cfg)), x, test, state, mlog, cfg.epochs, max_epochs, out_dir=out)
    _finish(cfg, out, mlog)
    return state, mlog


def validation_split(cfg: RunConfig, n: int) -> tuple:
    n_val = max(1, int(round(cfg.two_stage.val_fraction * n)))
    if n_val >= n:
        raise TrainConfigError("validation split would consume the whole training set")
    perm = stream(cfg.seed, "val_split").permutation(n)
    return perm[:-n_val], perm[-n_val:]


def train_two_stage(cfg: RunConfig, train: ComplementaryDataset, test=None):
    """Complementary learning, relabel with the best stage-1 model, then oracle AT.

    Stage 1 runs ``two_stage.stage1_epochs`` clean epochs of
    ``two_stage.stage1_loss`` on the first 90% of a seeded permutation; the
    checkpoint with the best natural accuracy on the held-out 10% relabels
    the whole training set.  Stage 2 trains a fresh model with ordinary-label
    AT on those labels for the remaining ``epochs - stage1_epochs`` epochs.
    """
    _check_dataset(cfg, train, None)
    s1 = cfg.two_stage.stage1_epochs
    if cfg.epochs - s1 < 1:
        raise TrainConfigError("two-stage training needs at least one stage-2 epoch")
    fit_idx, val_idx = validation_split(cfg, len(train))
    if len(val_idx) == 0:
        raise TrainConfigError("empty validation split")
    out, mlog = _prepare_output(cfg, "two_stage")

    stage1 = new_state(cfg, train.d, train.K, "init_stage1")
    if s1 == 0:
        log.warning("stage1_epochs=0: relabelling with an untrained model")
    else:
        fit = train.subset(fit_idx)
        xv, yv = train.x[val_idx], train.y[val_idx]
        cfg1 = replace(cfg, epochs=s1)
        method = _Direct(cfg.two_stage.stage1_loss, fit.cl_mask, replace(full_budget(cfg), epsilon=0.0))
        _fit(cfg1, method, fit.x, test, stage1, mlog, s1,
             selector=lambda m: float((m.predict(xv) == yv).mean()),
             tag={"stage": 1}, out_dir=out, ckpt_prefix="stage1_")
    chosen = stage1.best_model or stage1.model
    labels = chosen.predict(train.x)
    relabel_acc = float((labels == train.y).mean())
    violations = int(train.cl_mask[np.arange(len(train)), labels].sum())
    log.info("relabel accuracy %.4f, %d labels inside their complementary set", relabel_acc, violations)

    cfg2 = replace(cfg, epochs=cfg.epochs - s1)
    stage2 = new_state(cfg, train.d, train.K, "init_stage2")
    _fit(cfg2, _Oracle(labels, full_budget(cfg)), train.x, test, stage2, mlog, cfg2.epochs,
         epoch_offset=s1, tag={"stage": 2, "relabel_acc": relabel_acc, "cl_violations": violations},
         out_dir=out, ckpt_prefix="stage2_")
    stage2.extra.update({"relabel_acc": relabel_acc, "cl_violations": violations,
                         "stage1_best_epoch": stage1.best_epoch})
    _finish(cfg, out, mlog)
    return stage2, mlog
