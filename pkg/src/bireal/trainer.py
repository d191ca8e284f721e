"""Training recipe for binary networks.

1. Optional pre-training of the real-valued twin with clip(-1, x, 1) or
   ReLU in place of sign; its weights initialize the binary net.
2. Step one: binarized forward, surrogate backward, momentum SGD on the
   real master weights.
3. Step two: weights fixed to sign(W_r), the per-kernel scale folded into
   BN, then only BN is retrained for one epoch.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .io import Dataset
from .model import (
    Mode,
    NetParams,
    NetworkSpec,
    Variant,
    WeightUpdate,
    build,
    forward,
    loss_and_grads,
)
from .ops import SurrogateKind

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


INIT_KINDS = ("clip", "relu", "random")


@dataclass(frozen=True)
class TrainConfig:
    init_kind: str = "clip"
    weight_update: str = WeightUpdate.MAGNITUDE_AWARE.value
    activation_backward: str = SurrogateKind.PIECEWISE_POLY.value
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    milestones: tuple[int, ...] | None = None
    seed: int = 0
    pretrain_epochs: int = 6
    pretrain_lr: float = 0.05
    bn_epochs: int = 1
    bn_lr: float = 1e-4
    momentum: float = 0.9
    scale_scope: str = "kernel"
    max_train: int | None = None
    augment_shift: int = 0

    def __post_init__(self):
        if self.init_kind not in INIT_KINDS:
            raise ValueError(f"init_kind must be one of {INIT_KINDS}")
        WeightUpdate(self.weight_update)
        SurrogateKind(self.activation_backward)
        if self.milestones is None:
            ms = sorted({m for m in (round(0.5 * self.epochs), round(0.75 * self.epochs)) if 0 < m < self.epochs})
            object.__setattr__(self, "milestones", tuple(ms))
        else:
            object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ValueError("milestones must be strictly increasing and < epochs")
        if min(self.lr, self.pretrain_lr, self.bn_lr) < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")
        if self.augment_shift < 0:
            raise ValueError("augment_shift must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.1 ** sum(1 for m in self.milestones if m <= epoch)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class RunReport:
    epochs: list[dict] = field(default_factory=list)
    final_top1: float | None = None
    final_top5: float | None = None
    config: dict = field(default_factory=dict)
    spec: str = ""
    variant: str = ""
    seed: int = 0
    error: str | None = None
    wall_time: float = field(default=0.0, compare=False)

    def records(self):
        for e in self.epochs:
            yield {"type": "epoch", **e}
        yield {
            "type": "final",
            "spec": self.spec,
            "variant": self.variant,
            "seed": self.seed,
            "top1": self.final_top1,
            "top5": self.final_top5,
            "error": self.error,
            "wall_time": self.wall_time,
            "config": self.config,
        }


# --- loops -----------------------------------------------------------------


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def _train_data(data: Dataset, cfg: TrainConfig):
    if cfg.max_train is not None:
        return data.train_x[: cfg.max_train], data.train_y[: cfg.max_train]
    return data.train_x, data.train_y


def random_shift(x, max_shift, rng):
    """Translate each image by up to ``max_shift`` pixels per axis; the
    border value is repeated into the uncovered strip."""
    if not max_shift:
        return x
    s = max_shift
    xp = np.pad(x, ((0, 0), (0, 0), (s, s), (s, s)), mode="edge")
    h, w = x.shape[2:]
    offs = rng.integers(0, 2 * s + 1, size=(len(x), 2))
    return np.stack([xp[i, :, dy : dy + h, dx : dx + w] for i, (dy, dx) in enumerate(offs)])


def _epoch(params, x, y, mode, cfg, lr, rng, trainable, opt, freeze_bn_stats=False):
    opt.learning_rate = lr
    losses, correct = [], 0
    for idx in _batches(len(x), cfg.batch_size, rng):
        xb, yb = random_shift(x[idx], cfg.augment_shift, rng), y[idx]
        loss, grads, tape = loss_and_grads(
            params,
            xb,
            yb,
            mode,
            weight_update=cfg.weight_update,
            act_backward=cfg.activation_backward,
            scale_scope=cfg.scale_scope,
        )
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} in mode {Mode(mode).value}")
        losses.append(loss * len(idx))
        correct += int(np.sum(tape.logits.argmax(axis=1) == yb))
        if not freeze_bn_stats:
            for name, cache in tape.bn_caches.items():
                ops.update_running_stats(params.bn[name], cache)
        tensors = params.tensors()
        upd = {k: g for k, g in grads.items() if k in trainable and k not in params.frozen}
        ops.sgd_step(tensors, upd, opt)
    return float(np.sum(losses) / len(x)), correct / len(x)


def recalibrate_bn(params: NetParams, x, mode, batch_size=256, **kw):
    """Reset BN running statistics to population averages over ``x``.

    Each batch is normalized with its own statistics, as in training; the
    per-batch means and unbiased variances are averaged with sample-count
    weights. Momentum averages lag badly behind fast-moving weights, this
    does not.
    """
    totals = {}
    for s in range(0, len(x), batch_size):
        _, tape = forward(params, x[s : s + batch_size], mode, bn_mode="train", record=True, **kw)
        for name, cache in tape.bn_caches.items():
            m = cache["count"]
            acc = totals.setdefault(name, [0, 0.0, 0.0])
            acc[0] += m
            acc[1] = acc[1] + m * cache["mean"].astype(np.float64)
            acc[2] = acc[2] + m * cache["var"].astype(np.float64) * (m / max(m - 1, 1))
    for name, (m, mean_sum, var_sum) in totals.items():
        bn = params.bn[name]
        bn.running_mean[...] = mean_sum / m
        bn.running_var[...] = var_sum / m
    return params


def predict(params, x, mode=Mode.BINARY_INFER, batch_size=256, **kw):
    outs = [forward(params, x[s : s + batch_size], mode, **kw) for s in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, params.spec.num_classes))


def evaluate(params, x, y, mode=None, **kw) -> dict:
    """Top-1 (and top-5 when there are at least 5 classes) accuracy."""
    if mode is None:
        mode = Mode.BINARY_INFER if params.absorbed else Mode.BINARY_TRAIN
    logits = predict(params, x, mode, **kw)
    pred = logits.argmax(axis=1)
    out = {"top1": float(np.mean(pred == y)) if len(y) else 0.0, "top5": None}
    if logits.shape[1] >= 5 and len(y):
        top5 = np.argsort(-logits, axis=1, kind="stable")[:, :5]
        out["top5"] = float(np.mean((top5 == y[:, None]).any(axis=1)))
    return out


def pretrain(spec: NetworkSpec, data: Dataset, cfg: TrainConfig) -> NetParams:
    """Train the real-valued twin with clip or ReLU activations."""
    if cfg.init_kind not in ("clip", "relu"):
        raise ValueError("pretrain needs init_kind clip or relu")
    mode = Mode.PRETRAIN_CLIP if cfg.init_kind == "clip" else Mode.PRETRAIN_RELU
    params = build(spec, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    x, y = _train_data(data, cfg)
    opt = ops.SgdState(cfg.pretrain_lr, cfg.momentum)
    trainable = set(params.tensors())
    pcfg = replace(cfg, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, milestones=None)
    for e in range(cfg.pretrain_epochs):
        loss, _ = _epoch(params, x, y, mode, cfg, pcfg.lr_at(e), rng, trainable, opt)
        log.info("pretrain[%s] epoch %d loss %.4f", cfg.init_kind, e, loss)
    recalibrate_bn(params, x, mode)
    return params


def initial_params(spec, data, cfg, pretrained=None) -> NetParams:
    if cfg.init_kind == "random":
        return build(spec, seed=cfg.seed)
    src = pretrained if pretrained is not None else pretrain(spec, data, cfg)
    return src.copy()


def train_step_one(params: NetParams, data: Dataset, cfg: TrainConfig, report: RunReport | None = None) -> NetParams:
    """Binary training of the master weights; returns the updated params."""
    rng = np.random.default_rng([cfg.seed, 2])
    x, y = _train_data(data, cfg)
    opt = ops.SgdState(cfg.lr, cfg.momentum, weight_decay=0.0)
    trainable = set(params.tensors())
    kw = {"weight_update": cfg.weight_update, "act_backward": cfg.activation_backward, "scale_scope": cfg.scale_scope}
    for e in range(cfg.epochs):
        lr = cfg.lr_at(e)
        loss, train_top1 = _epoch(params, x, y, Mode.BINARY_TRAIN, cfg, lr, rng, trainable, opt)
        # train_top1 is measured on the fly: batch-statistics BN, augmented inputs
        entry = {"epoch": e, "lr": lr, "train_loss": loss, "train_top1": train_top1}
        recalibrate_bn(params, x, Mode.BINARY_TRAIN, **kw)
        if report is not None:
            entry["val_top1"] = evaluate(params, data.test_x, data.test_y, Mode.BINARY_TRAIN, **kw)["top1"]
            report.epochs.append(entry)
        log.info("step one epoch %d %s", e, entry)
    return params


def fold_scale_into_bn(params: NetParams, scale_scope="kernel"):
    """Replace W_r by sign(W_r) and fold the scale into BN eval statistics.

    With conv output m = s * m_sign, BN(m) = gamma (m - mu) / sqrt(var + eps)
    equals gamma' (m_sign - mu/s) / sqrt(var/s^2 + eps) + beta with
    gamma' = gamma * s * sqrt(var/s^2 + eps) / sqrt(var + eps).
    """
    from .model import layer_plan

    plan = {l.name: l for l in layer_plan(params.spec)}
    for name in params.binary_layers:
        w = params.weights[f"{name}.weight"]
        s = ops.kernel_scale(w, scale_scope).reshape(-1)
        bn = params.bn[name.replace(".conv", ".bn")]
        assert plan[name].geometry.out_channels == bn.channels
        s = np.where(s > 0, s, 1).astype(np.float64)
        mu, var = bn.running_mean.astype(np.float64), bn.running_var.astype(np.float64)
        new_var = var / (s * s)
        gamma = bn.gamma.astype(np.float64) * s * np.sqrt(new_var + bn.eps) / np.sqrt(var + bn.eps)
        bn.running_mean[...] = mu / s
        bn.running_var[...] = new_var
        bn.gamma[...] = gamma
        w[...] = np.where(w >= 0, 1, -1)


def absorb_bn_and_freeze(params: NetParams, data: Dataset, cfg: TrainConfig, bn_lr=None) -> NetParams:
    """Step two: exact +-1 weights, conv/fc frozen, BN retrained.

    The scale fold is already exact, so the retrain is a gentle fine-tune:
    binary nets flip predictions under small BN shifts, and ``cfg.bn_lr``
    defaults low enough to keep them stable.
    """
    if cfg.weight_update == WeightUpdate.MAGNITUDE_AWARE.value:
        fold_scale_into_bn(params, cfg.scale_scope)
    else:
        for name in params.binary_layers:
            w = params.weights[f"{name}.weight"]
            w[...] = np.where(w >= 0, 1, -1)
    params.frozen = set(params.weights)
    bn_cfg = replace(cfg, weight_update=WeightUpdate.MAGNITUDE_AWARE.value)
    lr = cfg.bn_lr if bn_lr is None else bn_lr
    rng = np.random.default_rng([cfg.seed, 3])
    x, y = _train_data(data, cfg)
    opt = ops.SgdState(lr, cfg.momentum)
    bn_names = {k for k in params.tensors() if k.endswith((".gamma", ".beta"))}
    for _ in range(cfg.bn_epochs):
        _epoch(params, x, y, Mode.BINARY_TRAIN, bn_cfg, lr, rng, bn_names, opt)
    if cfg.bn_epochs:
        recalibrate_bn(params, x, Mode.BINARY_TRAIN, weight_update=bn_cfg.weight_update)
    params.absorbed = True
    return params


def train(spec: NetworkSpec, data: Dataset, cfg: TrainConfig, pretrained=None) -> tuple[NetParams, RunReport]:
    """pretrain (per init_kind) -> step one -> absorb -> evaluate."""
    t0 = time.perf_counter()
    report = RunReport(config=cfg.to_dict(), spec=spec.name, variant=spec.variant.value, seed=cfg.seed)
    params = initial_params(spec, data, cfg, pretrained)
    params = train_step_one(params, data, cfg, report)
    params = absorb_bn_and_freeze(params, data, cfg)
    res = evaluate(params, data.test_x, data.test_y, Mode.BINARY_INFER)
    report.final_top1, report.final_top5 = res["top1"], res["top5"]
    report.wall_time = time.perf_counter() - t0
    return params, report


# --- ablation --------------------------------------------------------------


def ablation_grid(base: TrainConfig, inits=("relu", "clip")) -> list[TrainConfig]:
    """Table-1 style grid: init x weight update x activation backward."""
    out = []
    for init in inits:
        for wu in (WeightUpdate.ORIGINAL.value, WeightUpdate.MAGNITUDE_AWARE.value):
            for ab in (SurrogateKind.CLIP_STE.value, SurrogateKind.PIECEWISE_POLY.value):
                out.append(replace(base, init_kind=init, weight_update=wu, activation_backward=ab))
    return out


def run_ablation(grid, spec: NetworkSpec, data: Dataset, variants=(Variant.BIREAL, Variant.PLAIN)) -> list[dict]:
    """Train every (variant, config) cell; pre-training is shared between
    cells with the same variant, init kind and seed. Failed cells are
    recorded and the grid continues."""
    rows = []
    cache = {}
    for v in variants:
        vspec = spec.with_variant(v)
        for cfg in grid:
            row = {
                "variant": Variant(v).value,
                "init": cfg.init_kind,
                "weight_update": cfg.weight_update,
                "activation_backward": cfg.activation_backward,
                "seed": cfg.seed,
            }
            try:
                pre = None
                if cfg.init_kind != "random":
                    key = (Variant(v), cfg.init_kind, cfg.seed)
                    if key not in cache:
                        cache[key] = pretrain(vspec, data, cfg)
                    pre = cache[key]
                _, rep = train(vspec, data, cfg, pretrained=pre)
                row.update(top1=rep.final_top1, top5=rep.final_top5, report=rep)
            except Exception as exc:  # recorded, grid continues
                log.exception("ablation cell failed: %s", row)
                row.update(top1=None, top5=None, error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    return rows
