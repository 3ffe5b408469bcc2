"""Model evaluation, losses, frozen fine-tuning and accuracy."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from ..errors import ConfigError, NumericalError
from ..graph import OperatorGraph
from .autodiff import backward, forward, trainable_ids
from .data import Dataset
from .params import ParamStore

MODEL_INPUT = -1
EVAL_CHUNK = 300


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 32
    epochs: int = 3
    max_train_samples: int | None = None  # per-epoch subsample; None = full split

    def __post_init__(self):
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive, momentum and weight_decay non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.max_train_samples is not None and self.max_train_samples < 1:
            raise ConfigError("max_train_samples must be positive")


# -- losses ------------------------------------------------------------------


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple:
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1
    return float(loss), (g / n).astype(logits.dtype)


def mse(pred: np.ndarray, target: np.ndarray) -> tuple:
    diff = pred - np.asarray(target, pred.dtype).reshape(pred.shape)
    n = pred.shape[0]
    return float(np.sum(diff.astype(np.float64) ** 2) / n), (2 * diff / n).astype(pred.dtype)


LOSSES = {"cross_entropy": cross_entropy, "mse": mse}


# -- model evaluation ----------------------------------------------------------


def _op_params(m, params: ParamStore, o: int) -> dict:
    return params.for_operator(o)


def _run_op(m, o, ins, op_params, keep):
    op = m.operators[o]
    if op.kind == "graph":
        out, vals = forward(op.graph, op_params, ins[0], keep=keep)
        return out, vals
    if op.kind == "add":
        out = ins[0] + ins[1]
    else:
        out = np.concatenate(ins, axis=1)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite output of merge operator {o}")
    return out, None


def eval_model(m, params: ParamStore, x: np.ndarray) -> np.ndarray:
    return model_values(m, params, x)[m.output_id]


def model_values(m, params: ParamStore, x: np.ndarray) -> dict:
    vals = {MODEL_INPUT: x}
    for o in m.order:
        ins = [vals[s] for s in m.operands(o)]
        vals[o] = _run_op(m, o, ins, _op_params(m, params, o), False)[0]
    return vals


class Frontier:
    """Cached outputs of the operators upstream of a set of dirty operators.

    Operators outside ``dirty`` never change during fine-tuning, so their
    outputs on a dataset are computed once and sliced per mini-batch.
    """

    def __init__(self, m, params: ParamStore, dirty: Iterable[int], inputs: np.ndarray):
        self.dirty = frozenset(dirty)
        self.order = [o for o in m.order if o in self.dirty]
        needed = {s for o in self.order for s in m.operands(o) if s not in self.dirty}
        self.values: dict[int, np.ndarray] = {}
        if needed - {MODEL_INPUT}:
            clean = [o for o in m.order if o not in self.dirty]
            chunks: dict[int, list] = {s: [] for s in needed}
            for start in range(0, len(inputs), EVAL_CHUNK):
                vals = {MODEL_INPUT: inputs[start : start + EVAL_CHUNK]}
                for o in clean:
                    ins = [vals[s] for s in m.operands(o)]
                    vals[o] = _run_op(m, o, ins, _op_params(m, params, o), False)[0]
                for s in needed:
                    chunks[s].append(vals[s])
            self.values = {s: np.concatenate(v) for s, v in chunks.items()}
        if MODEL_INPUT in needed:
            self.values[MODEL_INPUT] = inputs
        self.size = len(inputs)

    def batch(self, idx) -> dict:
        return {s: v[idx] for s, v in self.values.items()}


def _dirty_forward(m, frontier: Frontier, op_params: Mapping, idx, keep: bool) -> tuple:
    vals = frontier.batch(idx)
    tapes = {}
    for o in frontier.order:
        ins = [vals[s] for s in m.operands(o)]
        vals[o], tapes[o] = _run_op(m, o, ins, op_params.get(o, {}), keep)
    return vals, tapes


def dirty_set(m, targets: Iterable[int]) -> frozenset:
    return frozenset(m.descendants(targets))


# -- gradients -------------------------------------------------------------------


def _model_backward(m, frontier: Frontier, vals, tapes, g_out, targets: set, wanted: Mapping) -> dict:
    """wanted: op id -> list of parameter node ids.  Returns {(op, node): grad}."""
    cot = {m.output_id: g_out}
    grads = {}
    for o in reversed(frontier.order):
        g = cot.pop(o, None)
        if g is None:
            continue
        op = m.operators[o]
        srcs = m.operands(o)
        if op.kind == "graph":
            need_in = srcs[0] in frontier.dirty
            gx, gp = backward(op.graph, tapes[o], g, set(wanted.get(o, ())), need_input=need_in)
            for nid, v in gp.items():
                grads[(o, nid)] = v
            ins_g = [gx]
        elif op.kind == "add":
            ins_g = [g, g]
        else:
            c0 = vals[srcs[0]].shape[1]
            ins_g = [g[:, :c0], g[:, c0:]]
        for s, gs in zip(srcs, ins_g):
            if s in frontier.dirty and gs is not None:
                cot[s] = cot[s] + gs if s in cot else gs
    return grads


def grad(target, params, x: np.ndarray, loss: str, label) -> dict:
    """Reverse-mode gradient of ``loss`` for every non-frozen trainable tensor.

    ``target`` is an OperatorGraph (``params``: node id -> array, result keyed
    by node id) or a ModelGraph (``params``: ParamStore, result keyed by
    (operator id, node id)).
    """
    fn = LOSSES[loss]
    if isinstance(target, OperatorGraph):
        out, vals = forward(target, params, x, keep=True)
        _, g = fn(out, np.asarray(label))
        _, gp = backward(target, vals, g, set(trainable_ids(target)) & set(params), need_input=False)
        return gp
    m = target
    keys = [k for k in params.keys() if k not in params.frozen]
    ops = {k[0] for k in keys}
    frontier = Frontier(m, params, dirty_set(m, ops), x)
    op_params = {o: params.for_operator(o) for o in frontier.order}
    idx = np.arange(len(x))
    vals, tapes = _dirty_forward(m, frontier, op_params, idx, keep=True)
    _, g = fn(vals[m.output_id], np.asarray(label))
    wanted = {}
    for o, nid in keys:
        wanted.setdefault(o, []).append(nid)
    return _model_backward(m, frontier, vals, tapes, g, ops, wanted)


# -- fine-tuning -------------------------------------------------------------------


@dataclass
class TrainLog:
    epoch_losses: list
    stopped_early: bool = False


def finetune(m, params: ParamStore, targets: Iterable[int], data: Dataset, cfg: TrainConfig,
             rng: np.random.Generator, frontier: Frontier | None = None, log: TrainLog | None = None) -> ParamStore:
    """SGD (momentum, weight decay) on the target operators' tensors only."""
    targets = set(targets)
    keys = sorted(k for k in params.keys() if k[0] in targets)
    out = ParamStore(dict(params.tensors), frozenset(k for k in params.keys() if k[0] not in targets))
    if cfg.epochs == 0 or not keys:
        return out
    if cfg.batch_size > len(data):
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {len(data)}")
    if frontier is None or frontier.dirty != dirty_set(m, targets) or frontier.size != len(data):
        frontier = Frontier(m, params, dirty_set(m, targets), data.inputs)
    for k in keys:
        out.tensors[k] = np.array(params[k], dtype=np.float32, copy=True)
    velocity = {k: np.zeros_like(out.tensors[k]) for k in keys}
    op_params = {o: out.for_operator(o) for o in frontier.order}
    wanted: dict[int, list] = {}
    for o, nid in keys:
        wanted.setdefault(o, []).append(nid)
    lr, mu, wd = np.float32(cfg.learning_rate), np.float32(cfg.momentum), np.float32(cfg.weight_decay)
    n = len(data)
    losses: list[float] = []
    rises = 0
    stopped = False
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        if cfg.max_train_samples is not None:
            perm = perm[: cfg.max_train_samples]
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = np.sort(perm[start : start + cfg.batch_size])
            vals, tapes = _dirty_forward(m, frontier, op_params, idx, keep=True)
            loss, g = cross_entropy(vals[m.output_id], data.labels[idx])
            if not np.isfinite(loss):
                raise NumericalError("non-finite training loss")
            grads = _model_backward(m, frontier, vals, tapes, g, targets, wanted)
            for k in keys:
                p = out.tensors[k]
                gk = grads[k] + wd * p
                v = velocity[k]
                v *= mu
                v += gk
                p -= lr * v
                if not np.all(np.isfinite(p)):
                    raise NumericalError(f"non-finite parameter {k}")
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        if len(losses) >= 2 and losses[-1] > losses[-2]:
            rises += 1
            if rises >= 2:
                stopped = True
                break
        else:
            rises = 0
    if log is not None:
        log.epoch_losses, log.stopped_early = losses, stopped
    return out


def predict(m, params: ParamStore, data: Dataset, frontier: Frontier | None = None) -> np.ndarray:
    if frontier is None or frontier.size != len(data):
        frontier = Frontier(m, params, frozenset(m.order), data.inputs)
    op_params = {o: params.for_operator(o) for o in frontier.order}
    preds = []
    for start in range(0, len(data), EVAL_CHUNK):
        idx = np.arange(start, min(start + EVAL_CHUNK, len(data)))
        vals, _ = _dirty_forward(m, frontier, op_params, idx, keep=False)
        preds.append(np.argmax(vals[m.output_id], axis=1))
    return np.concatenate(preds)


def accuracy(m, params: ParamStore, data: Dataset, frontier: Frontier | None = None) -> float:
    """Top-1 accuracy over ``data``."""
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict(m, params, data, frontier) == data.labels))


def train_model(m, params: ParamStore, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> ParamStore:
    """Train every operator of ``m`` jointly (used to prepare baseline models)."""
    return finetune(m, params, m.graph_ops(), data, cfg, rng)
