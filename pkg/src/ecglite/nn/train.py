"""Adam and the training loop."""
import csv
import io
import logging
import zipfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateDistribution, ShapeError
from ..labels import ClassWeights, compute_class_weights
from . import layers as L
from .model import forward_with_cache, init_params, model_backward, predict

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    shuffle_seed: int = 0
    init_seed: int = 0
    bn_debias: bool = True
    class_weights: ClassWeights = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params, names):
        return cls({n: np.zeros_like(params[n]) for n in names},
                   {n: np.zeros_like(params[n]) for n in names}, 0)


def adam_step(params, grads, state, tc):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        if g.shape != params[name].shape or state.m[name].shape != g.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
    state.t += 1
    b1, b2 = tc.adam_beta1, tc.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= tc.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + tc.adam_eps)
    return params, state


def _batches(order, batch_size):
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # train-mode batch norm rejects a batch of one; fold it into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def evaluate_loss(config, params, x, y, weights=None, batch_size=256):
    """Eval-mode (loss, accuracy at threshold 0.5)."""
    probs = np.concatenate([predict(config, params, x[i : i + batch_size])
                            for i in range(0, len(x), batch_size)])
    return L.weighted_bce(probs, y, weights), float(np.mean((probs >= 0.5) == (y == 1)))


def train_model(train, val, config, tc, params=None, callback=None):
    """Fit the network; returns ``(params, history, adam_state)``.

    ``train`` and ``val`` are ``(x, y)`` pairs; ``val`` may be None.
    History rows carry ``epoch, train_loss, val_loss, val_accuracy``; the
    validation loss is unweighted.
    """
    x, y = np.asarray(train[0], dtype=np.float64), np.asarray(train[1]).astype(np.int64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if len(np.unique(y)) < 2:
        raise DegenerateDistribution("training labels contain a single class")
    weights = tc.class_weights or compute_class_weights(y)
    if len(x) < 2:
        raise DegenerateDistribution("need at least two training records")

    if config.bn_eps != tc.bn_eps:
        log.warning("bn_eps differs between model (%g) and training (%g) config; using model's",
                    config.bn_eps, tc.bn_eps)
    params = init_params(config, tc.init_seed) if params is None else params
    names = params.trainable(config)
    state = AdamState.zeros_like(params, names)
    rng = np.random.default_rng(tc.shuffle_seed)
    history = []

    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(x))
        total, seen = 0.0, 0
        for idx in _batches(order, tc.batch_size):
            xb, yb = x[idx], y[idx]
            step = state.t + 1 if tc.bn_debias else None
            p, cache = forward_with_cache(config, params, xb, "train", tc.bn_momentum, bn_step=step)
            total += L.weighted_bce(p, yb, weights) * len(idx)
            seen += len(idx)
            grads = model_backward(config, params, cache, yb, weights)
            adam_step(params, grads, state, tc)
        row = {"epoch": epoch, "train_loss": total / seen,
               "val_loss": float("nan"), "val_accuracy": float("nan")}
        if val is not None and len(val[0]):
            row["val_loss"], row["val_accuracy"] = evaluate_loss(
                config, params, np.asarray(val[0], dtype=np.float64), np.asarray(val[1]))
        history.append(row)
        log.info("epoch %d: train_loss=%.4f val_loss=%.4f val_acc=%.3f", epoch,
                 row["train_loss"], row["val_loss"], row["val_accuracy"])
        if callback is not None:
            callback(row)
    return params, history, state


def history_csv(history):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in HISTORY_COLUMNS})
    return buf.getvalue()


def save_checkpoint(path, config, params, state, history):
    """Full training state at 64-bit: parameters, Adam moments and history."""
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in params.tensors.items()}
    arrays.update({f"adam_m/{k}": np.asarray(v, dtype=np.float64) for k, v in state.m.items()})
    arrays.update({f"adam_v/{k}": np.asarray(v, dtype=np.float64) for k, v in state.v.items()})
    arrays["adam_t"] = np.array(state.t, dtype=np.int64)
    arrays["history"] = np.array([[r[c] for c in HISTORY_COLUMNS] for r in history], dtype=np.float64)
    write_npz(path, arrays)


def write_npz(path, arrays):
    """Like ``np.savez`` but byte-reproducible: entries carry a fixed timestamp."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
