"""Residual MLP regressor (3 x 128, layer norm, ReLU, sigmoid output),
full-batch AdamW training and overall-distance epoch selection.

Everything is float64 numpy with hand-written backpropagation so that a
fixed seed reproduces training bit for bit.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, SchemaError
from .pipeline import (FEATURE_NAMES, SCHEMA_VERSION, FeatureConfig, FeatureTable, Scaler,
                       scale_targets, unscale_targets)

log = logging.getLogger(__name__)

HIDDEN = 128
LN_EPS = 1e-5
MODEL_FORMAT = "tsmqual-model/1"
TARGETS = ("smos", "median_os", "raw_smos", "raw_median_os")
LAYERS = ("1", "2", "3")


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 800
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.10
    target: str = "smos"
    include_references: bool = True
    extend: bool = True
    selection: str = "all"  # "all" uses test metrics too; "train_val" does not

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise DataError("val_fraction must lie in (0, 1)")
        if self.epochs < 1:
            raise DataError("epochs must be at least 1")
        if self.target not in TARGETS:
            raise DataError(f"unknown target {self.target!r}; choose from {TARGETS}")
        if self.selection not in ("all", "train_val"):
            raise DataError("selection must be 'all' or 'train_val'")


# -- parameters ----------------------------------------------------------------

def init_params(seed: int, input_dim: int) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN gains."""
    if input_dim < 1:
        raise DataError("input_dim must be positive")
    rng = np.random.default_rng(seed)
    params = {}
    fan_ins = {"1": input_dim, "2": HIDDEN, "3": HIDDEN}
    for name in LAYERS:
        bound = 1.0 / np.sqrt(fan_ins[name])
        params[f"W{name}"] = rng.uniform(-bound, bound, size=(fan_ins[name], HIDDEN))
        params[f"b{name}"] = np.zeros(HIDDEN)
        params[f"g{name}"] = np.ones(HIDDEN)
        params[f"o{name}"] = np.zeros(HIDDEN)
    bound = 1.0 / np.sqrt(HIDDEN)
    params["W4"] = rng.uniform(-bound, bound, size=(HIDDEN, 1))
    params["b4"] = np.zeros(1)
    return params


@dataclass
class Model:
    params: dict
    scaler: Scaler | None = None
    feature_names: tuple = FEATURE_NAMES
    schema: str = SCHEMA_VERSION
    feature_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    selected_epoch: int = -1
    summary: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[0]


def init_model(seed: int, input_dim: int = len(FEATURE_NAMES)) -> Model:
    return Model(init_params(seed, input_dim))


# -- forward / backward --------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _layer_norm(z, gain, offset):
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv
    return xhat * gain + offset, (xhat, inv)


def _layer_norm_back(dout, gain, cache):
    xhat, inv = cache
    dgain = np.sum(dout * xhat, axis=0)
    doffset = np.sum(dout, axis=0)
    dx = dout * gain
    dz = inv * (dx - dx.mean(axis=1, keepdims=True)
                - xhat * np.mean(dx * xhat, axis=1, keepdims=True))
    return dz, dgain, doffset


def forward_batch(params: dict, x: np.ndarray, keep_cache: bool = False):
    """Scores in (0, 1) for a batch of normalised feature rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params["W1"].shape[0]:
        raise DataError(f"expected {params['W1'].shape[0]} features, got {x.shape[1]}")
    caches = []
    h = x
    for name in LAYERS:
        z = h @ params[f"W{name}"] + params[f"b{name}"]
        a, ln_cache = _layer_norm(z, params[f"g{name}"], params[f"o{name}"])
        r = np.maximum(a, 0.0)
        caches.append((h, a, ln_cache))
        h = r if name == "1" else h + r
    y = _sigmoid(h @ params["W4"] + params["b4"])[:, 0]
    if keep_cache:
        return y, (caches, h)
    return y


def forward(model: Model, x) -> np.ndarray:
    return forward_batch(model.params, x)


def rmse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def loss_and_grads(params: dict, x: np.ndarray, t: np.ndarray):
    """Batch RMSE and its gradient with respect to every parameter."""
    y, (caches, h3) = forward_batch(params, x, keep_cache=True)
    n = y.size
    loss = rmse(y, t)
    grads = {}
    if loss == 0.0:
        return loss, {k: np.zeros_like(v) for k, v in params.items()}
    dy = (y - t) / (n * loss)
    dz4 = (dy * y * (1.0 - y))[:, None]
    grads["W4"] = h3.T @ dz4
    grads["b4"] = dz4.sum(axis=0)
    dh = dz4 @ params["W4"].T
    for name in reversed(LAYERS):
        h_in, a, ln_cache = caches[int(name) - 1]
        da = dh * (a > 0.0)
        dz, grads[f"g{name}"], grads[f"o{name}"] = _layer_norm_back(da, params[f"g{name}"], ln_cache)
        grads[f"W{name}"] = h_in.T @ dz
        grads[f"b{name}"] = dz.sum(axis=0)
        dh_in = dz @ params[f"W{name}"].T
        dh = dh_in if name == "1" else dh + dh_in
    return loss, grads


class AdamW:
    """Decoupled weight decay applied before the Adam step, as in PyTorch."""

    def __init__(self, params, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            params[k] *= 1.0 - self.lr * self.wd
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# -- selection -----------------------------------------------------------------

def overall_distance(rho, loss) -> float:
    """Euclidean combination of correlation shortfall/spread and loss
    level/spread across data splits (lower is better)."""
    rho = np.asarray(rho, dtype=np.float64)
    loss = np.asarray(loss, dtype=np.float64)
    rho_term = np.hypot(1.0 - rho.mean(), rho.max() - rho.min())
    loss_term = np.hypot(loss.mean(), loss.max() - loss.min())
    return float(np.hypot(rho_term, loss_term))


def select_epoch(distances) -> int:
    """Index of the smallest distance; the earliest wins ties."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise DataError("empty training history")
    return int(np.argmin(d))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2:
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt(np.dot(da, da) * np.dot(db, db))
    return float(np.dot(da, db) / den) if den > 0 else 0.0


# -- training ------------------------------------------------------------------

SPLITS = ("tr", "val", "te")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_frame(self):
        import pandas as pd
        return pd.DataFrame(self.rows)


def split_rows(frame, val_fraction: float, seed: int, include_references: bool):
    """Index arrays (train, val, test). Validation is the last fraction of a
    seed-determined permutation of the training subset."""
    subset = frame["subset"].astype(str).str.lower().to_numpy()
    augmented = frame["augmented"].astype(bool).to_numpy()
    train_like = np.isin(subset, ["train", ""])
    if not include_references:
        train_like &= ~augmented
    pool = np.flatnonzero(train_like)
    test = np.flatnonzero(subset == "test")
    if pool.size < 2:
        raise DataError("training subset needs at least two rows")
    perm = np.random.default_rng(seed).permutation(pool)
    n_val = max(1, int(round(val_fraction * pool.size)))
    return np.sort(perm[:-n_val]), np.sort(perm[-n_val:]), test


def _metrics(params, x, t):
    y = forward_batch(params, x)
    return 4.0 * rmse(y, t), pearson(y, t)


def train(table: FeatureTable, config: TrainConfig = TrainConfig(), progress=None):
    """Fit a model on the normalised ``table``.

    Test-subset rows never contribute gradients; with ``selection='all'``
    their metrics take part in choosing the epoch. Reported losses are RMSE
    on the 1-5 scale.
    """
    if table.scaler is None:
        raise DataError("table must be normalised before training")
    frame = table.frame
    target = table.labels(config.target)
    tr, val, te = split_rows(frame, config.val_fraction, config.seed, config.include_references)
    needed = np.concatenate([tr, val, te])
    if np.isnan(target[needed]).any():
        raise DataError(f"rows lack {config.target!r} labels")
    x = table.features
    t = scale_targets(target)
    splits = {"tr": tr, "val": val, "te": te}
    used = [s for s in SPLITS if splits[s].size and (s != "te" or config.selection == "all")]

    params = init_params(config.seed, x.shape[1])
    opt = AdamW(params, config.learning_rate, config.weight_decay,
                config.adam_beta1, config.adam_beta2, config.adam_eps)
    history = TrainHistory()
    best = (np.inf, -1, None)
    total = config.epochs
    epoch = 0
    extended = False
    while epoch < total:
        loss, grads = loss_and_grads(params, x[tr], t[tr])
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        opt.step(params, grads)
        row = {"epoch": epoch}
        for s in SPLITS:
            if splits[s].size:
                row[f"L_{s}"], row[f"rho_{s}"] = _metrics(params, x[splits[s]], t[splits[s]])
            else:
                row[f"L_{s}"], row[f"rho_{s}"] = np.nan, np.nan
        row["D"] = overall_distance([row[f"rho_{s}"] for s in used],
                                    [row[f"L_{s}"] for s in used])
        history.append(**row)
        if row["D"] < best[0]:
            best = (row["D"], epoch, {k: v.copy() for k, v in params.items()})
        if progress is not None:
            progress(row)
        epoch += 1
        if epoch == total and config.extend and not extended and \
                best[1] >= total - max(1, total // 10):
            total += config.epochs
            extended = True
            log.info("best epoch %d is in the final tenth; extending to %d epochs",
                     best[1], total)

    selected = select_epoch(history.column("D"))
    chosen = history.rows[selected]
    model = Model(
        params=best[2],
        scaler=table.scaler,
        feature_config=table.config.to_dict() if table.config else {},
        train_config=asdict(config),
        selected_epoch=selected,
        summary={k: chosen[k] for k in chosen} | {"epochs_trained": len(history),
                                                   "extended": extended},
    )
    return model, history


# -- inference -----------------------------------------------------------------

def predict(model: Model, features, feature_names=FEATURE_NAMES) -> np.ndarray:
    """Objective MOS on the 1-5 scale for raw (unscaled) feature rows."""
    if tuple(feature_names) != tuple(model.feature_names):
        raise SchemaError("feature names do not match the model")
    if model.scaler is None:
        raise SchemaError("model carries no feature scaler")
    x = model.scaler.transform(np.atleast_2d(features))
    return unscale_targets(forward(model, x))


def predict_table(model: Model, table: FeatureTable) -> np.ndarray:
    if table.scaler is not None:
        raise DataError("predict expects an unnormalised table")
    _check_config(model, table.config)
    return predict(model, table.features)


def _check_config(model: Model, config: FeatureConfig | None):
    if config is None or not model.feature_config:
        return
    if config.to_dict() != FeatureConfig.from_dict(model.feature_config).to_dict():
        raise SchemaError(
            f"table features were extracted with {config.to_dict()}, "
            f"model expects {model.feature_config}")


# -- persistence ---------------------------------------------------------------

def model_to_dict(model: Model) -> dict:
    return {
        "format": MODEL_FORMAT,
        "schema": model.schema,
        "feature_names": list(model.feature_names),
        "feature_config": model.feature_config,
        "train_config": model.train_config,
        "init": "uniform(+-1/sqrt(fan_in)) weights, zero biases, LN gain 1 offset 0",
        "layer_norm_eps": LN_EPS,
        "selected_epoch": model.selected_epoch,
        "summary": model.summary,
        "scaler": model.scaler.to_dict() if model.scaler else None,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in model.params.items()},
    }


def save_model(model: Model, path) -> None:
    """JSON with repr-exact floats, so loading restores every bit."""
    text = json.dumps(model_to_dict(model), indent=1, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_model(path) -> Model:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    if d.get("format") != MODEL_FORMAT:
        raise SchemaError(f"{path} is not a {MODEL_FORMAT} file")
    if d.get("schema") != SCHEMA_VERSION:
        raise SchemaError(
            f"model feature schema {d.get('schema')!r} does not match {SCHEMA_VERSION!r}")
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in d["params"].items()}
    return Model(
        params=params,
        scaler=Scaler.from_dict(d["scaler"]) if d.get("scaler") else None,
        feature_names=tuple(d["feature_names"]),
        schema=d["schema"],
        feature_config=d.get("feature_config") or {},
        train_config=d.get("train_config") or {},
        selected_epoch=d.get("selected_epoch", -1),
        summary=d.get("summary") or {},
    )
