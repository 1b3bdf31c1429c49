"""Set-point to per-sensor regressor: 1 -> 5 x 300 ReLU -> n linear.

Inputs and targets are standardized with training-set statistics; the loss
is the mean squared error in standardized units over present targets only.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError, InputError, ModelFormatError

FORMAT_VERSION = 1
STD_FLOOR = 1e-12
HIDDEN = (300, 300, 300, 300, 300)
PREDICT_BLOCK = 256


@dataclass
class MlpModel:
    layer_dims: tuple
    weights: list
    biases: list
    input_stats: tuple = (0.0, 1.0)
    output_stats: tuple = None
    seed: int = 0
    trained_epochs: int = 0
    sensor_ids: tuple = ()
    activation: str = "relu"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        n_out = self.layer_dims[-1]
        if self.output_stats is None:
            self.output_stats = (np.zeros(n_out), np.ones(n_out))
        mean, std = self.output_stats
        self.output_stats = (np.asarray(mean, dtype=float), np.maximum(np.asarray(std, dtype=float), STD_FLOOR))
        self.input_stats = (float(self.input_stats[0]), max(float(self.input_stats[1]), STD_FLOOR))
        self.sensor_ids = tuple(self.sensor_ids)
        self.check()

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    def check(self):
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ConfigurationError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ConfigurationError(f"layer {i} has shape {w.shape}/{b.shape}, expected {(dims[i], dims[i + 1])}")
        if len(self.output_stats[0]) != dims[-1] or len(self.output_stats[1]) != dims[-1]:
            raise ConfigurationError("output_stats length does not match the output layer")
        if self.sensor_ids and len(self.sensor_ids) != dims[-1]:
            raise ConfigurationError("sensor_ids length does not match the output layer")

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def parameters(self) -> list:
        return [*self.weights, *self.biases]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, max_epochs and patience must be positive")


def _he_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(n_outputs: int, seed: int = 0, hidden=HIDDEN, sensor_ids=()) -> MlpModel:
    """He-uniform weights, zero biases, identity standardization."""
    if int(n_outputs) < 1:
        raise ConfigurationError("a model needs at least one output")
    dims = (1, *[int(h) for h in hidden], int(n_outputs))
    rng = np.random.default_rng(int(seed))
    weights = [_he_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return MlpModel(dims, weights, biases, seed=int(seed), sensor_ids=tuple(sensor_ids))


# -- inference -------------------------------------------------------------------

def _standardize_input(model, x):
    mean, std = model.input_stats
    return ((np.asarray(x, dtype=float) - mean) / std).reshape(-1, 1)


def _hidden(model, z):
    h = z
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = h @ w
        h += b
        np.maximum(h, 0.0, out=h)
    return h


def _forward_std(model, z):
    """Standardized outputs and the activations needed for backprop."""
    acts = [z]
    h = z
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = h @ w
        h += b
        np.maximum(h, 0.0, out=h)
        acts.append(h)
    out = h @ model.weights[-1]
    out += model.biases[-1]
    return out, acts


def forward(model: MlpModel, setpoint: float) -> np.ndarray:
    """Predicted reading of every sensor for one set point, in sensor units."""
    x = float(setpoint)
    if not np.isfinite(x):
        raise InputError(f"set point must be finite, got {setpoint!r}")
    return predict(model, np.array([x]))[0]


def predict(model: MlpModel, setpoints) -> np.ndarray:
    """Batched :func:`forward`; rows with a ``nan`` set point come back ``nan``."""
    x = np.asarray(setpoints, dtype=float).reshape(-1)
    ok = np.isfinite(x)
    out = np.full((len(x), model.n_outputs), np.nan)
    if ok.any():
        std_out, _ = _forward_std(model, _standardize_input(model, x[ok]))
        mean, std = model.output_stats
        out[ok] = std_out * std + mean
    return out


def predict_aligned(model: MlpModel, setpoints, slots, block: int = PREDICT_BLOCK) -> np.ndarray:
    """:func:`predict` evaluated in fixed blocks keyed by ``slots``.

    Row ``i`` is always computed at position ``slots[i] % block`` of a
    ``block``-row batch, so its value does not depend on how the stream was
    chunked.  BLAS results otherwise vary with batch shape.
    """
    x = np.asarray(setpoints, dtype=float).reshape(-1)
    slots = np.asarray(slots, dtype=np.int64).reshape(-1)
    if len(slots) != len(x):
        raise InputError("setpoints and slots must have the same length")
    out = np.full((len(x), model.n_outputs), np.nan)
    ids = slots // block
    for bid in np.unique(ids):
        rows = np.nonzero(ids == bid)[0]
        batch = np.full(block, model.input_stats[0])
        vals = x[rows]
        pos = slots[rows] - bid * block
        batch[pos] = np.where(np.isfinite(vals), vals, model.input_stats[0])
        pred = predict(model, batch)
        res = pred[pos]
        res[~np.isfinite(vals)] = np.nan
        out[rows] = res
    return out


# -- loss and gradients ------------------------------------------------------------

def _prepare(model, setpoints, targets, mask=None):
    x = np.asarray(setpoints, dtype=float).reshape(-1)
    y = np.asarray(targets, dtype=float).reshape(len(x), -1)
    if y.shape[1] != model.n_outputs:
        raise InputError(f"targets have {y.shape[1]} columns, model has {model.n_outputs} outputs")
    m = np.isfinite(y) if mask is None else (np.asarray(mask, dtype=bool).reshape(y.shape) & np.isfinite(y))
    mean, std = model.output_stats
    zy = np.where(m, (np.where(m, y, 0.0) - mean) / std, 0.0)
    return _standardize_input(model, x), zy, m.astype(float)


def _loss_grad(model, z, zy, m, with_grad=True):
    out, acts = _forward_std(model, z)
    count = m.sum()
    if count == 0:
        raise InputError("batch has no present targets")
    diff = (out - zy) * m
    mse = float(np.sum(diff * diff) / count)
    if not with_grad:
        return mse, None
    g = diff * (2.0 / count)
    nl = len(model.weights)
    gw = [None] * nl
    gb = [None] * nl
    for i in range(nl - 1, -1, -1):
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = g @ model.weights[i].T
            g *= acts[i] > 0
    return mse, (gw, gb)


def loss_and_gradients(model: MlpModel, setpoints, targets, mask=None):
    """Standardized MSE over present targets and its exact gradients.

    Returns ``(mse, (weight_grads, bias_grads))`` with shapes matching
    ``model.weights`` and ``model.biases``.
    """
    if len(np.atleast_1d(setpoints)) == 0:
        raise InputError("empty batch")
    z, zy, m = _prepare(model, setpoints, targets, mask)
    if not np.isfinite(z).all():
        raise InputError("set points must be finite")
    return _loss_grad(model, z, zy, m)


# -- training ----------------------------------------------------------------------

def _usable(setpoints, targets, mask=None):
    x = np.asarray(setpoints, dtype=float).reshape(-1)
    y = np.asarray(targets, dtype=float).reshape(len(x), -1)
    m = np.isfinite(y) if mask is None else (np.asarray(mask, dtype=bool).reshape(y.shape) & np.isfinite(y))
    keep = np.isfinite(x) & m.any(axis=1)
    return x[keep], np.where(m[keep], y[keep], np.nan), m[keep]


def _unpack(dataset):
    if len(dataset) == 3:
        return dataset
    return dataset[0], dataset[1], None


def _column_stats(y, m):
    count = m.sum(axis=0)
    safe = np.where(m, y, 0.0)
    mean = np.where(count > 0, safe.sum(axis=0) / np.maximum(count, 1), 0.0)
    var = np.where(m, (safe - mean) ** 2, 0.0).sum(axis=0) / np.maximum(count, 1)
    return mean, np.maximum(np.sqrt(var), STD_FLOOR)


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        c = self.cfg
        self.t += 1
        corr1 = 1.0 - c.beta1 ** self.t
        corr2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p -= c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.epsilon)


def _fit(params, batch_loss, val_loss, n_rows, cfg: TrainConfig, seed_key):
    """Shared epoch loop: Adam, fixed seeded batch order, early stopping.

    ``batch_loss(idx)`` returns ``(mse, grads)`` aligned with ``params``.
    Returns ``(best_params_copy, best_epoch, history)``.
    """
    opt = _Adam(params, cfg)
    best = [p.copy() for p in params]
    best_val = val_loss()
    best_epoch = 0
    history = []
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([*seed_key, epoch]).permutation(n_rows)
        total = 0.0
        for start in range(0, n_rows, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            with np.errstate(over="ignore", invalid="ignore"):
                mse, grads = batch_loss(idx)
            if not np.isfinite(mse):
                raise DivergenceError(f"training loss became non-finite in epoch {epoch}", epoch=epoch)
            total += mse * len(idx)
            opt.step(grads)
        with np.errstate(over="ignore", invalid="ignore"):
            val = val_loss()
        if not np.isfinite(val):
            raise DivergenceError(f"validation loss became non-finite in epoch {epoch}", epoch=epoch)
        history.append({"epoch": epoch, "train_mse": total / n_rows, "val_mse": val})
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, best_epoch, history


def train(model: MlpModel, train_set, val_set, cfg: TrainConfig = TrainConfig()):
    """Fit all layers with Adam; returns ``(best_model, history)``.

    ``train_set`` and ``val_set`` are ``(setpoints, targets)`` or
    ``(setpoints, targets, mask)``; rows with no usable target are skipped.
    Input and output statistics are recomputed from ``train_set``.  The
    returned model is the snapshot with the lowest validation error (the
    initial weights count as epoch 0).
    """
    x, y, m = _usable(*_unpack(train_set))
    vx, vy, vm = _usable(*_unpack(val_set))
    if len(x) == 0 or len(vx) == 0:
        raise InputError("training and validation sets must be non-empty")
    model = model.copy()
    model.input_stats = (float(x.mean()), max(float(x.std()), STD_FLOOR))
    model.output_stats = _column_stats(y, m)
    z, zy, mf = _prepare(model, x, y, m)
    vz, vzy, vmf = _prepare(model, vx, vy, vm)
    params = model.parameters()
    nl = len(model.weights)

    def batch_loss(idx):
        mse, (gw, gb) = _loss_grad(model, z[idx], zy[idx], mf[idx])
        return mse, [*gw, *gb]

    def val_loss():
        return _loss_grad(model, vz, vzy, vmf, with_grad=False)[0]

    best, best_epoch, history = _fit(params, batch_loss, val_loss, len(x), cfg, (model.seed,))
    model.weights = best[:nl]
    model.biases = best[nl:]
    model.trained_epochs += best_epoch
    return model, history


def retrain_last_layer(model: MlpModel, new_train, new_val, cfg: TrainConfig = TrainConfig(), sensor_ids=None):
    """Retrain only the final weight matrix and bias.

    When the new targets have more columns than the model has outputs, the
    extra columns are appended as new sensors: fresh He-uniform weights, zero
    bias and output statistics taken from ``new_train``.  Every other
    parameter, and the input/output statistics of existing sensors, are left
    bit-identical.
    """
    x, y, m = _usable(*_unpack(new_train))
    vx, vy, vm = _usable(*_unpack(new_val))
    if len(x) == 0 or len(vx) == 0:
        raise InputError("retraining and validation sets must be non-empty")
    n_old, n_new = model.n_outputs, y.shape[1]
    if n_new < n_old:
        raise ConfigurationError(f"cannot shrink a model from {n_old} to {n_new} outputs")
    model = model.copy()
    if n_new > n_old:
        rng = np.random.default_rng([model.seed, n_new])
        fan_in = model.layer_dims[-2]
        model.weights[-1] = np.hstack([model.weights[-1], _he_uniform(rng, fan_in, n_new - n_old)])
        model.biases[-1] = np.concatenate([model.biases[-1], np.zeros(n_new - n_old)])
        mean, std = _column_stats(y[:, n_old:], m[:, n_old:])
        model.output_stats = (
            np.concatenate([model.output_stats[0], mean]),
            np.concatenate([model.output_stats[1], std]),
        )
        model.layer_dims = (*model.layer_dims[:-1], n_new)
        if model.sensor_ids:
            if sensor_ids is None or len(sensor_ids) != n_new:
                raise ConfigurationError("sensor_ids for the grown grid are required")
            if tuple(sensor_ids[:n_old]) != model.sensor_ids:
                raise ConfigurationError("existing sensors must keep their order as a prefix of the new grid")
    if sensor_ids is not None:
        model.sensor_ids = tuple(sensor_ids)
    model.check()

    z, zy, mf = _prepare(model, x, y, m)
    vz, vzy, vmf = _prepare(model, vx, vy, vm)
    feats = _hidden(model, z)
    vfeats = _hidden(model, vz)
    w, b = model.weights[-1], model.biases[-1]
    # warm start: each bias at its least-squares optimum for the current
    # weights, so a pure offset is absorbed before the first Adam step
    count = mf.sum(axis=0)
    shift = np.sum((zy - (feats @ w + b)) * mf, axis=0) / np.maximum(count, 1)
    b += np.where(count > 0, shift, 0.0)

    def loss(f, t, mk, with_grad):
        out = f @ w
        out += b
        count = mk.sum()
        diff = (out - t) * mk
        mse = float(np.sum(diff * diff) / count)
        if not with_grad:
            return mse, None
        g = diff * (2.0 / count)
        return mse, [f.T @ g, g.sum(axis=0)]

    best, best_epoch, _ = _fit(
        [w, b],
        lambda idx: loss(feats[idx], zy[idx], mf[idx], True),
        lambda: loss(vfeats, vzy, vmf, False)[0],
        len(x), cfg, (model.seed, 1),
    )
    model.weights[-1], model.biases[-1] = best
    model.trained_epochs += best_epoch
    return model


# -- serialization -----------------------------------------------------------------

def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values).reshape(-1).tolist())


def save_model(model: MlpModel) -> bytes:
    model.check()
    lines = [
        "uncalib-mlp",
        f"format_version={FORMAT_VERSION}",
        f"activation={model.activation}",
        "layer_dims=" + ",".join(str(d) for d in model.layer_dims),
        f"seed={model.seed}",
        f"trained_epochs={model.trained_epochs}",
        "sensor_ids=" + ",".join(model.sensor_ids),
        "input_stats=" + _fmt(model.input_stats),
        "output_stats=" + _fmt(model.output_stats[0]) + ";" + _fmt(model.output_stats[1]),
    ]
    for i, w in enumerate(model.weights):
        lines.append(f"[weights.{i}] {w.shape[0]}x{w.shape[1]}")
        lines.extend(_fmt(row) for row in w)
    for i, b in enumerate(model.biases):
        lines.append(f"[biases.{i}] {b.shape[0]}")
        lines.append(_fmt(b))
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _floats(text, name):
    if text == "":
        return np.empty(0)
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ModelFormatError(f"corrupt payload in {name}: unparsable number", field=name) from None


def load_model(data: bytes) -> MlpModel:
    """Inverse of :func:`save_model`; raises :class:`ModelFormatError` naming the bad field."""
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else str(data)
    except UnicodeDecodeError:
        raise ModelFormatError("corrupt payload: not UTF-8 text", field="payload") from None
    lines = text.split("\n")
    if not lines or lines[0] != "uncalib-mlp":
        raise ModelFormatError("corrupt payload: missing 'uncalib-mlp' magic line", field="magic")
    if "end" not in lines:
        raise ModelFormatError("corrupt payload: truncated stream (no 'end' marker)", field="end")
    header = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("["):
        if lines[i] == "end":
            break
        key, sep, value = lines[i].partition("=")
        if not sep:
            raise ModelFormatError(f"corrupt payload: malformed header line {i + 1}", field=key or "header")
        header[key] = value
        i += 1
    for key in ("format_version", "layer_dims", "seed", "input_stats", "output_stats"):
        if key not in header:
            raise ModelFormatError(f"corrupt payload: missing field {key}", field=key)
    try:
        version = int(header["format_version"])
    except ValueError:
        raise ModelFormatError("corrupt payload: format_version is not an integer", field="format_version") from None
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version} (expected {FORMAT_VERSION})",
                               field="format_version")
    try:
        dims = tuple(int(d) for d in header["layer_dims"].split(","))
        seed = int(header["seed"])
        epochs = int(header.get("trained_epochs", "0"))
    except ValueError as exc:
        raise ModelFormatError(f"corrupt payload: {exc}", field="layer_dims") from None

    sections = {}
    while i < len(lines) and lines[i] != "end":
        head = lines[i]
        if not head.startswith("["):
            raise ModelFormatError(f"corrupt payload: unexpected line {i + 1}", field="payload")
        name, _, shape = head[1:].partition("] ")
        try:
            shape = tuple(int(s) for s in shape.split("x"))
        except ValueError:
            raise ModelFormatError(f"corrupt payload: bad shape for {name}", field=name) from None
        rows = shape[0] if name.startswith("weights") else 1
        body = lines[i + 1:i + 1 + rows]
        if len(body) != rows or "end" in body:
            raise ModelFormatError(f"corrupt payload: truncated {name}", field=name)
        arr = np.array([_floats(r, name) for r in body]) if rows else np.empty((0,) + shape[1:])
        if name.startswith("biases"):
            arr = arr.reshape(-1)
        if arr.shape != shape:
            raise ModelFormatError(f"shape inconsistency in {name}: declared {shape}, found {arr.shape}", field=name)
        sections[name] = arr
        i += 1 + rows

    n_layers = len(dims) - 1
    weights, biases = [], []
    for k in range(n_layers):
        for kind, store in (("weights", weights), ("biases", biases)):
            name = f"{kind}.{k}"
            if name not in sections:
                raise ModelFormatError(f"corrupt payload: missing {name}", field=name)
            store.append(sections[name])
        if weights[k].shape != (dims[k], dims[k + 1]) or biases[k].shape != (dims[k + 1],):
            raise ModelFormatError(
                f"shape inconsistency: layer_dims says {dims[k]}x{dims[k + 1]} for layer {k}, "
                f"payload has {weights[k].shape}",
                field="layer_dims",
            )
    if len(sections) != 2 * n_layers:
        raise ModelFormatError("shape inconsistency: payload has more layers than layer_dims", field="layer_dims")
    in_stats = _floats(header["input_stats"], "input_stats")
    mean_text, sep, std_text = header["output_stats"].partition(";")
    if not sep:
        raise ModelFormatError("corrupt payload: output_stats needs '<means>;<stds>'", field="output_stats")
    out_mean = _floats(mean_text, "output_stats")
    out_std = _floats(std_text, "output_stats")
    if len(in_stats) != 2:
        raise ModelFormatError("input_stats must hold mean and std", field="input_stats")
    if len(out_mean) != dims[-1] or len(out_std) != dims[-1]:
        raise ModelFormatError("shape inconsistency: output statistics length", field="output_stats")
    ids = tuple(s for s in header.get("sensor_ids", "").split(",") if s)
    if ids and len(ids) != dims[-1]:
        raise ModelFormatError("shape inconsistency: sensor_ids length", field="sensor_ids")
    return MlpModel(
        dims, weights, biases,
        input_stats=(in_stats[0], in_stats[1]),
        output_stats=(out_mean, out_std),
        seed=seed, trained_epochs=epochs, sensor_ids=ids,
        activation=header.get("activation", "relu"),
    )


def models_equal(a: MlpModel, b: MlpModel) -> bool:
    return (
        a.layer_dims == b.layer_dims
        and a.seed == b.seed
        and a.trained_epochs == b.trained_epochs
        and a.sensor_ids == b.sensor_ids
        and a.input_stats == b.input_stats
        and all(np.array_equal(x, y) for x, y in zip(a.output_stats, b.output_stats))
        and all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    )
