"""Residual DMD block: a DMD linear bypass plus an MLP residual in latent space.

One latent step is ``z' = L z + mlp(z)``.  A forecast encodes once, takes
``n`` latent steps and decodes once.  The encoder, decoder and the
block-diagonal ``L`` start from the real form of a fitted DMD model. The MLP
output layer starts at scale ``eps``, so with ``eps = 0`` the block reproduces
the DMD forecast exactly.

Gradients are computed by hand (reverse mode) and checked against finite
differences in the test suite.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import expect_consumed, mask_to_rle, read_container, rle_to_mask, take, write_container
from .dmd import realify
from .errors import DimensionMismatchError, MalformedHeaderError, TrainingDivergedError
from .gridstore import StateMatrix

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    hidden: tuple | None = None  # None -> two layers of width 2 * latent_dim
    activation: str = "tanh"

    def resolve(self, latent_dim):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        hidden = (2 * latent_dim, 2 * latent_dim) if self.hidden is None else tuple(int(h) for h in self.hidden)
        if any(h < 1 for h in hidden):
            raise ValueError("hidden widths must be >= 1")
        return MlpSpec(hidden=hidden, activation=self.activation)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 200
    rollout_steps: int = 1
    seed: int = 0
    loss_space: str = "state"

    def validate(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.rollout_steps < 1:
            raise ValueError("batch_size >= 1, epochs >= 0 and rollout_steps >= 1 are required")
        if self.loss_space not in ("state", "latent"):
            raise ValueError("loss_space must be 'state' or 'latent'")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_loss: float | None = None
    initial_val_loss: float | None = None

    def __len__(self):
        return len(self.train_loss)

    def to_table(self, timings=False):
        cols = ["epoch", "train_loss", "val_loss"] + (["seconds"] if timings else [])
        lines = ["\t".join(cols)]
        if self.initial_loss is not None:
            iv = self.initial_val_loss if self.initial_val_loss is not None else float("nan")
            row = ["0", repr(self.initial_loss), repr(iv)] + (["0"] if timings else [])
            lines.append("\t".join(row))
        for i, tl in enumerate(self.train_loss):
            vl = self.val_loss[i] if self.val_loss else float("nan")
            row = [str(i + 1), repr(tl), repr(vl)] + ([f"{self.seconds[i]:.3f}"] if timings else [])
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def block_mask(block_sizes):
    m = sum(block_sizes)
    mask = np.zeros((m, m), dtype=bool)
    pos = 0
    for s in block_sizes:
        mask[pos:pos + s, pos:pos + s] = True
        pos += s
    return mask


class ResDmdModel:
    """Trainable parameters of a single ResDMD block.

    ``params`` maps names to float64 arrays: ``encoder`` (m x D), ``decoder``
    (D x m), ``linear`` (m x m, zero off the diagonal blocks) and
    ``mlp.W{i}`` / ``mlp.b{i}`` per layer.
    """

    def __init__(self, params, block_sizes, mlp, eps=0.0, seed=0, mask=None):
        self.params = params
        self.block_sizes = tuple(int(s) for s in block_sizes)
        self.mlp = mlp
        self.eps = float(eps)
        self.seed = int(seed)
        self.mask = mask
        self._check()

    def _check(self):
        m = self.latent_dim
        if self.params["linear"].shape != (m, m) or self.params["encoder"].shape[0] != m:
            raise DimensionMismatchError("parameter shapes do not match the block structure")

    @property
    def latent_dim(self):
        return sum(self.block_sizes)

    @property
    def n_state(self):
        return self.params["encoder"].shape[1]

    @property
    def n_layers(self):
        return len(self.mlp.hidden) + 1

    def layers(self):
        return [(self.params[f"mlp.W{i}"], self.params[f"mlp.b{i}"]) for i in range(self.n_layers)]

    def copy(self):
        return ResDmdModel({k: v.copy() for k, v in self.params.items()}, self.block_sizes,
                           self.mlp, self.eps, self.seed, self.mask)

    def param_names(self):
        return ["encoder", "decoder", "linear"] + [
            f"mlp.{p}{i}" for i in range(self.n_layers) for p in ("W", "b")]

    def forecast(self, x0, n):
        return forward(self, x0, n)


def init_from_dmd(dmd_model, spec=None, eps=1e-3, seed=0):
    """Seed a ResDMD block from a fitted DMD model.

    Hidden layers get Glorot-uniform weights; the output layer gets uniform
    weights in ``[-eps, eps]``, so the residual path is O(eps) and vanishes
    for ``eps = 0``.  All biases start at zero.  Deterministic in ``seed``.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    real = realify(dmd_model)
    m = real.linear.shape[0]
    spec = (spec or MlpSpec()).resolve(m)
    rng = np.random.default_rng(seed)
    params = {
        "encoder": real.encoder.copy(),
        "decoder": real.decoder.copy(),
        "linear": real.linear.copy(),
    }
    widths = (m,) + spec.hidden + (m,)
    n_layers = len(widths) - 1
    for i in range(n_layers):
        fan_in, fan_out = widths[i], widths[i + 1]
        scale = eps if i == n_layers - 1 else np.sqrt(6.0 / (fan_in + fan_out))
        params[f"mlp.W{i}"] = rng.uniform(-1.0, 1.0, size=(fan_out, fan_in)) * scale
        params[f"mlp.b{i}"] = np.zeros(fan_out)
    return ResDmdModel(params, real.block_sizes, spec, eps=eps, seed=seed, mask=dmd_model.mask)


# -- forward ---------------------------------------------------------------------

def _act(name, a):
    return np.tanh(a) if name == "tanh" else np.maximum(a, 0.0)


def _act_grad(name, a, h):
    return 1.0 - h * h if name == "tanh" else (a > 0).astype(np.float64)


def _mlp_forward(model, z):
    """Return the MLP output and the cache needed for backprop (z is m x B)."""
    layers = model.layers()
    inputs, pre = [], []
    h = z
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        a = w @ h + b[:, None]
        if i < len(layers) - 1:
            pre.append(a)
            h = _act(model.mlp.activation, a)
        else:
            h = a
    return h, (inputs, pre)


def _mlp_backward(model, cache, dout, grads):
    """Accumulate MLP parameter gradients into ``grads``; return d(loss)/d(input)."""
    inputs, pre = cache
    layers = model.layers()
    da = dout
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[f"mlp.W{i}"] += da @ inputs[i].T
        grads[f"mlp.b{i}"] += da.sum(axis=1)
        dh = w.T @ da
        if i > 0:
            da = dh * _act_grad(model.mlp.activation, pre[i - 1], inputs[i])
        else:
            return dh
    return None


def latent_step(model, b):
    """One block step ``L b + mlp(b)`` for a vector or an m x B block."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != model.latent_dim:
        raise DimensionMismatchError(f"latent vector has length {b.shape[0]}, expected {model.latent_dim}")
    z = b[:, None] if b.ndim == 1 else b
    out, _ = _mlp_forward(model, z)
    z = model.params["linear"] @ z + out
    return z[:, 0] if b.ndim == 1 else z


def forward(model, x0, n):
    """Encode once, take ``n`` latent steps, decode once."""
    if n < 0:
        raise ValueError("lead must be non-negative")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] != model.n_state:
        raise DimensionMismatchError(f"state has length {x0.shape[0]}, model expects {model.n_state}")
    z = model.params["encoder"] @ x0
    for _ in range(n):
        z = latent_step(model, z)
    return model.params["decoder"] @ z


# -- loss and gradient ----------------------------------------------------------------

def _data(X):
    return X.data if isinstance(X, StateMatrix) else np.asarray(X, dtype=np.float64)


def training_pairs(X, k):
    """Start indices ``t`` of every ``(t, t + k)`` pair."""
    t = _data(X).shape[1]
    if t <= k:
        raise ValueError(f"series of length {t} is too short for rollout_steps={k}")
    return np.arange(t - k)


def _loss_and_grad(model, data, starts, k, space, want_grad=True):
    p = model.params
    x0 = data[:, starts]
    target = data[:, starts + k]
    z = p["encoder"] @ x0
    caches = []
    for _ in range(k):
        out, cache = _mlp_forward(model, z)
        caches.append((z, cache))
        z = p["linear"] @ z + out
    if space == "state":
        resid = p["decoder"] @ z - target
    else:
        resid = z - p["encoder"] @ target
    count = resid.size
    loss = float(np.sum(resid * resid) / count)
    if not want_grad:
        return loss, None

    grads = {name: np.zeros_like(v) for name, v in p.items()}
    dres = (2.0 / count) * resid
    if space == "state":
        grads["decoder"] += dres @ z.T
        dz = p["decoder"].T @ dres
    else:
        grads["encoder"] -= dres @ target.T
        dz = dres
    for z_prev, cache in reversed(caches):
        grads["linear"] += dz @ z_prev.T
        dz = p["linear"].T @ dz + _mlp_backward(model, cache, dz, grads)
    grads["encoder"] += dz @ x0.T
    grads["linear"] *= block_mask(model.block_sizes)
    return loss, grads


def loss(model, X, cfg):
    """Mean squared ``rollout_steps``-ahead error over every pair in ``X``."""
    k = cfg.rollout_steps
    return _loss_and_grad(model, _data(X), training_pairs(X, k), k, cfg.loss_space, want_grad=False)[0]


def grad(model, X, cfg):
    """Exact gradient of :func:`loss` for every trainable parameter."""
    k = cfg.rollout_steps
    return _loss_and_grad(model, _data(X), training_pairs(X, k), k, cfg.loss_space)[1]


def train(model, X_train, X_val=None, cfg=None):
    """Minibatch SGD with momentum; returns ``(trained copy, TrainHistory)``."""
    cfg = cfg or TrainConfig()
    cfg.validate()
    model = model.copy()
    data = _data(X_train)
    k = cfg.rollout_steps
    starts = training_pairs(data, k)
    rng = np.random.default_rng(cfg.seed)
    velocity = {name: np.zeros_like(v) for name, v in model.params.items()}
    history = TrainHistory(initial_loss=loss(model, data, cfg),
                           initial_val_loss=None if X_val is None else loss(model, X_val, cfg))

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = starts[rng.permutation(starts.size)]
        for step, lo in enumerate(range(0, order.size, cfg.batch_size)):
            batch = order[lo:lo + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = _loss_and_grad(model, data, batch, k, cfg.loss_space)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch + 1, step, value)
            for name, g in grads.items():
                v = velocity[name]
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                model.params[name] += v
        with np.errstate(over="ignore", invalid="ignore"):
            train_loss = loss(model, data, cfg)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(epoch + 1, "end", train_loss)
        history.train_loss.append(train_loss)
        if X_val is not None:
            history.val_loss.append(loss(model, X_val, cfg))
        history.seconds.append(time.perf_counter() - t0)
    return model, history


# -- checkpoint I/O ----------------------------------------------------------------

def save_checkpoint(model, path, cfg=None):
    names = model.param_names()
    header = {
        "kind": "resdmd_checkpoint",
        "latent_dim": model.latent_dim,
        "n_state": model.n_state,
        "block_sizes": list(model.block_sizes),
        "mlp": {"hidden": list(model.mlp.hidden), "activation": model.mlp.activation},
        "eps": model.eps,
        "seed": model.seed,
        "train_config": None if cfg is None else asdict(cfg),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "grid": None if model.mask is None else {
            "nlat": int(model.mask.shape[0]), "nlon": int(model.mask.shape[1]),
            "mask_rle": mask_to_rle(model.mask)},
    }
    write_container(path, header, [model.params[n] for n in names], dtype="<f8")


def load_checkpoint(path):
    header, payload = read_container(path, kind="resdmd_checkpoint")
    try:
        spec = MlpSpec(hidden=tuple(header["mlp"]["hidden"]), activation=header["mlp"]["activation"])
        block_sizes = tuple(header["block_sizes"])
        entries = header["params"]
    except (KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"bad checkpoint header: {exc}") from exc
    params, off = {}, 0
    for e in entries:
        arr, off = take(payload, off, tuple(e["shape"]))
        params[e["name"]] = arr.astype(np.float64)
    expect_consumed(payload, off)
    grid = header.get("grid")
    mask = None if grid is None else rle_to_mask(grid["mask_rle"], (grid["nlat"], grid["nlon"]))
    return ResDmdModel(params, block_sizes, spec, eps=header.get("eps", 0.0),
                       seed=header.get("seed", 0), mask=mask)
