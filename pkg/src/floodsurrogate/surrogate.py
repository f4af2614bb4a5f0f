"""1D convolutional surrogate mapping discharge/time features to a depth vector.

Architecture (channels-last internally, input treated as a single-channel
sequence of length ``n_features``)::

    Conv1D(28, k=3, same) -> BatchNorm -> ReLU
    Conv1D(128, k=3, same) -> BatchNorm -> ReLU
    Flatten
    Dense(32) -> BatchNorm -> ReLU -> Dropout
    Dense(256) -> BatchNorm -> ReLU -> Dropout
    Dense(512) -> BatchNorm -> ReLU -> Dropout
    Dense(n_cells)            (linear)

Batch norm in the dense blocks can be switched off (``dense_batchnorm``);
without it Adam at lr 0.01 drives the 32-unit bottleneck to all-dead ReLUs
within a few batches on flood-depth targets.

Everything is float64 numpy with hand-written backprop so that gradients
can be checked against finite differences.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ModelFormatError, NumericalError, ValidationError
from .features import Dataset, Normalizer

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_MAGIC = b"FSCNN\x00\x00\x01"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    dropout_p: float = 0.2
    patience: int = 5
    min_delta: float = 0.001
    max_epochs: int = 200
    val_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("batch_size, max_epochs and patience must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValidationError("dropout_p must be in [0, 1)")
        if self.min_delta < 0:
            raise ValidationError("min_delta must be non-negative")
        if not 0 < self.val_fraction < 0.5:
            raise ValidationError("val_fraction must be in (0, 0.5)")


@dataclass
class Architecture:
    n_features: int
    n_cells: int
    conv_channels: tuple = (28, 128)
    kernel_size: int = 3
    dense_units: tuple = (32, 256, 512)
    dropout_p: float = 0.2
    dense_batchnorm: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


# --------------------------------------------------------------------------- #
# Layer primitives                                                            #
# --------------------------------------------------------------------------- #


def _im2col(a: np.ndarray, k: int) -> np.ndarray:
    """(B, L, C) -> (B, L, C*k) with 'same' zero padding; column ci*k + j
    holds a[:, l + j - k//2, ci]."""
    b, length, c = a.shape
    pad_lo = (k - 1) // 2
    pad_hi = k - 1 - pad_lo
    ap = np.pad(a, ((0, 0), (pad_lo, pad_hi), (0, 0)))
    cols = np.empty((b, length, c, k))
    for j in range(k):
        cols[:, :, :, j] = ap[:, j:j + length, :]
    return cols.reshape(b, length, c * k)


def _col2im(dcols: np.ndarray, k: int, c: int) -> np.ndarray:
    b, length, _ = dcols.shape
    pad_lo = (k - 1) // 2
    pad_hi = k - 1 - pad_lo
    d = dcols.reshape(b, length, c, k)
    dap = np.zeros((b, length + pad_lo + pad_hi, c))
    for j in range(k):
        dap[:, j:j + length, :] += d[:, :, :, j]
    return dap[:, pad_lo:pad_lo + length, :]


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


def _bn_forward(model, name, z, axes, training):
    a = model.arch
    if training:
        mu = z.mean(axis=axes)
        var = z.var(axis=axes)
        rm, rv = model.buffers[f"{name}.mean"], model.buffers[f"{name}.var"]
        rm *= a.bn_momentum
        rm += (1 - a.bn_momentum) * mu
        rv *= a.bn_momentum
        rv += (1 - a.bn_momentum) * var
    else:
        mu = model.buffers[f"{name}.mean"]
        var = model.buffers[f"{name}.var"]
    inv = 1.0 / np.sqrt(var + a.bn_eps)
    xhat = (z - mu) * inv
    return model.params[f"{name}.gamma"] * xhat + model.params[f"{name}.beta"], xhat, inv


def _bn_backward(model, name, d, xhat, inv, axes, grads):
    grads[f"{name}.gamma"] = (d * xhat).sum(axis=axes)
    grads[f"{name}.beta"] = d.sum(axis=axes)
    dxhat = d * model.params[f"{name}.gamma"]
    m = int(np.prod([d.shape[ax] for ax in axes]))
    return inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


# --------------------------------------------------------------------------- #
# Model                                                                       #
# --------------------------------------------------------------------------- #


class SurrogateModel:
    """Parameters, batch-norm running statistics and the input normalizer."""

    def __init__(self, arch: Architecture, params: dict, buffers: dict, seed: int = 0,
                 norm: Normalizer | None = None):
        self.arch = arch
        self.params = params
        self.buffers = buffers
        self.seed = seed
        self.norm = norm
        self.training = False
        self.history: list[EpochRecord] = []
        # inference-mode MSE of the returned weights on the training split
        self.final_train_loss: float | None = None
        self._rng = np.random.default_rng(seed)

    # -- modes --------------------------------------------------------------
    @property
    def mode(self) -> str:
        return "training" if self.training else "inference"

    def train_mode(self) -> "SurrogateModel":
        self.training = True
        return self

    def eval_mode(self) -> "SurrogateModel":
        self.training = False
        return self

    @property
    def n_features(self) -> int:
        return self.arch.n_features

    @property
    def n_cells(self) -> int:
        return self.arch.n_cells

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> tuple[dict, dict]:
        return ({k: v.copy() for k, v in self.params.items()}, {k: v.copy() for k, v in self.buffers.items()})

    def load_state(self, st: tuple[dict, dict]) -> None:
        params, buffers = st
        for k, v in params.items():
            self.params[k][...] = v
        for k, v in buffers.items():
            self.buffers[k][...] = v

    # -- forward / backward --------------------------------------------------
    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValidationError(f"expected input width {self.n_features}, got shape {X.shape}")
        return X

    def _forward(self, X, training: bool, rng=None, cache: list | None = None):
        a = self.arch
        p = self.params
        h = X[:, :, None]
        n_conv = len(a.conv_channels)
        for i in range(n_conv):
            c_in = h.shape[2]
            W = p[f"conv{i}.W"]
            cols = _im2col(h, a.kernel_size)
            z = cols @ W.reshape(W.shape[0], -1).T + p[f"conv{i}.b"]
            y, xhat, inv = _bn_forward(self, f"bn{i}", z, (0, 1), training)
            out = np.maximum(y, 0.0)
            if cache is not None:
                cache.append(("conv", i, c_in, cols, xhat, inv, y))
            h = out
        h = h.reshape(h.shape[0], -1)
        for i in range(len(a.dense_units)):
            x_in = h
            y = x_in @ p[f"fc{i}.W"] + p[f"fc{i}.b"]
            xhat = inv = None
            if a.dense_batchnorm:
                y, xhat, inv = _bn_forward(self, f"fcbn{i}", y, (0,), training)
            out = np.maximum(y, 0.0)
            mask = None
            if training and a.dropout_p > 0:
                rng = self._rng if rng is None else rng
                keep = 1.0 - a.dropout_p
                mask = (rng.random(out.shape) < keep) / keep
                out = out * mask
            if cache is not None:
                cache.append(("fc", i, x_in, y, mask, xhat, inv))
            h = out
        if cache is not None:
            cache.append(("out", h))
        return h @ p["out.W"] + p["out.b"]

    def forward(self, X, rng=None) -> np.ndarray:
        """Raw network output (no clamping) in the model's current mode."""
        X = self._check_input(X)
        return self._forward(X, self.training, rng)

    def loss_and_grads(self, X, Y, rng=None) -> tuple[float, dict]:
        """Mean-squared error over all samples and cells, and its gradient.

        Runs in training mode (batch statistics, dropout).
        """
        X = self._check_input(X)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape != (X.shape[0], self.n_cells):
            raise ValidationError(f"targets must have shape {(X.shape[0], self.n_cells)}, got {Y.shape}")
        cache: list = []
        pred = self._forward(X, True, rng, cache)
        diff = pred - Y
        loss = float(np.mean(diff * diff))
        d = 2.0 * diff / diff.size
        grads = {}
        p = self.params
        a = self.arch

        _, h_last = cache.pop()
        grads["out.W"] = h_last.T @ d
        grads["out.b"] = d.sum(axis=0)
        d = d @ p["out.W"].T
        for i in reversed(range(len(a.dense_units))):
            _, _, x_in, y, mask, xhat, inv = cache.pop()
            if mask is not None:
                d = d * mask
            d = d * (y > 0)
            if xhat is not None:
                d = _bn_backward(self, f"fcbn{i}", d, xhat, inv, (0,), grads)
            grads[f"fc{i}.W"] = x_in.T @ d
            grads[f"fc{i}.b"] = d.sum(axis=0)
            d = d @ p[f"fc{i}.W"].T
        B = X.shape[0]
        L = self.n_features
        d = d.reshape(B, L, -1)
        for i in reversed(range(len(a.conv_channels))):
            _, _, c_in, cols, xhat, inv, y = cache.pop()
            d = d * (y > 0)
            dz = _bn_backward(self, f"bn{i}", d, xhat, inv, (0, 1), grads)
            W = p[f"conv{i}.W"]
            W2 = W.reshape(W.shape[0], -1)
            grads[f"conv{i}.W"] = (dz.reshape(-1, dz.shape[2]).T @ cols.reshape(-1, cols.shape[2])).reshape(W.shape)
            grads[f"conv{i}.b"] = dz.sum(axis=(0, 1))
            if i > 0:
                d = _col2im(dz @ W2, a.kernel_size, c_in)
        return loss, grads

    def predict(self, X_raw) -> np.ndarray:
        """Normalize raw features, run in inference mode, clamp depths at 0."""
        X = self._check_input(X_raw)
        if self.norm is not None:
            X = self.norm.apply(X)
        return np.maximum(self._forward(X, False), 0.0)


def init_model(n_features: int, n_cells: int, seed: int = 0, dropout_p: float = 0.2,
               conv_channels=(28, 128), kernel_size: int = 3, dense_units=(32, 256, 512),
               dense_batchnorm: bool = True) -> SurrogateModel:
    """Fan-in-scaled uniform weights, zero biases, unit batch-norm scale."""
    if n_features < 1 or n_cells < 1:
        raise ValidationError("n_features and n_cells must be >= 1")
    arch = Architecture(int(n_features), int(n_cells), tuple(conv_channels), int(kernel_size),
                        tuple(dense_units), float(dropout_p), bool(dense_batchnorm))
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in, gain=6.0):
        lim = math.sqrt(gain / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    c_in = 1
    for i, c_out in enumerate(arch.conv_channels):
        params[f"conv{i}.W"] = uniform((c_out, c_in, arch.kernel_size), c_in * arch.kernel_size)
        params[f"conv{i}.b"] = np.zeros(c_out)
        params[f"bn{i}.gamma"] = np.ones(c_out)
        params[f"bn{i}.beta"] = np.zeros(c_out)
        buffers[f"bn{i}.mean"] = np.zeros(c_out)
        buffers[f"bn{i}.var"] = np.ones(c_out)
        c_in = c_out
    width = arch.n_features * c_in
    for i, units in enumerate(arch.dense_units):
        params[f"fc{i}.W"] = uniform((width, units), width)
        params[f"fc{i}.b"] = np.zeros(units)
        if arch.dense_batchnorm:
            params[f"fcbn{i}.gamma"] = np.ones(units)
            params[f"fcbn{i}.beta"] = np.zeros(units)
            buffers[f"fcbn{i}.mean"] = np.zeros(units)
            buffers[f"fcbn{i}.var"] = np.ones(units)
        width = units
    params["out.W"] = uniform((width, arch.n_cells), width, gain=3.0)
    params["out.b"] = np.zeros(arch.n_cells)
    return SurrogateModel(arch, params, buffers, seed)


def forward(model: SurrogateModel, X, rng=None) -> np.ndarray:
    return model.forward(X, rng)


# --------------------------------------------------------------------------- #
# Training                                                                    #
# --------------------------------------------------------------------------- #


class EarlyStopping:
    """Patience counter on validation loss.

    An epoch counts as an improvement only if it beats the best counted loss
    by at least ``min_delta``; training stops after ``patience`` epochs in a
    row without one. The weights kept for restoring are those with the lowest
    validation loss seen, whether or not that epoch counted as an improvement.
    """

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.reference = math.inf
        self.wait = 0
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state = None
        self.stopped_epoch = None

    def update(self, epoch: int, val_loss: float, state=None) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = state
        if val_loss < self.reference - self.min_delta:
            self.reference = val_loss
            self.wait = 0
        else:
            self.wait += 1
        if self.wait >= self.patience:
            self.stopped_epoch = epoch
            return True
        return False


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    if n - n_val < 1:
        raise ValidationError(f"{n} samples are too few for a validation split")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_loss(model: SurrogateModel, Xn: np.ndarray, Y: np.ndarray, chunk: int = 256) -> float:
    """Inference-mode MSE over all samples and cells (unclamped output)."""
    was = model.training
    model.eval_mode()
    total = 0.0
    for s in range(0, Xn.shape[0], chunk):
        d = model.forward(Xn[s:s + chunk]) - Y[s:s + chunk]
        total += float(np.sum(d * d))
    model.training = was
    return total / Y.size


def train(model: SurrogateModel, dataset: Dataset, cfg: TrainConfig) -> tuple[SurrogateModel, list[EpochRecord]]:
    """Adam on MSE with dropout, batch norm and early stopping.

    The dataset's normalizer is fitted on all its rows if it has none; it is
    attached to the model so ``predict`` accepts raw features. Returns the
    model restored to its best-validation weights and the per-epoch history.
    """
    if dataset.n_cells != model.n_cells:
        raise ValidationError(f"dataset has {dataset.n_cells} cells but model outputs {model.n_cells}")
    if dataset.X.shape[1] != model.n_features:
        raise ValidationError(f"dataset has {dataset.X.shape[1]} features but model expects {model.n_features}")
    if dataset.norm is None:
        dataset.norm = Normalizer.fit(dataset.X)
    model.norm = dataset.norm
    model.arch.dropout_p = cfg.dropout_p
    Xn = dataset.normalized_X()
    Y = dataset.Y

    rng = np.random.default_rng(cfg.seed)
    model._rng = np.random.default_rng(rng.integers(2**63))
    tr_idx, va_idx = split_indices(dataset.n_samples, cfg.val_fraction, rng)

    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    t = 0
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        model.train_mode()
        order = tr_idx[rng.permutation(tr_idx.size)]
        total, count = 0.0, 0
        for bno, s in enumerate(range(0, order.size, cfg.batch_size)):
            batch = order[s:s + cfg.batch_size]
            if batch.size < 2:
                # batch norm needs >= 2 samples; a singleton tail batch is skipped
                continue
            loss, grads = model.loss_and_grads(Xn[batch], Y[batch])
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch {bno}, learning rate {cfg.learning_rate}"
                )
            t += 1
            bc1 = 1.0 - cfg.beta1**t
            bc2 = 1.0 - cfg.beta2**t
            for k, p in model.params.items():
                _adam_kernel(p.reshape(-1), grads[k].reshape(-1), m[k].reshape(-1), v[k].reshape(-1),
                             cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, bc1, bc2)
            total += loss * batch.size
            count += batch.size
        model.eval_mode()
        train_loss = total / max(count, 1)
        val_loss = evaluate_loss(model, Xn[va_idx], Y[va_idx])
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}, learning rate {cfg.learning_rate}")
        history.append(EpochRecord(epoch, train_loss, val_loss))
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        stop = stopper.update(epoch, val_loss, None)
        if stopper.best_epoch == epoch:
            stopper.best_state = model.state()
        if stop:
            break

    if stopper.best_state is not None:
        model.load_state(stopper.best_state)
    model.eval_mode()
    model.history = history
    model.final_train_loss = evaluate_loss(model, Xn[tr_idx], Y[tr_idx])
    return model, history


def write_history(history, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in history:
            w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss))])


# --------------------------------------------------------------------------- #
# Persistence                                                                 #
# --------------------------------------------------------------------------- #


def _blobs(model: SurrogateModel) -> list[tuple[str, np.ndarray]]:
    out = [(f"param:{k}", v) for k, v in model.params.items()]
    out += [(f"buffer:{k}", v) for k, v in model.buffers.items()]
    if model.norm is not None:
        out += [("norm:mean", model.norm.mean), ("norm:std", model.norm.std)]
    return out


def save_model(model: SurrogateModel, path) -> None:
    """Binary container: magic, version, JSON header, f8 blobs, SHA-256."""
    blobs = _blobs(model)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": asdict(model.arch),
        "seed": model.seed,
        "blobs": [[name, list(arr.shape)] for name, arr in blobs],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<IQ", FORMAT_VERSION, len(hbytes))
    body += hbytes
    for _, arr in blobs:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def load_model(path) -> SurrogateModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 12 + 32 or raw[:len(_MAGIC)] != _MAGIC:
        raise ModelFormatError(f"{path}: not a surrogate model file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch (truncated or corrupt file)")
    off = len(_MAGIC)
    version, hlen = struct.unpack("<IQ", body[off:off + 12])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off += 12
    try:
        header = json.loads(body[off:off + hlen])
    except ValueError:
        raise ModelFormatError(f"{path}: unreadable header") from None
    off += hlen
    arrays = {}
    for name, shape in header["blobs"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = body[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise ModelFormatError(f"{path}: blob {name} is truncated")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(body):
        raise ModelFormatError(f"{path}: {len(body) - off} unexpected trailing bytes")
    arch_d = header["architecture"]
    arch = Architecture(**{k: tuple(v) if isinstance(v, list) else v for k, v in arch_d.items()})
    params = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("param:")}
    buffers = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("buffer:")}
    norm = None
    if "norm:mean" in arrays:
        norm = Normalizer(arrays["norm:mean"], arrays["norm:std"])
    return SurrogateModel(arch, params, buffers, header["seed"], norm)
