"""Dense denoising autoencoders with tied weights, written directly in numpy.

Each encoder layer ``l`` computes ``a_l = elu(W_l @ c(a_{l-1}) + b_l)`` where
``c`` zeroes a fixed fraction of its input during training. The decoder mirrors
the encoder with the transposed matrices, ``g_{l-1} = elu(W_l.T @ g_l + d_l)``,
so every ``W_l`` receives gradient from both passes. The loss is the mean
squared error over all elements of the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError

log = logging.getLogger(__name__)


def elu(x, alpha: float = 1.0):
    x = np.asarray(x)
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0)))


def _elu_grad_from_output(out, alpha):
    # derivative expressed through the activation value: 1 for x > 0, out + alpha otherwise
    return np.where(out > 0, 1.0, out + alpha).astype(out.dtype, copy=False)


def corrupt(batch: np.ndarray, fraction: float, rng: np.random.Generator, return_mask: bool = False):
    """Zero exactly ``round(fraction * dim)`` uniformly chosen entries of every row."""
    if not 0 <= fraction < 1:
        raise ValueError("corruption fraction must lie in [0, 1)")
    batch = np.asarray(batch)
    n, d = batch.shape
    k = int(round(fraction * d))
    mask = np.ones((n, d), dtype=batch.dtype)
    if k:
        keys = rng.random((n, d))
        idx = np.argpartition(keys, k - 1, axis=1)[:, :k]
        np.put_along_axis(mask, idx, 0, axis=1)
    out = batch * mask
    return (out, mask) if return_mask else out


@dataclass
class DenseLayer:
    """Tied layer: the decoder uses ``weights.T``, biases stay separate."""

    weights: np.ndarray  # out x in
    bias_enc: np.ndarray
    bias_dec: np.ndarray

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weights.astype(dtype), self.bias_enc.astype(dtype), self.bias_dec.astype(dtype))


@dataclass(frozen=True)
class TrainConfig:
    lr_schedule: tuple = ((150, 1e-4), (150, 1e-5))
    minibatch: int = 50
    momentum: float = 0.9
    corruption: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if any(rate <= 0 or n < 0 for n, rate in self.lr_schedule):
            raise ValueError("learning rates must be positive and epoch counts non-negative")
        if not 0 <= self.corruption < 1:
            raise ValueError("corruption must lie in [0, 1)")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")

    @property
    def epochs(self) -> int:
        return sum(n for n, _ in self.lr_schedule)

    def rate_at(self, epoch: int) -> float:
        seen = 0
        for n, rate in self.lr_schedule:
            seen += n
            if epoch < seen:
                return rate
        return self.lr_schedule[-1][1]


class DdaeModel:
    """Stack of tied dense layers; ``code_dim`` is the width of the last encoder layer."""

    kind = "ddae"

    def __init__(self, layers, corruption: float = 0.5, alpha: float = 1.0, activation: str = "elu"):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if b.n_in != a.n_out:
                raise ShapeError(f"layer dims do not chain: {a.n_out} -> {b.n_in}")
        self.corruption = corruption
        self.alpha = alpha
        self.activation = activation
        self.loss_trace: list = []

    # ---- construction ------------------------------------------------------

    @classmethod
    def init(cls, dims, rng: np.random.Generator, corruption: float = 0.5, dtype=np.float32,
             activation: str = "elu") -> "DdaeModel":
        layers = []
        for n_in, n_out in zip(dims, dims[1:]):
            s = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-s, s, size=(n_out, n_in)).astype(dtype)
            layers.append(DenseLayer(w, np.zeros(n_out, dtype), np.zeros(n_in, dtype)))
        return cls(layers, corruption, activation=activation)

    @property
    def dims(self) -> list:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def code_dim(self) -> int:
        return self.layers[-1].n_out

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def astype(self, dtype) -> "DdaeModel":
        m = DdaeModel([l.astype(dtype) for l in self.layers], self.corruption, self.alpha, self.activation)
        m.loss_trace = list(self.loss_trace)
        return m

    def _act(self, x):
        return elu(x, self.alpha).astype(x.dtype, copy=False) if self.activation == "elu" else x

    def _act_grad(self, out):
        if self.activation == "elu":
            return _elu_grad_from_output(out, self.alpha)
        return np.ones_like(out)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        x2 = x[None] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of dim {self.input_dim}, got shape {x.shape}")
        return x2

    # ---- inference ---------------------------------------------------------

    def encode(self, x) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        a = self._check(x)
        for l in self.layers:
            a = self._act(a @ l.weights.T + l.bias_enc)
        return a[0] if single else a

    def decode(self, code) -> np.ndarray:
        g = np.asarray(code, dtype=self.dtype)
        single = g.ndim == 1
        g = g[None] if single else g
        for l in reversed(self.layers):
            g = self._act(g @ l.weights + l.bias_dec)
        return g[0] if single else g

    def reconstruct(self, x) -> np.ndarray:
        """Decoder applied to the encoder output, without corruption."""
        single = np.asarray(x).ndim == 1
        out = self.decode(self.encode(self._check(x)))
        return out[0] if single else out

    def loss(self, x) -> float:
        x = self._check(x)
        return float(np.mean((self.reconstruct(x) - x) ** 2))

    # ---- training ----------------------------------------------------------

    def forward_backward(self, x, masks=None, dec_weights=None):
        """Loss and gradients for one batch.

        ``masks`` holds one corruption mask per encoder layer (or None).
        ``dec_weights`` optionally substitutes the decoder matrices, which
        unties the layers; used to verify the tied-gradient accumulation.
        Returns ``(loss, grads)`` with grads a list of ``(dW, db_enc, db_dec)``
        (plus ``dW_dec`` when ``dec_weights`` is given).
        """
        x = self._check(x)
        L = len(self.layers)
        acts, inputs = [x], []
        a = x
        for i, l in enumerate(self.layers):
            inp = a * masks[i] if masks is not None and masks[i] is not None else a
            inputs.append(inp)
            a = self._act(inp @ l.weights.T + l.bias_enc)
            acts.append(a)
        wdec = dec_weights if dec_weights is not None else [l.weights for l in self.layers]
        dec = [None] * (L + 1)
        dec[L] = acts[L]
        for i in range(L - 1, -1, -1):
            dec[i] = self._act(dec[i + 1] @ wdec[i] + self.layers[i].bias_dec)
        diff = dec[0] - x
        loss = float(np.mean(diff ** 2))

        dW_enc = [None] * L
        dW_dec = [None] * L
        db_enc = [None] * L
        db_dec = [None] * L
        grad = (2.0 / diff.size) * diff
        for i in range(L):  # decoder, output side first
            delta = grad * self._act_grad(dec[i])
            dW_dec[i] = dec[i + 1].T @ delta
            db_dec[i] = delta.sum(axis=0)
            grad = delta @ wdec[i].T
        for i in range(L - 1, -1, -1):  # encoder, code side first
            delta = grad * self._act_grad(acts[i + 1])
            dW_enc[i] = delta.T @ inputs[i]
            db_enc[i] = delta.sum(axis=0)
            if i:
                grad = delta @ self.layers[i].weights
                if masks is not None and masks[i] is not None:
                    grad = grad * masks[i]
        if dec_weights is not None:
            return loss, [(dW_enc[i], db_enc[i], db_dec[i], dW_dec[i]) for i in range(L)]
        return loss, [(dW_enc[i] + dW_dec[i], db_enc[i], db_dec[i]) for i in range(L)]

    def sample_masks(self, n: int, rng: np.random.Generator, fraction: float | None = None):
        fraction = self.corruption if fraction is None else fraction
        if fraction == 0:
            return None
        masks = []
        for l in self.layers:
            _, m = corrupt(np.ones((n, l.n_in), dtype=self.dtype), fraction, rng, return_mask=True)
            masks.append(m)
        return masks

    # ---- persistence -------------------------------------------------------

    def to_arrays(self, prefix: str = ""):
        meta = {"alpha": self.alpha, "corruption": self.corruption, "activation": self.activation,
                "n_layers": len(self.layers)}
        arrays = {}
        for i, l in enumerate(self.layers):
            arrays[f"{prefix}W{i}"] = l.weights
            arrays[f"{prefix}b_enc{i}"] = l.bias_enc
            arrays[f"{prefix}b_dec{i}"] = l.bias_dec
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta, arrays, prefix: str = ""):
        layers = [DenseLayer(arrays[f"{prefix}W{i}"], arrays[f"{prefix}b_enc{i}"], arrays[f"{prefix}b_dec{i}"])
                  for i in range(meta["n_layers"])]
        return cls(layers, meta["corruption"], meta["alpha"], meta.get("activation", "elu"))


def train_ddae(patches, arch, config: TrainConfig = TrainConfig(), model: DdaeModel | None = None,
               activation: str = "elu", log_every: int = 0):
    """SGD with momentum on the reconstruction MSE.

    ``arch`` lists the encoder widths, e.g. ``[2048, 1024, 512]``; the input
    width is taken from ``patches``. Returns ``(model, trace)`` where trace
    rows are ``(epoch, mean_loss, lr)``.
    """
    x = np.ascontiguousarray(patches, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError("patches must be a 2-D (samples x dim) matrix")
    n = len(x)
    if n < config.minibatch:
        raise ValueError(f"need at least {config.minibatch} samples, got {n}")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = DdaeModel.init([x.shape[1]] + list(arch), rng, config.corruption, activation=activation)
    model.corruption = config.corruption
    velocity = [[np.zeros_like(p) for p in (l.weights, l.bias_enc, l.bias_dec)] for l in model.layers]
    trace = []
    mu = np.float32(config.momentum)
    for epoch in range(config.epochs):
        lr = np.float32(config.rate_at(epoch))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.minibatch):
            batch = x[order[start:start + config.minibatch]]
            masks = model.sample_masks(len(batch), rng)
            loss, grads = model.forward_backward(batch, masks)
            if not np.isfinite(loss):
                raise DivergenceError(epoch + 1, loss)
            total += loss * len(batch)
            for l, v, g in zip(model.layers, velocity, grads):
                for p, vp, gp in zip((l.weights, l.bias_enc, l.bias_dec), v, g):
                    vp *= mu
                    vp += gp.astype(vp.dtype, copy=False)
                    p -= lr * vp
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise DivergenceError(epoch + 1, mean_loss)
        trace.append((epoch + 1, mean_loss, float(lr)))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.6f lr %g", epoch + 1, mean_loss, lr)
    model.loss_trace = trace
    return model, trace


def gradient_check(model: DdaeModel, x, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences over all parameters.

    Runs in float64 without corruption. ``floor`` keeps the ratio finite where
    both gradients vanish.
    """
    m = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    x = x[None] if x.ndim == 1 else x
    _, grads = m.forward_backward(x)
    worst = 0.0
    for layer, g in zip(m.layers, grads):
        for p, gp in zip((layer.weights, layer.bias_enc, layer.bias_dec), g):
            num = np.empty_like(p)
            flat, nflat = p.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                up = m.forward_backward(x)[0]
                flat[i] = old - eps
                down = m.forward_backward(x)[0]
                flat[i] = old
                nflat[i] = (up - down) / (2 * eps)
            err = np.abs(gp - num) / np.maximum(np.maximum(np.abs(gp), np.abs(num)), floor)
            worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


class CompositeEncoder:
    """Multi-scale embedding: ``z = enc3([enc1(small) || enc2(large)])``."""

    kind = "ddae_ent"

    def __init__(self, ddae1: DdaeModel, ddae2: DdaeModel, ddae3: DdaeModel):
        if ddae1.code_dim + ddae2.code_dim != ddae3.input_dim:
            raise ShapeError(
                f"code dims {ddae1.code_dim}+{ddae2.code_dim} do not match ddae3 input {ddae3.input_dim}")
        self.ddae1, self.ddae2, self.ddae3 = ddae1, ddae2, ddae3

    @property
    def code_dim(self) -> int:
        return self.ddae3.code_dim

    def concat_codes(self, small, large) -> np.ndarray:
        return np.concatenate([self.ddae1.encode(small), self.ddae2.encode(large)], axis=-1)

    def encode(self, small, large) -> np.ndarray:
        return self.ddae3.encode(self.concat_codes(small, large))

    def to_arrays(self):
        meta, arrays = {}, {}
        for name, m in (("ddae1", self.ddae1), ("ddae2", self.ddae2), ("ddae3", self.ddae3)):
            mm, aa = m.to_arrays(prefix=f"{name}/")
            meta[name] = mm
            arrays.update(aa)
        return meta, arrays

    @classmethod
    def from_arrays(cls, meta, arrays):
        return cls(*(DdaeModel.from_arrays(meta[n], arrays, prefix=f"{n}/") for n in ("ddae1", "ddae2", "ddae3")))


def compose_ddae_ent(ddae1: DdaeModel, ddae2: DdaeModel, ddae3: DdaeModel) -> CompositeEncoder:
    return CompositeEncoder(ddae1, ddae2, ddae3)


def train_composite(small, large, arch12=(2048, 1024, 512), arch3=(256,),
                    config: TrainConfig = TrainConfig(), config3: TrainConfig | None = None,
                    log_every: int = 0):
    """Train DDAE_1 and DDAE_2 on the two scales, then DDAE_3 on their frozen codes."""
    d1, t1 = train_ddae(small, arch12, config, log_every=log_every)
    d2, t2 = train_ddae(large, arch12, config, log_every=log_every)
    enc = np.concatenate([d1.encode(small), d2.encode(large)], axis=1)
    d3, t3 = train_ddae(enc, arch3, config3 or config, log_every=log_every)
    return CompositeEncoder(d1, d2, d3), {"ddae1": t1, "ddae2": t2, "ddae3": t3}
