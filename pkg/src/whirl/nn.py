"""Small numpy MLPs with hand-written backprop, Adam, and a conditional VAE.

Batches are row-major: inputs are ``(n, d)`` (a single ``(d,)`` vector is treated
as a batch of one). Weight matrices are stored ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")


class ShapeError(ValueError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ShapeError("one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} does not match weights {w.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i}: input size {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases],
                         self.activation)


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, activation: str = "relu") -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation)


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(a, 0.0) if kind == "relu" else np.tanh(a)


def _act_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    return (pre > 0.0).astype(float) if kind == "relu" else 1.0 - post * post


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def mlp_forward(params: MlpParams, x, return_cache: bool = False):
    """Affine layers with ``params.activation`` between them and a linear output."""
    xb, single = _as_batch(x)
    if xb.shape[1] != params.weights[0].shape[0]:
        raise ShapeError(f"input dimension {xb.shape[1]} != first layer size {params.weights[0].shape[0]}")
    inputs, pres = [], []
    h = xb
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        pre = h @ w + b
        pres.append(pre)
        h = pre if i == last else _act(pre, params.activation)
    out = h[0] if single else h
    if return_cache:
        return out, (inputs, pres, single)
    return out


def mlp_backward(params: MlpParams, x, output_grad, cache=None) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. parameters and input.

    Parameter gradients are summed over the batch.
    """
    if cache is None:
        _, cache = mlp_forward(params, x, return_cache=True)
    inputs, pres, single = cache
    g, _ = _as_batch(output_grad)
    if g.shape != pres[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != output shape {pres[-1].shape}")
    grads = params.zeros_like()
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            post = inputs[i + 1]
            g = g * _act_grad(pres[i], post, params.activation)
        grads.weights[i] = inputs[i].T @ g
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place Adam step on ``params``."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(self.m) or any(g.shape != m.shape for g, m in zip(grads, self.m)):
            raise ShapeError("gradient shapes do not match the optimizer state")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- conditional VAE ---------------------------------------------------------------

@dataclass
class CvaeParams:
    encoder: MlpParams  # (x ⊕ c) -> (mu, logvar)
    decoder: MlpParams  # (z ⊕ c) -> x_hat
    d_z: int = 4
    beta: float = 5e-4

    def __post_init__(self):
        if self.encoder.layer_sizes[-1] != 2 * self.d_z:
            raise ShapeError("encoder must output 2 * d_z values")
        if self.decoder.layer_sizes[0] != self.d_z + self.c_dim:
            raise ShapeError("decoder input must be d_z + dim(c)")

    @property
    def x_dim(self) -> int:
        return self.decoder.layer_sizes[-1]

    @property
    def c_dim(self) -> int:
        return self.encoder.layer_sizes[0] - self.x_dim

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.decoder.arrays()

    def copy(self) -> "CvaeParams":
        return CvaeParams(self.encoder.copy(), self.decoder.copy(), self.d_z, self.beta)


def init_cvae(x_dim: int, c_dim: int, rng: np.random.Generator, d_z: int = 4,
              hidden: Sequence[int] = (64, 64, 64), beta: float = 5e-4, activation: str = "relu") -> CvaeParams:
    enc = init_mlp([x_dim + c_dim, *hidden, 2 * d_z], rng, activation)
    dec = init_mlp([d_z + c_dim, *hidden, x_dim], rng, activation)
    return CvaeParams(enc, dec, d_z, beta)


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) per row."""
    return 0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar, axis=-1)


def _check_xc(params: CvaeParams, x, c):
    xb, _ = _as_batch(x)
    cb, _ = _as_batch(c)
    if xb.shape[1] != params.x_dim or cb.shape[1] != params.c_dim or len(xb) != len(cb):
        raise ShapeError(f"x {xb.shape} / c {cb.shape} do not fit a CVAE with x_dim={params.x_dim}, "
                         f"c_dim={params.c_dim}")
    return xb, cb


def cvae_loss_terms(params: CvaeParams, x, c, eps: np.ndarray) -> tuple[float, float]:
    """Mean reconstruction and mean KL for fixed reparameterization noise ``eps``."""
    xb, cb = _check_xc(params, x, c)
    h = mlp_forward(params.encoder, np.concatenate([xb, cb], axis=1))
    mu, logvar = h[:, :params.d_z], h[:, params.d_z:]
    z = mu + np.exp(0.5 * logvar) * eps.reshape(mu.shape)
    xhat = mlp_forward(params.decoder, np.concatenate([z, cb], axis=1))
    return float(np.mean(np.sum((xb - xhat) ** 2, axis=1))), float(np.mean(kl_divergence(mu, logvar)))


def cvae_loss(params: CvaeParams, x, c, eps: np.ndarray) -> float:
    recon, kl = cvae_loss_terms(params, x, c, eps)
    return recon + params.beta * kl


def cvae_loss_and_grads(params: CvaeParams, x, c, rng: Optional[np.random.Generator] = None,
                        eps: Optional[np.ndarray] = None) -> tuple[float, CvaeParams]:
    """Mean over the batch of ``||x - dec(z, c)||^2 + beta * KL`` and its exact gradients.

    ``z = mu + sigma * eps`` with ``eps`` drawn from ``rng`` unless given.
    """
    xb, cb = _check_xc(params, x, c)
    n = len(xb)
    dz = params.d_z
    if eps is None:
        eps = rng.standard_normal((n, dz))
    eps = np.asarray(eps, dtype=float).reshape(n, dz)

    enc_in = np.concatenate([xb, cb], axis=1)
    h, enc_cache = mlp_forward(params.encoder, enc_in, return_cache=True)
    mu, logvar = h[:, :dz], h[:, dz:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    dec_in = np.concatenate([z, cb], axis=1)
    xhat, dec_cache = mlp_forward(params.decoder, dec_in, return_cache=True)

    diff = xhat - xb
    kl = kl_divergence(mu, logvar)
    loss = float(np.mean(np.sum(diff * diff, axis=1) + params.beta * kl))

    g_dec, g_dec_in = mlp_backward(params.decoder, dec_in, 2.0 * diff / n, dec_cache)
    g_z = g_dec_in[:, :dz]
    g_mu = g_z + params.beta * mu / n
    g_logvar = g_z * eps * 0.5 * std + params.beta * 0.5 * (np.exp(logvar) - 1.0) / n
    g_enc, _ = mlp_backward(params.encoder, enc_in, np.concatenate([g_mu, g_logvar], axis=1), enc_cache)
    return loss, CvaeParams(g_enc, g_dec, dz, params.beta)


def cvae_fit(params: CvaeParams, dataset, epochs: int, rng: np.random.Generator, batch: Optional[int] = None,
             lr: float = 1e-3, history: Optional[list] = None) -> CvaeParams:
    """Adam on the mean CVAE loss; returns new parameters, never worse than the input ones.

    ``dataset`` is a sequence of ``(x, c)`` pairs or an ``(X, C)`` tuple of arrays. The
    before/after comparison uses one fixed draw of reparameterization noise.
    """
    X, C = _dataset_arrays(dataset)
    X, C = _check_xc(params, X, C)
    n = len(X)
    out = params.copy()
    if epochs <= 0:
        return out
    batch = n if batch is None else min(batch, n)
    eval_eps = rng.standard_normal((n, params.d_z))
    start = cvae_loss(out, X, C, eval_eps)
    opt = AdamState(lr=lr)
    arrays = out.arrays()
    for _ in range(epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            loss, grads = cvae_loss_and_grads(out, X[idx], C[idx], rng)
            opt.update(arrays, grads.arrays())
            total += loss * len(idx)
        if history is not None:
            history.append(total / n)
    if cvae_loss(out, X, C, eval_eps) > start:
        return params.copy()
    return out


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray) \
            and dataset[0].ndim == 2:
        X, C = dataset
    else:
        if len(dataset) == 0:
            raise ValueError("cannot fit on an empty dataset")
        X = np.array([np.asarray(x, dtype=float) for x, _ in dataset])
        C = np.array([np.asarray(c, dtype=float) for _, c in dataset])
    if len(X) == 0:
        raise ValueError("cannot fit on an empty dataset")
    return np.asarray(X, dtype=float), np.asarray(C, dtype=float)


def cvae_sample(params: CvaeParams, c, rng: np.random.Generator) -> np.ndarray:
    """Decode ``z ~ N(0, I)`` with condition ``c`` (one sample per row of ``c``)."""
    cb, single = _as_batch(c)
    if cb.shape[1] != params.c_dim:
        raise ShapeError(f"condition dimension {cb.shape[1]} != {params.c_dim}")
    z = rng.standard_normal((len(cb), params.d_z))
    out = mlp_forward(params.decoder, np.concatenate([z, cb], axis=1))
    return out[0] if single else out


def mlp_fit_l2(params: MlpParams, X, Y, epochs: int, rng: np.random.Generator, lr: float = 1e-3) -> MlpParams:
    """Full-batch Adam on mean squared error."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        raise ValueError("cannot fit on an empty dataset")
    del rng  # full-batch: nothing stochastic
    out = params.copy()
    opt = AdamState(lr=lr)
    arrays = out.arrays()
    n = len(X)
    for _ in range(epochs):
        pred, cache = mlp_forward(out, X, return_cache=True)
        grads, _ = mlp_backward(out, X, 2.0 * (pred - Y) / n, cache)
        opt.update(arrays, grads.arrays())
    return out


# -- checkpoints ---------------------------------------------------------------------
#
# little-endian layout:
#   magic  b"WHIRLNN1"
#   u32 kind (0 = MLP, 1 = CVAE)
#   CVAE only: u32 d_z, f64 beta
#   per network: u32 activation (0 relu, 1 tanh), u32 n_sizes, u32[n_sizes] layer sizes,
#                then per layer f64 weights (fan_in x fan_out, row-major) followed by f64 biases

MAGIC = b"WHIRLNN1"


def _pack_mlp(p: MlpParams) -> bytes:
    sizes = p.layer_sizes
    parts = [struct.pack("<II", ACTIVATIONS.index(p.activation), len(sizes)),
             struct.pack(f"<{len(sizes)}I", *sizes)]
    for w, b in zip(p.weights, p.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack_mlp(buf: memoryview, off: int) -> tuple[MlpParams, int]:
    act, n = struct.unpack_from("<II", buf, off)
    off += 8
    sizes = struct.unpack_from(f"<{n}I", buf, off)
    off += 4 * n
    weights, biases = [], []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(buf, dtype="<f8", count=fi * fo, offset=off).reshape(fi, fo).astype(float)
        off += 8 * fi * fo
        b = np.frombuffer(buf, dtype="<f8", count=fo, offset=off).astype(float)
        off += 8 * fo
        weights.append(w)
        biases.append(b)
    return MlpParams(weights, biases, ACTIVATIONS[act]), off


def dump_params(params) -> bytes:
    if isinstance(params, CvaeParams):
        return MAGIC + struct.pack("<IId", 1, params.d_z, params.beta) + _pack_mlp(params.encoder) \
            + _pack_mlp(params.decoder)
    return MAGIC + struct.pack("<I", 0) + _pack_mlp(params)


def load_params(data: bytes):
    buf = memoryview(data)
    if bytes(buf[:8]) != MAGIC:
        raise ValueError("not a whirl parameter checkpoint")
    (kind,) = struct.unpack_from("<I", buf, 8)
    if kind == 0:
        p, _ = _unpack_mlp(buf, 12)
        return p
    d_z, beta = struct.unpack_from("<Id", buf, 12)
    enc, off = _unpack_mlp(buf, 24)
    dec, _ = _unpack_mlp(buf, off)
    return CvaeParams(enc, dec, d_z, beta)


def save_params(params, path) -> None:
    Path(path).write_bytes(dump_params(params))


def read_params(path):
    return load_params(Path(path).read_bytes())
