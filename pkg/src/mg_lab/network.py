"""Conditional MLP predictor with analytic backpropagation and EMA weights.

The network maps ``(x, t, c[, w])`` to a 2-vector (eps or u). Inputs are
concatenated as ``[x, sin(f t), cos(f t), class_emb[c], w * w_scale + w_shift]``
and pushed through ``layers`` SiLU layers of width ``hidden`` and a final
zero-initialized linear read-out.

Class ids are integers in ``[0, num_classes)``; the empty class is written
``None`` in scalar APIs and ``NULL`` (-1) inside index arrays.
"""
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from .errors import ArchitectureError, ShapeMismatchError, UnknownClassError

NULL = -1


@dataclass(frozen=True)
class Arch:
    num_classes: int
    hidden: int = 64
    layers: int = 3
    freqs: int = 8
    emb_dim: int = 16
    w_input: bool = False
    null_class: bool = True
    max_freq: float = 64.0

    def __post_init__(self):
        if self.num_classes < 1 or self.hidden < 1 or self.layers < 1 or self.freqs < 1 or self.emb_dim < 1:
            raise ArchitectureError(f"invalid architecture {self}")
        if self.max_freq < 1.0:
            raise ArchitectureError("max_freq must be >= 1")

    @property
    def input_dim(self) -> int:
        return 2 + 2 * self.freqs + self.emb_dim + (self.emb_dim if self.w_input else 0)

    @property
    def embedding_rows(self) -> int:
        return self.num_classes + (1 if self.null_class else 0)

    @property
    def frequencies(self) -> np.ndarray:
        """Log-spaced angular frequencies of the time embedding."""
        return _frequencies(self.freqs, self.max_freq)

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=None)
def _frequencies(k: int, max_freq: float) -> np.ndarray:
    f = np.geomspace(1.0, max_freq, k)
    f.setflags(write=False)
    return f


@dataclass
class Params:
    arch: Arch
    tensors: dict  # name -> ndarray, in declaration order

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["W_out"].dtype

    def copy(self) -> "Params":
        return Params(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Params":
        return Params(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})


def param_shapes(arch: Arch) -> dict:
    shapes = {"class_emb": (arch.embedding_rows, arch.emb_dim)}
    if arch.w_input:
        shapes["w_scale"] = (arch.emb_dim,)
        shapes["w_shift"] = (arch.emb_dim,)
    fan_in = arch.input_dim
    for i in range(1, arch.layers + 1):
        shapes[f"W{i}"] = (fan_in, arch.hidden)
        shapes[f"b{i}"] = (arch.hidden,)
        fan_in = arch.hidden
    shapes["W_out"] = (arch.hidden, 2)
    shapes["b_out"] = (2,)
    return shapes


def init_params(arch: Arch, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Fan-in scaled hidden weights, zero read-out, N(0, 0.02^2) embeddings."""
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name in ("class_emb", "w_scale", "w_shift"):
            value = 0.02 * rng.standard_normal(shape)
        elif name.startswith("W") and name != "W_out":
            value = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            value = np.zeros(shape)
        tensors[name] = value.astype(dtype)
    return Params(arch, tensors)


def check_params(params: Params) -> None:
    shapes = param_shapes(params.arch)
    if list(shapes) != list(params.tensors):
        raise ShapeMismatchError("parameter names do not match the architecture")
    for name, shape in shapes.items():
        if params.tensors[name].shape != shape:
            raise ShapeMismatchError(f"{name}: expected {shape}, got {params.tensors[name].shape}")


def class_indices(arch: Arch, c, n: int) -> np.ndarray:
    """Normalize a class spec (int, None, or array with NULL entries) to embedding rows."""
    if c is None:
        idx = np.full(n, NULL, dtype=np.int64)
    else:
        idx = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    bad = (idx < NULL) | (idx >= arch.num_classes)
    if np.any(bad):
        raise UnknownClassError(f"class ids must be in [0, {arch.num_classes}) or NULL")
    is_null = idx == NULL
    if np.any(is_null):
        if not arch.null_class:
            raise UnknownClassError("architecture has no empty-class embedding")
        idx = np.where(is_null, arch.num_classes, idx)
    return idx


def _inputs(params: Params, x, t, c, w):
    arch = params.arch
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ShapeMismatchError(f"x must have shape (n, 2), got {x.shape}")
    n = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=dtype), (n,))
    if arch.w_input and w is None:
        raise ArchitectureError("this network takes a guidance-scale input w")
    if not arch.w_input and w is not None:
        raise ArchitectureError("this network has no guidance-scale input")
    idx = class_indices(arch, c, n)
    phase = t[:, None] * arch.frequencies.astype(dtype)
    parts = [x, np.sin(phase), np.cos(phase), params["class_emb"][idx]]
    if arch.w_input:
        w = np.broadcast_to(np.asarray(w, dtype=dtype), (n,))
        parts.append(w[:, None] * params["w_scale"] + params["w_shift"])
    return np.concatenate(parts, axis=1), idx, w


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and much faster than expit on float32
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(params: Params, inp: np.ndarray):
    h = inp
    cache = []
    for i in range(1, params.arch.layers + 1):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        s = _sigmoid(z)
        cache.append((h, z, s))
        h = z * s
    return h @ params["W_out"] + params["b_out"], h, cache


def forward(params: Params, x, t, c, w=None) -> np.ndarray:
    """Predictions for a batch; ``t`` is normalized time in [0, 1]."""
    inp, _, _ = _inputs(params, x, t, c, w)
    out, _, _ = _forward(params, inp)
    return out


def loss_and_grad(params: Params, x, t, c, targets, w=None):
    """Mean squared error over batch and output dims, and its exact gradient.

    ``targets`` are treated as constants.
    """
    inp, idx, w = _inputs(params, x, t, c, w)
    targets = np.asarray(targets, dtype=params.dtype)
    if targets.shape != (len(inp), 2):
        raise ShapeMismatchError(f"targets must have shape {(len(inp), 2)}, got {targets.shape}")
    if len(inp) == 0:
        raise ShapeMismatchError("empty batch")
    out, h, cache = _forward(params, inp)
    resid = out - targets
    loss = float(np.mean(resid * resid))

    arch = params.arch
    g = resid * (params.dtype.type(1.0) / len(inp))  # d loss / d out
    grads = {}
    grads["W_out"] = h.T @ g
    grads["b_out"] = g.sum(axis=0)
    dh = g @ params["W_out"].T
    for i in range(arch.layers, 0, -1):
        h_prev, z, s = cache[i - 1]
        dz = dh * (s * (1 + z * (1 - s)))
        grads[f"W{i}"] = h_prev.T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"W{i}"].T

    e0 = 2 + 2 * arch.freqs
    e1 = e0 + arch.emb_dim
    emb_grad = np.zeros_like(params["class_emb"])
    np.add.at(emb_grad, idx, dh[:, e0:e1])
    grads["class_emb"] = emb_grad
    if arch.w_input:
        dw = dh[:, e1:]
        grads["w_scale"] = (w[:, None] * dw).sum(axis=0)
        grads["w_shift"] = dw.sum(axis=0)
    return loss, {name: grads[name] for name in params.tensors}


def ema_update(ema: Params, online: Params, decay: float) -> Params:
    """Return ``decay * ema + (1 - decay) * online`` entrywise."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    if ema.arch != online.arch:
        raise ShapeMismatchError("EMA and online parameters have different architectures")
    out = {}
    for name, e in ema.tensors.items():
        o = online.tensors[name]
        if e.shape != o.shape:
            raise ShapeMismatchError(f"{name}: {e.shape} vs {o.shape}")
        out[name] = decay * e + (1.0 - decay) * o
    return Params(ema.arch, out)
