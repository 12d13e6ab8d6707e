"""Per-node MLP encoder with unit-sphere output, manual backprop and AdamW.

Inputs and outputs are column-per-sample: ``X`` is ``n_in x m`` and the
encoder returns a ``d x m`` feature matrix whose columns have unit norm.
"""

import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ArchMismatch, BadArch, ShapeMismatch

NORM_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"MC2E"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "elu")


@dataclass
class EncoderParams:
    layers: List[Tuple[np.ndarray, np.ndarray]]
    activation: str = "elu"

    @property
    def arch(self):
        dims = [self.layers[0][0].shape[1]]
        dims += [W.shape[0] for W, _ in self.layers]
        return dims

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    def copy(self):
        return EncoderParams([(W.copy(), b.copy()) for W, b in self.layers], self.activation)

    def flat(self):
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in self.layers])

    def n_params(self):
        return sum(W.size + b.size for W, b in self.layers)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def _check_arch(arch):
    if len(arch) < 2 or any(int(a) <= 0 for a in arch):
        raise BadArch(f"architecture needs >= 2 positive dims, got {list(arch)}")


def init_params(arch, activation="elu", seed=0):
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    _check_arch(arch)
    if activation not in ACTIVATIONS:
        raise BadArch(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return EncoderParams(layers, activation)


def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _act_grad(x, kind):
    if kind == "relu":
        return (x > 0).astype(np.float64)
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def forward(params, X, normalize=True, return_cache=False):
    """Affine + activation layers (linear last layer), then column L2 normalization."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != params.arch[0]:
        raise ShapeMismatch(f"input has shape {X.shape}, encoder expects {params.arch[0]} rows")
    pre, post = [], [X]
    h = X
    last = len(params.layers) - 1
    for li, (W, b) in enumerate(params.layers):
        a = W @ h + b[:, None]
        pre.append(a)
        h = a if li == last else _act(a, params.activation)
        post.append(h)
    if normalize:
        norms = np.maximum(np.linalg.norm(h, axis=0), NORM_FLOOR)
        out = h / norms
    else:
        norms = None
        out = h
    if return_cache:
        return out, {"pre": pre, "post": post, "norms": norms, "normalize": normalize}
    return out


def backward(params, X, upstream, cache=None):
    """Gradients of a scalar loss w.r.t. every (W, b), given dLoss/dZ."""
    if cache is None:
        Z, cache = forward(params, X, return_cache=True)
    upstream = np.asarray(upstream, dtype=np.float64)
    h_out = cache["post"][-1]
    if upstream.shape != h_out.shape:
        raise ShapeMismatch(f"upstream shape {upstream.shape} != features {h_out.shape}")
    if cache["normalize"]:
        n = cache["norms"]
        z = h_out / n
        # (I - z z^T) g / ||h| per column
        g = (upstream - z * np.sum(z * upstream, axis=0)) / n
    else:
        g = upstream
    grads = [None] * len(params.layers)
    last = len(params.layers) - 1
    for li in range(last, -1, -1):
        W, _ = params.layers[li]
        if li != last:
            g = g * _act_grad(cache["pre"][li], params.activation)
        grads[li] = (g @ cache["post"][li].T, g.sum(axis=1))
        if li:
            g = W.T @ g
    return grads


def adam_init(params, lr=1e-3, beta1=0.9, beta2=0.999, weight_decay=0.0, eps=1e-8):
    zeros = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers]
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        weight_decay=weight_decay,
        eps=eps,
        m=zeros,
        v=[(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers],
    )


def adam_step(params, grads, state):
    """One AdamW step in place (decoupled decay applied before the moment update)."""
    if len(grads) != len(params.layers):
        raise ShapeMismatch("gradient list does not match layer count")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    decay = 1.0 - state.lr * state.weight_decay
    for li, ((W, b), (gW, gb)) in enumerate(zip(params.layers, grads)):
        if gW.shape != W.shape or gb.shape != b.shape:
            raise ShapeMismatch(f"layer {li}: gradient shape mismatch")
        mW, mb = state.m[li]
        vW, vb = state.v[li]
        for p, g, m, v in ((W, gW, mW, vW), (b, gb, mb, vb)):
            if state.weight_decay:
                p *= decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def average_params(replicas):
    """Arithmetic mean of identically shaped parameter sets."""
    first = replicas[0]
    arch = first.arch
    for r in replicas[1:]:
        if r.arch != arch or r.activation != first.activation:
            raise ArchMismatch(f"cannot average {arch} with {r.arch}")
    n = len(replicas)
    layers = []
    for li in range(len(first.layers)):
        W = sum(r.layers[li][0] for r in replicas) / n
        b = sum(r.layers[li][1] for r in replicas) / n
        layers.append((W, b))
    return EncoderParams(layers, first.activation)


def dumps_checkpoint(params):
    arch = params.arch
    head = CHECKPOINT_MAGIC + struct.pack(
        "<BBI", CHECKPOINT_VERSION, ACTIVATIONS.index(params.activation), len(arch)
    )
    head += struct.pack(f"<{len(arch)}I", *arch)
    return head + params.flat().astype("<f8").tobytes()


def loads_checkpoint(blob):
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    version, act, n = struct.unpack_from("<BBI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<BBI")
    arch = list(struct.unpack_from(f"<{n}I", blob, off))
    off += 4 * n
    flat = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    layers, pos = [], 0
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        W = flat[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        layers.append((W.copy(), b.copy()))
    if pos != flat.size:
        raise ValueError("checkpoint payload size does not match architecture")
    return EncoderParams(layers, ACTIVATIONS[act])


def save_checkpoint(params, path):
    with open(path, "wb") as f:
        f.write(dumps_checkpoint(params))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return loads_checkpoint(f.read())
