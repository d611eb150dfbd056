"""Small dense networks with hand-written backprop and Adam.

Hidden layers use tanh, the output layer is affine. Everything is float64.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

CHECKPOINT_FORMAT = "slungrl-checkpoint/1"


class StaleCacheError(RuntimeError):
    """backward() got a cache produced before the parameters last changed."""


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Cache:
    version: int
    activations: list  # input, then post-activation of every layer


class DenseNet:
    def __init__(self, layer_sizes, rng: np.random.Generator | None = None, out_scale: float = 1.0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("need at least an input and an output size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layer_sizes = sizes
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, (fan_in, fan_out))
            if i == len(sizes) - 2:
                w *= out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self.version = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params):
        params = list(params)
        if len(params) != 2 * self.n_layers:
            raise ValueError("parameter list has the wrong length")
        for i in range(self.n_layers):
            w, b = np.asarray(params[2 * i], dtype=float), np.asarray(params[2 * i + 1], dtype=float)
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError(f"shape mismatch in layer {i}")
            self.weights[i], self.biases[i] = w.copy(), b.copy()
        self.touch()

    def touch(self):
        self.version += 1

    def copy(self) -> "DenseNet":
        other = DenseNet.__new__(DenseNet)
        other.layer_sizes = list(self.layer_sizes)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.version = 0
        return other

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected input width {self.layer_sizes[0]}, got {h.shape[1]}")
        acts = [h]
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            acts.append(h)
        out = h[0] if single else h
        return out, Cache(self.version, acts)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: Cache, grad_out):
        """Gradients of a scalar loss given dLoss/dOutput.

        Returns ``(grads, grad_input)`` where ``grads`` follows :meth:`params`.
        """
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        g = np.asarray(grad_out, dtype=float)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        acts = cache.activations
        grads = [None] * (2 * self.n_layers)
        for i in range(self.n_layers - 1, -1, -1):
            if i != self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if single else g)

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes),
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNet":
        net = cls.__new__(cls)
        net.layer_sizes = [int(s) for s in data["layer_sizes"]]
        net.weights = [np.array(w, dtype=float).reshape(a, b)
                       for w, a, b in zip(data["weights"], net.layer_sizes[:-1], net.layer_sizes[1:])]
        net.biases = [np.array(b, dtype=float) for b in data["biases"]]
        net.version = 0
        return net


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, lr: float = 3e-4, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)

    def to_dict(self) -> dict:
        return {"m": [x.tolist() for x in self.m], "v": [x.tolist() for x in self.v], "step": self.step,
                "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, data: dict, like) -> "AdamState":
        m = [np.array(x, dtype=float).reshape(p.shape) for x, p in zip(data["m"], like)]
        v = [np.array(x, dtype=float).reshape(p.shape) for x, p in zip(data["v"], like)]
        return cls(m, v, int(data["step"]), data["lr"], data["beta1"], data["beta2"], data["eps"])


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam, applied in place. Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm > 0:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def check_finite(net: DenseNet, where: str = ""):
    for i, p in enumerate(net.params()):
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"non-finite parameter in tensor {i} {where}".strip())


def gradient_check(net: DenseNet, loss_fn, x, h: float = 1e-5, floor: float = 1e-7,
                   backward=None) -> float:
    """Worst elementwise relative error of backprop against central differences.

    ``loss_fn(output) -> (loss, dloss/doutput)``. The relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator.

    At h = 1e-5 a plain float64 difference of a loss of size L carries about
    ``eps * L / h`` of rounding noise, enough to swamp small gradient entries.
    So each perturbed output is formed as base output plus a separately
    propagated output change (tanh differences via the addition formula), and
    the loss is evaluated in ``np.longdouble``. ``loss_fn`` should keep the
    dtype of its input.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    out, cache = net.forward(x)
    _, g_out = loss_fn(out)
    grads, _ = (backward or net.backward)(cache, g_out)

    last = net.n_layers - 1
    acts = [np.atleast_2d(np.asarray(x, dtype=float))]
    for i in range(net.n_layers):
        z = acts[-1] @ net.weights[i] + net.biases[i]
        acts.append(z if i == last else np.tanh(z))
    base = acts[-1].astype(np.longdouble)

    def tanh_delta(t, dz):
        # tanh(z + dz) - tanh(z) without cancellation, given t = tanh(z)
        tb = np.tanh(dz)
        return tb * (1.0 - t * t) / (1.0 + t * tb)

    def output_delta(i, dz):
        """Change of the output when layer i's pre-activation moves by ``dz``."""
        for j in range(i, last):
            dz = tanh_delta(acts[j + 1], dz) @ net.weights[j + 1]
        return dz

    worst = 0.0
    n_batch = acts[0].shape[0]
    for i in range(net.n_layers):
        fan_in, fan_out = net.weights[i].shape
        # perturbation p = (row, col); row == fan_in is the bias. Moving weight (row, col)
        # by h shifts column col of the pre-activation by h * input[:, row].
        rows, cols = np.divmod(np.arange((fan_in + 1) * fan_out), fan_out)
        inputs = np.concatenate([acts[i], np.ones((n_batch, 1))], axis=1)
        analytic = np.concatenate([grads[2 * i], grads[2 * i + 1][None, :]], axis=0)
        chunk = max(1, 8192 // n_batch)
        for c0 in range(0, len(rows), chunk):
            r, c = rows[c0:c0 + chunk], cols[c0:c0 + chunk]
            k = np.arange(len(r))
            losses = []
            for sign in (1.0, -1.0):
                dz = np.zeros((len(r), n_batch, fan_out))
                dz[k, :, c] = sign * h * inputs[:, r].T
                outs = base + output_delta(i, dz).astype(np.longdouble)
                if np.ndim(x) == 1:
                    outs = outs[:, 0]
                losses.append(np.array([loss_fn(o)[0] for o in outs], dtype=np.longdouble))
            num = ((losses[0] - losses[1]) / (2 * np.longdouble(h))).astype(float)
            ana = analytic[r, c]
            err = np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), floor)
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# checkpoints: JSON documents, floats written with shortest round-trip repr


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, doc: dict):
    doc = dict(doc)
    doc.setdefault("format", CHECKPOINT_FORMAT)
    atomic_write(path, dumps(doc))


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    return doc


def network_record(net: DenseNet, opt: AdamState | None = None) -> dict:
    rec = net.to_dict()
    if opt is not None:
        rec["optimizer"] = opt.to_dict()
    return rec


def restore_network(rec: dict):
    net = DenseNet.from_dict(rec)
    opt = AdamState.from_dict(rec["optimizer"], net.params()) if "optimizer" in rec else None
    return net, opt
