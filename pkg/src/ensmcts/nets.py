"""Small value networks in NumPy: linear and ReLU MLP, MSE + L2 gradients, RMSProp.

Parameters are stacked along a leading *member* axis so that a whole
ensemble is evaluated and trained with batched matrix products; a single
network is simply a stack of one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass
class NetParams:
    arch: str  # "linear" or "mlp"
    hidden: tuple
    weights: list  # weights[l].shape == (members, fan_in, fan_out)
    biases: list  # biases[l].shape == (members, fan_out)

    @property
    def members(self) -> int:
        return self.weights[0].shape[0]

    @property
    def input_len(self) -> int:
        return self.weights[0].shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "NetParams":
        return NetParams(self.arch, self.hidden, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def select(self, idx) -> "NetParams":
        """Sub-stack of the members in ``idx`` (order preserved)."""
        idx = np.asarray(idx)
        return NetParams(self.arch, self.hidden, [w[idx] for w in self.weights],
                         [b[idx] for b in self.biases])


def layer_sizes(arch: str, input_len: int, hidden=(50, 50)) -> list[int]:
    if arch == "linear":
        return [input_len, 1]
    if arch == "mlp":
        return [input_len, *hidden, 1]
    raise ValueError(f"unknown architecture {arch!r}")


def init_params(arch: str, input_len: int, seed: int | np.random.Generator = 0, members: int = 1,
                hidden=(50, 50)) -> NetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = layer_sizes(arch, input_len, hidden)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(members, fan_in, fan_out)))
        biases.append(np.zeros((members, fan_out)))
    return NetParams(arch, tuple(hidden) if arch == "mlp" else (), weights, biases)


def _forward(params: NetParams, X: np.ndarray):
    """Returns the (members, batch) outputs and per-layer activations for backprop."""
    acts = [X]
    h = np.matmul(X, params.weights[0]) + params.biases[0][:, None, :]
    for W, b in zip(params.weights[1:], params.biases[1:]):
        h = np.maximum(h, 0.0)
        acts.append(h)
        h = np.matmul(h, W) + b[:, None, :]
    return h[..., 0], acts


def forward(params: NetParams, X: np.ndarray) -> np.ndarray:
    """Evaluate every member on a batch: ``X`` is (batch, input_len), result (batch, members)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != params.input_len:
        raise ValueError(f"observation length {X.shape[1]} != network input {params.input_len}")
    return _forward(params, X)[0].T


def net_forward(params: NetParams, obs) -> float:
    """Scalar output of a single network (first member) on one observation."""
    return float(forward(params, obs)[0, 0])


def loss_and_grad(params: NetParams, X, targets, weights, zeta: float = 0.0, prior: "PriorPair | None" = None):
    """Masked squared error plus L2 penalty, and its gradient, for every member.

    For member ``i``: ``(1/B) * sum_b w[b, i] * (V_i(x_b) - t_b)^2 + zeta * ||theta_i||^2``.
    ``weights`` is (B,) or (B, members). With ``prior``, ``V_i`` includes the frozen
    prior output scaled by ``prior.scale`` and gradients cover the trainable part only.

    Returns ``(loss, grads)`` with ``loss`` of shape (members,) and ``grads`` a
    :class:`NetParams` holding the gradient arrays.
    """
    X = np.asarray(X, dtype=float)
    targets = np.asarray(targets, dtype=float)
    B = X.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = np.broadcast_to(w[:, None], (B, params.members))
    out, acts = _forward(params, X)  # (K, B)
    if prior is not None and prior.scale != 0.0:
        out = out + prior.scale * _forward(prior.prior, X)[0]
    err = out - targets[None, :]
    wt = w.T
    loss = (wt * err * err).sum(axis=1) / B
    delta = (2.0 / B) * wt * err  # dL/d out, (K, B)
    delta = delta[..., None]
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for layer in range(len(params.weights) - 1, -1, -1):
        a = acts[layer]
        if a.ndim == 2:
            gw[layer] = np.matmul(a.T, delta)  # broadcasts over members
        else:
            gw[layer] = np.matmul(a.transpose(0, 2, 1), delta)
        gb[layer] = delta.sum(axis=1)
        if layer:
            delta = np.matmul(delta, params.weights[layer].transpose(0, 2, 1)) * (acts[layer] > 0)
    if zeta:
        for l2, (W, b) in enumerate(zip(params.weights, params.biases)):
            gw[l2] = gw[l2] + 2.0 * zeta * W
            gb[l2] = gb[l2] + 2.0 * zeta * b
        loss = loss + zeta * sum((W * W).sum(axis=(1, 2)) + (b * b).sum(axis=1)
                                 for W, b in zip(params.weights, params.biases))
    return loss, NetParams(params.arch, params.hidden, gw, gb)


def net_grad(params, batch, zeta: float = 0.0):
    """Gradient for a batch of ``(observation, target, weight)`` rows."""
    X = np.array([row[0] for row in batch], dtype=float)
    t = np.array([row[1] for row in batch], dtype=float)
    w = np.array([row[2] for row in batch], dtype=float)
    loss, grads = loss_and_grad(params, X, t, w, zeta)
    return grads, loss


@dataclass
class PriorPair:
    """Trainable network plus a frozen randomized prior added with weight ``scale``."""

    trainable: NetParams
    prior: NetParams
    scale: float = 1.0

    def __call__(self, X) -> np.ndarray:
        out = forward(self.trainable, X)
        if self.scale:
            out = out + self.scale * forward(self.prior, X)
        return out


@dataclass
class OptState:
    """RMSProp state: one squared-gradient accumulator per parameter array."""

    acc: list
    lr: float = 2.5e-4
    rho: float = 0.9
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetParams, lr=2.5e-4, rho=0.9, eps=1e-8) -> "OptState":
        return cls([np.zeros_like(a) for a in params.arrays()], lr, rho, eps)


def rmsprop_step(params: NetParams, grads: NetParams, state: OptState) -> NetParams:
    """In place: ``acc <- rho*acc + (1-rho)*g^2``; ``theta <- theta - lr*g/(sqrt(acc)+eps)``."""
    for p, g, acc in zip(params.arrays(), grads.arrays(), state.acc):
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        p -= state.lr * g / (np.sqrt(acc) + state.eps)
    return params


# --- checkpoints -------------------------------------------------------------

def params_to_arrays(params: NetParams, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}w{i}"] = W
        out[f"{prefix}b{i}"] = b
    return out


def params_from_arrays(arrays, arch: str, hidden, prefix: str = "") -> NetParams:
    n = len(layer_sizes(arch, 1, hidden)) - 1
    return NetParams(arch, tuple(hidden), [np.array(arrays[f"{prefix}w{i}"]) for i in range(n)],
                     [np.array(arrays[f"{prefix}b{i}"]) for i in range(n)])


def save_checkpoint(path, params: NetParams, opt: OptState | None = None, prior: PriorPair | None = None,
                    metadata: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "arch": params.arch, "hidden": list(params.hidden),
            "members": params.members, "input_len": params.input_len, **(metadata or {})}
    arrays = params_to_arrays(params)
    if opt is not None:
        meta["opt"] = {"lr": opt.lr, "rho": opt.rho, "eps": opt.eps}
        arrays.update({f"acc{i}": a for i, a in enumerate(opt.acc)})
    if prior is not None:
        meta["prior_scale"] = prior.scale
        arrays.update(params_to_arrays(prior.prior, "prior_"))
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(params, opt_or_None, prior_or_None, metadata)``; arrays are bit-exact."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = params_from_arrays(data, meta["arch"], meta["hidden"])
        opt = None
        if "opt" in meta:
            acc = [np.array(data[f"acc{i}"]) for i in range(len(params.arrays()))]
            opt = OptState(acc, **meta["opt"])
        prior = None
        if "prior_scale" in meta:
            prior = PriorPair(params, params_from_arrays(data, meta["arch"], meta["hidden"], "prior_"),
                              meta["prior_scale"])
    return params, opt, prior, meta
