"""Value-function ensembles: sub-sampling, transition masks, training and a learned aggregator."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nets
from .nets import NetParams, OptState, PriorPair

MASK_TAGS = ("none", "static_bernoulli", "static_per_trajectory", "dynamic_equal_split")


def subsample(K: int, size: int | None, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset of ``size`` member indices drawn without replacement (all K when None)."""
    if size is None or size == K:
        return np.arange(K)
    if not 1 <= size <= K:
        raise ValueError(f"sub-sample size must be in [1, {K}], got {size}")
    return rng.choice(K, size=size, replace=False)


@dataclass(frozen=True)
class MaskPolicy:
    tag: str = "static_bernoulli"
    p: float = 0.5

    def __post_init__(self):
        if self.tag not in MASK_TAGS:
            raise ValueError(f"unknown mask policy {self.tag!r}; expected one of {MASK_TAGS}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("mask probability must be in (0, 1]")

    @property
    def static(self) -> bool:
        return self.tag.startswith("static")

    @property
    def dynamic(self) -> bool:
        return self.tag == "dynamic_equal_split"


def bernoulli_mask(K: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p) mask over K members, redrawn until at least one member is on."""
    while True:
        m = (rng.random(K) < p).astype(np.float64)
        if m.any():
            return m


def dynamic_split(batch_size: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """(batch_size, K) masks assigning each row to exactly one member, batch_size/K rows each."""
    if batch_size % K:
        raise ValueError(f"batch size {batch_size} is not a multiple of the ensemble size {K}")
    owner = rng.permutation(np.repeat(np.arange(K), batch_size // K))
    masks = np.zeros((batch_size, K))
    masks[np.arange(batch_size), owner] = 1.0
    return masks


class MaskGenerator:
    """Produces static masks at insertion time; per-trajectory masks are cached by id."""

    def __init__(self, policy: MaskPolicy, K: int, rng: np.random.Generator):
        self.policy, self.K, self.rng = policy, K, rng
        self._by_trajectory: dict = {}

    def mask(self, trajectory_id=None) -> np.ndarray:
        tag = self.policy.tag
        if tag in ("none", "dynamic_equal_split"):
            return np.ones(self.K)
        if tag == "static_bernoulli":
            return bernoulli_mask(self.K, self.policy.p, self.rng)
        if trajectory_id not in self._by_trajectory:
            self._by_trajectory[trajectory_id] = bernoulli_mask(self.K, self.policy.p, self.rng)
        return self._by_trajectory[trajectory_id]

    def episode_masks(self, trajectory_id, length: int) -> np.ndarray:
        return np.array([self.mask(trajectory_id) for _ in range(length)]).reshape(length, self.K)

    def forget(self, trajectory_id) -> None:
        self._by_trajectory.pop(trajectory_id, None)


def make_mask(policy: MaskPolicy, K: int, rng: np.random.Generator, trajectory_id=None,
              generator: MaskGenerator | None = None) -> np.ndarray:
    gen = generator or MaskGenerator(policy, K, rng)
    return gen.mask(trajectory_id)


class ValueSnapshot:
    """Frozen sub-ensemble used by the planner for one episode: obs batch -> (batch, members)."""

    def __init__(self, fn, size: int):
        self._fn = fn
        self.size = size
        self.calls = 0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        self.calls += 1
        return self._fn(X)


class Ensemble:
    """K value networks trained jointly; members share architecture and input length."""

    def __init__(self, params: NetParams, opt: OptState, prior: NetParams | None = None,
                 prior_scale: float = 0.0):
        self.params = params
        self.opt = opt
        self.prior = prior
        self.prior_scale = prior_scale if prior is not None else 0.0

    @classmethod
    def create(cls, arch: str, input_len: int, K: int, seed: int | np.random.Generator = 0, hidden=(50, 50),
               lr=2.5e-4, rho=0.9, eps=1e-8, prior_scale: float = 0.0) -> "Ensemble":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = nets.init_params(arch, input_len, rng, members=K, hidden=hidden)
        prior = nets.init_params(arch, input_len, rng, members=K, hidden=hidden) if prior_scale else None
        return cls(params, OptState.for_params(params, lr, rho, eps), prior, prior_scale)

    @property
    def K(self) -> int:
        return self.params.members

    def evaluate(self, X, selection=None) -> np.ndarray:
        params = self.params if selection is None else self.params.select(selection)
        out = nets.forward(params, X)
        if self.prior is not None:
            prior = self.prior if selection is None else self.prior.select(selection)
            out = out + self.prior_scale * nets.forward(prior, X)
        return out

    def snapshot(self, selection=None) -> ValueSnapshot:
        selection = np.arange(self.K) if selection is None else np.asarray(selection)
        params = self.params.select(selection)
        prior = self.prior.select(selection) if self.prior is not None else None
        scale = self.prior_scale

        def fn(X):
            out = nets._forward(params, X)[0].T
            if prior is not None:
                out = out + scale * nets._forward(prior, X)[0].T
            return out

        return ValueSnapshot(fn, len(selection))

    def train_step(self, X, targets, masks, zeta: float = 0.0) -> np.ndarray:
        """One RMSProp step on every member; ``masks`` is (batch, K). Returns per-member loss."""
        pair = PriorPair(self.params, self.prior, self.prior_scale) if self.prior is not None else None
        loss, grads = nets.loss_and_grad(self.params, X, targets, masks, zeta, prior=pair)
        nets.rmsprop_step(self.params, grads, self.opt)
        return loss

    def save(self, path, metadata: dict | None = None) -> None:
        prior = PriorPair(self.params, self.prior, self.prior_scale) if self.prior is not None else None
        nets.save_checkpoint(path, self.params, self.opt, prior, {"kind": "ensemble", **(metadata or {})})

    @classmethod
    def load(cls, path) -> tuple["Ensemble", dict]:
        params, opt, prior, meta = nets.load_checkpoint(path)
        if opt is None:
            opt = OptState.for_params(params)
        if prior is not None:
            return cls(params, opt, prior.prior, prior.scale), meta
        return cls(params, opt), meta


def ensemble_eval(ens, selection, obs) -> np.ndarray:
    """Value vector of one observation under the selected members, in selection order."""
    return ens.evaluate(np.asarray(obs, dtype=float)[None], selection)[0]


# --- learned aggregation for transfer ------------------------------------------

def averaging_aggregator(n: int, copies: int = 1) -> NetParams:
    """One-hidden-layer ReLU net over ``n`` inputs that computes their exact mean.

    Hidden unit pairs carry ``relu(x_i)`` and ``relu(-x_i)``; the output adds
    them back with weights ``+-1/n``.
    """
    W1 = np.zeros((n, 2 * n))
    W2 = np.zeros((2 * n, 1))
    for i in range(n):
        W1[i, 2 * i], W1[i, 2 * i + 1] = 1.0, -1.0
        W2[2 * i, 0], W2[2 * i + 1, 0] = 1.0 / n, -1.0 / n
    return NetParams("mlp", (2 * n,), [np.repeat(W1[None], copies, 0), np.repeat(W2[None], copies, 0)],
                     [np.zeros((copies, 2 * n)), np.zeros((copies, 1))])


def aggregate_learned(values, agg: NetParams) -> float:
    """Aggregate the value estimates of ``n`` member nets with the first aggregator copy."""
    return float(nets.forward(agg, np.asarray(values, dtype=float)[None])[0, 0])


class LearnedAggregator:
    """Frozen member nets feeding a small trainable aggregation MLP.

    Exposes the :class:`Ensemble` interface so the standard training loop can
    train it as the value function; ``K`` counts aggregator copies.
    """

    def __init__(self, members: NetParams, agg: NetParams, opt: OptState | None = None):
        self.members = members
        self.agg = agg
        self.opt = opt or OptState.for_params(agg)

    @classmethod
    def create(cls, members: NetParams, copies: int = 1, hidden: int | None = None, seed: int = 0,
               lr=2.5e-4, rho=0.9, eps=1e-8, averaging_init: bool = True) -> "LearnedAggregator":
        n = members.members
        if averaging_init:
            agg = averaging_aggregator(n, copies)
        else:
            agg = nets.init_params("mlp", n, seed, members=copies, hidden=(hidden or 2 * n,))
        return cls(members, agg, OptState.for_params(agg, lr, rho, eps))

    @property
    def K(self) -> int:
        return self.agg.members

    def features(self, X) -> np.ndarray:
        return nets.forward(self.members, X)

    def evaluate(self, X, selection=None) -> np.ndarray:
        agg = self.agg if selection is None else self.agg.select(selection)
        return nets.forward(agg, self.features(X))

    def snapshot(self, selection=None) -> ValueSnapshot:
        selection = np.arange(self.K) if selection is None else np.asarray(selection)
        return ValueSnapshot(lambda X: self.evaluate(X, selection), len(selection))

    def train_step(self, X, targets, masks, zeta: float = 0.0) -> np.ndarray:
        loss, grads = nets.loss_and_grad(self.agg, self.features(X), targets, masks, zeta)
        nets.rmsprop_step(self.agg, grads, self.opt)
        return loss

    def save(self, path, metadata: dict | None = None) -> None:
        arrays = {**nets.params_to_arrays(self.members, "member_"), **nets.params_to_arrays(self.agg, "agg_")}
        arrays.update({f"acc{i}": a for i, a in enumerate(self.opt.acc)})
        meta = {"version": nets.CHECKPOINT_VERSION, "kind": "aggregator", "member_arch": self.members.arch,
                "member_hidden": list(self.members.hidden), "agg_hidden": list(self.agg.hidden),
                "opt": {"lr": self.opt.lr, "rho": self.opt.rho, "eps": self.opt.eps}, **(metadata or {})}
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
