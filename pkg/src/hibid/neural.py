"""Dense rectifier networks with hand-written reverse-mode gradients.

All arithmetic is float64.  A network caches the activations of its most
recent :meth:`MLP.forward` call; :meth:`MLP.backward` consumes that cache.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"all layer widths must be >= 1: {self}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]


class MLP:
    def __init__(self, spec: NetSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        w = spec.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self._cache: list[np.ndarray] | None = None
        self._pre: list[np.ndarray] | None = None

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (n, {self.spec.input_dim}), got {x.shape}")
        acts, pres = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pres.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        self._cache, self._pre = acts, pres
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass that leaves the backward cache untouched."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected input of shape (n, {self.spec.input_dim}), got {h.shape}")
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    def backward(self, dy: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of a scalar loss given ``dy = dL/d(output)``.

        Returns parameter gradients (ordered like :attr:`params`) and the
        gradient with respect to the input batch.
        """
        if self._cache is None:
            raise RuntimeError("backward() called before forward()")
        acts, pres = self._cache, self._pre
        g = np.asarray(dy, dtype=np.float64)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * (pres[i] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, g

    def min_preactivation_margin(self) -> float:
        """Smallest |pre-activation| of any hidden unit in the cached pass."""
        if self._pre is None or len(self._pre) < 2:
            return np.inf
        return float(min(np.abs(z).min() for z in self._pre[:-1]))

    def copy(self) -> MLP:
        other = MLP.__new__(MLP)
        other.spec = self.spec
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._cache = other._pre = None
        return other

    def load_params(self, params: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.params, params):
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape mismatch {dst.shape} vs {src.shape}")
            dst[...] = src


def forward(net: MLP, x: np.ndarray) -> np.ndarray:
    return net.predict(x)


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise FloatingPointError(
                    f"non-finite gradient in parameter {i} (shape {g.shape}, {bad} bad entries)")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"lr": self.lr, "t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load_state(self, st: dict) -> None:
        self.lr = float(st.get("lr", self.lr))
        self.t = int(st["t"])
        self.m = [np.asarray(a, dtype=np.float64).reshape(m.shape) for a, m in zip(st["m"], self.m)]
        self.v = [np.asarray(a, dtype=np.float64).reshape(v.shape) for a, v in zip(st["v"], self.v)]


def grad_step(net: MLP, opt: Adam, grads: Sequence[np.ndarray]) -> None:
    opt.step(net.params, grads)


def sync_target(source: MLP, target: MLP | None = None) -> MLP:
    """Hard copy of ``source``; fills ``target`` in place when given."""
    if target is None:
        return source.copy()
    target.load_params(source.params)
    return target


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(loss_and_grads: Callable[[], tuple[float, Sequence[np.ndarray]]],
                      params: Sequence[np.ndarray], h: float = 1e-5,
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads`` must recompute the loss from the current contents of
    ``params`` (which are perturbed in place and restored).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    _, analytic = loss_and_grads()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            lp, _ = loss_and_grads()
            flat[j] = orig - h
            lm, _ = loss_and_grads()
            flat[j] = orig
            num = (lp - lm) / (2 * h)
            worst = max(worst, float(relative_error(np.float64(gflat[j]), np.float64(num))))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: JSON with a NetSpec header and a flat tensor list.
# ---------------------------------------------------------------------------

def net_to_dict(net: MLP, opt: Adam | None = None) -> dict:
    d = {
        "spec": {"input_dim": net.spec.input_dim, "hidden": list(net.spec.hidden),
                 "output_dim": net.spec.output_dim},
        "tensors": [{"shape": list(p.shape), "data": p.reshape(-1).tolist()} for p in net.params],
    }
    if opt is not None:
        d["optimizer"] = opt.state()
    return d


def net_from_dict(d: dict) -> MLP:
    spec = NetSpec(d["spec"]["input_dim"], tuple(d["spec"]["hidden"]), d["spec"]["output_dim"])
    net = MLP(spec)
    net.load_params([np.asarray(t["data"], dtype=np.float64).reshape(t["shape"]) for t in d["tensors"]])
    return net


def save_net(path: str | Path, net: MLP, opt: Adam | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(net_to_dict(net, opt)))


def load_net(path: str | Path) -> MLP:
    return net_from_dict(json.loads(Path(path).read_text()))
