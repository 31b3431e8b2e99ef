"""Conditional VAE over a one-dimensional discrete action grid.

Actions are reconstructed as continuous values rescaled to [0, 1]; snapping
to the grid only happens when sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import json

import numpy as np

from .neural import MLP, Adam, NetSpec, net_from_dict, net_to_dict

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class CvaeLoss:
    loss: float
    recon: float
    kl: float
    enc_grads: list[np.ndarray]
    dec_grads: list[np.ndarray]


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I))."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


class CVAE:
    def __init__(self, state_dim: int, grid: tuple[float, ...], latent_dim: int = 4,
                 hidden: tuple[int, ...] = (128, 128, 128), rng: np.random.Generator | None = None,
                 lr: float = 1e-3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.latent_dim = latent_dim
        self.grid = np.asarray(grid, dtype=np.float64)
        self.lo = float(self.grid.min())
        self.span = float(self.grid.max() - self.grid.min()) or 1.0
        self.encoder = MLP(NetSpec(state_dim + 1, hidden, 2 * latent_dim), rng)
        self.decoder = MLP(NetSpec(state_dim + latent_dim, hidden, 1), rng)
        self.enc_opt = Adam(self.encoder.params, lr)
        self.dec_opt = Adam(self.decoder.params, lr)

    def to_unit(self, action_idx: np.ndarray) -> np.ndarray:
        return (self.grid[np.asarray(action_idx)] - self.lo) / self.span

    def loss(self, states: np.ndarray, units: np.ndarray, eps: np.ndarray) -> CvaeLoss:
        """Reconstruction MSE plus KL, averaged over the batch.

        ``eps`` is the standard-normal noise of the reparameterisation,
        passed in so the loss is a deterministic function of the parameters.
        """
        B = states.shape[0]
        if B == 0:
            raise ValueError("cvae_loss needs a nonempty batch")
        L = self.latent_dim
        u = np.asarray(units, dtype=np.float64).reshape(B, 1)
        enc_out = self.encoder.forward(np.hstack([states, u]))
        mu, raw_lv = enc_out[:, :L], enc_out[:, L:]
        lv = np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
        std = np.exp(0.5 * lv)
        z = mu + std * eps
        dec = self.decoder.forward(np.hstack([states, z]))
        diff = dec - u
        recon = float(np.mean(np.sum(diff * diff, axis=1)))
        kl = float(np.mean(gaussian_kl(mu, lv)))

        d_dec = 2.0 * diff / B
        dec_grads, d_in = self.decoder.backward(d_dec)
        dz = d_in[:, self.state_dim:]
        dmu = dz + mu / B
        dlv = dz * eps * 0.5 * std + 0.5 * (np.exp(lv) - 1.0) / B
        dlv = dlv * ((raw_lv > LOGVAR_MIN) & (raw_lv < LOGVAR_MAX))
        enc_grads, _ = self.encoder.backward(np.hstack([dmu, dlv]))
        return CvaeLoss(recon + kl, recon, kl, enc_grads, dec_grads)

    def encode(self, states: np.ndarray, units: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.encoder.predict(np.hstack([states, np.asarray(units).reshape(-1, 1)]))
        L = self.latent_dim
        return out[:, :L], np.clip(out[:, L:], LOGVAR_MIN, LOGVAR_MAX)

    def train_step(self, states: np.ndarray, action_idx: np.ndarray,
                   rng: np.random.Generator) -> CvaeLoss:
        eps = rng.standard_normal((states.shape[0], self.latent_dim))
        res = self.loss(states, self.to_unit(action_idx), eps)
        self.enc_opt.step(self.encoder.params, res.enc_grads)
        self.dec_opt.step(self.decoder.params, res.dec_grads)
        return res

    def decode(self, states: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.decoder.predict(np.hstack([states, z]))[:, 0]

    def sample_actions(self, states: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        """``k`` grid indices per state, decoded from prior draws."""
        if k < 1:
            raise ValueError("k must be >= 1")
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        B = states.shape[0]
        z = rng.standard_normal((B * k, self.latent_dim))
        rep = np.repeat(states, k, axis=0)
        u = np.clip(self.decode(rep, z), 0.0, 1.0)
        values = self.lo + u * self.span
        idx = np.abs(values[:, None] - self.grid[None, :]).argmin(axis=1)
        return idx.reshape(B, k)

    def to_dict(self) -> dict:
        return {"state_dim": self.state_dim, "latent_dim": self.latent_dim,
                "grid": self.grid.tolist(),
                "encoder": net_to_dict(self.encoder, self.enc_opt),
                "decoder": net_to_dict(self.decoder, self.dec_opt)}

    @classmethod
    def from_dict(cls, d: dict) -> CVAE:
        obj = cls.__new__(cls)
        obj.state_dim = d["state_dim"]
        obj.latent_dim = d["latent_dim"]
        obj.grid = np.asarray(d["grid"], dtype=np.float64)
        obj.lo = float(obj.grid.min())
        obj.span = float(obj.grid.max() - obj.grid.min()) or 1.0
        obj.encoder = net_from_dict(d["encoder"])
        obj.decoder = net_from_dict(d["decoder"])
        obj.enc_opt = Adam(obj.encoder.params, 1e-3)
        obj.dec_opt = Adam(obj.decoder.params, 1e-3)
        if "optimizer" in d["encoder"]:
            obj.enc_opt.load_state(d["encoder"]["optimizer"])
            obj.dec_opt.load_state(d["decoder"]["optimizer"])
        return obj

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> CVAE:
        return cls.from_dict(json.loads(Path(path).read_text()))


def cvae_loss(cvae: CVAE, states: np.ndarray, action_idx: np.ndarray, eps: np.ndarray) -> CvaeLoss:
    return cvae.loss(states, cvae.to_unit(action_idx), eps)
