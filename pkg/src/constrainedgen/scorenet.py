"""Time-conditioned MLP score model and denoising score matching training.

The network predicts f(x, embed(t)) and the score is f * min(1/sigma_t, cap):
capping the scale factor keeps the estimate usable at t ~ 0, where the
kernel std collapses and the uncapped parametrization would explode. Time
enters through Gaussian Fourier features of ln sigma_t (VE) or t (sub-VP),
computed outside the tape; gradients flow through x and parameters only.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Normalization, TableSchema
from .diffusion import DiffusionSpec, T_MIN, kernel_params, perturb, dsm_target


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    accumulation: int = 1
    steps: int = 10000
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("batch_size and accumulation must be >= 1")

    def to_dict(self):
        return {
            "batch_size": self.batch_size,
            "accumulation": self.accumulation,
            "steps": self.steps,
            "lr": self.lr,
            "optimizer": self.optimizer,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ScoreModel:
    """MLP s(x, t) = f(x, embed(t)) * min(1/sigma_t, scale_cap)."""

    def __init__(
        self,
        dim,
        spec: DiffusionSpec,
        hidden=(256, 256, 256, 256),
        activation="silu",
        embed_dim=32,
        embed_scale=1.0,
        scale_cap=100.0,
        seed=0,
    ):
        if scale_cap <= 0:
            raise ValueError("scale_cap must be positive")
        if embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if activation not in ("silu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.dim = int(dim)
        self.spec = spec
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.embed_dim = int(embed_dim)
        self.embed_scale = float(embed_scale)
        self.scale_cap = float(scale_cap)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.fourier = rng.standard_normal(embed_dim // 2) * embed_scale
        self.params = self._init_params(rng)

    def _init_params(self, rng):
        # the first layer splits into data and embedding blocks so that
        # concatenating (x, embed(t)) lowers to a sum of two affine maps
        params = {}
        fan_in = self.dim + self.embed_dim
        h0 = self.hidden[0] if self.hidden else self.dim
        scale = math.sqrt(2.0 / fan_in)
        params["w0x"] = rng.standard_normal((self.dim, h0)) * scale
        params["w0e"] = rng.standard_normal((self.embed_dim, h0)) * scale
        params["b0"] = np.zeros(h0)
        sizes = [*self.hidden, self.dim]
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            params[f"w{i}"] = rng.standard_normal((fi, fo)) * math.sqrt(2.0 / fi)
            params[f"b{i}"] = np.zeros(fo)
        return params

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def embed(self, t):
        """Gaussian Fourier features of ln sigma_t (VE) or t (sub-VP).

        The features freeze where sigma_t < 1/scale_cap: below the cap the
        output scaling is constant and the kernel noise is negligible next
        to the data scale, so every draw in that band trains one shared
        slice of the network instead of a sliver each. Without this, the
        weakly-weighted small-noise band cannot pin down the function that
        the 1/sigma scaling then amplifies.
        """
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        _, sigma = kernel_params(self.spec, t)
        sigma = np.maximum(np.atleast_1d(sigma), 1.0 / self.scale_cap)
        if self.spec.kind == "ve":
            u = np.log(sigma)
        else:
            u = np.maximum(t, self._subvp_cap_time())
        ang = 2.0 * math.pi * u[:, None] * self.fourier[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _subvp_cap_time(self):
        # smallest t with kernel_std >= 1/cap: solve beta_integral(t) = -ln(1 - 1/M)
        target = -math.log(max(1.0 - 1.0 / self.scale_cap, 1e-300))
        b, half_delta = self.spec.beta_min, 0.5 * (self.spec.beta_max - self.spec.beta_min)
        disc = b * b + 4.0 * half_delta * target
        t = (-b + math.sqrt(disc)) / (2.0 * half_delta)
        return min(max(t, 0.0), 1.0)

    def scale_factor(self, t):
        _, sigma = kernel_params(self.spec, t)
        return np.minimum(1.0 / np.asarray(sigma), self.scale_cap)

    def _act_np(self, h):
        if self.activation == "tanh":
            return np.tanh(h)
        # silu; the direct sigmoid form is float64-safe (exp overflow -> inf -> 0)
        with np.errstate(over="ignore"):
            return h / (1.0 + np.exp(-h))

    def raw_forward(self, x, t):
        """Plain numpy forward of f(x, embed(t)); x is (n, dim), t scalar or (n,)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        emb = self.embed(t)
        h = x @ self.params["w0x"] + emb @ self.params["w0e"] + self.params["b0"]
        for i in range(1, self.n_layers):
            h = self._act_np(h)
            h = h @ self.params[f"w{i}"] + self.params[f"b{i}"]
        return h

    def score(self, x, t):
        """Score estimate; raises on non-finite output, never clips silently."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        out = self.raw_forward(xb, t_arr) * self.scale_factor(t_arr)[:, None]
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite score output")
        return out[0] if single else out

    def __call__(self, x, t):
        return self.score(x, t)

    # --- tape forward for training -------------------------------------------

    def _tape_forward(self, x_const, emb_const, param_tensors):
        """f(x, emb) built from the autodiff primitive set."""
        x = ad.Tensor(x_const)
        emb = ad.Tensor(emb_const)
        h = ad.add(
            ad.add(ad.affine(x, param_tensors["w0x"]), ad.affine(emb, param_tensors["w0e"])),
            param_tensors["b0"],
        )
        for i in range(1, self.n_layers):
            h = self._act_tape(h)
            h = ad.affine(h, param_tensors[f"w{i}"], param_tensors[f"b{i}"])
        return h

    def _act_tape(self, h):
        if self.activation == "tanh":
            return ad.tanh(h)
        return ad.mul(h, ad.sigmoid(h))


def dsm_loss(model: ScoreModel, spec: DiffusionSpec, batch, rng, t_min=T_MIN, noise=None):
    """Denoising score matching loss over one batch (value only)."""
    loss, _ = dsm_loss_graph(model, spec, batch, rng, t_min, noise)
    return float(loss.value)


def dsm_loss_graph(model: ScoreModel, spec: DiffusionSpec, batch, rng, t_min=T_MIN, noise=None):
    """Builds the DSM loss tape: t ~ U(t_min, 1) and z ~ N(0, I) per item,
    x_tilde = perturb(x, t, z), loss = mean sigma_t^2 ||s - target||^2.

    ``noise`` may pin (t, z) explicitly, e.g. for finite-difference checks.
    Returns (loss Tensor, dict of parameter Tensors).
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = batch.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if noise is None:
        t = rng.uniform(t_min, 1.0, size=n)
        z = rng.standard_normal(batch.shape)
    else:
        t, z = noise
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), batch.shape)
    x_tilde = perturb(spec, batch, t, z)
    target = dsm_target(spec, batch, x_tilde, t)
    _, sigma = kernel_params(spec, t)
    sigma = np.asarray(sigma)

    params = {name: ad.Tensor(value, name=name) for name, value in model.params.items()}
    f = model._tape_forward(x_tilde, model.embed(t), params)
    s = ad.mul(f, model.scale_factor(t)[:, None])
    diff = ad.sub(s, target)
    per_item = ad.sum_reduce(ad.mul(diff, diff), axis=1)
    weighted = ad.mul(per_item, sigma * sigma)
    loss = ad.mul(ad.sum_reduce(weighted), 1.0 / n)
    if not np.isfinite(loss.value):
        raise FloatingPointError("non-finite DSM loss")
    return loss, params


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def train(model: ScoreModel, spec: DiffusionSpec, dataset, config: TrainConfig, t_min=T_MIN, log_every=0):
    """Train in place; returns the per-step loss trace.

    Deterministic given config.seed. Divergence (non-finite loss) aborts
    with a diagnostic carrying the step index.
    """
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if data.shape[1] != model.dim:
        raise ValueError(f"dataset dim {data.shape[1]} != model dim {model.dim}")
    rng = np.random.default_rng(config.seed)
    if config.optimizer != "adam":
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    opt = Adam(model.params, lr=config.lr)
    trace = []
    for step in range(config.steps):
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        acc_loss = 0.0
        for _ in range(config.accumulation):
            idx = rng.integers(0, data.shape[0], size=config.batch_size)
            try:
                loss, params = dsm_loss_graph(model, spec, data[idx], rng, t_min)
            except FloatingPointError as e:
                raise FloatingPointError(f"training diverged at step {step}: {e}") from None
            loss.backward(np.asarray(1.0))
            for k, p in params.items():
                grads[k] += p.grad / config.accumulation
            acc_loss += float(loss.value) / config.accumulation
        opt.step(model.params, grads)
        trace.append(acc_loss)
        if log_every and (step + 1) % log_every == 0:
            recent = trace[-log_every:]
            print(f"step {step + 1}/{config.steps}  loss {np.mean(recent):.5f}")
    return trace


# --- checkpoint container -----------------------------------------------------

CHECKPOINT_VERSION = 1


def _encode_array(a):
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii"),
    }


def _decode_array(d):
    a = np.frombuffer(base64.b64decode(d["data"]), dtype="<f4").astype(np.float64)
    return a.reshape(d["shape"])


def save_checkpoint(path, model: ScoreModel, normalization: Normalization, schema: TableSchema, train_config=None, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "diffusion": model.spec.to_dict(),
        "schema": schema.to_dict(),
        "normalization": normalization.to_dict(),
        "model": {
            "dim": model.dim,
            "hidden": list(model.hidden),
            "activation": model.activation,
            "embed_dim": model.embed_dim,
            "embed_scale": model.embed_scale,
            "scale_cap": model.scale_cap,
            "seed": model.seed,
        },
        "fourier": _encode_array(model.fourier),
        "params": {k: _encode_array(v) for k, v in model.params.items()},
        "train_config": train_config.to_dict() if train_config else None,
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
    spec = DiffusionSpec.from_dict(payload["diffusion"])
    m = payload["model"]
    model = ScoreModel(
        dim=m["dim"],
        spec=spec,
        hidden=tuple(m["hidden"]),
        activation=m["activation"],
        embed_dim=m["embed_dim"],
        embed_scale=m["embed_scale"],
        scale_cap=m["scale_cap"],
        seed=m["seed"],
    )
    model.fourier = _decode_array(payload["fourier"])
    model.params = {k: _decode_array(v) for k, v in payload["params"].items()}
    schema = TableSchema.from_dict(payload["schema"])
    normalization = Normalization.from_dict(payload["normalization"])
    return model, schema, normalization, payload
