"""Small multilayer perceptron with hand-written backprop and Adam.

Architecture: input -> 32 -> 64 -> 32 -> output, leaky ReLU on hidden layers
and a linear output layer. The training loss is

    L = sum(r**2) / C + lam * sum(|r|),   r = y - yhat,

with C the number of rows, the squared term averaged over rows and the
absolute term summed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss

HIDDEN = (32, 64, 32)
LEAKY_SLOPE = 0.01
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-4
    lam: float = 1e-5
    batch_size: int | None = None  # None = full batch
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


CHEMICAL_DEFAULTS = TrainConfig(epochs=30, learning_rate=1e-4, lam=1e-5)
TRAJECTORY_DEFAULTS = TrainConfig(epochs=100, learning_rate=1e-3, lam=1e-5)


@dataclass
class MLPModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = LEAKY_SLOPE
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.slope < 1:
            raise ValueError("leaky-ReLU slope must lie in (0, 1)")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[k], self.layer_sizes[k + 1]) or b.shape != (self.layer_sizes[k + 1],):
                raise ValueError(f"layer {k} has inconsistent shapes")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLPModel":
        return MLPModel(self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.slope, self.seed, dict(self.meta))

    def forward(self, x: np.ndarray, cache: bool = False):
        a = np.asarray(x, float)
        pre, acts = [], [a]
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if k < last:
                a = np.where(z > 0, z, self.slope * z)
            else:
                a = z
            if cache:
                pre.append(z)
                acts.append(a)
        return (a, pre, acts) if cache else a

    predict = forward

    # -- checkpoints ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "slope": self.slope,
            "seed": self.seed,
            "adam": {"beta1": ADAM_BETAS[0], "beta2": ADAM_BETAS[1], "eps": ADAM_EPS},
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPModel":
        sizes = tuple(d["layer_sizes"])
        ws = [np.asarray(w, float).reshape(sizes[k], sizes[k + 1]) for k, w in enumerate(d["weights"])]
        bs = [np.asarray(b, float) for b in d["biases"]]
        return cls(sizes, ws, bs, d.get("slope", LEAKY_SLOPE), d.get("seed", 0), d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MLPModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def mlp_new(input_dim: int, output_dim: int, seed: int = 0, hidden: tuple[int, ...] = HIDDEN,
            slope: float = LEAKY_SLOPE) -> MLPModel:
    """Glorot-uniform weights and zero biases."""
    if input_dim < 1 or output_dim < 1:
        raise ValueError("dimensions must be at least 1")
    sizes = (input_dim, *hidden, output_dim)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MLPModel(sizes, ws, bs, slope, seed)


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def loss_value(yhat: np.ndarray, y: np.ndarray, lam: float, l1_scale: float = 1.0,
               l1_mask: np.ndarray | None = None) -> float:
    r = y - yhat
    a = np.abs(r) if l1_mask is None else np.abs(r) * l1_mask
    return float(np.sum(r * r) / len(y) + lam * l1_scale * np.sum(a))


def loss(model: MLPModel, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    return loss_value(model.forward(x), np.asarray(y, float).reshape(len(x), -1), lam)


def backward(model: MLPModel, x: np.ndarray, y: np.ndarray, lam: float, l1_scale: float = 1.0,
             l1_mask: np.ndarray | None = None) -> tuple[float, list[np.ndarray]]:
    """Loss and gradients in ``params()`` order. The absolute-value term uses
    sign(0) = 0 and is scaled by ``l1_scale`` (mini-batches pass N/B so the
    batch gradient is unbiased for the full-data loss)."""
    y = np.asarray(y, float).reshape(len(x), -1)
    yhat, pre, acts = model.forward(x, cache=True)
    r = y - yhat
    sgn = np.sign(r) if l1_mask is None else np.sign(r) * l1_mask
    value = loss_value(yhat, y, lam, l1_scale, l1_mask)
    g = -2.0 * r / len(y) - lam * l1_scale * sgn
    grads: list[np.ndarray] = []
    for k in range(model.n_layers - 1, -1, -1):
        if k < model.n_layers - 1:
            g = g * np.where(pre[k] > 0, 1.0, model.slope)
        grads.append(g.sum(axis=0))
        grads.append(acts[k].T @ g)
        if k:
            g = g @ model.weights[k].T
    grads.reverse()
    return value, grads


def mlp_train(model: MLPModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> tuple[MLPModel, list[float]]:
    """Adam training. Returns a new model and the full-data loss after each
    epoch. Row order for mini-batches is drawn from ``cfg.seed``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = ADAM_BETAS
    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            _, grads = backward(model, x[idx], y[idx], cfg.lam, l1_scale=n / len(idx))
            step += 1
            lr_t = cfg.learning_rate * math.sqrt(1 - b2 ** step) / (1 - b1 ** step)
            for p, g, mk, vk in zip(params, grads, m, v):
                mk *= b1
                mk += (1 - b1) * g
                vk *= b2
                vk += (1 - b2) * g * g
                p -= lr_t * mk / (np.sqrt(vk) + ADAM_EPS)
        value = loss(model, x, y, cfg.lam)
        if not math.isfinite(value):
            raise NonFiniteLoss(epoch)
        history.append(value)
    model.meta = {**model.meta, "train": {"epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
                                          "lam": cfg.lam, "batch_size": cfg.batch_size, "seed": cfg.seed}}
    return model, history


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheck:
    max_relative_error: float
    checked: int
    skipped_kinks: int
    skipped_l1: int

    def __float__(self) -> float:
        return self.max_relative_error


def _perturbed_outputs(model: MLPModel, acts: list[np.ndarray], pre: list[np.ndarray], layer: int,
                       is_bias: bool, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Outputs for every single-entry perturbation of one parameter array,
    shape (P, rows, out), plus a per-perturbation flag for hidden sign flips."""
    z = pre[layer]
    width = z.shape[1]
    if is_bias:
        zp = np.repeat(z[None], width, axis=0)
        zp[np.arange(width), :, np.arange(width)] += delta
    else:
        a_in = acts[layer]
        n_in = a_in.shape[1]
        zp = np.repeat(z[None], n_in * width, axis=0)
        ii, jj = np.divmod(np.arange(n_in * width), width)
        zp[np.arange(n_in * width), :, jj] += delta * a_in[:, ii].T
    flipped = np.zeros(len(zp), bool)
    a = zp
    last = model.n_layers - 1
    for k in range(layer, model.n_layers):
        if k > layer:
            zp = a @ model.weights[k] + model.biases[k]
        if k < last:
            flipped |= np.any((zp > 0) != (pre[k] > 0)[None], axis=(1, 2))
            a = np.where(zp > 0, zp, model.slope * zp)
        else:
            a = zp
    return a, flipped


def grad_check(model: MLPModel, x: np.ndarray, y: np.ndarray, lam: float = 1e-5, h: float = 1e-5,
               l1_zero_tol: float = 1e-7, floor: float = 1e-6) -> GradCheck:
    """Compare analytic gradients of the full loss with central differences.

    Residual entries with |r| < ``l1_zero_tol`` sit on the kink of |r|; they
    are removed from the absolute-value term in both gradients and counted as
    skipped. A parameter whose +/-h perturbation flips the sign of any hidden
    pre-activation straddles a leaky-ReLU kink and is also skipped.

    Relative error is |a - n| / max(|a|, |n|, floor * max(1, L)). Central
    differences carry roundoff of order eps * L / h, so gradient entries far
    below the loss scale are judged against the loss-scaled floor instead of
    their own magnitude.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float).reshape(len(x), -1)
    yhat, pre, acts = model.forward(x, cache=True)
    mask = (np.abs(y - yhat) >= l1_zero_tol).astype(float)
    base, grads = backward(model, x, y, lam, l1_mask=mask)
    denom_floor = floor * max(1.0, abs(base))
    worst, checked, kinks = 0.0, 0, 0
    for k in range(model.n_layers):
        for is_bias, g in ((False, grads[2 * k]), (True, grads[2 * k + 1])):
            out_p, flip_p = _perturbed_outputs(model, acts, pre, k, is_bias, h)
            out_m, flip_m = _perturbed_outputs(model, acts, pre, k, is_bias, -h)
            rp, rm = y[None] - out_p, y[None] - out_m
            # difference element-wise before summing to limit cancellation
            diff = ((rp - rm) * (rp + rm)).sum(axis=(1, 2)) / len(y)
            diff = diff + lam * ((np.abs(rp) - np.abs(rm)) * mask[None]).sum(axis=(1, 2))
            num = diff / (2 * h)
            ana = g.reshape(-1)
            ok = ~(flip_p | flip_m)
            kinks += int((~ok).sum())
            if ok.any():
                err = np.abs(num - ana)[ok] / np.maximum(np.maximum(np.abs(num), np.abs(ana))[ok], denom_floor)
                worst = max(worst, float(err.max()))
                checked += int(ok.sum())
    return GradCheck(worst, checked, kinks, int(mask.size - mask.sum()))


def spectral_norms(model: MLPModel) -> list[float]:
    return [float(np.linalg.norm(w, 2)) for w in model.weights]
