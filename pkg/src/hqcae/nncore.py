"""Small dense-network core: layers with manual backprop, losses, Adam, training loop.

Layers follow one protocol: ``forward(x, ...)`` caches what ``backward`` needs,
``backward(grad_out)`` accumulates into ``self.grads`` and returns the gradient
with respect to the layer input. Parameters live in ``self.params`` as numpy
arrays that the optimizer updates in place.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOGVAR_CLAMP = 10.0


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")

    @property
    def kind(self) -> str:
        name = "vae" if self.beta > 0 else "ae"
        return name + ("+reg" if self.alpha > 0 else "")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-5
    validation_fraction: float = 0.1
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# layers


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-a))
    return a


def _activation_grad(name: str, a: np.ndarray, y: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (a > 0).astype(float)
    if name == "tanh":
        return 1.0 - y**2
    if name == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(a)


class Dense:
    """``y = act(x @ W.T + b)`` with ``W`` stored as (out, in)."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        activation: str = "relu",
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
    ) -> None:
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        limit = 1.0 / math.sqrt(n_in)
        w = np.zeros((n_out, n_in)) if zero_init else rng.uniform(-limit, limit, (n_out, n_in))
        self.params = {"weights": w, "bias": np.zeros(n_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.activation = activation
        self._cache: tuple | None = None

    @property
    def in_dim(self) -> int:
        return self.params["weights"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["weights"].shape[0]

    def forward(self, x: np.ndarray, **_) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Dense expects input dim {self.in_dim}, got {x.shape[-1]}")
        a = x @ self.params["weights"].T + self.params["bias"]
        y = _activate(self.activation, a)
        self._cache = (x, a, y)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x, a, y = self._cache
        g = grad_out * _activation_grad(self.activation, a, y)
        self.grads["weights"] += g.T @ x
        self.grads["bias"] += g.sum(axis=0)
        return g @ self.params["weights"]

    def __repr__(self) -> str:
        return f"Dense({self.in_dim}->{self.out_dim}, {self.activation})"


class Sequential:
    def __init__(self, layers: list) -> None:
        self.layers = list(layers)

    def forward(self, x: np.ndarray, **kwargs) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, **kwargs)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        return " -> ".join(repr(l) for l in self.layers)


def named_parameters(modules: dict) -> list[tuple[str, dict, str]]:
    """Flatten ``{prefix: Sequential | layer}`` into ``(name, owner, key)`` triples in fixed order."""
    out = []
    for prefix, module in modules.items():
        layers = module.layers if isinstance(module, Sequential) else [module]
        for i, layer in enumerate(layers):
            for key in layer.params:
                out.append((f"{prefix}.{i}.{key}", layer, key))
    return out


# ---------------------------------------------------------------------------
# losses


def reconstruction_errors(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Per-sample squared error, averaged over features."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return np.mean((x - x_hat) ** 2, axis=-1)


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    return float(np.mean(reconstruction_errors(np.atleast_2d(x), np.atleast_2d(x_hat))))


def mse_grad(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """d mse_loss / d x_hat."""
    return 2.0 * (x_hat - x) / x.size


def kl_loss(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims and averaged over the batch."""
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    logvar = np.atleast_2d(np.asarray(logvar, dtype=float))
    if mu.shape != logvar.shape:
        raise ValueError(f"mu/logvar shape mismatch: {mu.shape} vs {logvar.shape}")
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise ValueError("kl_loss received non-finite input")
    per_sample = 0.5 * np.sum(mu**2 + np.exp(logvar) - logvar - 1.0, axis=-1)
    return float(np.mean(per_sample))


def kl_grads(mu: np.ndarray, logvar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = mu.shape[0]
    return mu / b, 0.5 * (np.exp(logvar) - 1.0) / b


def latent_reg_loss(z: np.ndarray, centroid: np.ndarray) -> float:
    """Squared distance to the centroid, averaged over the batch."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[-1] != centroid.shape[-1]:
        raise ValueError(f"latent dim {z.shape[-1]} does not match centroid dim {centroid.shape[-1]}")
    return float(np.mean(np.sum((z - centroid) ** 2, axis=-1)))


def latent_reg_grads(z: np.ndarray, centroid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (d/dz, d/dcentroid)."""
    z = np.atleast_2d(z)
    gz = 2.0 * (z - centroid) / z.shape[0]
    return gz, -gz.sum(axis=0)


def total_loss(recon: float, kl: float, reg: float, cfg: LossConfig) -> float:
    if cfg.alpha < 0 or cfg.beta < 0:
        raise ValueError("loss weights must be >= 0")
    return recon + cfg.beta * kl + cfg.alpha * reg


def reparameterize(
    mu: np.ndarray,
    logvar: np.ndarray,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``z = mu + exp(logvar / 2) * eps``; returns ``(z, eps)``.

    ``logvar`` is clamped to [-10, 10]. Pass ``eps`` to fix the noise.
    """
    mu = np.asarray(mu, dtype=float)
    logvar = np.clip(np.asarray(logvar, dtype=float), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    if mu.shape != logvar.shape:
        raise ValueError(f"mu/logvar shape mismatch: {mu.shape} vs {logvar.shape}")
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps, eps


def bce_loss(p: np.ndarray, y: np.ndarray, clip: float = 1e-7) -> float:
    p = np.clip(np.asarray(p, dtype=float), clip, 1.0 - clip)
    y = np.asarray(y, dtype=float)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    epochs_run: int


def _snapshot(model) -> list[np.ndarray]:
    return [p.copy() for p in model.parameters()]


def _restore(model, snap: list[np.ndarray]) -> None:
    for p, s in zip(model.parameters(), snap):
        p[...] = s


def train_loop(model, x: np.ndarray, cfg: TrainConfig, y: np.ndarray | None = None) -> TrainResult:
    """Mini-batch Adam with early stopping on a held-out validation slice.

    ``model`` must provide ``parameters()``, ``gradients()``, ``zero_grad()``,
    ``loss_and_backward(x, y, rng)`` and ``evaluate_loss(x, y)``. The parameters
    from the best validation epoch are restored before returning.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(x.shape[0])
    n_val = max(1, int(round(cfg.validation_fraction * x.shape[0])))
    if x.shape[0] - n_val < 1:
        n_val = 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_tr, x_val = x[train_idx], x[val_idx]
    y_tr = y[train_idx] if y is not None else None
    y_val = y[val_idx] if y is not None else None
    if n_val == 0:
        x_val, y_val = x_tr, y_tr

    state = AdamState(lr=cfg.lr)
    params = model.parameters()
    history: list[dict] = []
    best_val, best_epoch, stale = math.inf, 0, 0
    best = _snapshot(model)

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(x_tr.shape[0])
        total, seen = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            model.zero_grad()
            loss = model.loss_and_backward(x_tr[idx], None if y_tr is None else y_tr[idx], rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch offset {start}")
            adam_step(params, model.gradients(), state)
            total += loss * len(idx)
            seen += len(idx)
        val = model.evaluate_loss(x_val, y_val)
        if not math.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / seen, "val_loss": val})
        if val < best_val - cfg.min_delta:
            best_val, best_epoch, stale = val, epoch, 0
            best = _snapshot(model)
        else:
            stale += 1
            if stale > cfg.patience:
                logger.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    _restore(model, best)
    return TrainResult(history, best_epoch, best_val, len(history))


def clone(model):
    return copy.deepcopy(model)
