"""Autoencoder variants (classical and hybrid) and the supervised baseline.

A model is a pair of ``Sequential`` stacks plus optional extras:

* classical encoder: ``in -> w1 -> ... -> wk -> latent``
* early hybrid:      ``in -> 2**N -> QLayer(amplitude) -> w2 -> ... -> wk -> latent``
* late hybrid:       ``in -> w1 -> ... -> wk -> N -> QLayer(angle) -> latent``
* decoder (always classical): ``latent -> wk -> ... -> w1 -> in``

Variational encoders emit ``2 * latent`` values that split into mean and
log-variance heads. Latent regularization adds a trainable centroid.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nncore, qsim
from .nncore import Dense, LossConfig, Sequential, TrainConfig
from .qsim import NoiseConfig, QuantumLayerSpec

FAMILIES = ("classical", "hqc")
PLACEMENTS = ("early", "late")
DETECTIONS = ("recon_threshold", "latent_iforest")
DEFAULT_ALPHA = 1e-2
DEFAULT_BETA = 1e-3


class ConfigError(ValueError):
    """A model configuration violates one of its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    dataset: str = "synthetic"
    family: str = "classical"
    placement: str = "none"
    measurement: str = "none"
    variational: bool = False
    latent_reg: bool = False
    encoder_widths: tuple[int, ...] = (32, 16)
    latent_dim: int = 8
    qspec: QuantumLayerSpec | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detection: str = "recon_threshold"
    seed: int = 0
    objective: str = "autoencoder"

    def validate(self) -> None:
        def fail(msg: str) -> None:
            raise ConfigError(f"invalid ModelConfig: {msg}")

        if self.objective not in ("autoencoder", "supervised"):
            fail(f"objective must be autoencoder or supervised, got {self.objective!r}")
        if self.family not in FAMILIES:
            fail(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.detection not in DETECTIONS:
            fail(f"detection must be one of {DETECTIONS}, got {self.detection!r}")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            fail("encoder_widths must be a non-empty list of positive widths")
        if self.latent_dim < 1:
            fail("latent_dim must be >= 1")
        if self.variational != (self.loss.beta > 0):
            fail("variational must hold exactly when beta > 0")
        if self.latent_reg != (self.loss.alpha > 0):
            fail("latent_reg must hold exactly when alpha > 0")
        if self.family == "classical":
            if self.placement != "none" or self.measurement != "none":
                fail("classical family requires placement=none and measurement=none")
            if self.qspec is not None:
                fail("classical family must not carry a quantum layer spec")
            return
        if self.objective == "supervised":
            fail("the supervised baseline is classical only")
        if self.placement not in PLACEMENTS:
            fail(f"hqc family requires placement in {PLACEMENTS}, got {self.placement!r}")
        if self.qspec is None:
            fail("hqc family requires a quantum layer spec")
        if self.measurement != self.qspec.measurement:
            fail("measurement must match qspec.measurement")
        expected = "amplitude" if self.placement == "early" else "angle"
        if self.qspec.embedding != expected:
            fail(f"{self.placement} placement requires {expected} embedding")

    @property
    def config_id(self) -> str:
        if self.objective == "supervised":
            return "supervised"
        kind = "vae" if self.variational else "ae"
        reg = "-reg" if self.latent_reg else ""
        if self.family == "classical":
            return f"classical-{kind}{reg}"
        return f"hqc-{self.placement}-{self.measurement}-{kind}{reg}"

    @property
    def factors(self) -> dict:
        return {
            "family": self.family,
            "placement": self.placement,
            "measurement": self.measurement,
            "variational": self.variational,
            "latent_reg": self.latent_reg,
            "detection": self.detection,
        }

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["encoder_widths"] = tuple(d["encoder_widths"])
        d["qspec"] = QuantumLayerSpec.from_dict(d["qspec"]) if d.get("qspec") else None
        d["loss"] = LossConfig(**d["loss"])
        d["train"] = TrainConfig(**d["train"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_config(
    family: str = "classical",
    placement: str = "none",
    measurement: str = "none",
    variational: bool = False,
    latent_reg: bool = False,
    *,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    n_qubits: int = 4,
    n_layers: int = 2,
    entanglement: str = "all_pairs",
    **kwargs,
) -> ModelConfig:
    """Build a consistent ``ModelConfig`` from factor levels."""
    qspec = None
    if family == "hqc":
        qspec = QuantumLayerSpec(
            n_qubits=n_qubits,
            n_layers=n_layers,
            embedding="amplitude" if placement == "early" else "angle",
            measurement=measurement,
            entanglement=entanglement,
        )
    loss = LossConfig(alpha=alpha if latent_reg else 0.0, beta=beta if variational else 0.0)
    cfg = ModelConfig(
        family=family,
        placement=placement,
        measurement=measurement,
        variational=variational,
        latent_reg=latent_reg,
        qspec=qspec,
        loss=loss,
        **kwargs,
    )
    cfg.validate()
    return cfg


def parse_config_id(config_id: str, **kwargs) -> ModelConfig:
    """Inverse of ``ModelConfig.config_id``, e.g. ``hqc-early-expval-vae-reg``."""
    parts = config_id.split("-")
    if parts == ["supervised"]:
        cfg = ModelConfig(objective="supervised", **kwargs)
        cfg.validate()
        return cfg
    reg = parts[-1] == "reg"
    if reg:
        parts = parts[:-1]
    if len(parts) < 2 or parts[-1] not in ("ae", "vae"):
        raise ConfigError(f"unrecognised model id {config_id!r}")
    variational = parts[-1] == "vae"
    if parts[0] == "classical" and len(parts) == 2:
        return make_config("classical", "none", "none", variational, reg, **kwargs)
    if parts[0] == "hqc" and len(parts) == 4:
        placement, measurement = parts[1], parts[2]
        if placement not in PLACEMENTS or measurement not in qsim.MEASUREMENTS:
            raise ConfigError(f"unrecognised model id {config_id!r}")
        return make_config("hqc", placement, measurement, variational, reg, **kwargs)
    raise ConfigError(f"unrecognised model id {config_id!r}")


# ---------------------------------------------------------------------------
# layers specific to these models


class QuantumLayer:
    """Differentiable wrapper around ``qsim.qlayer_forward``."""

    def __init__(self, spec: QuantumLayerSpec, rng: np.random.Generator | None = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.params = {"weights": rng.uniform(0.0, 2 * np.pi, spec.param_shape)}
        self.grads = {"weights": np.zeros(spec.param_shape)}
        self._x: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.spec.input_dim

    @property
    def out_dim(self) -> int:
        return self.spec.output_dim

    def forward(self, x: np.ndarray, noise: NoiseConfig | None = None, **_) -> np.ndarray:
        self._x = x
        return qsim.qlayer_forward(x, self.params["weights"], self.spec, noise)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        gp, gx = qsim.qlayer_gradients(self._x, self.params["weights"], self.spec, grad_out)
        self.grads["weights"] += gp
        return gx

    def __repr__(self) -> str:
        s = self.spec
        return f"QLayer({s.embedding}, N={s.n_qubits}, L={s.n_layers}, {s.measurement})"


class Centroid:
    def __init__(self, dim: int) -> None:
        self.params = {"mu_c": np.zeros(dim)}
        self.grads = {"mu_c": np.zeros(dim)}

    @property
    def value(self) -> np.ndarray:
        return self.params["mu_c"]


class ForwardOutput(NamedTuple):
    z: np.ndarray
    x_hat: np.ndarray
    mu: np.ndarray | None
    logvar: np.ndarray | None


class _ParamMixin:
    def _modules(self) -> dict:
        raise NotImplementedError

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(name, owner.params[key]) for name, owner, key in nncore.named_parameters(self._modules())]

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [owner.grads[key] for _, owner, key in nncore.named_parameters(self._modules())]

    def zero_grad(self) -> None:
        for g in self.gradients():
            g[...] = 0.0

    def n_parameters(self) -> dict:
        counts = {"classical": 0, "quantum": 0}
        for name, owner, key in nncore.named_parameters(self._modules()):
            kind = "quantum" if isinstance(owner, QuantumLayer) else "classical"
            counts[kind] += owner.params[key].size
        counts["total"] = counts["classical"] + counts["quantum"]
        return counts

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name!r}: expected {p.shape}, got {arrays[name].shape}")
            p[...] = arrays[name]


class AutoencoderModel(_ParamMixin):
    def __init__(self, cfg: ModelConfig, input_dim: int, encoder: Sequential, decoder: Sequential) -> None:
        self.cfg = cfg
        self.input_dim = input_dim
        self.encoder = encoder
        self.decoder = decoder
        self.centroid = Centroid(cfg.latent_dim) if cfg.latent_reg else None

    @property
    def variational(self) -> bool:
        return self.cfg.variational

    def _modules(self) -> dict:
        mods = {"encoder": self.encoder, "decoder": self.decoder}
        if self.centroid is not None:
            mods["centroid"] = self.centroid
        return mods

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"model expects input dim {self.input_dim}, got {x.shape[1]}")
        return x

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        noise: NoiseConfig | None = None,
    ) -> ForwardOutput:
        """Encode and decode. Variational models sample ``z`` only when ``train``."""
        x = self._check_input(x)
        h = self.encoder.forward(x, noise=noise)
        mu = logvar = None
        if self.variational:
            k = self.cfg.latent_dim
            mu, raw = h[:, :k], h[:, k:]
            logvar = np.clip(raw, -nncore.LOGVAR_CLAMP, nncore.LOGVAR_CLAMP)
            if train:
                z, self._eps = nncore.reparameterize(mu, logvar, rng)
            else:
                z = mu
            self._raw_logvar = raw
        else:
            z = h
        x_hat = self.decoder.forward(z)
        return ForwardOutput(z, x_hat, mu, logvar)

    def _loss_terms(self, x: np.ndarray, out: ForwardOutput) -> tuple[float, float, float]:
        recon = nncore.mse_loss(x, out.x_hat)
        kl = nncore.kl_loss(out.mu, out.logvar) if self.variational else 0.0
        reg = nncore.latent_reg_loss(out.z, self.centroid.value) if self.centroid is not None else 0.0
        return recon, kl, reg

    def loss_and_backward(self, x: np.ndarray, y=None, rng: np.random.Generator | None = None) -> float:
        x = self._check_input(x)
        out = self.forward(x, train=True, rng=rng)
        recon, kl, reg = self._loss_terms(x, out)
        cfg = self.cfg.loss
        loss = nncore.total_loss(recon, kl, reg, cfg)

        g_z = self.decoder.backward(nncore.mse_grad(x, out.x_hat))
        if self.centroid is not None:
            gz_reg, gc = nncore.latent_reg_grads(out.z, self.centroid.value)
            g_z = g_z + cfg.alpha * gz_reg
            self.centroid.grads["mu_c"] += cfg.alpha * gc
        if self.variational:
            g_mu_kl, g_lv_kl = nncore.kl_grads(out.mu, out.logvar)
            std = np.exp(0.5 * out.logvar)
            g_mu = g_z + cfg.beta * g_mu_kl
            g_lv = g_z * self._eps * 0.5 * std + cfg.beta * g_lv_kl
            inside = np.abs(self._raw_logvar) <= nncore.LOGVAR_CLAMP
            g_h = np.concatenate([g_mu, g_lv * inside], axis=1)
        else:
            g_h = g_z
        self.encoder.backward(g_h)
        return loss

    def evaluate_loss(self, x: np.ndarray, y=None) -> float:
        x = self._check_input(x)
        out = self.forward(x)
        return nncore.total_loss(*self._loss_terms(x, out), self.cfg.loss)

    def reconstruction_errors(self, x: np.ndarray, noise: NoiseConfig | None = None) -> np.ndarray:
        x = self._check_input(x)
        return nncore.reconstruction_errors(x, self.forward(x, noise=noise).x_hat)

    def latents(self, x: np.ndarray, noise: NoiseConfig | None = None) -> np.ndarray:
        return self.forward(x, noise=noise).z

    def __repr__(self) -> str:
        return f"AutoencoderModel[{self.cfg.config_id}](enc: {self.encoder}; dec: {self.decoder})"


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))), np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))


class SupervisedModel(_ParamMixin):
    """Classical encoder followed by a single logistic output unit."""

    def __init__(self, cfg: ModelConfig, input_dim: int, encoder: Sequential, head: Dense) -> None:
        self.cfg = cfg
        self.input_dim = input_dim
        self.encoder = encoder
        self.head = head

    def _modules(self) -> dict:
        return {"encoder": self.encoder, "head": self.head}

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"model expects input dim {self.input_dim}, got {x.shape[1]}")
        logits = self.head.forward(self.encoder.forward(x))[:, 0]
        return np.clip(_sigmoid(logits), BCE_CLIP, 1 - BCE_CLIP)

    def loss_and_backward(self, x: np.ndarray, y: np.ndarray, rng=None) -> float:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        logits = self.head.forward(self.encoder.forward(x))[:, 0]
        p = _sigmoid(logits)
        y = np.asarray(y, dtype=float)
        g = ((p - y) / len(y))[:, None]
        self.encoder.backward(self.head.backward(g))
        return supervised_loss(p, y)

    def evaluate_loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return supervised_loss(self.predict_proba(x), y)

    def __repr__(self) -> str:
        return f"SupervisedModel(enc: {self.encoder}; head: {self.head})"


BCE_CLIP = 1e-7


def supervised_loss(p: np.ndarray, y: np.ndarray) -> float:
    return nncore.bce_loss(p, y, clip=BCE_CLIP)


# ---------------------------------------------------------------------------
# construction


def build_model(cfg: ModelConfig, input_dim: int) -> AutoencoderModel | SupervisedModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    widths = list(cfg.encoder_widths)
    head_dim = cfg.latent_dim * (2 if cfg.variational else 1)

    def chain(dims: list[int], last_activation: str) -> list[Dense]:
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            act = last_activation if i == len(dims) - 2 else "relu"
            layers.append(Dense(a, b, act, rng))
        return layers

    if cfg.objective == "supervised":
        encoder = Sequential(chain([input_dim, *widths, cfg.latent_dim], "identity"))
        return SupervisedModel(cfg, input_dim, encoder, Dense(cfg.latent_dim, 1, "identity", rng))

    if cfg.family == "classical":
        enc_layers = chain([input_dim, *widths, head_dim], "identity")
    elif cfg.placement == "early":
        q = cfg.qspec
        enc_layers = [Dense(input_dim, 2**q.n_qubits, "identity", rng), QuantumLayer(q, rng)]
        enc_layers += chain([q.output_dim, *widths[1:], head_dim], "identity")
    else:
        q = cfg.qspec
        enc_layers = chain([input_dim, *widths, q.n_qubits], "identity")
        enc_layers += [QuantumLayer(q, rng), Dense(q.output_dim, head_dim, "identity", rng)]

    decoder = Sequential(chain([cfg.latent_dim, *reversed(widths), input_dim], "identity"))
    model = AutoencoderModel(cfg, input_dim, Sequential(enc_layers), decoder)
    audit_shapes(model)
    return model


def audit_shapes(model: AutoencoderModel | SupervisedModel) -> list[tuple[int, int]]:
    """Static check that consecutive stages agree on their dimensions."""
    stages = list(model.encoder)
    if isinstance(model, SupervisedModel):
        stages.append(model.head)
        expected_out = 1
    else:
        stages += list(model.decoder)
        expected_out = model.input_dim
        head = model.cfg.latent_dim * (2 if model.variational else 1)
        if model.encoder.out_dim != head:
            raise ConfigError(f"encoder emits {model.encoder.out_dim}, expected {head}")
        if model.decoder.in_dim != model.cfg.latent_dim:
            raise ConfigError(f"decoder takes {model.decoder.in_dim}, expected latent {model.cfg.latent_dim}")
    dims = []
    prev = model.input_dim
    for stage in stages:
        if isinstance(model, AutoencoderModel) and stage is model.decoder.layers[0]:
            prev = model.cfg.latent_dim
        if stage.in_dim != prev:
            raise ConfigError(f"{stage!r} expects {stage.in_dim} inputs but receives {prev}")
        dims.append((stage.in_dim, stage.out_dim))
        prev = stage.out_dim
    if prev != expected_out:
        raise ConfigError(f"model output dim {prev} != {expected_out}")
    return dims


def forward(model: AutoencoderModel, x: np.ndarray, **kwargs) -> ForwardOutput:
    return model.forward(x, **kwargs)


# ---------------------------------------------------------------------------
# grid


def enumerate_grid(
    datasets: list[str], families: tuple[str, ...] = FAMILIES, **overrides
) -> list[ModelConfig]:
    """Architecture-level configurations, in a fixed order.

    HQC: placement x measurement x variational x latent_reg (16 per dataset);
    classical: variational x latent_reg (4 per dataset).
    """
    out = []
    for dataset in datasets:
        for family in families:
            if family == "classical":
                levels = [("none", "none")]
            elif family == "hqc":
                levels = list(itertools.product(PLACEMENTS, qsim.MEASUREMENTS))
            else:
                raise ConfigError(f"unknown family {family!r}")
            for (placement, measurement), variational, reg in itertools.product(
                levels, (False, True), (False, True)
            ):
                out.append(
                    make_config(family, placement, measurement, variational, reg, dataset=dataset, **overrides)
                )
    return out


def expand_runs(
    configs: list[ModelConfig],
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    detections: tuple[str, ...] = DETECTIONS,
) -> list[ModelConfig]:
    runs = []
    for cfg in configs:
        for detection in detections:
            for seed in seeds:
                runs.append(dataclasses.replace(cfg, detection=detection, seed=seed))
    return runs


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str | Path, model: AutoencoderModel | SupervisedModel, meta: dict | None = None) -> Path:
    """Write parameters plus a JSON header (config, shapes, extra metadata) to ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(model.named_parameters())
    header = {
        "format": "hqcae-model/1",
        "config": model.cfg.to_dict(),
        "input_dim": model.input_dim,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "seed": model.cfg.seed,
        **(meta or {}),
    }
    np.savez(path, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_model(path: str | Path) -> tuple[AutoencoderModel | SupervisedModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, header["input_dim"])
    model.load_parameters(arrays)
    return model, header
