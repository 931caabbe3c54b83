"""VQ autoencoder network: CNN encoder, mirrored decoder, dense classifier.

The encoder output grid (C, h, w) is projected to D channels by a 1x1
convolution; every spatial cell is one D-dimensional latent vector, so a
sample carries M = h*w codebook indices. The decoder undoes the projection
with a 1x1 transposed convolution before the mirrored layer stack.

Training follows three separate updates per batch:
reconstruction (encoder+decoder), codebook, then commitment+classification
(encoder+classifier).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor_core as tc
from .quantizer import (
    DEFAULT_LAMBDA,
    codebook_init,
    codebook_loss,
    commitment_loss,
    dequantize,
    quantize_nearest,
    straight_through_compose,
)
from .tensor_core import ConfigurationError, InputError, Node

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | convT | unpool
    channels: int = 0
    kernel: tuple[int, int] = (1, 2)
    stride: tuple[int, int] = (1, 2)
    relu: bool = True

    def describe(self) -> str:
        if self.kind in ("pool", "unpool"):
            return f"{self.kind} {self.kernel} stride {self.stride}"
        return f"{self.kind} {self.channels}x{self.kernel} stride {self.stride}"


def _conv(c, k, s=(1, 1), relu=True):
    return LayerSpec("conv", c, tuple(k), tuple(s), relu)


def _convT(c, k, s=(1, 1), relu=True):
    return LayerSpec("convT", c, tuple(k), tuple(s), relu)


_POOL = LayerSpec("pool", 0, (1, 2), (1, 2), False)
_UNPOOL = LayerSpec("unpool", 0, (1, 2), (1, 2), False)


@dataclass(frozen=True)
class ArchitectureConfig:
    input_shape: tuple[int, int, int]
    encoder: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]
    latent_dim: int = 256
    codebook_size: int = 256
    classifier_hidden: int = 128
    num_classes: int = 6
    preset: str = "custom"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        def layers(items):
            return tuple(LayerSpec(l["kind"], l["channels"], tuple(l["kernel"]), tuple(l["stride"]),
                                   l["relu"]) for l in items)
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["encoder"] = layers(d["encoder"])
        d["decoder"] = layers(d["decoder"])
        return cls(**d)


def paper_architecture(K: int = 256, D: int = 256, num_classes: int = 6) -> ArchitectureConfig:
    """Full-size layer table for 3x114x500 CSI."""
    return ArchitectureConfig(
        input_shape=(3, 114, 500),
        encoder=(_conv(32, (15, 23), (9, 9)), _conv(32, (3, 7)), _POOL,
                 _conv(64, (3, 7)), _conv(96, (3, 7)), _POOL),
        decoder=(_UNPOOL, _convT(96, (3, 7)), _convT(64, (3, 7)), _UNPOOL,
                 _convT(32, (3, 7)), _convT(3, (15, 23), (9, 9))),
        latent_dim=D, codebook_size=K, num_classes=num_classes, preset="paper")


def desk_architecture(K: int = 256, D: int = 256, num_classes: int = 6) -> ArchitectureConfig:
    """Same layer pattern with a smaller first kernel for 3x30x100 input."""
    return ArchitectureConfig(
        input_shape=(3, 30, 100),
        encoder=(_conv(32, (6, 10), (2, 2)), _conv(32, (3, 7)), _POOL,
                 _conv(64, (3, 7)), _conv(96, (3, 7)), _POOL),
        decoder=(_UNPOOL, _convT(96, (3, 7)), _convT(64, (3, 7)), _UNPOOL,
                 _convT(32, (3, 7)), _convT(3, (6, 10), (2, 2))),
        latent_dim=D, codebook_size=K, num_classes=num_classes, preset="desk")


PRESETS = {"paper": paper_architecture, "desk": desk_architecture}


def architecture(preset: str, **kw) -> ArchitectureConfig:
    try:
        return PRESETS[preset](**kw)
    except KeyError:
        raise ConfigurationError(f"unknown preset {preset!r}") from None


def _layer_out(shape, spec: LayerSpec, name: str):
    c, h, w = shape
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    if spec.kind in ("conv", "pool"):
        if kh > h or kw > w:
            raise ConfigurationError(
                f"{name} ({spec.describe()}): kernel does not fit input {shape}")
        ho, wo = tc.conv_output_size(h, kh, sh), tc.conv_output_size(w, kw, sw)
        return (spec.channels if spec.kind == "conv" else c, ho, wo)
    if spec.kind in ("convT", "unpool"):
        return (spec.channels if spec.kind == "convT" else c, (h - 1) * sh + kh, (w - 1) * sw + kw)
    raise ConfigurationError(f"{name}: unknown layer kind {spec.kind!r}")


def propagate_shapes(config: ArchitectureConfig) -> dict[str, tuple[int, int, int]]:
    """Symbolic shapes after every layer; raises on the first layer that fails."""
    shapes = {"input": tuple(config.input_shape)}
    shape = tuple(config.input_shape)
    for i, spec in enumerate(config.encoder):
        if spec.kind not in ("conv", "pool"):
            raise ConfigurationError(f"enc{i}: {spec.kind} not allowed in encoder")
        shape = _layer_out(shape, spec, f"enc{i}")
        shapes[f"enc{i}"] = shape
    enc_c, h, w = shape
    shapes["latent"] = (config.latent_dim, h, w)
    shape = (enc_c, h, w)
    shapes["dec_proj"] = shape
    for i, spec in enumerate(config.decoder):
        if spec.kind not in ("convT", "unpool"):
            raise ConfigurationError(f"dec{i}: {spec.kind} not allowed in decoder")
        shape = _layer_out(shape, spec, f"dec{i}")
        shapes[f"dec{i}"] = shape
    if shape != tuple(config.input_shape):
        raise ConfigurationError(
            f"decoder output {shape} does not match input shape {tuple(config.input_shape)}")
    return shapes


def latent_grid(config: ArchitectureConfig) -> tuple[int, int, int]:
    return propagate_shapes(config)["latent"]


def latent_length(config: ArchitectureConfig) -> int:
    _, h, w = latent_grid(config)
    return h * w


# ---------------------------------------------------------------------------
# parameters

EDGE, CLOUD, FULL = "edge", "cloud", "full"


class ModelParameters:
    """Named parameter tensors plus the architecture they belong to.

    Names are prefixed ``enc.`` (theta_E), ``dec.`` (theta_D), ``cls.``
    (theta_G); the codebook is ``codebook``. ``norm.mean``/``norm.std`` hold
    fixed per-(antenna, subcarrier) input statistics that no optimizer
    touches. A deployment view only carries the subset its endpoint needs.
    """

    def __init__(self, config: ArchitectureConfig, tensors: dict[str, Node], view: str = FULL,
                 metadata: dict | None = None):
        self.config = config
        self.tensors = tensors
        self.view = view
        self.metadata = metadata or {}

    def __getitem__(self, name: str) -> Node:
        try:
            return self.tensors[name]
        except KeyError:
            raise InputError(f"parameter {name!r} is not part of the {self.view} view") from None

    def group(self, prefix: str) -> list[Node]:
        return [t for n, t in self.tensors.items() if n.startswith(prefix)]

    @property
    def encoder(self) -> list[Node]:
        return self.group("enc.")

    @property
    def decoder(self) -> list[Node]:
        return self.group("dec.")

    @property
    def classifier(self) -> list[Node]:
        return self.group("cls.")

    @property
    def codebook(self) -> Node:
        return self["codebook"]

    def has(self, prefix: str) -> bool:
        return any(n.startswith(prefix) for n in self.tensors)

    def subset(self, view: str) -> "ModelParameters":
        keep = {EDGE: ("norm.", "enc.", "codebook"), CLOUD: ("norm.", "dec.", "cls.", "codebook"),
                FULL: ("norm.", "enc.", "dec.", "cls.", "codebook")}[view]
        tensors = {n: t for n, t in self.tensors.items() if n.startswith(keep)}
        return ModelParameters(self.config, tensors, view, dict(self.metadata))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.value for n, t in self.tensors.items()}

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {n: tc.parameter(t.value) for n, t in self.tensors.items()},
                               self.view, dict(self.metadata))


# Negative-slope parameter of the Kaiming-uniform bound sqrt(6 / ((1 + a^2) fan_in)).
KAIMING_A = 0.0


def _kaiming(rng: np.random.Generator, shape, fan_in: float, a: float | None = None) -> np.ndarray:
    a = KAIMING_A if a is None else a
    bound = math.sqrt(6.0 / ((1.0 + a * a) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _fan_in(shape: tuple[int, ...]) -> int:
    """Product of all weight dims after the first (transposed convs included)."""
    return int(np.prod(shape[1:]))


def build_from_config(config: ArchitectureConfig, seed: int = 0) -> ModelParameters:
    """Initialize all parameters (Kaiming-uniform fan-in, zero biases)."""
    shapes = build_shapes(config)
    rng = np.random.default_rng([seed, 0xC0DE])
    tensors: dict[str, Node] = {}
    for name, shape in shapes.items():
        if name == "codebook":
            value = codebook_init(config.codebook_size, config.latent_dim, seed)
        elif name == "norm.std":
            value = np.ones(shape)
        elif name.endswith(".b") or name == "norm.mean":
            value = np.zeros(shape)
        else:
            value = _kaiming(rng, shape, _fan_in(shape))
        tensors[name] = tc.parameter(value)
    return ModelParameters(config, tensors)


def fit_normalization(params: ModelParameters, x: np.ndarray) -> None:
    """Set the input statistics from training frames (per antenna, subcarrier)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=(0, 3))[..., None]
    std = x.std(axis=(0, 3))[..., None]
    # flat channels would otherwise divide by ~0
    std = np.maximum(std, 1e-3 * max(float(std.mean()), 1e-12))
    params["norm.mean"].value = mean.astype(params["norm.mean"].value.dtype)
    params["norm.std"].value = std.astype(params["norm.std"].value.dtype)


# ---------------------------------------------------------------------------
# forward graphs


def _check_input(x: np.ndarray, config: ArchitectureConfig) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == tuple(config.input_shape):
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(config.input_shape):
        raise InputError(f"CSI batch shape {x.shape} does not match model input {config.input_shape}")
    return x


def encoder_graph(x, params: ModelParameters) -> Node:
    """Continuous latent E_c(x) as a (B, M, D) node."""
    cfg = params.config
    h = x if isinstance(x, Node) else Node(_check_input(x, cfg))
    mean, std = params["norm.mean"].value, params["norm.std"].value
    h = tc.affine(h, 1.0 / std, -mean / std)
    for i, spec in enumerate(cfg.encoder):
        if spec.kind == "conv":
            h = tc.add_channel_bias(tc.conv2d(h, params[f"enc.{i}.w"], spec.stride), params[f"enc.{i}.b"])
            if spec.relu:
                h = tc.relu(h)
        else:
            h, _ = tc.maxpool2d_with_argmax(h, spec.kernel, spec.stride)
    h = tc.add_channel_bias(tc.conv2d(h, params["enc.proj.w"], 1), params["enc.proj.b"])
    b, d, gh, gw = h.shape
    return tc.reshape(tc.transpose(h, (0, 2, 3, 1)), (b, gh * gw, d))


def decoder_graph(latent: Node, params: ModelParameters) -> Node:
    cfg = params.config
    d, gh, gw = latent_grid(cfg)
    if latent.value.ndim == 2:
        latent = tc.reshape(latent, (1,) + latent.shape)
    if latent.shape[1:] != (gh * gw, d):
        raise InputError(f"latent shape {latent.shape[1:]} does not match grid {(gh * gw, d)}")
    b = latent.shape[0]
    h = tc.transpose(tc.reshape(latent, (b, gh, gw, d)), (0, 3, 1, 2))
    h = tc.add_channel_bias(tc.conv_transpose2d(h, params["dec.proj.w"], 1), params["dec.proj.b"])
    last = len(cfg.decoder) - 1
    for i, spec in enumerate(cfg.decoder):
        if spec.kind == "convT":
            h = tc.add_channel_bias(tc.conv_transpose2d(h, params[f"dec.{i}.w"], spec.stride),
                                    params[f"dec.{i}.b"])
            if i == last:
                # back to amplitude units before the output activation
                h = tc.affine(h, params["norm.std"].value, params["norm.mean"].value)
            if spec.relu:
                h = tc.relu(h)
        else:
            h = tc.max_unpool2d_fixed(h, spec.kernel, spec.stride)
    return h


def classifier_graph(latent: Node, params: ModelParameters) -> tuple[Node, Node]:
    """Return (logits, hidden activations) for a (B, M, D) latent."""
    if latent.value.ndim == 2:
        latent = tc.reshape(latent, (1,) + latent.shape)
    flat = tc.reshape(latent, (latent.shape[0], -1))
    hidden = tc.relu(tc.dense(flat, params["cls.0.w"], params["cls.0.b"]))
    return tc.dense(hidden, params["cls.1.w"], params["cls.1.b"]), hidden


# ---------------------------------------------------------------------------
# inference


def encode(x, params: ModelParameters) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(E_c(x), indices, E_d(x)) for a frame or batch of frames."""
    e_c = encoder_graph(_check_input(x, params.config), params).value
    idx, e_d = quantize_nearest(e_c, params.codebook)
    return e_c, idx, e_d


def decode(e_hat, params: ModelParameters) -> np.ndarray:
    return decoder_graph(tc.as_node(np.asarray(e_hat)), params).value


def classify(e_hat, params: ModelParameters) -> np.ndarray:
    """Class probabilities (B, T) from the dequantized latent."""
    logits, _ = classifier_graph(tc.as_node(np.asarray(e_hat)), params)
    return tc.softmax(logits.value.astype(np.float64)).astype(logits.value.dtype)


def penultimate(e_hat, params: ModelParameters) -> np.ndarray:
    _, hidden = classifier_graph(tc.as_node(np.asarray(e_hat)), params)
    return hidden.value


def reconstruct(x, params: ModelParameters) -> np.ndarray:
    _, idx, _ = encode(x, params)
    return decode(dequantize(idx, params.codebook), params)


def predict(x, params: ModelParameters, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Batched (reconstruction, probabilities) through the quantized path."""
    x = _check_input(x, params.config)
    recs, probs = [], []
    for s in range(0, len(x), batch_size):
        _, idx, _ = encode(x[s:s + batch_size], params)
        e_hat = dequantize(idx, params.codebook)
        recs.append(decode(e_hat, params))
        probs.append(classify(e_hat, params))
    return np.concatenate(recs), np.concatenate(probs)


# ---------------------------------------------------------------------------
# losses


def loss_reconstruction(x, params: ModelParameters, reduction: str = "sum") -> tuple[Node, Node, np.ndarray]:
    """L_r = ||x - D(E_c + sg[E_d - E_c])||^2 and the (E_c node, indices) it used.

    Forward value equals ||x - D(E_d(x))||^2; gradient reaches the encoder
    through the straight-through path and never reaches the codebook.
    """
    x = _check_input(x, params.config)
    e_c = encoder_graph(x, params)
    idx, e_d = quantize_nearest(e_c, params.codebook)
    x_hat = decoder_graph(straight_through_compose(e_c, e_d), params)
    return tc.mse_norm(Node(x), x_hat, reduction), e_c, idx


def loss_task(e_c: Node, labels, params: ModelParameters, lam: float,
              reduction: str = "sum") -> tuple[Node, Node, np.ndarray]:
    """L_e = lam*||E_c - sg[E_d]||^2 + L_y(G(E_hat)); returns (L_e, logits, indices).

    The classifier sees the quantized feature in the forward pass; its
    gradient reaches the encoder straight-through. The codebook is constant.
    """
    idx, e_d = quantize_nearest(e_c, params.codebook)
    logits, _ = classifier_graph(straight_through_compose(e_c, e_d), params)
    l_y = tc.softmax_crossentropy(logits, labels)
    return tc.add(commitment_loss(e_c, e_d, lam, reduction), l_y), logits, idx


# ---------------------------------------------------------------------------
# training


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = (40, 80)
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    # "mean" averages squared errors per element; "sum" keeps per-sample sums
    reduction: str = "mean"
    # fit the fixed input statistics on the training frames
    normalize: bool = True
    # global gradient-norm cap applied by each of the three optimizers
    clip_norm: float | None = None
    # "uniform" keeps the U(-1/K, 1/K) codebook; "data" replaces it with
    # encoder outputs of training frames before the first step
    codebook_init: str = "uniform"
    # after each epoch, move codes nobody selected onto random encoder outputs
    restart_dead_codes: bool = False

    def __post_init__(self):
        if self.epochs <= 0:
            raise InputError("epochs must be positive")
        if self.batch_size <= 0:
            raise InputError("batch_size must be positive")
        if self.lam < 0:
            raise InputError("lambda must be non-negative")
        if self.codebook_init not in ("uniform", "data"):
            raise InputError(f"unknown codebook_init {self.codebook_init!r}")
        if self.reduction not in ("mean", "sum"):
            raise InputError(f"unknown reduction {self.reduction!r}")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during (1-based) ``epoch``."""
        n = sum(epoch > d for d in self.decay_epochs)
        return self.lr * self.lr_decay ** n


@dataclass
class Optimizers:
    """One optimizer per update of the algorithm; they share no state."""

    recon: tc.SGD
    codebook: tc.SGD
    task: tc.SGD

    @classmethod
    def create(cls, params: ModelParameters, lr: float = 0.01, momentum: float = 0.9,
               clip_norm: float | None = None) -> "Optimizers":
        return cls(tc.SGD(params.encoder + params.decoder, lr, momentum, clip_norm),
                   tc.SGD([params.codebook], lr, momentum, clip_norm),
                   tc.SGD(params.encoder + params.classifier, lr, momentum, clip_norm))

    def set_lr(self, lr: float) -> None:
        for opt in (self.recon, self.codebook, self.task):
            opt.lr = lr


def _finite(value: float, name: str, where: str) -> float:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite {name} ({value}) at {where}")
    return value


def _latent_reduction(reduction: str) -> str:
    # per-element averaging would starve the codebook of gradient
    return "vector" if reduction == "mean" else reduction


def train_step(x, y, params: ModelParameters, opts: Optimizers, lam: float = DEFAULT_LAMBDA,
               reduction: str = "mean", where: str = "") -> dict:
    """One pass of the three separate updates. Returned losses are pre-update values."""
    if len(y) == 0:
        raise InputError("empty batch")
    x = _check_input(x, params.config)

    # (i) encoder + decoder on the reconstruction loss
    l_r, _, _ = loss_reconstruction(x, params, reduction)
    _finite(float(l_r.value), "L_r", where)
    opts.recon.zero_grad()
    tc.backward(l_r)
    opts.recon.step()

    # (ii) codebook towards the (fixed) encoder outputs
    e_c = encoder_graph(x, params)
    idx, _ = quantize_nearest(e_c, params.codebook)
    l_c = codebook_loss(e_c, idx, params.codebook, _latent_reduction(reduction))
    _finite(float(l_c.value), "L_c", where)
    opts.codebook.zero_grad()
    tc.backward(l_c)
    opts.codebook.step()

    # (iii) encoder + classifier on commitment + cross-entropy
    l_e, logits, _ = loss_task(e_c, y, params, lam, reduction)
    _finite(float(l_e.value), "L_e", where)
    opts.task.zero_grad()
    tc.backward(l_e)
    opts.task.step()

    correct = int((logits.value.argmax(axis=1) == np.asarray(y)).sum())
    usage = np.bincount(idx.reshape(-1), minlength=params.codebook.shape[0])
    return {"L_r": float(l_r.value), "L_c": float(l_c.value), "L_e": float(l_e.value),
            "correct": correct, "n": len(y), "usage": usage}


@dataclass
class EpochMetrics:
    epoch: int
    L_r: float
    L_c: float
    L_e: float
    train_acc: float
    lr: float

    @property
    def total(self) -> float:
        return self.L_r + self.L_c + self.L_e


METRIC_FIELDS = ("epoch", "L_r", "L_c", "L_e", "train_acc", "lr")


def warm_start_codebook(params: ModelParameters, x: np.ndarray, seed: int, frames: int = 64) -> None:
    """Overwrite the codebook with encoder outputs sampled from training frames."""
    rng = np.random.default_rng([seed, 0xCB])
    pick = rng.choice(len(x), size=min(frames, len(x)), replace=False)
    e_c, _, _ = encode(x[np.sort(pick)], params)
    vecs = e_c.reshape(-1, e_c.shape[-1])
    K = params.codebook.shape[0]
    rows = rng.choice(len(vecs), size=K, replace=len(vecs) < K)
    params.codebook.value = vecs[rows].astype(params.codebook.value.dtype)


def restart_dead_codes(params: ModelParameters, usage: np.ndarray, x: np.ndarray,
                       rng: np.random.Generator, opt: tc.SGD | None = None, frames: int = 32) -> int:
    """Re-seed codes with zero ``usage`` from encoder outputs of random frames.

    Their momentum is cleared so the next update starts fresh. Returns how
    many codes moved.
    """
    dead = np.flatnonzero(np.asarray(usage) == 0)
    if len(dead) == 0:
        return 0
    pick = np.sort(rng.choice(len(x), size=min(frames, len(x)), replace=False))
    vecs = encode(x[pick], params)[0].reshape(-1, params.codebook.shape[1])
    rows = rng.choice(len(vecs), size=len(dead), replace=len(vecs) < len(dead))
    cb = params.codebook
    cb.value = cb.value.copy()
    cb.value[dead] = vecs[rows].astype(cb.value.dtype)
    if opt is not None:
        for i, p in enumerate(opt.params):
            v = opt.state.velocity.get(i)
            if p is cb and v is not None:
                v[dead] = 0
    return len(dead)


def train_loop(x: np.ndarray, y: np.ndarray, arch: ArchitectureConfig, config: TrainConfig,
               params: ModelParameters | None = None, metrics_csv: str | Path | None = None,
               checkpoint: str | Path | None = None,
               callback=None) -> tuple[ModelParameters, list[EpochMetrics]]:
    """Mini-batch training with seeded shuffling and step learning-rate decay."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise InputError("training set is empty")
    params = params or build_from_config(arch, config.seed)
    if config.normalize:
        fit_normalization(params, x)
    if config.codebook_init == "data":
        warm_start_codebook(params, x, config.seed)
    opts = Optimizers.create(params, config.lr, config.momentum, config.clip_norm)
    rng = np.random.default_rng([config.seed, 0x5EED])
    restart_rng = np.random.default_rng([config.seed, 0xDEAD])
    history: list[EpochMetrics] = []
    if metrics_csv is not None:
        Path(metrics_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(metrics_csv, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        opts.set_lr(lr)
        order = rng.permutation(len(y))
        sums = {"L_r": 0.0, "L_c": 0.0, "L_e": 0.0}
        correct = seen = 0
        usage = np.zeros(params.codebook.shape[0], dtype=np.int64)
        for b, s in enumerate(range(0, len(y), config.batch_size)):
            sel = order[s:s + config.batch_size]
            out = train_step(x[sel], y[sel], params, opts, config.lam, config.reduction,
                             where=f"epoch {epoch}, batch {b}")
            for k in sums:
                sums[k] += out[k] * out["n"]
            correct += out["correct"]
            seen += out["n"]
            usage += out["usage"]
        m = EpochMetrics(epoch, sums["L_r"] / seen, sums["L_c"] / seen, sums["L_e"] / seen,
                         correct / seen, lr)
        history.append(m)
        if config.restart_dead_codes and epoch < config.epochs:
            moved = restart_dead_codes(params, usage, x, restart_rng, opts.codebook)
            log.debug("epoch %d: restarted %d unused codes", epoch, moved)
        log.info("epoch %d  L_r=%.4g L_c=%.4g L_e=%.4g acc=%.3f lr=%g",
                 epoch, m.L_r, m.L_c, m.L_e, m.train_acc, lr)
        if metrics_csv is not None:
            with open(metrics_csv, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(m.L_r), repr(m.L_c), repr(m.L_e),
                                         repr(m.train_acc), repr(lr)])
        if callback is not None:
            callback(m, params)
    params.metadata = {"epoch": config.epochs, "train_config": asdict(config),
                       "final": asdict(history[-1])}
    if checkpoint is not None:
        save_checkpoint(params, checkpoint)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints
#
#   "EFI1" | u32 header length | header (UTF-8 JSON) | float32 LE payloads in header order

MAGIC = b"EFI1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParameters, path: str | Path, view: str | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    if view is not None and view != params.view:
        params = params.subset(view)
    path = Path(path)
    names = list(params.tensors)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": params.config.to_dict(),
        "view": params.view,
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in names],
        "metadata": params.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(params.tensors[n].value, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> ModelParameters:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:8 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    config = ArchitectureConfig.from_dict(header["architecture"])
    offset = 8 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        if offset + n > len(data):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
        tensors[entry["name"]] = tc.parameter(arr.astype(np.float32))
        offset += n
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes; shape table inconsistent")
    params = ModelParameters(config, tensors, header.get("view", FULL), header.get("metadata", {}))
    expected = build_shapes(config)
    for name, t in tensors.items():
        if name in expected and expected[name] != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {t.shape}, architecture needs {expected[name]}")
    return params


def build_shapes(config: ArchitectureConfig) -> dict[str, tuple[int, ...]]:
    """Parameter shapes implied by an architecture, without allocating values."""
    c_in, n_sub, _ = config.input_shape
    shapes: dict[str, tuple[int, ...]] = {"norm.mean": (c_in, n_sub, 1), "norm.std": (c_in, n_sub, 1)}
    for i, spec in enumerate(config.encoder):
        if spec.kind == "conv":
            shapes[f"enc.{i}.w"] = (spec.channels, c_in) + tuple(spec.kernel)
            shapes[f"enc.{i}.b"] = (spec.channels,)
            c_in = spec.channels
    D = config.latent_dim
    shapes["enc.proj.w"] = (D, c_in, 1, 1)
    shapes["enc.proj.b"] = (D,)
    shapes["dec.proj.w"] = (D, c_in, 1, 1)
    shapes["dec.proj.b"] = (c_in,)
    for i, spec in enumerate(config.decoder):
        if spec.kind == "convT":
            shapes[f"dec.{i}.w"] = (c_in, spec.channels) + tuple(spec.kernel)
            shapes[f"dec.{i}.b"] = (spec.channels,)
            c_in = spec.channels
    flat = D * latent_length(config)
    shapes["cls.0.w"] = (config.classifier_hidden, flat)
    shapes["cls.0.b"] = (config.classifier_hidden,)
    shapes["cls.1.w"] = (config.num_classes, config.classifier_hidden)
    shapes["cls.1.b"] = (config.num_classes,)
    shapes["codebook"] = (config.codebook_size, D)
    return shapes
