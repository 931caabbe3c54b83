"""Reconstruction and recognition metrics, incremental fine-tuning, embedding export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from . import tensor_core as tc
from .model import ModelParameters
from .quantizer import dequantize
from .tensor_core import InputError


def nmse_db(x, x_hat) -> float:
    """10 log10 E[||x - x_hat||^2 / ||x||^2]; -inf for a perfect reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise InputError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if x.size == 0:
        raise InputError("empty batch")
    if x.ndim == 1:
        x, x_hat = x[None], x_hat[None]
    axes = tuple(range(1, x.ndim))
    power = np.sum(x * x, axis=axes)
    if np.any(power == 0):
        raise InputError("NMSE undefined for an all-zero sample")
    ratio = float(np.mean(np.sum((x - x_hat) ** 2, axis=axes) / power))
    return -math.inf if ratio == 0 else 10.0 * math.log10(ratio)


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise InputError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise InputError("no samples")
    return float(np.mean(p == y))


def confusion(predictions, labels, num_classes: int | None = None) -> np.ndarray:
    """confusion[i, j] counts samples of true class i predicted as j."""
    p, y = np.asarray(predictions, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise InputError(f"{p.size} predictions for {y.size} labels")
    t = num_classes or int(max(p.max(initial=-1), y.max(initial=-1)) + 1)
    out = np.zeros((t, t), dtype=np.int64)
    np.add.at(out, (y, p), 1)
    return out


@dataclass
class EvalReport:
    nmse_db: float
    accuracy: float
    confusion: list[list[int]]
    per_class_accuracy: list[float]
    n_samples: int
    gamma_paper: float | None = None
    gamma_payload: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        # json has no -inf literal; keep it symbolic
        d["nmse_db"] = "-inf" if self.nmse_db == -math.inf else self.nmse_db
        return d

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def predict_frames(params: ModelParameters, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Frame-by-frame quantized path, identical to what the deployed endpoints compute."""
    recs, probs = [], []
    for frame in x:
        _, idx, _ = mdl.encode(frame, params)
        e_hat = dequantize(idx, params.codebook)
        recs.append(mdl.decode(e_hat, params)[0])
        probs.append(mdl.classify(e_hat, params)[0])
    return np.stack(recs), np.stack(probs)


def evaluate(params: ModelParameters, data) -> EvalReport:
    from .edge_cloud import gamma_payload

    recs, probs = predict_frames(params, data.x)
    pred = probs.argmax(axis=1)
    conf = confusion(pred, data.labels, params.config.num_classes)
    rows = conf.sum(axis=1)
    per_class = [float(conf[i, i] / rows[i]) if rows[i] else float("nan") for i in range(len(rows))]
    comp = gamma_payload(params.config)
    return EvalReport(
        nmse_db=nmse_db(data.x, recs),
        accuracy=accuracy(pred, data.labels),
        confusion=conf.tolist(),
        per_class_accuracy=per_class,
        n_samples=len(data),
        gamma_paper=comp.gamma_paper,
        gamma_payload=comp.gamma_payload,
    )


# ---------------------------------------------------------------------------
# incremental learning


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0


def _features(params: ModelParameters, x: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch):
        _, idx, _ = mdl.encode(x[s:s + batch], params)
        out.append(dequantize(idx, params.codebook))
    return np.concatenate(out) if out else np.zeros((0,))


def incremental_finetune(params: ModelParameters, reconstructed: np.ndarray, threshold: float = 0.9,
                         config: FinetuneConfig | None = None) -> tuple[ModelParameters, int]:
    """Fine-tune the classifier on confidently pseudo-labelled reconstructions.

    Reconstructed frames go back through the frozen encoder and codebook;
    samples whose top class probability reaches ``threshold`` are labelled
    with that class. Only classifier weights change. Returns the updated copy
    and the number of samples used.
    """
    if not 0 < threshold <= 1:
        raise InputError("threshold must lie in (0, 1]")
    config = config or FinetuneConfig()
    new = params.copy()
    x = np.asarray(reconstructed, dtype=np.float32)
    if len(x) == 0:
        return new, 0
    feats = _features(new, x)
    probs = mdl.classify(feats, new)
    keep = probs.max(axis=1) >= threshold
    n_used = int(keep.sum())
    if n_used == 0:
        return new, 0
    feats, pseudo = feats[keep], probs[keep].argmax(axis=1)

    opt = tc.SGD(new.classifier, config.lr, config.momentum)
    rng = np.random.default_rng([config.seed, 0xF1])
    for _ in range(config.epochs):
        order = rng.permutation(n_used)
        for s in range(0, n_used, config.batch_size):
            sel = order[s:s + config.batch_size]
            logits, _ = mdl.classifier_graph(tc.Node(feats[sel]), new)
            loss = tc.softmax_crossentropy(logits, pseudo[sel])
            opt.zero_grad()
            tc.backward(loss)
            opt.step()
    new.metadata = dict(new.metadata, finetune={"threshold": threshold, "samples": n_used,
                                                **asdict(config)})
    return new, n_used


# ---------------------------------------------------------------------------
# embeddings

LAYERS = ("raw", "quantized", "penultimate")


def embedding_vectors(params: ModelParameters, x: np.ndarray, layer: str) -> np.ndarray:
    if layer not in LAYERS:
        raise InputError(f"unknown layer {layer!r}; choose from {LAYERS}")
    x = np.asarray(x, dtype=np.float32)
    if layer == "raw":
        return x.reshape(len(x), -1)
    feats = _features(params, x)
    if layer == "quantized":
        return feats.reshape(len(x), -1)
    return mdl.penultimate(feats, params)


def export_embeddings(params: ModelParameters, data, layer: str, path: str | Path) -> int:
    """Write ``sample_id,label,f0..f{n-1}`` rows; returns the vector length."""
    vecs = embedding_vectors(params, data.x, layer)
    n = vecs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"] + [f"f{i}" for i in range(n)])
        for sid, lab, v in zip(data.sample_ids, data.labels, vecs):
            w.writerow([int(sid), int(lab)] + [repr(float(a)) for a in v])
    return n
