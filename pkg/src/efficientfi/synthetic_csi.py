"""Synthetic labelled CSI amplitude data from a multipath channel model.

Each antenna pair sees a frequency-selective static channel (a few fixed
reflections) plus ``L_dyn`` moving reflections whose phase rotates at a
Doppler frequency. Only the amplitude ``|H_i(t)|`` is returned.

The six activity profiles reuse the activity names of the HAR experiments
but their parameters are invented stand-ins chosen to be separable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

BANDWIDTH_HZ = 40e6

PRESETS = {
    # name: (antenna pairs, subcarriers, time steps, sampling rate in Hz)
    "paper": (3, 114, 500, 500.0),
    "desk": (3, 30, 100, 100.0),
}

ENVELOPES = ("constant", "ramp", "burst")


@dataclass(frozen=True)
class ActivityProfile:
    name: str
    n_paths: int
    doppler_hz: tuple[float, float]
    amplitude: tuple[float, float]
    delay_s: tuple[float, float] = (10e-9, 80e-9)
    envelope: str = "constant"

    def __post_init__(self):
        if self.n_paths < 0:
            raise ValueError("n_paths must be >= 0")
        if not self.doppler_hz[0] < self.doppler_hz[1]:
            raise ValueError(f"{self.name}: doppler range must satisfy f_min < f_max")
        if self.envelope not in ENVELOPES:
            raise ValueError(f"unknown envelope {self.envelope!r}")


def default_profiles() -> list[ActivityProfile]:
    """Six profiles with pairwise-distinct Doppler/envelope signatures.

    ==============  =====  ============  ===========  ========
    class           paths  Doppler (Hz)  amplitude    envelope
    ==============  =====  ============  ===========  ========
    running         3      28-35         0.25-0.40    constant
    walking         2      8-12          0.25-0.40    constant
    falling_down    1      20-26         0.50-0.80    burst
    boxing          2      14-18         0.20-0.35    constant
    circling_arms   1      3-6           0.40-0.60    constant
    cleaning_floor  2      38-46         0.20-0.35    ramp
    ==============  =====  ============  ===========  ========
    """
    return [
        ActivityProfile("running", 3, (28.0, 35.0), (0.25, 0.40)),
        ActivityProfile("walking", 2, (8.0, 12.0), (0.25, 0.40)),
        ActivityProfile("falling_down", 1, (20.0, 26.0), (0.50, 0.80), envelope="burst"),
        ActivityProfile("boxing", 2, (14.0, 18.0), (0.20, 0.35)),
        ActivityProfile("circling_arms", 1, (3.0, 6.0), (0.40, 0.60)),
        ActivityProfile("cleaning_floor", 2, (38.0, 46.0), (0.20, 0.35), envelope="ramp"),
    ]


@dataclass(frozen=True)
class DatasetConfig:
    preset: str = "desk"
    classes: tuple[ActivityProfile, ...] = field(default_factory=lambda: tuple(default_profiles()))
    per_class: int = 100
    split: float = 0.8
    noise_std: float | None = None  # None -> 0.05 x mean static amplitude
    seed: int = 0
    n_static_paths: int = 3

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")
        if self.per_class < 5:
            raise ValueError("need at least 5 samples per class")

    @property
    def shape(self) -> tuple[int, int, int]:
        return PRESETS[self.preset][:3]

    @property
    def sampling_rate(self) -> float:
        return PRESETS[self.preset][3]

    @property
    def class_names(self) -> list[str]:
        return [p.name for p in self.classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(p) for p in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["classes"] = tuple(
            ActivityProfile(**{**p, "doppler_hz": tuple(p["doppler_hz"]),
                               "amplitude": tuple(p["amplitude"]), "delay_s": tuple(p["delay_s"])})
            for p in d["classes"])
        return cls(**d)


@dataclass
class CSIFrame:
    amplitude: np.ndarray  # (antenna pairs, subcarriers, time steps)
    label: int
    subject_id: int | None = None


@dataclass
class CSIDataset:
    """A split held as one contiguous (N, C, S, T) float32 array."""

    x: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def frame(self, i: int) -> CSIFrame:
        return CSIFrame(self.x[i], int(self.labels[i]), int(self.sample_ids[i]))

    def subset(self, idx) -> "CSIDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return CSIDataset(self.x[idx], self.labels[idx], self.sample_ids[idx], self.class_names)


# ---------------------------------------------------------------------------
# channel model


def subcarrier_offsets(n_sub: int) -> np.ndarray:
    """Baseband frequency of each subcarrier, uniform over the 40 MHz band."""
    return np.linspace(-BANDWIDTH_HZ / 2, BANDWIDTH_HZ / 2, n_sub)


@dataclass(frozen=True)
class StaticEnvironment:
    gains: np.ndarray   # (pairs, paths) complex
    delays: np.ndarray  # (pairs, paths) seconds

    def response(self, freqs: np.ndarray) -> np.ndarray:
        """(pairs, subcarriers) complex static channel."""
        return np.einsum("ap,apf->af", self.gains,
                         np.exp(-2j * np.pi * self.delays[:, :, None] * freqs[None, None, :]))


def static_environment(config: DatasetConfig) -> StaticEnvironment:
    """Fixed room reflections, one independent set per antenna pair."""
    pairs = config.shape[0]
    rng = np.random.default_rng([config.seed, 0xE7])
    n = config.n_static_paths
    amps = np.concatenate([np.ones((pairs, 1)), rng.uniform(0.2, 0.5, (pairs, n - 1))], axis=1)
    phases = rng.uniform(0, 2 * np.pi, (pairs, n))
    delays = np.concatenate([np.zeros((pairs, 1)), rng.uniform(10e-9, 60e-9, (pairs, n - 1))], axis=1)
    return StaticEnvironment(amps * np.exp(1j * phases), delays)


def _envelope(kind: str, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if kind == "constant":
        return np.ones_like(t)
    duration = t[-1] if t[-1] > 0 else 1.0
    if kind == "ramp":
        ramp = t / duration
        return ramp if rng.random() < 0.5 else 1.0 - ramp
    centre = rng.uniform(0.3, 0.7) * duration
    return np.exp(-0.5 * ((t - centre) / (0.1 * duration)) ** 2)


def noise_sigma(config: DatasetConfig, env: StaticEnvironment | None = None) -> float:
    if config.noise_std is not None:
        return float(config.noise_std)
    env = env or static_environment(config)
    static = np.abs(env.response(subcarrier_offsets(config.shape[1])))
    return 0.05 * float(static.mean())


def gen_sample(profile: ActivityProfile, config: DatasetConfig, rng: np.random.Generator,
               label: int = 0, subject_id: int | None = None,
               env: StaticEnvironment | None = None) -> CSIFrame:
    pairs, n_sub, n_t = config.shape
    env = env or static_environment(config)
    freqs = subcarrier_offsets(n_sub)
    t = np.arange(n_t) / config.sampling_rate

    gain = rng.uniform(0.9, 1.1)
    h = np.repeat((gain * env.response(freqs))[:, :, None], n_t, axis=2)
    for _ in range(profile.n_paths):
        f_d = rng.uniform(*profile.doppler_hz)
        alpha = rng.uniform(*profile.amplitude) * _envelope(profile.envelope, t, rng)
        tau = rng.uniform(*profile.delay_s)
        phi = rng.uniform(0, 2 * np.pi, pairs)
        rotation = np.exp(1j * (2 * np.pi * f_d * t[None, :] + phi[:, None]))  # (pairs, T)
        freq_term = np.exp(-2j * np.pi * freqs * tau)                         # (S,)
        h = h + alpha[None, None, :] * rotation[:, None, :] * freq_term[None, :, None]

    amp = np.abs(h)
    sigma = noise_sigma(config, env)
    if sigma > 0:
        amp = np.maximum(amp + rng.normal(0.0, sigma, amp.shape), 0.0)
    return CSIFrame(amp.astype(np.float32), label, subject_id)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample generator so output never depends on generation order."""
    return np.random.default_rng([seed, index])


def generate_all(config: DatasetConfig) -> CSIDataset:
    env = static_environment(config)
    n = len(config.classes) * config.per_class
    x = np.empty((n,) + config.shape, dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for c, profile in enumerate(config.classes):
        for s in range(config.per_class):
            i = c * config.per_class + s
            x[i] = gen_sample(profile, config, sample_rng(config.seed, i), label=c, env=env).amplitude
            labels[i] = c
    return CSIDataset(x, labels, np.arange(n, dtype=np.int64), config.class_names)


def split_indices(labels: np.ndarray, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified seeded split; returns sorted (train, test) index arrays."""
    rng = np.random.default_rng([seed, 0x5B1])
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        k = int(round(ratio * len(idx)))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def gen_dataset(config: DatasetConfig) -> tuple[CSIDataset, CSIDataset]:
    full = generate_all(config)
    tr, te = split_indices(full.labels, config.split, config.seed)
    return full.subset(tr), full.subset(te)


# ---------------------------------------------------------------------------
# persistence: manifest.json + data.bin (float32 little-endian, sample-major)

MANIFEST = "manifest.json"
BLOB = "data.bin"


def save_dataset(directory: str | Path, config: DatasetConfig,
                 train: CSIDataset, test: CSIDataset) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = np.concatenate([train.sample_ids, test.sample_ids])
    order = np.argsort(ids, kind="stable")
    x = np.concatenate([train.x, test.x])[order]
    labels = np.concatenate([train.labels, test.labels])[order]
    manifest = {
        "format": "efficientfi-dataset/1",
        "config": config.to_dict(),
        "class_names": config.class_names,
        "shape": list(config.shape),
        "n_samples": int(len(ids)),
        "sample_ids": ids[order].tolist(),
        "labels": labels.tolist(),
        "train": train.sample_ids.tolist(),
        "test": test.sample_ids.tolist(),
        "dtype": "<f4",
    }
    x.astype("<f4").tofile(directory / BLOB)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_dataset(directory: str | Path) -> tuple[CSIDataset, CSIDataset, DatasetConfig]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    shape = tuple(manifest["shape"])
    n = manifest["n_samples"]
    x = np.fromfile(directory / BLOB, dtype="<f4")
    if x.size != n * int(np.prod(shape)):
        raise ValueError(f"{directory / BLOB}: expected {n} samples of shape {shape}")
    x = x.reshape((n,) + shape).astype(np.float32)
    ids = np.asarray(manifest["sample_ids"], dtype=np.int64)
    full = CSIDataset(x, np.asarray(manifest["labels"], dtype=np.int64), ids, manifest["class_names"])
    pos = {int(s): i for i, s in enumerate(ids)}
    train = full.subset([pos[s] for s in manifest["train"]])
    test = full.subset([pos[s] for s in manifest["test"]])
    return train, test, DatasetConfig.from_dict(manifest["config"])


# ---------------------------------------------------------------------------
# diagnostics


def time_spectrum(x: np.ndarray) -> np.ndarray:
    """Mean magnitude spectrum over time of each sample, DC removed. x: (N,C,S,T)."""
    centred = x - x.mean(axis=-1, keepdims=True)
    return np.abs(np.fft.rfft(centred, axis=-1)).mean(axis=(1, 2))


def class_separation(data: CSIDataset) -> np.ndarray:
    """Pairwise ratio of class-mean spectrum distance to pooled within-class spread.

    The spread is the pooled within-class standard deviation, averaged (RMS)
    over spectrum bins.
    """
    spec = time_spectrum(data.x)
    classes = np.unique(data.labels)
    means = np.stack([spec[data.labels == c].mean(axis=0) for c in classes])
    resid = spec - means[np.searchsorted(classes, data.labels)]
    spread = np.sqrt(np.mean(resid ** 2))
    dist = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    return dist / spread


def relabel_as_subjects(data: CSIDataset, names: Sequence[str] | None = None) -> CSIDataset:
    """Present class labels as subject identities (Human-ID style tasks)."""
    names = list(names) if names else [f"subject_{i}" for i in range(len(data.class_names))]
    return replace(data, class_names=names)
