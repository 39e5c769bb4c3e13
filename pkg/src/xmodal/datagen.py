"""Synthetic paired two-modality data, label noise, and CSV ingestion.

Both modalities are noisy linear views of a shared latent vector. Modality
T (teacher) is generated with less noise than modality S (student), so a
model on T sees a cleaner version of the same semantics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numcore import RandomStream, as_matrix

DEC = "dec"
CER = "cer"

# sub-stream tags
_TAG_MEANS, _TAG_MAP_S, _TAG_MAP_T, _TAG_LATENT, _TAG_NOISE_S, _TAG_NOISE_T, _TAG_LABELS = range(1, 8)


@dataclass(frozen=True)
class SynthSpec:
    n: int = 600
    classes: int = 3
    latent_dim: int = 4
    d_s: int = 16
    d_t: int = 16
    noise_s: float = 0.8
    noise_t: float = 0.2
    label_flip_rate: float = 0.0
    seed: int = 42
    task: str = DEC
    class_sep: float = 1.0
    latent_std: float = 0.25
    label_noise_std: float = 0.0  # CER only

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("n must be >= 4")
        if min(self.latent_dim, self.d_s, self.d_t) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.task not in (DEC, CER):
            raise ValueError(f"task must be {DEC!r} or {CER!r}")
        if self.task == DEC and self.classes < 2:
            raise ValueError("classification needs at least 2 classes")
        if not 0.0 <= self.label_flip_rate < 1.0:
            raise ValueError("label_flip_rate must lie in [0, 1)")
        if min(self.noise_s, self.noise_t, self.latent_std, self.label_noise_std) < 0:
            raise ValueError("noise levels must be >= 0")


SYNTH_3C = SynthSpec()


@dataclass
class PairedDataset:
    x_s: np.ndarray
    x_t: np.ndarray
    labels_clean: np.ndarray
    labels_noisy: np.ndarray
    task: str = DEC
    classes: int = 0  # 0 for regression
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_s = as_matrix(self.x_s, "x_s")
        self.x_t = as_matrix(self.x_t, "x_t")
        if self.x_s.shape[0] != self.x_t.shape[0]:
            raise ValueError(f"row counts differ: x_s has {self.x_s.shape[0]}, "
                             f"x_t has {self.x_t.shape[0]}")
        dtype = int if self.task == DEC else np.float64
        self.labels_clean = np.asarray(self.labels_clean, dtype=dtype).ravel()
        self.labels_noisy = np.asarray(self.labels_noisy, dtype=dtype).ravel()
        for name in ("labels_clean", "labels_noisy"):
            if getattr(self, name).shape[0] != self.n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {self.n}")
        if self.task == DEC:
            if self.classes == 0:
                self.classes = int(max(self.labels_clean.max(), self.labels_noisy.max())) + 1
            for lab in (self.labels_clean, self.labels_noisy):
                if lab.min() < 0 or lab.max() >= self.classes:
                    raise ValueError("class label out of range")

    @property
    def n(self) -> int:
        return self.x_s.shape[0]

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=int)
        return replace(self, x_s=self.x_s[idx], x_t=self.x_t[idx],
                       labels_clean=self.labels_clean[idx], labels_noisy=self.labels_noisy[idx],
                       meta=dict(self.meta))


def _class_means(spec: SynthSpec, stream: RandomStream) -> np.ndarray:
    raw = stream.normal((spec.classes, spec.latent_dim))
    if spec.classes <= spec.latent_dim:
        q, _ = np.linalg.qr(raw.T)
        raw = q.T[: spec.classes]
    else:
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return spec.class_sep * raw


def generate_synthetic_paired(spec: SynthSpec = SYNTH_3C) -> PairedDataset:
    root = RandomStream(spec.seed)
    k = spec.latent_dim
    lat = root.sub_stream(_TAG_LATENT)
    if spec.task == DEC:
        labels = np.arange(spec.n) % spec.classes
        labels = labels[lat.permutation(spec.n)]
        means = _class_means(spec, root.sub_stream(_TAG_MEANS))
        z = means[labels] + lat.normal((spec.n, k), scale=spec.latent_std)
    else:
        z = 2.0 * lat.uniform((spec.n, k)) - 1.0
        w = root.sub_stream(_TAG_MEANS).normal(k)
        w /= np.linalg.norm(w)
        labels = np.tanh(1.5 * z @ w) + 0.25 * np.sin(3.0 * z[:, 0])
    a_s = root.sub_stream(_TAG_MAP_S).normal((k, spec.d_s), scale=1.0 / np.sqrt(k))
    a_t = root.sub_stream(_TAG_MAP_T).normal((k, spec.d_t), scale=1.0 / np.sqrt(k))
    x_s = z @ a_s + root.sub_stream(_TAG_NOISE_S).normal((spec.n, spec.d_s), scale=spec.noise_s)
    x_t = z @ a_t + root.sub_stream(_TAG_NOISE_T).normal((spec.n, spec.d_t), scale=spec.noise_t)
    noise_stream = root.sub_stream(_TAG_LABELS)
    if spec.task == DEC:
        noisy = inject_label_noise(labels, spec.label_flip_rate, spec.classes, noise_stream)
        classes = spec.classes
    else:
        noisy = inject_label_noise(labels, spec.label_noise_std, 0, noise_stream)
        classes = 0
    return PairedDataset(x_s, x_t, labels, noisy, spec.task, classes,
                         meta={"latent": z, "spec": spec})


def inject_label_noise(labels, rate, classes, stream: RandomStream):
    """Symmetric class flips (``classes >= 2``) or additive Gaussian noise (``classes == 0``).

    For classification each label is, with probability ``rate``, replaced by
    a uniformly drawn *different* class. For regression ``rate`` is the noise
    standard deviation.
    """
    if classes == 0:
        y = np.asarray(labels, dtype=np.float64)
        if rate < 0:
            raise ValueError("noise std must be >= 0")
        if rate == 0:
            return y.copy()
        return y + stream.normal(y.shape, scale=rate)
    if classes < 2:
        raise ValueError("symmetric label flips need at least 2 classes")
    if not 0.0 <= rate < 1.0:
        raise ValueError("flip rate must lie in [0, 1)")
    y = np.asarray(labels, dtype=int)
    flip = stream.uniform(y.shape) < rate
    # offset in [1, classes-1] guarantees a different class
    offset = stream.integers(1, classes, size=y.shape)
    return np.where(flip, (y + offset) % classes, y)


def _read_numeric_rows(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    rows = []
    for lineno, line in enumerate(lines, start=1):
        cells = [c.strip() for c in line.split(",")]
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            if lineno == 1:
                continue  # header line
            raise ValueError(f"{path}: line {lineno}: non-numeric cell in {line!r}") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError(f"{path}: ragged rows with widths {sorted(widths)}")
    return rows


def load_csv_dataset(path_s, path_t, path_labels, task=DEC) -> PairedDataset:
    x_s = _read_numeric_rows(path_s)
    x_t = _read_numeric_rows(path_t)
    y = _read_numeric_rows(path_labels)
    counts = {"modality S": len(x_s), "modality T": len(x_t), "labels": len(y)}
    if len(set(counts.values())) != 1:
        raise ValueError("row-count mismatch: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    labels = np.array([r[0] for r in y])
    if task == DEC:
        if not np.all(labels == np.round(labels)):
            raise ValueError(f"{path_labels}: class labels must be integers")
        labels = labels.astype(int)
    return PairedDataset(np.array(x_s), np.array(x_t), labels, labels.copy(), task)


def save_csv_dataset(ds: PairedDataset, path_s, path_t, path_labels, noisy=True):
    """Write the three CSV files read by :func:`load_csv_dataset`."""
    for path, mat in ((path_s, ds.x_s), (path_t, ds.x_t)):
        Path(path).write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in mat))
    labels = ds.labels_noisy if noisy else ds.labels_clean
    fmt = (lambda v: str(int(v))) if ds.task == DEC else (lambda v: repr(float(v)))
    Path(path_labels).write_text("".join(fmt(v) + "\n" for v in labels))
