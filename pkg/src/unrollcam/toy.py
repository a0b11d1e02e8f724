"""Oriented-texture classification task and a small convolutional classifier.

Class ``c`` of ``K`` is a sinusoidal grating at orientation ``pi * c / K``
and a fixed high spatial frequency, shown inside a random soft-edged
ellipse over a smooth, lightly textured background. The class evidence is
almost entirely fine detail, so blur and low-light noise erase it first.
"""

import csv
import dataclasses
import math
import os

import numpy as np

from unrollcam import autodiff as ad
from unrollcam import fileio, hqs, tensor_ops
from unrollcam.errors import InvalidArgumentError
from unrollcam.imaging import Rng

MAX_CLASSES = 16


@dataclasses.dataclass(frozen=True)
class ToyParams:
    classes: int = 8
    size: int = 64
    channels: int = 1
    frequency: float = 0.22  # cycles per pixel
    amplitude: float = 0.18
    background_contrast: float = 0.12
    texture_noise: float = 0.03

    def __post_init__(self):
        if not 2 <= self.classes <= MAX_CLASSES:
            raise InvalidArgumentError(f"classes must be in [2, {MAX_CLASSES}], got {self.classes}")
        if self.size < 8 or self.size % 4:
            raise InvalidArgumentError("size must be a multiple of 4 and at least 8")
        if self.channels not in (1, 3):
            raise InvalidArgumentError("channels must be 1 or 3")
        if not 0 < self.frequency < 0.5:
            raise InvalidArgumentError("frequency must be in (0, 0.5) cycles/pixel")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in d if k in {f.name for f in dataclasses.fields(cls)}})


@dataclasses.dataclass
class ToyDataset:
    images: list
    labels: np.ndarray
    params: ToyParams
    seed: int = 0
    split: str = "train"

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])


def _sample_image(params, stream, label):
    s = params.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    u = stream.uniform((16,))
    # smooth background: offset plus three low-frequency cosines
    bg = 0.3 + 0.3 * u[0]
    for j in range(3):
        fy, fx = (np.floor(3 * u[1 + 3 * j : 3 + 3 * j]) + 0.0) / s
        phase = 2 * np.pi * u[3 + 3 * j]
        bg = bg + params.background_contrast / 3 * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    # soft ellipse mask
    cy, cx = s * (0.3 + 0.4 * u[10]), s * (0.3 + 0.4 * u[11])
    ay, ax = s * (0.2 + 0.15 * u[12]), s * (0.2 + 0.15 * u[13])
    rot = np.pi * u[14]
    dy, dx = yy - cy, xx - cx
    r = np.hypot((dy * np.cos(rot) - dx * np.sin(rot)) / ay, (dy * np.sin(rot) + dx * np.cos(rot)) / ax)
    mask = 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * 12.0, -50, 50)))
    theta = np.pi * label / params.classes
    f = params.frequency
    grating = np.sin(2 * np.pi * f * (xx * np.cos(theta) + yy * np.sin(theta)) + 2 * np.pi * u[15])
    texture = params.texture_noise * stream.normal((s, s))
    gray = bg + texture + params.amplitude * mask * grating
    if params.channels == 1:
        img = gray[..., None]
    else:
        tint = 0.85 + 0.3 * stream.uniform((3,))
        img = gray[..., None] * tint
    return np.clip(img, 0.0, 1.0)


def generate_dataset(params, n, seed=0, split="train"):
    """``n`` samples with balanced labels (``i % K``); sample ``i`` uses stream (seed, i)."""
    if not isinstance(params, ToyParams):
        raise InvalidArgumentError("params must be a ToyParams")
    if n < 0:
        raise InvalidArgumentError("n must be non-negative")
    rng = Rng(seed)
    labels = np.arange(n) % params.classes
    images = [_sample_image(params, rng.stream(i), labels[i]) for i in range(n)]
    return ToyDataset(images, labels.astype(np.int64), params, seed, split)


def save_dataset(directory, ds):
    """PFM per image, ``labels.csv`` (filename,label) and ``params.json``."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        name = f"{i:05d}.pfm"
        fileio.write_pfm(os.path.join(directory, name), img[..., 0] if img.shape[-1] == 1 else img)
        rows.append((name, int(label)))
    with fileio.atomic_path(os.path.join(directory, "labels.csv")) as tmp:
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["filename", "label"])
            w.writerows(rows)
    fileio.write_json(
        os.path.join(directory, "params.json"),
        {"params": ds.params.to_dict(), "seed": ds.seed, "split": ds.split, "n": len(ds)},
    )


def load_dataset(directory):
    meta_path = os.path.join(directory, "params.json")
    meta = fileio.read_json(meta_path) if os.path.exists(meta_path) else {}
    labels_path = os.path.join(directory, "labels.csv")
    if not os.path.exists(labels_path):
        raise InvalidArgumentError(f"{directory}: no labels.csv")
    images, labels = [], []
    with open(labels_path, newline="") as f:
        for row in csv.DictReader(f):
            images.append(fileio.read_image(os.path.join(directory, row["filename"])))
            labels.append(int(row["label"]))
    params = ToyParams.from_dict(meta["params"]) if "params" in meta else ToyParams(
        classes=max(labels) + 1 if labels else 2, size=images[0].shape[0] if images else 64,
        channels=images[0].shape[2] if images else 1,
    )
    if labels and (min(labels) < 0 or max(labels) >= params.classes):
        raise InvalidArgumentError(f"{directory}: labels outside [0, {params.classes})")
    return ToyDataset(images, np.array(labels, dtype=np.int64), params, meta.get("seed", 0), meta.get("split", "train"))


# -- classifier ----------------------------------------------------------------------


@dataclasses.dataclass
class ToyClassifier:
    """conv3x3(16)+ReLU+pool2, conv3x3(32)+ReLU+pool2, dense(K)."""

    weights: dict
    classes: int
    size: int
    channels: int

    NAMES = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias")

    @classmethod
    def random(cls, classes=8, size=64, channels=1, seed=0):
        if size % 4:
            raise InvalidArgumentError("classifier input size must be a multiple of 4")
        rng = np.random.default_rng(seed)
        feat = (size // 4) ** 2 * 32
        w = {
            "conv1.weight": rng.normal(0, math.sqrt(2 / (9 * channels)), (3, 3, channels, 16)),
            "conv1.bias": np.zeros(16),
            "conv2.weight": rng.normal(0, math.sqrt(2 / (9 * 16)), (3, 3, 16, 32)),
            "conv2.bias": np.zeros(32),
            "dense.weight": rng.normal(0, math.sqrt(1 / feat), (classes, feat)),
            "dense.bias": np.zeros(classes),
        }
        return cls(w, classes, size, channels)

    def parameters(self):
        return {k: self.weights[k] for k in self.NAMES}

    def load_parameters(self, params):
        for k in self.NAMES:
            if k in params:
                v = np.asarray(params[k], dtype=np.float64)
                if v.shape != self.weights[k].shape:
                    raise InvalidArgumentError(f"{k}: shape {v.shape} != {self.weights[k].shape}")
                self.weights[k] = v.copy()

    def forward(self, images, params=None):
        """Logits (B, K) for a (B, H, W, C) batch; accepts tape Vars."""
        p = params if params is not None else self.weights
        shape = np.shape(ad.value(images))
        if len(shape) != 4 or shape[1:] != (self.size, self.size, self.channels):
            raise InvalidArgumentError(
                f"classifier expects (B, {self.size}, {self.size}, {self.channels}), got {shape}"
            )
        h = ad.maxpool2(ad.relu(ad.add(ad.conv2d_same(images, p["conv1.weight"]), p["conv1.bias"])))
        h = ad.maxpool2(ad.relu(ad.add(ad.conv2d_same(h, p["conv2.weight"]), p["conv2.bias"])))
        h = ad.reshape(h, (shape[0], -1))
        return ad.dense(h, p["dense.weight"], p["dense.bias"])

    def to_checkpoint(self):
        return {
            "format_version": hqs.FORMAT_VERSION,
            "kind": "toy_classifier",
            "classes": self.classes,
            "size": self.size,
            "channels": self.channels,
            "weights": {k: self.weights[k].tolist() for k in self.NAMES},
        }

    @classmethod
    def from_checkpoint(cls, doc):
        if doc.get("kind") != "toy_classifier":
            raise InvalidArgumentError("not a toy classifier checkpoint")
        clf = cls.random(doc["classes"], doc["size"], doc["channels"])
        clf.load_parameters({k: np.array(v) for k, v in doc["weights"].items()})
        return clf


def classify(classifier, img):
    """Logits (K,) for one (H, W, C) image."""
    img = tensor_ops.as_image(img)
    return np.asarray(classifier.forward(img[None]))[0]


def _restore(pipeline, img):
    return np.asarray(hqs.run_pipeline(pipeline, img)) if pipeline is not None else img


def predict(classifier, images, pipeline=None, batch_size=64):
    preds = []
    for s in range(0, len(images), batch_size):
        batch = np.stack([_restore(pipeline, im) for im in images[s : s + batch_size]])
        preds.append(np.argmax(classifier.forward(batch), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(classifier, images, labels, pipeline=None):
    """Top-1 fraction; ``pipeline`` (if given) restores each image first."""
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise InvalidArgumentError("images and labels differ in length")
    if len(labels) == 0:
        raise InvalidArgumentError("empty evaluation set")
    return float(np.mean(predict(classifier, images, pipeline) == labels))
