"""Training protocols on the toy benchmark: pretraining, fine-tuning, evaluation.

A benchmark is the clean toy set plus simulated captures of it. The
low-level pipeline and the classifier are combined in :class:`JointModel`,
whose parameter names are prefixed ``lowlevel.`` and ``classifier.`` so a
trainable subset can be picked by prefix.
"""

import copy
import csv
import dataclasses
import math

import numpy as np

from unrollcam import autodiff as ad
from unrollcam import fileio, hqs, toy, train
from unrollcam.errors import InvalidArgumentError
from unrollcam.imaging import Rng, identity_psf, simulate_capture

GROUPS = ("lowlevel", "classifier")


@dataclasses.dataclass
class Benchmark:
    train_clean: list
    train_degraded: list
    train_labels: np.ndarray
    val_clean: list
    val_degraded: list
    val_labels: np.ndarray


def degrade(images, psf, noise, seed):
    """Captures of ``images``; image ``i`` draws from stream (seed, i)."""
    rng = Rng(seed)
    return [simulate_capture(im, psf, noise, rng, i) for i, im in enumerate(images)]


def make_benchmark(params, n_train, n_val, psf, noise, seed):
    """Train/val toy sets and their captures, all derived from ``seed``."""
    psf = psf or identity_psf()
    tr = toy.generate_dataset(params, n_train, seed=2 * seed + 1, split="train")
    va = toy.generate_dataset(params, n_val, seed=2 * seed + 2, split="val")
    return Benchmark(
        tr.images,
        degrade(tr.images, psf, noise, 1000 + 2 * seed + 1),
        tr.labels,
        va.images,
        degrade(va.images, psf, noise, 1000 + 2 * seed + 2),
        va.labels,
    )


class JointModel:
    """Pipeline (optional) followed by classifier (optional)."""

    def __init__(self, pipeline=None, classifier=None):
        if pipeline is None and classifier is None:
            raise InvalidArgumentError("JointModel needs a pipeline or a classifier")
        self.pipeline = pipeline
        self.classifier = classifier

    def parameters(self):
        p = {}
        if self.pipeline is not None:
            p.update({f"lowlevel.{k}": v for k, v in self.pipeline.parameters().items()})
        if self.classifier is not None:
            p.update({f"classifier.{k}": v for k, v in self.classifier.parameters().items()})
        return p

    def load_parameters(self, params):
        if self.pipeline is not None:
            self.pipeline.load_parameters(_strip(params, "lowlevel."))
        if self.classifier is not None:
            self.classifier.load_parameters(_strip(params, "classifier."))

    def restore(self, image, params=None):
        if self.pipeline is None:
            return image
        return hqs.run_pipeline(self.pipeline, image, _strip(params, "lowlevel.") if params is not None else None)

    def logits(self, images, params=None):
        restored = [self.restore(im, params) for im in images]
        batch = ad.stack(restored, axis=0)
        return self.classifier.forward(batch, _strip(params, "classifier.") if params is not None else None)

    # losses take (params, batch) with batch items (degraded, clean, label)

    def mse_loss(self, params, batch):
        terms = [train.mse(self.restore(d, params), c) for d, c, _ in batch]
        return ad.mul(_sum(terms), 1.0 / len(batch))

    def xent_loss(self, params, batch):
        logits = self.logits([d for d, _, _ in batch], params)
        return train.softmax_cross_entropy(logits, np.array([lbl for _, _, lbl in batch]))


def _strip(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def trainable_predicate(groups):
    """``groups`` is an iterable drawn from ``lowlevel`` / ``classifier``."""
    groups = tuple(groups)
    bad = [g for g in groups if g not in GROUPS]
    if bad or not groups:
        raise InvalidArgumentError(f"trainable groups must be drawn from {GROUPS}, got {groups}")
    return lambda name: name.split(".", 1)[0] in groups


def triples(degraded, clean, labels):
    n = len(degraded)
    if len(clean) != n or (labels is not None and len(labels) != n):
        raise InvalidArgumentError("degraded, clean and labels differ in length")
    return [(degraded[i], clean[i], None if labels is None else int(labels[i])) for i in range(n)]


def pretrain(pipeline, degraded, clean, config, on_step=None):
    """MSE pretraining of the low-level pipeline; returns the step history."""
    model = JointModel(pipeline=pipeline)
    data = triples(degraded, clean, None)
    return train.train(model, data, model.mse_loss, config, metric_fn=train.psnr_from_mse, on_step=on_step)


def finetune(pipeline, classifier, degraded, labels, config, groups=GROUPS, clean=None, on_step=None):
    """Cross-entropy fine-tuning of the chosen groups of pipeline + classifier."""
    model = JointModel(pipeline=pipeline, classifier=classifier)
    data = triples(degraded, clean if clean is not None else degraded, labels)
    return train.train(model, data, model.xent_loss, config, trainable=trainable_predicate(groups), on_step=on_step)


def train_classifier(classifier, images, labels, config, on_step=None):
    model = JointModel(classifier=classifier)
    return train.train(model, triples(images, images, labels), model.xent_loss, config, on_step=on_step)


def mean_output_psnr(pipeline, degraded, clean):
    vals = []
    for d, c in zip(degraded, clean):
        out = np.asarray(hqs.run_pipeline(pipeline, d)) if pipeline is not None else d
        vals.append(train.psnr(np.clip(out, 0.0, 1.0), c))
    return train.mean_psnr(vals)


@dataclasses.dataclass
class EvalRow:
    method: str
    top1: float
    psnr: float


def write_rows(path, rows):
    """CSV with method, top1, psnr; floats written with ``repr`` so they reread exactly."""
    with fileio.atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "top1", "psnr"])
            for r in rows:
                w.writerow([r.method, repr(r.top1), "" if r.psnr is None or math.isnan(r.psnr) else repr(r.psnr)])


def read_rows(path):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(EvalRow(row["method"], float(row["top1"]), float(row["psnr"]) if row["psnr"] else math.nan))
    return out


def format_table(rows):
    width = max(len("method"), *(len(r.method) for r in rows))
    lines = [f"{'method':<{width}}  {'top1':>7}  {'psnr_db':>8}"]
    for r in rows:
        p = "" if r.psnr is None or math.isnan(r.psnr) else f"{r.psnr:8.3f}"
        lines.append(f"{r.method:<{width}}  {r.top1:7.4f}  {p:>8}")
    return "\n".join(lines)



# -- toy benchmark protocols -------------------------------------------------------------


@dataclasses.dataclass
class SuiteConfig:
    """Sizes and optimiser settings for the toy benchmark runs."""

    dataset: toy.ToyParams = dataclasses.field(default_factory=toy.ToyParams)
    n_train: int = 2000
    n_val: int = 500
    classifier: train.TrainConfig = dataclasses.field(
        default_factory=lambda: train.TrainConfig(epochs=3, batch_size=16, lr=1e-3, eps=1e-8)
    )
    pretrain: train.TrainConfig = dataclasses.field(
        default_factory=lambda: train.TrainConfig(
            epochs=1, batch_size=4, lr=4.5e-3, eps=1e-8, lr_decay_per_epoch=1.0, max_steps=400
        )
    )
    finetune: train.TrainConfig = dataclasses.field(
        default_factory=lambda: train.TrainConfig(epochs=2, batch_size=16, lr=1e-3, eps=1e-8)
    )

    @classmethod
    def from_dict(cls, doc):
        base = cls()
        fields = {f.name for f in dataclasses.fields(train.TrainConfig)}

        def tc(key):
            d = doc.get(key, {})
            bad = sorted(set(d) - fields)
            if bad:
                raise InvalidArgumentError(f"{key}: unknown keys {bad}")
            return dataclasses.replace(getattr(base, key), **d)

        return cls(
            toy.ToyParams.from_dict(doc.get("dataset", {})),
            int(doc.get("n_train", base.n_train)),
            int(doc.get("n_val", base.n_val)),
            tc("classifier"),
            tc("pretrain"),
            tc("finetune"),
        )


def _seeded(cfg, seed):
    return dataclasses.replace(cfg, seed=seed)


def clean_classifier(suite, train_images, train_labels, seed):
    clf = toy.ToyClassifier.random(suite.dataset.classes, suite.dataset.size, suite.dataset.channels, seed=seed)
    train_classifier(clf, train_images, train_labels, _seeded(suite.classifier, seed))
    return clf


def degradation_rows(classifier, images, labels, noise, psfs, seed):
    """Top-1 of ``classifier`` on clean ``images`` and on captures through each PSF.

    ``psfs`` maps a row label to a Psf; every PSF sees the same noise and
    capture seed.
    """
    rows = [EvalRow("clean", toy.accuracy(classifier, images, labels), math.nan)]
    for name, psf in psfs.items():
        caps = degrade(images, psf, noise, seed)
        rows.append(EvalRow(name, toy.accuracy(classifier, caps, labels), mean_output_psnr(None, caps, images)))
    return rows


def ordering_rows(suite, bench, classifier, pipeline, seed, on_step=None):
    """Train and score the low-light comparison on one benchmark draw.

    ``classifier`` is the clean-trained classifier and ``pipeline`` a fresh
    low-level pipeline; neither is modified. Rows:

    * ``clean_trained``: clean classifier applied to captures.
    * ``classifier_only``: clean classifier fine-tuned on captures.
    * ``pretrained_frozen``: PSNR-pretrained pipeline + clean classifier.
    * ``pretrained_frozen_finetuned``: same pipeline, classifier fine-tuned behind it.
    * ``joint``: pretrained pipeline and clean classifier fine-tuned together.
    """
    vd, vc, vl = bench.val_degraded, bench.val_clean, bench.val_labels
    noisy_psnr = mean_output_psnr(None, vd, vc)
    rows = [EvalRow("clean_trained", toy.accuracy(classifier, vd, vl), noisy_psnr)]

    clf_only = copy.deepcopy(classifier)
    finetune(None, clf_only, bench.train_degraded, bench.train_labels, _seeded(suite.finetune, seed),
             groups=("classifier",), on_step=on_step)
    rows.append(EvalRow("classifier_only", toy.accuracy(clf_only, vd, vl), noisy_psnr))

    pre = copy.deepcopy(pipeline)
    pretrain(pre, bench.train_degraded, bench.train_clean, _seeded(suite.pretrain, seed), on_step=on_step)
    pre_psnr = mean_output_psnr(pre, vd, vc)
    rows.append(EvalRow("pretrained_frozen", toy.accuracy(classifier, vd, vl, pre), pre_psnr))

    behind = copy.deepcopy(classifier)
    finetune(copy.deepcopy(pre), behind, bench.train_degraded, bench.train_labels, _seeded(suite.finetune, seed),
             groups=("classifier",), on_step=on_step)
    rows.append(EvalRow("pretrained_frozen_finetuned", toy.accuracy(behind, vd, vl, pre), pre_psnr))

    jp, jc = copy.deepcopy(pre), copy.deepcopy(classifier)
    finetune(jp, jc, bench.train_degraded, bench.train_labels, _seeded(suite.finetune, seed), on_step=on_step)
    rows.append(EvalRow("joint", toy.accuracy(jc, vd, vl, jp), mean_output_psnr(jp, vd, vc)))
    return rows, {"classifier_only": clf_only, "pretrained": pre, "joint_pipeline": jp, "joint_classifier": jc}
