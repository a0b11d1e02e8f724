"""JSON run configuration for pretraining, fine-tuning and gradient checks.

Schema (all keys optional except ``mode``)::

    {
      "version": 1,
      "mode": "denoise" | "deblur",
      "stages": 1,
      "filters": {"count": 24, "size": 5},
      "prox": {"layers": 3, "channels": 24},
      "merge_colors": null,
      "noise": {"alpha": 0.01, "sigma": 0.01},
      "psf_path": null,
      "optimizer": {"lr": 4.5e-3, "decay": 0.9, "eps": 1.0, "lr_decay_per_epoch": 0.94, "acc_init": 1.0},
      "epochs": 2,
      "batch_size": 4,
      "max_steps": null,
      "seed": 0,
      "trainable": ["lowlevel", "classifier"]
    }

``psf_path`` is resolved relative to the config file.
"""

import dataclasses
import os

from unrollcam import hqs, train
from unrollcam.errors import InvalidArgumentError
from unrollcam.fileio import read_json
from unrollcam.imaging import NoiseParams, load_psf

CONFIG_VERSION = 1


@dataclasses.dataclass
class RunConfig:
    mode: str = "denoise"
    stages: int = 1
    filter_count: int = 24
    filter_size: int = 5
    prox_layers: int = 3
    prox_channels: int = 24
    merge_colors: bool = None
    noise: NoiseParams = dataclasses.field(default_factory=lambda: NoiseParams(0.01, 0.01))
    psf_path: str = None
    optimizer: dict = dataclasses.field(default_factory=dict)
    epochs: int = 2
    batch_size: int = 4
    max_steps: int = None
    seed: int = 0
    trainable: tuple = ("lowlevel", "classifier")

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        if not isinstance(doc, dict):
            raise InvalidArgumentError("config must be a JSON object")
        version = doc.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise InvalidArgumentError(f"unsupported config version {version}")
        known = {"version", "mode", "stages", "filters", "prox", "merge_colors", "noise", "psf_path",
                 "optimizer", "epochs", "batch_size", "max_steps", "seed", "trainable", "description"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {', '.join(unknown)}")
        try:
            filters = doc.get("filters", {})
            prox = doc.get("prox", {})
            opt = dict(doc.get("optimizer", {}))
            bad = sorted(set(opt) - {"lr", "decay", "eps", "lr_decay_per_epoch", "acc_init"})
            if bad:
                raise InvalidArgumentError(f"unknown optimizer keys: {', '.join(bad)}")
            psf_path = doc.get("psf_path")
            if psf_path is not None and not os.path.isabs(psf_path):
                psf_path = os.path.join(base_dir, psf_path)
            cfg = cls(
                mode=doc.get("mode", "denoise"),
                stages=int(doc.get("stages", 1)),
                filter_count=int(filters.get("count", 24)),
                filter_size=int(filters.get("size", 5)),
                prox_layers=int(prox.get("layers", 3)),
                prox_channels=int(prox.get("channels", 24)),
                merge_colors=doc.get("merge_colors"),
                noise=NoiseParams.from_dict(doc.get("noise", {"alpha": 0.01, "sigma": 0.01})),
                psf_path=psf_path,
                optimizer={k: float(v) for k, v in opt.items()},
                epochs=int(doc.get("epochs", 2)),
                batch_size=int(doc.get("batch_size", 4)),
                max_steps=None if doc.get("max_steps") is None else int(doc["max_steps"]),
                seed=int(doc.get("seed", 0)),
                trainable=tuple(doc.get("trainable", ("lowlevel", "classifier"))),
            )
        except (TypeError, KeyError, AttributeError) as exc:
            raise InvalidArgumentError(f"malformed config: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self):
        if self.mode not in ("denoise", "deblur"):
            raise InvalidArgumentError(f"mode must be denoise or deblur, got {self.mode!r}")
        if self.stages < 0 or self.filter_count < 0 or self.prox_layers < 1 or self.prox_channels < 1:
            raise InvalidArgumentError("stages/filters/prox sizes out of range")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidArgumentError("epochs must be >= 0 and batch_size >= 1")
        if self.mode == "deblur" and self.psf_path is None:
            raise InvalidArgumentError("deblur mode needs psf_path")
        if not set(self.trainable) <= {"lowlevel", "classifier"} or not self.trainable:
            raise InvalidArgumentError("trainable must be a non-empty subset of lowlevel, classifier")

    def load_psf(self):
        return load_psf(self.psf_path) if self.psf_path else None

    def build_pipeline(self):
        return hqs.HqsPipeline.default(
            self.mode, self.noise, self.load_psf(), stages=self.stages, filters=self.filter_count,
            filter_size=self.filter_size, prox_layers=self.prox_layers, prox_channels=self.prox_channels,
            merge_colors=self.merge_colors, seed=self.seed,
        )

    def train_config(self):
        opt = train.RMSProp(**self.optimizer)
        return train.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, lr=opt.lr, decay=opt.decay,
            eps=opt.eps, lr_decay_per_epoch=opt.lr_decay_per_epoch, max_steps=self.max_steps, acc_init=opt.acc_init,
        )


def load_config(path):
    return RunConfig.from_dict(read_json(path), base_dir=os.path.dirname(os.path.abspath(path)))
