"""Command-line entry point: ``unrollcam <subcommand> ...``.

Exit codes: 0 success, 1 gradient check failed, 2 usage error,
3 validation or data error, 4 numerical failure.
"""

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from importlib import resources

import numpy as np

from unrollcam import __version__, experiments, fileio, hqs, imaging, toy, train
from unrollcam.config import load_config
from unrollcam.errors import InvalidArgumentError, NumericalError

log = logging.getLogger("unrollcam")

EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4


def shipped(name):
    """Path of a file shipped in the package ``configs`` directory."""
    return str(resources.files("unrollcam") / "configs" / name)


# -- helpers ------------------------------------------------------------------------------


@contextlib.contextmanager
def staged_dir(target):
    """Build a directory's files in a sibling temp dir, move them into ``target`` on success."""
    target = os.path.abspath(target)
    parent = os.path.dirname(target)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-", dir=parent)
    try:
        yield tmp
        os.makedirs(target, exist_ok=True)
        for name in sorted(os.listdir(tmp)):
            os.replace(os.path.join(tmp, name), os.path.join(target, name))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def load_noise(arg):
    """NoiseParams from a JSON file path or an inline JSON object."""
    if arg.lstrip().startswith("{"):
        try:
            return imaging.NoiseParams.from_dict(json.loads(arg))
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"--noise: invalid JSON ({exc})") from None
    return imaging.load_noise_params(arg)


def load_psf_arg(arg):
    if arg is None or arg.lower() == "none":
        return None
    if arg in ("center", "offaxis", "periphery"):
        arg = shipped(f"psf_{arg}.pfm")
    return imaging.load_psf(arg)


def load_pipeline_and_classifier(path):
    """(pipeline or None, classifier or None) from a pipeline, classifier or joint checkpoint."""
    if path is None or path == "none":
        return None, None
    doc = fileio.read_json(path)
    kind = doc.get("kind")
    if kind == "joint":
        pipe = hqs.from_checkpoint(doc["pipeline"]) if doc.get("pipeline") else None
        clf = toy.ToyClassifier.from_checkpoint(doc["classifier"]) if doc.get("classifier") else None
        return pipe, clf
    if kind == "toy_classifier":
        return None, toy.ToyClassifier.from_checkpoint(doc)
    return hqs.from_checkpoint(doc), None


def joint_checkpoint(pipeline, classifier):
    return {
        "format_version": hqs.FORMAT_VERSION,
        "kind": "joint",
        "pipeline": None if pipeline is None else hqs.to_checkpoint(pipeline),
        "classifier": None if classifier is None else classifier.to_checkpoint(),
    }


def reference_dir(data_dir, override):
    """Clean images matching ``data_dir``: explicit override, else the simulate provenance source."""
    if override:
        return override
    prov = os.path.join(data_dir, "provenance.json")
    if os.path.exists(prov):
        src = fileio.read_json(prov).get("source")
        if src and os.path.isdir(src):
            return src
    return None


def training_pairs(args, cfg):
    """(degraded, clean, labels) for pretrain/finetune.

    ``--data`` is either a capture directory written by ``simulate`` (its
    clean source is found through the provenance file or ``--reference``)
    or a clean dataset, which is then degraded with the config's noise/PSF
    and seed.
    """
    data = toy.load_dataset(args.data)
    ref = reference_dir(args.data, args.reference)
    if ref is not None:
        clean = toy.load_dataset(ref)
        if len(clean) != len(data):
            raise InvalidArgumentError("reference and data directories differ in size")
        return data.images, clean.images, data.labels
    psf = cfg.load_psf() or imaging.identity_psf()
    return experiments.degrade(data.images, psf, cfg.noise, cfg.seed), data.images, data.labels


def _progress(every):
    def cb(rec):
        if rec.step % every == 0:
            extra = f" psnr {rec.psnr:.2f}" if not math.isnan(rec.psnr) else ""
            log.info("step %d epoch %d loss %.5g%s lr %.3g", rec.step, rec.epoch, rec.loss, extra, rec.lr)

    return cb


# -- subcommands --------------------------------------------------------------------------


def cmd_datagen(args):
    base = fileio.read_json(args.params) if args.params else {}
    base = dict(base.get("params", base))
    for key in ("classes", "size", "channels"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    params = toy.ToyParams.from_dict(base)
    ds = toy.generate_dataset(params, args.n, seed=args.seed, split=args.split)
    with staged_dir(args.out) as tmp:
        toy.save_dataset(tmp, ds)
    print(f"wrote {len(ds)} images ({params.classes} classes) to {args.out}")


def _image_list(src):
    if os.path.isdir(src):
        labels = os.path.join(src, "labels.csv")
        if os.path.exists(labels):
            with open(labels, newline="") as f:
                names = [row["filename"] for row in csv.DictReader(f)]
        else:
            names = sorted(n for n in os.listdir(src) if n.lower().endswith((".pfm", ".png")))
        if not names:
            raise InvalidArgumentError(f"{src}: no images")
        return [os.path.join(src, n) for n in names]
    if not os.path.exists(src):
        raise InvalidArgumentError(f"{src}: no such file or directory")
    return [src]


def cmd_simulate(args):
    noise = load_noise(args.noise)
    psf = load_psf_arg(args.psf)
    paths = _image_list(args.input)
    rng = imaging.Rng(args.seed)
    with staged_dir(args.out) as tmp:
        for i, path in enumerate(paths):
            img = fileio.read_image(path)
            cap = imaging.simulate_capture(img, psf or imaging.identity_psf(), noise, rng, i)
            name = os.path.splitext(os.path.basename(path))[0] + ".pfm"
            fileio.write_pfm(os.path.join(tmp, name), cap[..., 0] if cap.shape[-1] == 1 else cap)
        if os.path.isdir(args.input):
            for extra in ("labels.csv", "params.json"):
                if os.path.exists(os.path.join(args.input, extra)):
                    shutil.copyfile(os.path.join(args.input, extra), os.path.join(tmp, extra))
        fileio.write_json(
            os.path.join(tmp, "provenance.json"),
            {
                "source": os.path.abspath(args.input),
                "noise": noise.to_dict(),
                "psf": None if psf is None else {"label": psf.label, "kernel": psf.kernel.tolist()},
                "seed": args.seed,
                "files": [os.path.basename(p) for p in paths],
            },
        )
    print(f"simulated {len(paths)} captures into {args.out}")


def cmd_calibrate(args):
    truth = {}
    try:
        with open(args.truth, newline="") as f:
            for row in csv.DictReader(f):
                truth[row["filename"]] = float(row["true_mean"])
    except (KeyError, ValueError) as exc:
        raise InvalidArgumentError(f"{args.truth}: expected columns filename,true_mean ({exc})") from None
    patches = [(m, fileio.read_image(os.path.join(args.patches, name))) for name, m in sorted(truth.items())]
    curve = imaging.fit_noise_curve(patches, weighted=not args.unweighted)
    imaging.save_noise_params(args.out, curve.fitted)
    report = curve.report()
    if args.report:
        fileio.write_json(args.report, report)
    print(f"alpha      {curve.fitted.alpha:.6g}")
    print(f"sigma      {curve.fitted.sigma:.6g}")
    print(f"slope      {curve.slope:.6g}")
    print(f"intercept  {curve.intercept:.6g}")
    print(f"residual   {curve.residual:.6g}")
    if curve.negative_slope:
        print("warning: negative slope, alpha clamped to 0")


def cmd_pretrain(args):
    cfg = load_config(args.config)
    pipe = cfg.build_pipeline()
    degraded, clean, _ = training_pairs(args, cfg)
    before = experiments.mean_output_psnr(None, degraded, clean)
    init = experiments.mean_output_psnr(pipe, degraded, clean)
    history = experiments.pretrain(pipe, degraded, clean, cfg.train_config(), on_step=_progress(args.log_every))
    after = experiments.mean_output_psnr(pipe, degraded, clean)
    fileio.write_json(args.out, hqs.to_checkpoint(pipe))
    if args.history:
        train.write_history(args.history, history)
    rows = [experiments.EvalRow("input", math.nan, before), experiments.EvalRow("initial", math.nan, init),
            experiments.EvalRow("pretrained", math.nan, after)]
    print(_psnr_table(rows))


def _psnr_table(rows):
    width = max(len(r.method) for r in rows)
    lines = [f"{'stage':<{width}}  {'psnr_db':>8}"]
    lines += [f"{r.method:<{width}}  {r.psnr:8.3f}" for r in rows]
    return "\n".join(lines)


def cmd_train_classifier(args):
    data = toy.load_dataset(args.data)
    p = data.params
    clf = toy.ToyClassifier.random(p.classes, p.size, p.channels, seed=args.seed)
    tc = train.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, lr=args.lr, eps=args.eps)
    history = experiments.train_classifier(clf, data.images, data.labels, tc, on_step=_progress(args.log_every))
    fileio.write_json(args.out, clf.to_checkpoint())
    if args.history:
        train.write_history(args.history, history)
    print(f"train top1 {toy.accuracy(clf, data.images, data.labels):.4f}")


def cmd_finetune(args):
    cfg = load_config(args.config)
    groups = tuple(g.strip() for g in args.trainable.split(",") if g.strip()) if args.trainable else cfg.trainable
    pipe, clf_in_model = load_pipeline_and_classifier(args.model)
    _, clf = load_pipeline_and_classifier(args.classifier) if args.classifier else (None, clf_in_model)
    if clf is None:
        raise InvalidArgumentError("finetune needs a classifier (--classifier or a joint --model)")
    if pipe is None and "lowlevel" in groups:
        raise InvalidArgumentError("trainable includes lowlevel but no pipeline model was given")
    degraded, clean, labels = training_pairs(args, cfg)
    history = experiments.finetune(pipe, clf, degraded, labels, cfg.train_config(), groups=groups, clean=clean,
                                   on_step=_progress(args.log_every))
    fileio.write_json(args.out, joint_checkpoint(pipe, clf))
    if args.history:
        train.write_history(args.history, history)
    print(f"fine-tuned {','.join(groups)} for {len(history)} steps -> {args.out}")


def cmd_eval(args):
    pipe, clf_in_model = load_pipeline_and_classifier(args.model)
    clf = load_pipeline_and_classifier(args.classifier)[1] if args.classifier else clf_in_model
    if clf is None:
        raise InvalidArgumentError("eval needs a classifier (--classifier or a joint --model)")
    data = toy.load_dataset(args.data)
    ref_dir = reference_dir(args.data, args.reference)
    clean = toy.load_dataset(ref_dir).images if ref_dir else None

    def row(name, pipeline):
        top1 = toy.accuracy(clf, data.images, data.labels, pipeline)
        psnr = experiments.mean_output_psnr(pipeline, data.images, clean) if clean is not None else math.nan
        return experiments.EvalRow(name, top1, psnr)

    rows = []
    if args.baseline == "identity":
        rows.append(row("identity", hqs.HqsPipeline([], "denoise", imaging.NoiseParams(1.0, 0.0))))
    elif args.baseline == "none" or pipe is None:
        rows.append(row("none", None))
    if pipe is not None:
        rows.append(row("model", pipe))
    print(experiments.format_table(rows))
    if args.csv:
        experiments.write_rows(args.csv, rows)


def cmd_gradcheck(args):
    cfg = load_config(args.config or shipped("default.json"))
    pipe = cfg.build_pipeline()
    rng = np.random.default_rng(cfg.seed)
    s = args.size
    channels = args.channels
    clean = rng.uniform(0.1, 0.9, (s, s, channels))
    psf = cfg.load_psf() or imaging.identity_psf()
    y = imaging.simulate_capture(clean, psf, cfg.noise, imaging.Rng(cfg.seed))
    model = experiments.JointModel(pipeline=pipe)
    if args.classifier:
        model.classifier = toy.ToyClassifier.random(args.classes, s, channels, seed=cfg.seed)

        def loss(p):
            return model.xent_loss(p, [(y, clean, 0)])
    else:

        def loss(p):
            return model.mse_loss(p, [(y, clean, None)])

    report = train.grad_check(model.parameters(), loss, tolerance=args.tol, samples=args.samples, seed=cfg.seed)
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else f"FAIL: {', '.join(report.failures)}")
    return 0 if report.passed else EXIT_FAIL


def _restore_cmd(mode):
    def run(args):
        pipe, _ = load_pipeline_and_classifier(args.model)
        if pipe is None:
            raise InvalidArgumentError(f"{args.model}: no pipeline in checkpoint")
        if pipe.mode != mode:
            raise InvalidArgumentError(f"{args.model} is a {pipe.mode} model, not {mode}")
        img = fileio.read_image(args.input)
        out = np.asarray(hqs.run_pipeline(pipe, img))
        if not np.all(np.isfinite(out)):
            raise NumericalError("reconstruction is not finite", node="run_pipeline")
        out = np.clip(out, 0.0, 1.0)
        fileio.write_image(args.out, out[..., 0] if out.shape[-1] == 1 else out)
        print(f"wrote {args.out}")

    return run


# -- parser ---------------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="unrollcam", description="Unrolled camera-pipeline toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", help="generate the toy texture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--params", help="JSON with ToyParams fields (or a dataset params.json)")
    s.add_argument("--size", type=int)
    s.add_argument("--channels", type=int)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("simulate", help="simulate noisy, blurred captures")
    s.add_argument("--in", dest="input", required=True, help="image file or dataset directory")
    s.add_argument("--noise", required=True, help="NoiseParams JSON file or inline object")
    s.add_argument("--psf", default="none", help="PFM file, center|offaxis|periphery, or none")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate", help="fit alpha, sigma from flat grey patches")
    s.add_argument("--patches", required=True)
    s.add_argument("--truth", required=True, help="CSV with filename,true_mean")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--unweighted", action="store_true", help="plain least squares")
    s.set_defaults(func=cmd_calibrate)

    def training_args(s):
        s.add_argument("--data", required=True, help="captures from simulate, or a clean dataset")
        s.add_argument("--reference", help="clean images matching --data")
        s.add_argument("--history", help="CSV of per-step loss")
        s.add_argument("--log-every", type=int, default=50)

    s = sub.add_parser("pretrain", help="PSNR-pretrain the low-level pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    training_args(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train-classifier", help="train the toy classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--eps", type=float, default=1e-8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--history")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("finetune", help="fine-tune pipeline and/or classifier on the classification loss")
    s.add_argument("--config", required=True)
    s.add_argument("--model", default="none", help="pipeline or joint checkpoint, or none")
    s.add_argument("--classifier")
    s.add_argument("--trainable", help="comma list from lowlevel,classifier (default: config)")
    s.add_argument("--out", required=True)
    training_args(s)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="Top-1 accuracy and mean PSNR")
    s.add_argument("--model", default="none")
    s.add_argument("--classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--reference", help="clean images for PSNR")
    s.add_argument("--baseline", choices=("none", "identity"))
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    s.add_argument("--config")
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--samples", type=int, default=10)
    s.add_argument("--classifier", action="store_true", help="check pipeline + classifier jointly")
    s.add_argument("--classes", type=int, default=8)
    s.set_defaults(func=cmd_gradcheck)

    for mode in ("denoise", "deblur"):
        s = sub.add_parser(mode, help=f"{mode} one image")
        s.add_argument("--model", required=True)
        s.add_argument("--in", dest="input", required=True)
        s.add_argument("--out", required=True)
        s.set_defaults(func=_restore_cmd(mode))
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except NumericalError as exc:
        print(f"unrollcam {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidArgumentError, ValueError, OSError, KeyError) as exc:
        msg = exc.strerror + f": {exc.filename}" if isinstance(exc, OSError) and exc.strerror else str(exc)
        print(f"unrollcam {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
