"""Command-line entry point: ``structvol <subcommand> ...``.

Exit codes: 0 on success, 2 for invalid arguments or configuration,
3 when a stage fails while running.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from structvol import cal, conditioning, diffusion, metrics, mgm, pipeline, ssv
from structvol.errors import FormatError, TrainingDiverged
from structvol.svol import read_svol, write_svol
from structvol.volume import FINE_CLASSES, LabelVolume, Volume, crop

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


class UsageError(Exception):
    """Bad flag values that argparse itself cannot catch."""


def _floats(text, n=3):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _crop_size(text):
    vals = _ints(text)
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected D,H,W positive integers, got {text!r}")
    return tuple(vals)


def _seed(text):
    v = int(text)
    if not 0 <= v <= pipeline.MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _onoff(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _trace(text):
    key, _, val = text.partition("=")
    if key != "k" or not val.isdigit() or int(val) < 1:
        raise argparse.ArgumentTypeError(f"expected k=N with N >= 1, got {text!r}")
    return int(val)


def _write_json(path, obj):
    if path in (None, "-"):
        json.dump(obj, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_label(path, what):
    v = read_svol(path)
    if not isinstance(v, LabelVolume):
        raise UsageError(f"{what} {path} is not a label volume")
    return v


def cmd_mgm(args):
    mask = _read_label(args.input, "--in")
    explicit = any(x is not None for x in (args.rot, args.scale, args.shear, args.trans, args.alpha))
    if explicit:
        ap = mgm.AffineParams(
            rotation=tuple(np.deg2rad(args.rot or (0.0, 0.0, 0.0))),
            scale=args.scale or (1.0, 1.0, 1.0),
            shear=args.shear or (0.0, 0.0, 0.0),
            translation=args.trans or (0.0, 0.0, 0.0),
        )
        nrp = mgm.NonRigidParams(args.alpha or 0.0, args.zeta)
    else:
        ap, nrp = mgm.sample_params(mgm.DeformationRanges(), args.seed)
    if any(s <= 0 for s in ap.scale):
        raise UsageError("--scale factors must be positive")
    if nrp.alpha < 0 or nrp.zeta < 2:
        raise UsageError("--alpha must be >= 0 and --zeta >= 2")
    out = mgm.generate_mask(mask, ap, nrp, args.seed, closing=not args.no_closing)
    write_svol(args.out, out)
    if args.report:
        rep = mgm.topology_report(mask, out)
        rep["params"] = {
            "rotation_rad": list(ap.rotation), "scale": list(ap.scale), "shear": list(ap.shear),
            "translation": list(ap.translation), "alpha": nrp.alpha, "zeta": nrp.zeta, "seed": args.seed,
        }
        _write_json(args.report, rep)


def cmd_pair(args):
    lib = conditioning.load_library(args.manifest)
    if args.list_pairs:
        pairs = conditioning.enumerate_bidirectional_pairs(len(lib))
        _write_json(args.out if args.out and args.out.endswith(".json") else None,
                    {"count": len(pairs), "pairs": [{"template": a, "reference": b} for a, b in pairs]})
        return
    if args.reference is None or args.template is None or args.out is None:
        raise UsageError("building a condition needs --reference, --template and --out")
    if not 0 <= args.template < len(lib):
        raise UsageError(f"--template must index the library (0..{len(lib) - 1})")
    ref = _read_label(args.reference, "--reference")
    tmpl = lib[args.template]
    if args.crop:
        ref = crop(ref, args.crop, args.crop_policy, args.seed)
        tmpl = conditioning.crop_pair(tmpl, args.crop, args.crop_policy, args.seed)
    raw = conditioning.assemble_condition(ref, tmpl, args.classes or FINE_CLASSES)
    tmpl_img = tmpl.image
    write_svol(args.out, Volume(raw.values, tmpl_img.spacing))


def cmd_synth(args):
    cond = read_svol(args.cond)
    if not isinstance(cond, Volume):
        raise UsageError(f"--cond {args.cond} is not a real-valued volume")
    if args.generator:
        bundle = pipeline.GeneratorBundle.load(args.generator)
        text = args.schedule or bundle.schedule
        codec, encoder = bundle.codec(), bundle.encoder
        sched = diffusion.parse_schedule(text)
        den = bundle.denoiser
        if den.T != sched.T:
            raise UsageError(f"generator was trained for T={den.T}, schedule has T={sched.T}")
    else:
        sched = diffusion.parse_schedule(args.schedule or "linear:0.0001:0.02:1000")
        codec = diffusion.pool_codec(args.codec_factor, args.latent_channels)
        encoder = None
        den = diffusion.analytic_gauss_denoiser(args.mu, args.sigma, sched)
    c = conditioning.encode_condition(cond.values, codec.factor, encoder)
    steps = ssv.skip_schedule(sched.T, args.trace).steps if args.trace else ()
    state, trace = diffusion.sample(c, den, codec, sched, args.seed, trace_steps=steps)
    like = Volume(cond.channel(cond.channels - 1)[None], cond.spacing)
    write_svol(args.out, codec.decode(state, like))
    if args.trace_out:
        if not args.trace:
            raise UsageError("--trace-out needs --trace k=N")
        os.makedirs(args.trace_out, exist_ok=True)
        for s, v in zip(trace.steps, trace.volumes):
            write_svol(os.path.join(args.trace_out, f"step_{s:06d}.svol"), v.replace(spacing=cond.spacing))


def cmd_ssv(args):
    trace = ssv.load_trace_dir(args.trace_dir)
    write_svol(args.out, ssv.confidence_map(trace))


def _check_labels(entries, k, what):
    for i, e in enumerate(entries):
        top = int(e.mask.labels.max())
        if top >= k:
            raise UsageError(f"{what} entry {i} has label {top}, not below --num-classes {k}")


def cmd_train_seg(args):
    corpus = ssv.load_corpus(args.corpus)
    real = list(conditioning.load_library(args.real).entries) if args.real else []
    _check_labels(corpus, args.num_classes, "--corpus")
    _check_labels(real, args.num_classes, "--real")
    cfg = cal.TrainConfig(args.epochs_pre, args.epochs_fine, args.lr, args.batch, args.seed, args.cal)
    problems = cfg.validate()
    if problems:
        raise UsageError("; ".join(f"{f}: {m}" for f, m in problems))
    seg = cal.make_reference_segmenter(args.num_classes, args.radius, seed=args.seed)
    if real:
        seg, hist = cal.pretrain_finetune(seg, corpus, real, cfg)
    else:
        seg, hist = cal.train(seg, corpus, cfg, cfg.use_cal)
    seg.save(args.out)
    if args.history:
        with open(args.history, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(hist):
                w.writerow([i, repr(float(v))])


def cmd_eval(args):
    pred, gt = read_svol(args.pred), read_svol(args.gt)
    names = [n.strip().lower() for n in args.metrics.split(",") if n.strip()]
    unknown = [n for n in names if n not in metrics.METRICS + metrics.UNAVAILABLE]
    if unknown:
        raise UsageError(f"unknown metrics: {', '.join(unknown)}")
    cfg = metrics.SsimConfig(window=args.ssim_window, data_range=args.data_range)
    res = metrics.evaluate(pred, gt, names, cfg, args.dilation_radius)
    _write_json(args.out, res)


def cmd_demo(args):
    cfg = args.config or pipeline.demo_config()
    pipeline.run_pipeline(cfg, args.out)


def cmd_validate(args):
    report = pipeline.validate_config(args.config)
    _write_json(None, report)
    return EXIT_OK if report["valid"] else EXIT_CONFIG


def build_parser():
    p = argparse.ArgumentParser(prog="structvol", description="Structure-aware volumetric synthesis toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mgm", help="deform the fine-grained classes of a label mask")
    s.add_argument("--in", dest="input", required=True, help="input label volume (.svol)")
    s.add_argument("--out", required=True, help="output label volume")
    s.add_argument("--seed", type=_seed, default=0, help="seed for sampled parameters and the non-rigid field")
    s.add_argument("--rot", type=_floats, help="rotation angles in degrees about axes 0,1,2")
    s.add_argument("--scale", type=_floats, help="scale factors per axis (one value applies to all)")
    s.add_argument("--shear", type=_floats, help="shear coefficients s0,s1,s2")
    s.add_argument("--trans", type=_floats, help="translation in voxels per axis")
    s.add_argument("--alpha", type=float, help="max non-rigid displacement in voxels")
    s.add_argument("--zeta", type=int, default=4, help="control-grid spacing in voxels (default 4)")
    s.add_argument("--no-closing", action="store_true", help="skip the per-class closing step")
    s.add_argument("--report", help="write per-class component counts to this JSON file")
    s.set_defaults(func=cmd_mgm)

    s = sub.add_parser("pair", help="list template pairings or build a generation condition")
    s.add_argument("--manifest", required=True, help="template library manifest (JSON list of {image, mask})")
    s.add_argument("--list-pairs", action="store_true", help="print every ordered (template, reference) pair")
    s.add_argument("--reference", help="reference label volume")
    s.add_argument("--template", type=int, help="library index of the template pair")
    s.add_argument("--classes", type=_ints, help="fine-grained classes (default 1..8)")
    s.add_argument("--crop", type=_crop_size, help="crop reference and template to D,H,W before pairing")
    s.add_argument("--crop-policy", choices=("centered", "random"), default="centered",
                   help="crop placement (default centered)")
    s.add_argument("--seed", type=_seed, default=0, help="seed for random crop offsets")
    s.add_argument("--out", help="condition volume to write (or .json for --list-pairs)")
    s.set_defaults(func=cmd_pair)

    s = sub.add_parser("synth", help="sample an image from a condition volume")
    s.add_argument("--cond", required=True, help="condition volume from 'structvol pair'")
    s.add_argument("--generator", help="generator.json from a pipeline run; without it an analytic Gaussian prior is used")
    s.add_argument("--schedule", help="noise schedule, linear:START:END:T or constant:BETA:T")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--trace", type=_trace, help="record decoded snapshots every k steps, as k=N")
    s.add_argument("--out", required=True, help="synthesized image (.svol)")
    s.add_argument("--trace-out", help="directory for step_*.svol snapshots")
    s.add_argument("--mu", type=float, default=0.0, help="prior mean without --generator")
    s.add_argument("--sigma", type=float, default=1.0, help="prior std without --generator")
    s.add_argument("--codec-factor", type=int, default=4, help="pooling factor without --generator")
    s.add_argument("--latent-channels", type=int, default=4, help="latent channels without --generator")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ssv", help="confidence map from a directory of trace snapshots")
    s.add_argument("--trace-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ssv)

    s = sub.add_parser("train-seg", help="train the reference segmenter")
    s.add_argument("--corpus", required=True, help="synthetic corpus manifest")
    s.add_argument("--cal", type=_onoff, default=True, help="confidence weighting on|off (default on)")
    s.add_argument("--epochs-pre", type=int, default=20)
    s.add_argument("--epochs-fine", type=int, default=10)
    s.add_argument("--real", help="real-pair manifest for fine-tuning")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--lr", type=float, default=0.5)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--num-classes", type=int, default=2)
    s.add_argument("--radius", type=int, default=1, help="neighbourhood radius of the mean-intensity feature")
    s.add_argument("--out", required=True, help="model JSON")
    s.add_argument("--history", help="per-step loss CSV")
    s.set_defaults(func=cmd_train_seg)

    s = sub.add_parser("eval", help="compare a prediction with ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metrics", default="ssim,rmse,dice,rdice", help="comma-separated; fid/lpips report 'unavailable'")
    s.add_argument("--ssim-window", type=int, default=7)
    s.add_argument("--data-range", type=float, help="SSIM dynamic range (default: the prediction's declared range)")
    s.add_argument("--dilation-radius", type=int, default=1)
    s.add_argument("--out", help="report JSON (default stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("demo", help="run the whole pipeline")
    s.add_argument("--config", help="pipeline config JSON (default: the bundled demo)")
    s.add_argument("--out", help="output directory (default: the config's output_dir)")
    s.set_defaults(func=cmd_demo)

    s = sub.add_parser("validate", help="check a pipeline config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        code = args.func(args)
    except pipeline.ConfigError as exc:
        for e in exc.errors:
            print(json.dumps({"stage": "config", "event": "error", **e}), file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, FileNotFoundError) as exc:
        print(f"structvol {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.StageError as exc:
        print(f"structvol {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (FormatError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"structvol {args.command}: stage {args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
