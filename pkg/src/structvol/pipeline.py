"""End-to-end run: templates -> generator training -> mask deformation ->
traced synthesis -> confidence maps -> segmentation pre-training -> evaluation.

Every stochastic stage draws from a seed derived from the config's root
seed and the item index, so a config fully determines its outputs. All
artifact paths in the run manifest are relative to the output directory.
"""

import copy
import csv
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from structvol import cal, conditioning, diffusion, metrics, mgm, phantoms, rng, ssv
from structvol.svol import write_svol
from structvol.volume import FINE_CLASSES

CONFIG_VERSION = 1
MAX_SEED = 2 ** 64 - 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": "run",
    "templates": {"phantom": {"count": 4, "dims": [16, 16, 16], "noise": 0.05, "n_tubes": 2, "radius": 2.0}},
    "test": {"phantom": {"count": 2, "dims": [16, 16, 16], "noise": 0.05, "n_tubes": 2, "radius": 2.0}},
    "crop": None,
    "fine_classes": list(FINE_CLASSES),
    "codec_factor": 4,
    "latent_channels": 4,
    "schedule": "linear:0.001:0.2:100",
    "skip_interval": 10,
    "denoiser": {"steps": 300, "lr": 0.02, "batch_size": 4},
    "mgm": {
        "fraction": 0.5,
        "ranges": {
            "max_rotation_deg": 10.0,
            "scale": [0.9, 1.1],
            "max_shear": 0.05,
            "max_translation": 2.0,
            "max_alpha": 1.5,
            "zetas": [4, 8],
        },
    },
    "synthesis": {"count": 8},
    "segmenter": {
        "num_classes": 2,
        "radius": 1,
        "epochs_pretrain": 10,
        "epochs_finetune": 5,
        "lr": 4.0,
        "batch_size": 4,
        "use_cal": True,
    },
    "metrics": {"ssim_window": 7, "dilation_radius": 1},
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = errors
        super().__init__("; ".join(f"{e['path']}: {e['message']}" for e in errors))


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def log_event(stage, event, **fields):
    print(json.dumps({"stage": stage, "event": event, **fields}, sort_keys=True), file=sys.stderr, flush=True)


def demo_config():
    with resources.files("structvol").joinpath("data/demo.json").open() as fh:
        return json.load(fh)


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and "phantom" not in v and "manifest" not in v:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path_or_dict):
    """Read a config file (or take a dict) and fill in defaults.

    Relative paths inside the config resolve against the config file's
    directory; the resolved base is kept under ``_base``.
    """
    if isinstance(path_or_dict, dict):
        raw, base = path_or_dict, os.getcwd()
    else:
        with open(path_or_dict) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([{"path": "", "message": f"invalid JSON: {exc}"}]) from None
        base = os.path.dirname(os.path.abspath(path_or_dict))
    if not isinstance(raw, dict):
        raise ConfigError([{"path": "", "message": "config must be a JSON object"}])
    cfg = _merge(DEFAULTS, raw)
    cfg["_base"] = base
    return cfg


def _resolve(cfg, p):
    return p if os.path.isabs(p) else os.path.join(cfg["_base"], p)


def _check_source(cfg, key, errors):
    src = cfg.get(key)
    if not isinstance(src, dict) or ("manifest" in src) == ("phantom" in src):
        errors.append((key, "needs exactly one of 'manifest' or 'phantom'"))
        return
    if "manifest" in src:
        if not os.path.exists(_resolve(cfg, src["manifest"])):
            errors.append((f"{key}.manifest", f"file not found: {src['manifest']}"))
        return
    ph = src["phantom"]
    if not isinstance(ph.get("count"), int) or ph["count"] < 1:
        errors.append((f"{key}.phantom.count", "must be an integer >= 1"))
    dims = ph.get("dims", [])
    if len(dims) != 3 or any(not isinstance(d, int) or d < 1 for d in dims):
        errors.append((f"{key}.phantom.dims", "must be three positive integers"))
        return
    crop = cfg.get("crop")
    size = crop.get("size") if isinstance(crop, dict) else None
    if isinstance(size, list) and len(size) == 3:
        if any(not isinstance(c, int) or c > d for c, d in zip(size, dims)):
            errors.append((f"{key}.phantom.dims", "must be at least crop.size"))
    elif crop is None and isinstance(cfg.get("codec_factor"), int) and cfg["codec_factor"] > 0 and any(
        d % cfg["codec_factor"] for d in dims
    ):
        errors.append((f"{key}.phantom.dims", "must be divisible by codec_factor"))


def check_config(cfg):
    """Schema and range checks; returns a list of ``{"path", "message"}``."""
    errors = []
    if cfg.get("version") != CONFIG_VERSION:
        errors.append(("version", f"must be {CONFIG_VERSION}"))
    seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed <= MAX_SEED:
        errors.append(("seed", "must be an unsigned 64-bit integer"))
    unknown = set(cfg) - set(DEFAULTS) - {"_base"}
    for k in sorted(unknown):
        errors.append((k, "unknown field"))
    _check_source(cfg, "templates", errors)
    _check_source(cfg, "test", errors)
    crop = cfg.get("crop")
    if crop is not None:
        size = crop.get("size") if isinstance(crop, dict) else None
        if not isinstance(size, list) or len(size) != 3 or any(not isinstance(d, int) or d < 1 for d in size):
            errors.append(("crop.size", "must be three positive integers"))
        elif isinstance(cfg.get("codec_factor"), int) and cfg["codec_factor"] > 0 and any(
            d % cfg["codec_factor"] for d in size
        ):
            errors.append(("crop.size", "must be divisible by codec_factor"))
        if isinstance(crop, dict) and crop.get("policy", "centered") not in ("centered", "random"):
            errors.append(("crop.policy", "must be 'centered' or 'random'"))
    if not isinstance(cfg.get("codec_factor"), int) or cfg["codec_factor"] < 1:
        errors.append(("codec_factor", "must be an integer >= 1"))
    if not isinstance(cfg.get("latent_channels"), int) or cfg["latent_channels"] < 1:
        errors.append(("latent_channels", "must be an integer >= 1"))
    fc = cfg.get("fine_classes")
    if not isinstance(fc, list) or not fc or len(set(fc)) != len(fc) or any(
        not isinstance(c, int) or not 1 <= c <= 255 for c in fc
    ):
        errors.append(("fine_classes", "must be a non-empty list of distinct class ids in 1..255"))
    T = None
    try:
        T = diffusion.parse_schedule(cfg.get("schedule", "")).T
    except (ValueError, AttributeError) as exc:
        errors.append(("schedule", str(exc)))
    k = cfg.get("skip_interval")
    if not isinstance(k, int) or k < 1:
        errors.append(("skip_interval", "must be an integer >= 1"))
    elif T is not None and (T - 1) // k < 1:
        errors.append(("skip_interval", f"must leave at least two snapshots for T={T}"))
    den = cfg.get("denoiser", {})
    if not isinstance(den.get("steps"), int) or den["steps"] < 0:
        errors.append(("denoiser.steps", "must be an integer >= 0"))
    if not isinstance(den.get("lr"), (int, float)) or not den["lr"] >= 0:
        errors.append(("denoiser.lr", "must be >= 0"))
    if not isinstance(den.get("batch_size"), int) or den["batch_size"] < 1:
        errors.append(("denoiser.batch_size", "must be an integer >= 1"))
    m = cfg.get("mgm", {})
    if not isinstance(m.get("fraction"), (int, float)) or not 0 <= m["fraction"] <= 1:
        errors.append(("mgm.fraction", "must lie in [0, 1]"))
    try:
        ranges = mgm.DeformationRanges(**m.get("ranges", {}))
        errors += [(f"mgm.ranges.{f}", msg) for f, msg in ranges.validate()]
    except TypeError as exc:
        errors.append(("mgm.ranges", str(exc)))
    n_syn = cfg.get("synthesis", {}).get("count")
    if not isinstance(n_syn, int) or n_syn < 1:
        errors.append(("synthesis.count", "must be an integer >= 1"))
    seg = cfg.get("segmenter", {})
    if not isinstance(seg.get("num_classes"), int) or seg["num_classes"] < 2:
        errors.append(("segmenter.num_classes", "must be an integer >= 2"))
    if not isinstance(seg.get("radius"), int) or seg["radius"] < 0:
        errors.append(("segmenter.radius", "must be an integer >= 0"))
    try:
        tc = _train_config({**cfg, "seed": 0})
        errors += [(f"segmenter.{f}", msg) for f, msg in tc.validate()]
    except (TypeError, KeyError, ValueError) as exc:
        errors.append(("segmenter", str(exc)))
    met = cfg.get("metrics", {})
    w = met.get("ssim_window")
    if not isinstance(w, int) or w < 1 or w % 2 == 0:
        errors.append(("metrics.ssim_window", "must be an odd integer >= 1"))
    if not isinstance(met.get("dilation_radius"), int) or met["dilation_radius"] < 1:
        errors.append(("metrics.dilation_radius", "must be an integer >= 1"))
    return [{"path": p, "message": msg} for p, msg in errors]


def validate_config(path):
    """Load and check a config file; returns ``{"valid": bool, "errors": [...]}``."""
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        return {"valid": False, "errors": exc.errors}
    errors = check_config(cfg)
    return {"valid": not errors, "errors": errors}


def _train_config(cfg):
    s = cfg["segmenter"]
    return cal.TrainConfig(
        epochs_pretrain=s["epochs_pretrain"],
        epochs_finetune=s["epochs_finetune"],
        lr=float(s["lr"]),
        batch_size=s["batch_size"],
        seed=rng.child_seed(cfg["seed"], 40),
        use_cal=bool(s["use_cal"]),
    )


def threads():
    try:
        n = int(os.environ.get("STRUCTVOL_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass
class GeneratorBundle:
    """Everything synthesis needs: schedule, codec, control encoder, denoiser."""

    schedule: str
    codec_factor: int
    latent_channels: int
    fine_classes: list
    encoder: conditioning.ControlEncoder
    denoiser: diffusion.LinearDenoiser

    def codec(self):
        return diffusion.pool_codec(self.codec_factor, self.latent_channels)

    def to_dict(self):
        return {
            "schema_version": 1,
            "schedule": self.schedule,
            "codec_factor": self.codec_factor,
            "latent_channels": self.latent_channels,
            "fine_classes": list(self.fine_classes),
            "encoder": self.encoder.to_dict(),
            "denoiser": self.denoiser.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["schedule"],
            d["codec_factor"],
            d["latent_channels"],
            d["fine_classes"],
            conditioning.ControlEncoder.from_dict(d["encoder"]),
            diffusion.LinearDenoiser.from_dict(d["denoiser"]),
        )

    def save(self, path):
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def synthesize(bundle, ref_mask, template, seed, k):
    """Generate one image for ``ref_mask`` guided by ``template``.

    Returns ``(image, trace)``; the trace holds snapshots every ``k`` steps.
    """
    sched = diffusion.parse_schedule(bundle.schedule)
    codec = bundle.codec()
    c_raw = conditioning.assemble_condition(ref_mask, template, bundle.fine_classes)
    c = conditioning.encode_condition(c_raw, codec.factor, bundle.encoder)
    steps = ssv.skip_schedule(sched.T, k).steps
    state, trace = diffusion.sample(c, bundle.denoiser, codec, sched, seed, trace_steps=steps)
    like = template.image
    image = codec.decode(state, like)
    trace.volumes = [v.replace(intensity_range=like.intensity_range, spacing=like.spacing) for v in trace.volumes]
    return image, trace


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _crop_all(cfg, pairs, seed_tag):
    c = cfg["crop"]
    if not c:
        return pairs
    policy = c.get("policy", "centered")
    return [conditioning.crop_pair(p, c["size"], policy, rng.child_seed(cfg["seed"], 12, seed_tag, i))
            for i, p in enumerate(pairs)]


def _load_source(cfg, key, out_dir, seed_tag, artifacts):
    src = cfg[key]
    if "manifest" in src:
        pairs = list(conditioning.load_library(_resolve(cfg, src["manifest"])).entries)
        return _crop_all(cfg, pairs, seed_tag)
    ph = src["phantom"]
    d = os.path.join(out_dir, "data", key)
    os.makedirs(d, exist_ok=True)
    pairs, records = [], []
    for i in range(ph["count"]):
        s = rng.child_seed(cfg["seed"], seed_tag, i)
        pair = phantoms.phantom_pair(
            tuple(ph["dims"]), s, noise=ph.get("noise", 0.05),
            n_tubes=ph.get("n_tubes", 2), radius=ph.get("radius", 2.0),
        )
        pair = _crop_all(cfg, [pair], seed_tag)[0] if cfg["crop"] else pair
        names = {"image": f"{i:03d}_image.svol", "mask": f"{i:03d}_mask.svol"}
        write_svol(os.path.join(d, names["image"]), pair.image)
        write_svol(os.path.join(d, names["mask"]), pair.mask)
        artifacts += [os.path.join("data", key, n) for n in names.values()]
        records.append(names)
        pairs.append(pair)
    _write_json(os.path.join(d, "manifest.json"), records)
    artifacts.append(os.path.join("data", key, "manifest.json"))
    return pairs


def run_pipeline(config, output_dir=None):
    """Run every stage; returns the run manifest (also written to disk).

    Raises :class:`ConfigError` before any stage runs if the config is
    invalid, and :class:`StageError` naming the failing stage otherwise.
    """
    cfg = load_config(config)
    errors = check_config(cfg)
    if errors:
        raise ConfigError(errors)
    out = os.path.abspath(output_dir or _resolve(cfg, cfg["output_dir"]))
    os.makedirs(out, exist_ok=True)
    artifacts = []
    root = cfg["seed"]
    t_start = time.perf_counter()

    def stage(name, fn):
        log_event(name, "start")
        t0 = time.perf_counter()
        try:
            result = fn()
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            log_event(name, "error", error=f"{type(exc).__name__}: {exc}")
            raise StageError(name, exc) from exc
        log_event(name, "done", seconds=round(time.perf_counter() - t0, 3))
        return result

    library = stage("templates", lambda: _load_source(cfg, "templates", out, 10, artifacts))
    test = stage("test-data", lambda: _load_source(cfg, "test", out, 11, artifacts))
    sched = diffusion.parse_schedule(cfg["schedule"])
    codec = diffusion.pool_codec(cfg["codec_factor"], cfg["latent_channels"])
    fine = cfg["fine_classes"]

    def train_generator():
        data = conditioning.bidirectional_dataset(library, codec, None, fine)
        d = cfg["denoiser"]
        model, hist = diffusion.train_linear_denoiser(
            data, sched, d["steps"], d["lr"], rng.child_seed(root, 20), d["batch_size"]
        )
        c_in = 2 * len(fine) + library[0].image.channels
        bundle = GeneratorBundle(cfg["schedule"], codec.factor, codec.latent_channels, fine,
                                 conditioning.ControlEncoder.identity(c_in), model)
        bundle.save(os.path.join(out, "generator.json"))
        _write_csv(os.path.join(out, "generator_history.csv"), hist)
        artifacts.extend(["generator.json", "generator_history.csv"])
        return bundle

    bundle = stage("train-generator", train_generator)

    ranges = mgm.DeformationRanges(**cfg["mgm"]["ranges"])
    n_syn = cfg["synthesis"]["count"]
    syn_dir = os.path.join(out, "synthetic")
    os.makedirs(syn_dir, exist_ok=True)

    def plan(i):
        g = rng.generator(root, 30, i)
        ref_idx = int(g.integers(len(library)))
        deform = bool(g.random() < cfg["mgm"]["fraction"])
        return ref_idx, deform

    def make_masks():
        masks, topo = [], {}
        for i in range(n_syn):
            ref_idx, deform = plan(i)
            ref = library[ref_idx].mask
            if deform:
                s = rng.child_seed(root, 31, i)
                ap, nrp = mgm.sample_params(ranges, s)
                m = mgm.generate_mask(ref, ap, nrp, s)
                topo[f"syn_{i:03d}"] = mgm.topology_report(ref, m)
            else:
                m = ref
            masks.append(m)
        _write_json(os.path.join(syn_dir, "topology.json"), topo)
        artifacts.append(os.path.join("synthetic", "topology.json"))
        return masks

    masks = stage("mgm", make_masks)

    def synth_one(i):
        tmpl = conditioning.sample_template(conditioning.TemplateLibrary(library), rng.child_seed(root, 32, i))
        seed = rng.child_seed(root, 33, i)
        image, trace = synthesize(bundle, masks[i], tmpl, seed, cfg["skip_interval"])
        cmap = ssv.confidence_map(trace)
        entry = ssv.attach_confidence(masks[i], image, cmap)
        return ssv.save_entry(entry, syn_dir, f"syn_{i:03d}", seed, cfg["schedule"], cfg["skip_interval"]), entry

    def run_synthesis():
        with ThreadPoolExecutor(max_workers=threads()) as pool:
            results = list(pool.map(synth_one, range(n_syn)))
        records = [r for r, _ in results]
        for r in records:
            artifacts.extend(os.path.join("synthetic", r[m]) for m in ("mask", "image", "cmap"))
        ssv.write_manifest(os.path.join(syn_dir, "manifest.json"), records)
        artifacts.append(os.path.join("synthetic", "manifest.json"))
        return [e for _, e in results]

    corpus = stage("synth+ssv", run_synthesis)

    def train_segmenter():
        k = cfg["segmenter"]["num_classes"]
        for name, items in (("synthetic", corpus), ("templates", library)):
            if any(int(e.mask.labels.max()) >= k for e in items):
                raise ValueError(f"{name} labels exceed segmenter.num_classes={k}")
        seg0 = cal.make_reference_segmenter(k, cfg["segmenter"]["radius"], seed=rng.child_seed(root, 41))
        seg, hist = cal.pretrain_finetune(seg0, corpus, library, _train_config(cfg))
        seg.save(os.path.join(out, "model.json"))
        _write_csv(os.path.join(out, "history.csv"), hist)
        artifacts.extend(["model.json", "history.csv"])
        return seg

    seg = stage("train-seg", train_segmenter)

    def evaluate():
        met = cfg["metrics"]
        seg_rows = []
        for i, pair in enumerate(test):
            pred = seg.segment(pair.image)
            res = metrics.evaluate(pred, pair.mask.labels, ("dice", "rdice"),
                                   dilation_radius=met["dilation_radius"])
            seg_rows.append({"case": i, **res})
        img_rows = []
        scfg = metrics.SsimConfig(window=met["ssim_window"])
        for i in range(n_syn):
            ref_idx, deform = plan(i)
            if deform:
                continue
            real = library[ref_idx].image
            img_rows.append({
                "entry": f"syn_{i:03d}",
                "ssim": metrics.ssim(corpus[i].image, real, scfg) if min(real.dims) >= scfg.window else None,
                "rmse": metrics.rmse(corpus[i].image, real),
            })
        report = {
            "segmentation": seg_rows,
            "mean_dice": float(np.mean([r["dice"] for r in seg_rows])),
            "mean_rdice": float(np.mean([r["rdice"] for r in seg_rows])),
            "synthesis": img_rows,
            "fid": "unavailable",
            "lpips": "unavailable",
        }
        _write_json(os.path.join(out, "report.json"), report)
        artifacts.append("report.json")
        return report

    report = stage("eval", evaluate)

    public_cfg = {k: v for k, v in cfg.items() if not k.startswith("_") and k != "output_dir"}
    manifest = {
        "config": public_cfg,
        "seeds": {"root": root},
        "artifacts": [{"path": p.replace(os.sep, "/"), "sha256": _sha256(os.path.join(out, p))}
                      for p in sorted(set(artifacts))],
        "summary": {"mean_dice": report["mean_dice"], "mean_rdice": report["mean_rdice"]},
    }
    if len(set(artifacts)) != len(artifacts):
        raise StageError("manifest", "an artifact path was written twice")
    _write_json(os.path.join(out, "run_manifest.json"), manifest)
    log_event("pipeline", "done", seconds=round(time.perf_counter() - t_start, 3), output_dir=out)
    return manifest


def _write_csv(path, history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(history):
        w.writerow([i, repr(float(v))])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def manifest_hash(path):
    return _sha256(path)


__all__ = [
    "ConfigError",
    "DEFAULTS",
    "GeneratorBundle",
    "StageError",
    "check_config",
    "demo_config",
    "load_config",
    "run_pipeline",
    "synthesize",
    "validate_config",
]
