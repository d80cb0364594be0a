"""Command-line interface: synth, train, infer, metrics, count, erf,
blurprobe, selftest.

Every command takes an optional JSON config (--config) whose keys mirror the
command's flags in snake_case; flags override file values; unknown keys are
rejected.  Each run writes the fully resolved configuration next to its
outputs so any result can be reproduced from the files alone.

Exit codes: 0 success, 1 internal error, 2 bad input, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

log = logging.getLogger(__name__)


class CLIError(Exception):
    def __init__(self, message, exit_code=2):
        super().__init__(message)
        self.exit_code = exit_code


# ---------------------------------------------------------------------------
# option tables: key -> (parser, default, help)

def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _str(v):
    return str(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split(","))


def _floats(v):
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).split(","))


MODEL_KEYS = {
    "variant": (_str, "lka_e", "model variant: lka_e | lka_ed | plain_unet"),
    "in_channels": (_int, None, "input channels (default: derived from data)"),
    "num_classes": (_int, 2, "output classes"),
    "stage_channels": (_ints, (32, 64, 128, 256, 320, 320), "encoder widths"),
    "stage_repeats": (_ints, (1, 1, 1, 1, 2, 1), "blocks per stage"),
    "ffn_expansion": (_float, 12.0, "ConvFF hidden-width multiplier"),
    "layer_scale_init": (_float, 1e-2, "residual branch scale init"),
    "model_seed": (_int, 0, "weight init seed"),
}

WINDOW_KEYS = {
    "window_size": (_ints, (128, 128, 128), "sliding-window size"),
    "overlap": (_float, 0.5, "fractional window overlap"),
    "sigma_scale": (_float, 0.125, "Gaussian width / window size"),
}

TRAIN_KEYS = {
    "lr": (_float, None, "learning rate (default 1e-4, plain_unet 2e-4)"),
    "clip_norm": (_float, None, "gradient clip (default 1.0, plain_unet 12.0)"),
    "batch_size": (_int, 2, "cases per step"),
    "epochs": (_int, 1, "passes over the dataset"),
    "beta1": (_float, 0.9, "Adam beta1"),
    "beta2": (_float, 0.999, "Adam beta2"),
    "eps": (_float, 1e-8, "Adam epsilon"),
    "seed": (_int, 0, "shuffle/crop seed"),
    "crop_size": (_ints, (32, 32, 32), "training crop"),
    "flips": (_bool, True, "random axis flips on crops"),
    "include_background": (_bool, True, "background class in the Dice term"),
    "max_steps": (_int, None, "stop after this many steps"),
}

SYNTH_KEYS = {
    "out_dir": (_str, None, "output directory (required)"),
    "count": (_int, 8, "number of cases"),
    "shape": (_ints, (48, 48, 48), "volume shape"),
    "lesion_count_range": (_ints, (1, 4), "min,max lesions per case"),
    "radius_range_vox": (_floats, (2.0, 4.0), "lesion radius range (voxels)"),
    "intensity_contrast": (_float, 0.35, "lesion brightness offset"),
    "noise_sigma": (_float, 0.05, "additive noise level"),
    "seed": (_int, 0, "base seed; case i uses seed+i"),
}

COMMANDS = {}


def _command(name, keys, required=()):
    def wrap(fn):
        COMMANDS[name] = (fn, keys, tuple(required))
        return fn
    return wrap


def resolve_config(keys, config_path, flag_values):
    """defaults <- JSON file <- explicit flags; unknown JSON keys rejected."""
    cfg = {k: default for k, (_, default, _) in keys.items()}
    if config_path:
        try:
            with open(config_path) as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {config_path}: {exc}")
        if not isinstance(loaded, dict):
            raise CLIError(f"config {config_path} must hold a JSON object")
        for key, value in loaded.items():
            if key not in keys:
                raise CLIError(f"unknown config key {key!r} (known: {sorted(keys)})")
            parser = keys[key][0]
            try:
                cfg[key] = None if value is None else parser(value)
            except (TypeError, ValueError) as exc:
                raise CLIError(f"bad value for {key!r}: {exc}")
    for key, value in flag_values.items():
        if value is not None:
            cfg[key] = value
    return cfg


def write_resolved(cfg, out_dir, command):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{command}_config.json")
    serializable = {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in cfg.items()}
    with open(path, "w") as f:
        json.dump(serializable, f, indent=2, sort_keys=True)
        f.write("\n")


def _require_keys(cfg, names):
    for name in names:
        if cfg.get(name) is None:
            raise CLIError(f"--{name.replace('_', '-')} is required")


def _threads(cfg):
    if cfg.get("threads") is not None:
        return max(1, cfg["threads"])
    env = os.environ.get("LKA3D_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise CLIError(f"bad LKA3D_THREADS value {env!r}")
    return os.cpu_count() or 1


def _case_id(filename):
    base = os.path.basename(filename)
    for suffix in ("_img.rvf", "_lbl.rvf", ".nii.gz", ".nii", ".rvf"):
        if base.endswith(suffix):
            return base[: -len(suffix)]
    return os.path.splitext(base)[0]


def _read_volume(path):
    from .pipeline import read_nifti, read_rvf
    if path.endswith((".nii", ".nii.gz")):
        return read_nifti(path)
    return read_rvf(path)


def _scan_images(path):
    """(case_id, image_path) pairs from a directory or a single file."""
    if os.path.isfile(path):
        return [(_case_id(path), path)]
    if not os.path.isdir(path):
        raise CLIError(f"no such file or directory: {path}")
    out = []
    for name in sorted(os.listdir(path)):
        if name.endswith("_img.rvf") or name.endswith((".nii", ".nii.gz")):
            out.append((_case_id(name), os.path.join(path, name)))
    if not out:
        raise CLIError(f"no input volumes (*_img.rvf, *.nii[.gz]) in {path}")
    return out


def _load_dataset(path, preprocess):
    """(preprocessed image, labels) pairs from a synth-layout directory."""
    from .pipeline import preprocess_case
    cases = []
    for case_id, img_path in _scan_images(path):
        lbl_path = os.path.join(os.path.dirname(img_path), f"{case_id}_lbl.rvf")
        if not os.path.exists(lbl_path):
            raise CLIError(f"missing labels for {case_id}: {lbl_path}")
        img = _read_volume(img_path)
        if preprocess:
            img = preprocess_case(img)
        cases.append((case_id, img, _read_volume(lbl_path)))
    return cases


def _model_config(cfg, in_channels):
    from .network import ModelConfig
    try:
        return ModelConfig(variant=cfg["variant"],
                           in_channels=in_channels,
                           num_classes=cfg["num_classes"],
                           stage_channels=cfg["stage_channels"],
                           stage_repeats=cfg["stage_repeats"],
                           ffn_expansion=cfg["ffn_expansion"],
                           layer_scale_init=cfg["layer_scale_init"])
    except ValueError as exc:
        raise CLIError(str(exc))


def _window_spec(cfg):
    from .inference import WindowSpec
    try:
        return WindowSpec(size=cfg["window_size"], overlap=cfg["overlap"],
                          sigma_scale=cfg["sigma_scale"])
    except ValueError as exc:
        raise CLIError(str(exc))


def _load_checkpoint(path):
    from .network import load_checkpoint
    if not os.path.exists(path):
        raise CLIError(f"no such checkpoint: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, OSError) as exc:
        raise CLIError(f"cannot load checkpoint {path}: {exc}")


# ---------------------------------------------------------------------------
# commands

@_command("synth", SYNTH_KEYS, required=("out_dir",))
def cmd_synth(cfg):
    """Generate a synthetic dataset: image/label RVF pairs plus a manifest."""
    from .pipeline import SyntheticSpec, write_rvf
    try:
        spec = SyntheticSpec(shape=cfg["shape"],
                             lesion_count_range=cfg["lesion_count_range"],
                             radius_range_vox=cfg["radius_range_vox"],
                             intensity_contrast=cfg["intensity_contrast"],
                             noise_sigma=cfg["noise_sigma"],
                             seed=cfg["seed"])
    except ValueError as exc:
        raise CLIError(str(exc))
    if cfg["count"] < 0:
        raise CLIError("count must be >= 0")
    from .pipeline import synth_case
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    case_ids = []
    for i in range(cfg["count"]):
        img, lbl = synth_case(dataclasses.replace(spec, seed=cfg["seed"] + i))
        case_id = f"case_{i:04d}"
        write_rvf(img, os.path.join(out_dir, f"{case_id}_img.rvf"))
        write_rvf(lbl, os.path.join(out_dir, f"{case_id}_lbl.rvf"))
        case_ids.append(case_id)
    manifest = {"count": len(case_ids), "cases": case_ids,
                "spec": {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in dataclasses.asdict(spec).items()}}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    write_resolved(cfg, out_dir, "synth")
    print(f"wrote {len(case_ids)} cases to {out_dir}")
    return 0


TRAIN_CMD_KEYS = {
    **MODEL_KEYS, **TRAIN_KEYS,
    "data": (_str, None, "dataset directory (required)"),
    "out_dir": (_str, None, "output directory (required)"),
    "resume": (_str, None, "checkpoint to continue from"),
    "preprocess": (_bool, True, "normalize + append foreground mask"),
}


@_command("train", TRAIN_CMD_KEYS, required=("data", "out_dir"))
def cmd_train(cfg):
    """Train a model; writes checkpoints, the loss curve, and the config."""
    from .network import build
    from .training import Adam, TrainConfig, TrainingDivergedError, train
    cases = _load_dataset(cfg["data"], cfg["preprocess"])
    dataset = [(img, lbl) for _, img, lbl in cases]
    data_channels = dataset[0][0].channels
    if cfg["lr"] is None:
        cfg["lr"] = 2e-4 if cfg["variant"] == "plain_unet" else 1e-4
    if cfg["clip_norm"] is None:
        cfg["clip_norm"] = 12.0 if cfg["variant"] == "plain_unet" else 1.0
    start_step = start_epoch = 0
    optimizer = None
    if cfg["resume"]:
        model, extra, arrays = _load_checkpoint(cfg["resume"])
        if model.config.in_channels != data_channels:
            raise CLIError(f"checkpoint expects {model.config.in_channels} input "
                           f"channels, dataset has {data_channels}")
        start_step = int(extra.get("step", 0))
        start_epoch = int(extra.get("epoch", 0))
    else:
        if cfg["in_channels"] is not None and cfg["in_channels"] != data_channels:
            raise CLIError(f"--in-channels {cfg['in_channels']} but dataset "
                           f"volumes have {data_channels} channels")
        cfg["in_channels"] = data_channels
        model = build(_model_config(cfg, data_channels), seed=cfg["model_seed"])
    try:
        tc = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"],
                         epochs=cfg["epochs"], clip_norm=cfg["clip_norm"],
                         beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"],
                         seed=cfg["seed"], crop_size=cfg["crop_size"],
                         flips=cfg["flips"],
                         include_background=cfg["include_background"])
    except ValueError as exc:
        raise CLIError(str(exc))
    if cfg["resume"]:
        optimizer = Adam(model.parameters(), tc.lr, tc.beta1, tc.beta2, tc.eps)
        try:
            optimizer.load_state_arrays(arrays)
        except KeyError:
            raise CLIError(f"checkpoint {cfg['resume']} holds no optimizer state")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    write_resolved(cfg, cfg["out_dir"], "train")
    try:
        history = train(model, dataset, tc, out_dir=cfg["out_dir"],
                        max_steps=cfg["max_steps"], optimizer=optimizer,
                        start_step=start_step, start_epoch=start_epoch)
    except TrainingDivergedError as exc:
        raise CLIError(f"training diverged: {exc}", exit_code=1)
    last = history[-1][2] if history else float("nan")
    print(f"trained {len(history)} steps; final loss {last:.4f}; "
          f"outputs in {cfg['out_dir']}")
    return 0


INFER_KEYS = {
    **WINDOW_KEYS,
    "checkpoint": (_str, None, "model checkpoint (required)"),
    "input": (_str, None, "volume file or directory (required)"),
    "out_dir": (_str, None, "output directory (required)"),
    "tta": (_bool, False, "average over all 8 axis flips"),
    "save_logits": (_bool, False, "also write f32 logits volumes"),
    "preprocess": (_bool, True, "normalize + append foreground mask"),
}


@_command("infer", INFER_KEYS, required=("checkpoint", "input", "out_dir"))
def cmd_infer(cfg):
    """Predict label volumes for every input with sliding-window inference."""
    from .inference import logits_to_labels, sliding_window, tta_flips
    from .pipeline import preprocess_case, write_rvf
    model, _, _ = _load_checkpoint(cfg["checkpoint"])
    spec = _window_spec(cfg)
    divisor = model.config.spatial_divisor
    if any(s % divisor for s in spec.size):
        raise CLIError(f"window size {spec.size} must be divisible by {divisor} "
                       f"for this model")
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, out_dir, "infer")
    for case_id, path in _scan_images(cfg["input"]):
        vol = _read_volume(path)
        if cfg["preprocess"]:
            vol = preprocess_case(vol)
        if vol.channels != model.config.in_channels:
            raise CLIError(f"{case_id}: {vol.channels} channels but model "
                           f"expects {model.config.in_channels}")
        if cfg["tta"]:
            logits = tta_flips(model, vol, spec)
        else:
            logits = sliding_window(model, vol, spec)
        labels = logits_to_labels(logits)
        write_rvf(labels, os.path.join(out_dir, f"{case_id}_lbl.rvf"))
        if cfg["save_logits"]:
            write_rvf(logits, os.path.join(out_dir, f"{case_id}_logits.rvf"))
        print(f"{case_id}: {int((labels.data > 0).sum())} foreground voxels")
    return 0


METRICS_KEYS = {
    "pred": (_str, None, "directory of predicted *_lbl.rvf (required)"),
    "gt": (_str, None, "directory of ground-truth *_lbl.rvf (required)"),
    "out_dir": (_str, None, "output directory (default: pred)"),
    "connectivity": (_int, 26, "component connectivity: 6, 18 or 26"),
    "num_classes": (_int, None, "classes incl. background (default: derived)"),
}


@_command("metrics", METRICS_KEYS, required=("pred", "gt"))
def cmd_metrics(cfg):
    """Score predictions against ground truth; writes CSV + JSON aggregates."""
    from .metrics import CaseMetrics, MetricsReport, evaluate_case
    if not os.path.isdir(cfg["pred"]):
        raise CLIError(f"no such directory: {cfg['pred']}")
    if not os.path.isdir(cfg["gt"]):
        raise CLIError(f"no such directory: {cfg['gt']}")
    names = sorted(n for n in os.listdir(cfg["pred"]) if n.endswith("_lbl.rvf"))
    if not names:
        raise CLIError(f"no *_lbl.rvf predictions in {cfg['pred']}")
    pairs = []
    for name in names:
        gt_path = os.path.join(cfg["gt"], name)
        if not os.path.exists(gt_path):
            raise CLIError(f"missing ground truth for {name} in {cfg['gt']}")
        pairs.append((_case_id(name), os.path.join(cfg["pred"], name), gt_path))

    def score(pair):
        case_id, pred_path, gt_path = pair
        try:
            return evaluate_case(case_id, _read_volume(pred_path),
                                 _read_volume(gt_path),
                                 num_classes=cfg["num_classes"],
                                 connectivity=cfg["connectivity"])
        except ValueError as exc:
            log.warning("%s: %s", case_id, exc)
            return CaseMetrics(case_id=case_id, dice_per_class={},
                               hd95_per_class={}, lesion_f1=float("nan"),
                               lcd=0, avd=float("nan"),
                               flags=[f"error: {exc}"])

    workers = _threads(cfg)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(score, pairs))
    else:
        cases = [score(p) for p in pairs]
    report = MetricsReport(cases=cases)
    out_dir = cfg["out_dir"] or cfg["pred"]
    os.makedirs(out_dir, exist_ok=True)
    report.write_csv(os.path.join(out_dir, "metrics.csv"))
    report.write_json(os.path.join(out_dir, "metrics.json"))
    write_resolved(cfg, out_dir, "metrics")
    agg = report.aggregates()
    for name, value in agg["mean"].items():
        print(f"mean {name}: {value if value is None else round(value, 4)}")
    return 0


COUNT_KEYS = {
    **{k: v for k, v in MODEL_KEYS.items() if k != "model_seed"},
    "input_shape": (_ints, (128, 128, 128), "spatial shape for FLOPs"),
    "out_dir": (_str, None, "also write count_report.json here"),
}


@_command("count", COUNT_KEYS)
def cmd_count(cfg):
    """Parameter and FLOP accounting for the configured model."""
    from .network import FLOP_CONVENTION, build, count_params, flop_report
    in_channels = cfg["in_channels"] if cfg["in_channels"] is not None else 4
    cfg["in_channels"] = in_channels
    model = build(_model_config(cfg, in_channels), seed=0)
    params = count_params(model)
    report = flop_report(model, cfg["input_shape"])
    print(f"variant: {cfg['variant']}")
    print(f"params: {params:,} ({params/1e6:.3f} M)")
    print(f"flops at {'x'.join(map(str, cfg['input_shape']))}: "
          f"{report.gflops:.1f} GFLOPs")
    print(FLOP_CONVENTION)
    if cfg["out_dir"]:
        os.makedirs(cfg["out_dir"], exist_ok=True)
        with open(os.path.join(cfg["out_dir"], "count_report.json"), "w") as f:
            json.dump({"variant": cfg["variant"], "params": params,
                       "gflops": report.gflops,
                       "input_shape": list(cfg["input_shape"]),
                       "convention": FLOP_CONVENTION}, f, indent=2)
            f.write("\n")
        write_resolved(cfg, cfg["out_dir"], "count")
    return 0


ERF_KEYS = {
    **MODEL_KEYS,
    "checkpoint": (_str, None, "load model from checkpoint instead of config"),
    "out_dir": (_str, None, "output directory (required)"),
    "stages": (_ints, None, "stages to analyze (default: all)"),
    "threshold": (_float, 0.01, "erf_radius threshold"),
    "input": (_str, None, "volumes to average over (default: random noise)"),
    "input_shape": (_ints, (33, 33, 33), "noise input shape"),
    "num_inputs": (_int, 2, "noise inputs to average"),
    "seed": (_int, 0, "noise seed"),
    "preprocess": (_bool, True, "preprocess --input volumes"),
}


@_command("erf", ERF_KEYS, required=("out_dir",))
def cmd_erf(cfg):
    """Effective-receptive-field maps (RVF) and radii (CSV) per stage."""
    import csv as _csv

    from .analysis import erf_map, erf_radius
    from .network import build
    from .pipeline import Volume, preprocess_case, write_rvf
    if cfg["checkpoint"]:
        model, _, _ = _load_checkpoint(cfg["checkpoint"])
    else:
        if cfg["in_channels"] is None:
            cfg["in_channels"] = 2
        model = build(_model_config(cfg, cfg["in_channels"]), seed=cfg["model_seed"])
    if cfg["input"]:
        inputs = []
        for case_id, path in _scan_images(cfg["input"]):
            vol = _read_volume(path)
            if cfg["preprocess"]:
                vol = preprocess_case(vol)
            inputs.append(vol)
    else:
        rng = np.random.default_rng(cfg["seed"])
        shape = (model.config.in_channels,) + tuple(cfg["input_shape"])
        inputs = [Volume(rng.standard_normal(shape).astype(np.float32))
                  for _ in range(cfg["num_inputs"])]
    for vol in inputs:
        if vol.channels != model.config.in_channels:
            raise CLIError(f"input has {vol.channels} channels, model expects "
                           f"{model.config.in_channels}")
    stages = cfg["stages"] or tuple(range(1, len(model.stages) + 1))
    if any(not 1 <= s <= len(model.stages) for s in stages):
        raise CLIError(f"stages must be in 1..{len(model.stages)}, got {stages}")
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for stage in stages:
        emap = erf_map(model, stage, inputs)
        write_rvf(Volume(emap.map[None].astype(np.float32)),
                  os.path.join(out_dir, f"erf_stage{stage}.rvf"))
        try:
            radius = erf_radius(emap, cfg["threshold"])
        except ValueError as exc:
            raise CLIError(str(exc))
        rows.append((stage, radius))
        print(f"stage {stage}: erf_radius({cfg['threshold']}) = {radius:.3f}")
    with open(os.path.join(out_dir, "erf_radius.csv"), "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["stage", "radius_vox"])
        writer.writerows(rows)
    write_resolved(cfg, out_dir, "erf")
    return 0


BLURPROBE_KEYS = {
    **WINDOW_KEYS,
    "checkpoint": (_str, None, "model checkpoint (required)"),
    "input": (_str, None, "volume file or directory (required)"),
    "out_dir": (_str, None, "output directory (required)"),
    "sigmas": (_floats, (0.0, 0.5, 1.0, 2.0), "blur levels (voxels)"),
    "preprocess": (_bool, True, "normalize + append foreground mask"),
}


@_command("blurprobe", BLURPROBE_KEYS, required=("checkpoint", "input", "out_dir"))
def cmd_blurprobe(cfg):
    """Self-consistency of predictions under input blur; writes a CSV."""
    from .analysis import blur_probe
    from .pipeline import preprocess_case
    model, _, _ = _load_checkpoint(cfg["checkpoint"])
    spec = _window_spec(cfg)
    cases = []
    for case_id, path in _scan_images(cfg["input"]):
        vol = _read_volume(path)
        if cfg["preprocess"]:
            vol = preprocess_case(vol)
        cases.append((case_id, vol))
    result = blur_probe(model, cases, cfg["sigmas"], spec)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    result.write_csv(os.path.join(out_dir, "blurprobe.csv"))
    write_resolved(cfg, out_dir, "blurprobe")
    for sigma, (d, h) in result.per_sigma().items():
        print(f"sigma {sigma}: median dice {d:.4f}, median hd95 {h:.4f}")
    return 0


@_command("selftest", {})
def cmd_selftest(cfg):
    """Run the reduced verification suites; exit 3 on any failure."""
    from .selftest import run_selftest
    return 0 if run_selftest() else 3


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="lka3d",
        description="3D segmentation with large-kernel-attention U-Nets")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, keys, _) in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").splitlines()[0])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: LKA3D_THREADS or all cores)")
        for key, (parser_fn, default, help_text) in keys.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                           type=parser_fn, metavar="V",
                           help=f"{help_text} (default: {default})")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    fn, keys, required = COMMANDS[args.command]
    flag_values = {k: getattr(args, k) for k in keys}
    try:
        cfg = resolve_config(keys, args.config, flag_values)
        cfg["threads"] = args.threads
        _require_keys(cfg, required)
        return fn(cfg)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:  # pragma: no cover - internal errors
        import traceback
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
