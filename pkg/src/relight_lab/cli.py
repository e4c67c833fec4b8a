"""Command-line entry point: data generation, training, relighting, guidance
and rotation sweeps, and held-out evaluation, all driven by one JSON config
with reproducible run directories.

Exit codes: 0 success, 1 error (stderr gets one `ERROR:<code>:` line),
2 refusing to overwrite an existing non-empty output.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from . import envmap as em
from . import metrics as mt
from . import network as net
from . import renderer as rnd
from . import sampler as sp
from . import trainer as tr
from .errors import InvalidConfig, IoFailure, RelightError

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "run_dir": "run",
    "data": {
        "n_subjects": 16,
        "n_envs": 8,
        "rotations_per_env": 8,
        "resolution": 64,
        "clip_max": 8.0,
        "env_height": 64,
        "n_real_images": 64,
        "real_dir": None,          # external real-domain image directory override
        "render": {
            "shadow_samples": 4,
            "env_cosine_samples": 64,
            "bright_texel_count": 16,
            "camera_distance": 6.0,
            "frame_fill": 0.7,
            "background_clip": 8.0,
        },
    },
    "model": {
        "base_channels": 32,
        "channel_mults": [1, 2, 4],
        "attention_at_lowest": True,
        "embed_dim": 128,
        "label_vocab_sizes": [10, 4],
    },
    "train": {
        "steps": 2000,
        "batch_size": 8,
        "learning_rate": 1e-4,
        "relight_ratio": 0.7,
        "dropout_p": 0.1,
        "ema_decay": None,
        "checkpoint_every": 1000,
        "grad_clip_norm": None,
        "deterministic": True,
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    },
    "sample": {
        "steps": 50,
        "lambda_t": 2.0,
        "lambda_i": 3.0,
        "uncond_keeps_text": False,
    },
    "eval": {
        "steps": 50,
        "lambda_t": 2.0,
        "lambda_i": 3.0,
    },
}


def merge_config(user: dict, defaults: dict | None = None, path: str = "") -> dict:
    """Deep-merge a user config over the defaults, rejecting unknown keys."""
    defaults = DEFAULT_CONFIG if defaults is None else defaults
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{path}{key}"
        if key not in defaults:
            raise InvalidConfig(f"unknown config key: {dotted}")
        if isinstance(defaults[key], dict) and defaults[key] is not None:
            if not isinstance(value, dict):
                raise InvalidConfig(f"config key {dotted} must be a section")
            merged[key] = merge_config(value, defaults[key], dotted + ".")
        else:
            merged[key] = value
    return merged


def load_config(path: str | None, seed_flag: int | None = None) -> dict:
    user = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise IoFailure(f"config file {path} not found")
        user = json.loads(p.read_text())
    config = merge_config(user)
    if config["schema_version"] != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported schema_version {config['schema_version']}")
    if seed_flag is not None:
        config["seed"] = seed_flag
    elif "seed" not in user and "RELIGHT_LAB_SEED" in os.environ:
        config["seed"] = int(os.environ["RELIGHT_LAB_SEED"])
    return config


def write_snapshot(config: dict, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(config, indent=2, sort_keys=True)
    (run_dir / "config_snapshot.json").write_text(text + "\n")


def _render_config(config: dict) -> rnd.RenderConfig:
    r = config["data"]["render"]
    return rnd.RenderConfig(
        resolution=config["data"]["resolution"],
        shadow_samples=r["shadow_samples"],
        env_cosine_samples=r["env_cosine_samples"],
        bright_texel_count=r["bright_texel_count"],
        camera_distance=r["camera_distance"],
        frame_fill=r["frame_fill"],
        background_clip=r["background_clip"],
    )


def _model_config(config: dict) -> net.UNetConfig:
    m = config["model"]
    return net.UNetConfig(
        base_channels=m["base_channels"],
        channel_mults=tuple(m["channel_mults"]),
        attention_at_lowest=m["attention_at_lowest"],
        label_vocab_sizes=tuple(m["label_vocab_sizes"]),
        embed_dim=m["embed_dim"],
        resolution=config["data"]["resolution"],
    )


def _train_config(config: dict) -> tr.TrainConfig:
    t = dict(config["train"])
    t["seed"] = config["seed"]
    return tr.TrainConfig(**t)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config = load_config(args.config, args.seed)
    run_dir = Path(config["run_dir"])
    data_dir = run_dir / "data"
    if data_dir.exists() and any(data_dir.iterdir()) and not args.force:
        print(f"ERROR:refuse_overwrite:{data_dir} is not empty (use --force)",
              file=sys.stderr)
        return 2
    write_snapshot(config, run_dir)
    d = config["data"]
    ds.build_dataset(
        d["n_subjects"], d["n_envs"], d["rotations_per_env"], config["seed"],
        data_dir, resolution=d["resolution"], clip_max=d["clip_max"],
        env_height=d["env_height"], render_config=_render_config(config),
        jobs=args.jobs,
    )
    if d["real_dir"] is None:
        ds.build_real_set(run_dir / "real", d["n_real_images"], config["seed"],
                          resolution=d["resolution"])
    print(f"dataset written to {data_dir}")
    return 0


def _load_real(config: dict) -> ds.RealDomainSet:
    override = config["data"]["real_dir"]
    real_dir = Path(override) if override else Path(config["run_dir"]) / "real"
    return ds.load_real_set(real_dir)


def cmd_train(args) -> int:
    config = load_config(args.config, args.seed)
    run_dir = Path(config["run_dir"])
    write_snapshot(config, run_dir)
    manifest = ds.load_manifest(run_dir / "data")
    real_set = _load_real(config) if config["train"]["relight_ratio"] < 1.0 else None
    ckpt = tr.train(manifest, real_set, _train_config(config), run_dir / "train",
                    model_config=_model_config(config))
    print(f"trained {ckpt.step} steps; checkpoint at {run_dir / 'train' / 'ckpt_final.rlck'}")
    return 0


def _resolve_env(arg: str, config: dict) -> em.EnvMap:
    height = config["data"]["env_height"]
    if arg in ("backlight", "rembrandt"):
        spec = em.EnvSpec(kind="studio_preset", preset=arg, sun_intensity=60.0)
        return em.procedural_env(spec, 2 * height, height)
    if arg == "sun":
        return em.procedural_env(em.EnvSpec(), 2 * height, height)
    return em.load_raster(arg)


def _load_input_image(path: str, resolution: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(img).astype(np.float32) / 255.0


def _load_model(args, config: dict):
    """(model, schedule) from a checkpoint, or a stub pair when --stub given."""
    from . import diffusion as df
    if getattr(args, "stub", None):
        schedule = df.make_schedule(config["train"]["T"], config["train"]["beta_start"],
                                    config["train"]["beta_end"])
        return sp.CopyStubModel(schedule), schedule
    ckpt_path = args.checkpoint or Path(config["run_dir"]) / "train" / "ckpt_final.rlck"
    ckpt = tr.load_checkpoint(ckpt_path)
    model = ckpt.build_ema_model() if ckpt.ema_params is not None else ckpt.build_model()
    model.eval()
    return model, ckpt.schedule()


def _save_png(img: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(path)


def montage(images: list, pad: int = 2) -> np.ndarray:
    h, w = images[0].shape[:2]
    out = np.ones((h, (w + pad) * len(images) - pad, 3), dtype=np.float32)
    for i, img in enumerate(images):
        out[:, i * (w + pad): i * (w + pad) + w] = img
    return out


def _base_request(args, config: dict) -> sp.SampleRequest:
    resolution = config["data"]["resolution"]
    inp = _load_input_image(args.input, resolution)
    mask = None
    if getattr(args, "mask", None):
        m = Image.open(args.mask).convert("L")
        if m.size != (resolution, resolution):
            m = m.resize((resolution, resolution), Image.NEAREST)
        mask = np.asarray(m) > 127
    guidance = sp.GuidanceParams(
        lambda_t=args.lambda_t if args.lambda_t is not None else config["sample"]["lambda_t"],
        lambda_i=args.lambda_i if args.lambda_i is not None else config["sample"]["lambda_i"],
        uncond_keeps_text=config["sample"]["uncond_keeps_text"],
    )
    return sp.SampleRequest(
        input_image=inp,
        env=_resolve_env(args.env, config),
        rotation=args.rotation,
        label=tuple(args.label) if args.label else (0, 0),
        steps=args.steps if args.steps is not None else config["sample"]["steps"],
        guidance=guidance,
        seed=args.seed if args.seed is not None else config["seed"],
        mask=mask,
        clip_max=config["data"]["clip_max"],
    )


def cmd_relight(args) -> int:
    config = load_config(args.config, None)
    run_dir = Path(config["run_dir"])
    write_snapshot(config, run_dir)
    model, schedule = _load_model(args, config)
    request = _base_request(args, config)
    result = sp.relight(model, schedule, request)
    out_path = Path(args.out) if args.out else run_dir / "relight" / "output.png"
    _save_png(result.output, out_path)
    _save_png(result.composite, out_path.with_name(out_path.stem + "_composite.png"))
    print(f"wrote {out_path}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config, None)
    run_dir = Path(config["run_dir"])
    write_snapshot(config, run_dir)
    model, schedule = _load_model(args, config)
    request = _base_request(args, config)
    lambdas = [float(v) for v in args.lambdas.split(",") if v]
    result = sp.sweep_lambda(model, schedule, request, lambdas)
    out_dir = run_dir / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    for lam, img in zip(lambdas, result["outputs"]):
        _save_png(img, out_dir / f"lambda_{lam:g}.png")
    _save_png(montage(result["outputs"]), out_dir / "sweep_grid.png")
    with open(out_dir / "sweep.csv", "w") as f:
        f.write("lambda_i,psnr_vs_input\n")
        for row in result["rows"]:
            f.write(f"{row['lambda_i']:g},{row['psnr_vs_input']:.4f}\n")
    print(f"wrote {out_dir}")
    return 0


def cmd_rotate(args) -> int:
    config = load_config(args.config, None)
    run_dir = Path(config["run_dir"])
    write_snapshot(config, run_dir)
    model, schedule = _load_model(args, config)
    request = _base_request(args, config)
    result = sp.rotation_sweep(model, schedule, request, args.n)
    out_dir = run_dir / "rotate"
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(result["frames"]):
        _save_png(img, out_dir / f"frame_{k:03d}.png")
    _save_png(montage(result["frames"]), out_dir / "rotation_grid.png")
    with open(out_dir / "rotation.csv", "w") as f:
        f.write("pair,l1\n")
        for k, d in enumerate(result["frame_l1"]):
            f.write(f"{k},{d:.6f}\n")
        f.write(f"mean,{result['mean_frame_l1']:.6f}\n")
    print(f"wrote {out_dir} (mean frame L1 {result['mean_frame_l1']:.5f})")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config, args.seed)
    run_dir = Path(config["run_dir"])
    write_snapshot(config, run_dir)
    manifest = ds.load_manifest(run_dir / "data")
    guidance = sp.GuidanceParams(lambda_t=config["eval"]["lambda_t"],
                                 lambda_i=config["eval"]["lambda_i"])
    if args.stub:
        from . import diffusion as df
        model = None
        schedule = df.make_schedule(config["train"]["T"], config["train"]["beta_start"],
                                    config["train"]["beta_end"])
    else:
        model, schedule = _load_model(args, config)
    out_csv = run_dir / "eval" / "report.csv"
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    report = mt.eval_set(model, schedule, manifest, guidance, out_path=out_csv,
                         seed=config["seed"], steps=config["eval"]["steps"],
                         stub=args.stub, external_cmd=args.external_metric)
    agg = ", ".join(f"{k}={v:.4f}" for k, v in sorted(report.aggregates.items()))
    print(f"eval over {len(report.rows)} pairings: {agg}")
    print(f"report at {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relight-lab",
        description="Procedural portrait relighting with a conditional diffusion model",
    )
    parser.add_argument("--config", help="JSON run config (defaults used when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for data/eval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build the paired dataset and real-domain set")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the relighting model")
    p.set_defaults(func=cmd_train)

    def add_sample_args(p):
        p.add_argument("--input", required=True, help="input portrait PNG")
        p.add_argument("--env", required=True,
                       help=".envf path, or one of: sun, backlight, rembrandt")
        p.add_argument("--rotation", type=float, default=0.0)
        p.add_argument("--lambda-i", dest="lambda_i", type=float, default=None)
        p.add_argument("--lambda-t", dest="lambda_t", type=float, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--seed", dest="seed", type=int, default=None)
        p.add_argument("--mask", help="foreground mask PNG for the input")
        p.add_argument("--label", type=int, nargs=2, default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--stub", choices=["copy", "oracle-eps"], default=None)

    p = sub.add_parser("relight", help="relight one portrait")
    add_sample_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("sweep", help="lambda_I guidance sweep")
    add_sample_args(p)
    p.add_argument("--lambdas", default="1,2,3,5", help="comma-separated lambda_I values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rotate", help="environment rotation sweep")
    add_sample_args(p)
    p.add_argument("--n", type=int, default=36)
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("eval", help="held-out split evaluation")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--stub", choices=["copy", "oracle-eps"], default=None)
    p.add_argument("--external-metric", default=None,
                   help="command invoked as `<cmd> <imgA> <imgB>` printing one float")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RelightError as exc:
        print(f"ERROR:{exc.code}:{exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"ERROR:io:{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
