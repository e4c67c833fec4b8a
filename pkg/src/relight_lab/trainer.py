"""Training loop mixing the relighting and label-to-image tasks, with CSV
loss logging and a self-describing binary checkpoint format.

Checkpoint layout: one ASCII line `RLCKPT <version> <header_bytes>`, a JSON
header (tensor names, shapes, offsets, payload hash, config snapshots), then
a contiguous little-endian float32 payload.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataset as ds
from . import diffusion as df
from . import network as net
from .errors import CorruptCheckpoint, IoFailure, NonFiniteLoss, VersionMismatch

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    relight_ratio: float = 0.7
    dropout_p: float = 0.1
    ema_decay: float | None = None
    checkpoint_every: int = 1000
    seed: int = 0
    grad_clip_norm: float | None = None
    deterministic: bool = True
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def validate(self):
        if not (0.0 <= self.relight_ratio <= 1.0):
            raise IoFailure(f"relight_ratio {self.relight_ratio} out of [0, 1]")
        if self.learning_rate <= 0:
            raise IoFailure("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "batch_size": self.batch_size,
            "learning_rate": self.learning_rate, "relight_ratio": self.relight_ratio,
            "dropout_p": self.dropout_p, "ema_decay": self.ema_decay,
            "checkpoint_every": self.checkpoint_every, "seed": self.seed,
            "grad_clip_norm": self.grad_clip_norm, "deterministic": self.deterministic,
            "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Checkpoint:
    params: dict                  # name -> float32 tensor
    opt_state: dict               # name -> {exp_avg, exp_avg_sq}; plus "step"
    ema_params: dict | None
    step: int
    train_config: dict
    model_config: dict
    manifest_hash: str

    def build_model(self) -> net.ConditionalUNet:
        config = net.UNetConfig.from_dict(self.model_config)
        model = net.ConditionalUNet(config)
        model.load_state_dict({k: v.clone() for k, v in self.params.items()})
        return model

    def build_ema_model(self) -> net.ConditionalUNet:
        if self.ema_params is None:
            return self.build_model()
        config = net.UNetConfig.from_dict(self.model_config)
        model = net.ConditionalUNet(config)
        model.load_state_dict({k: v.clone() for k, v in self.ema_params.items()})
        return model

    def schedule(self) -> df.NoiseSchedule:
        return df.make_schedule(self.train_config["T"],
                                self.train_config["beta_start"],
                                self.train_config["beta_end"])


# ---------------------------------------------------------------------------
# Batched loss (same math as diffusion.training_loss, stacked for throughput)
# ---------------------------------------------------------------------------

def batch_losses(model, batch, schedule, rng: torch.Generator,
                 dropout_p: float) -> tuple:
    """Per-sample MSE for a list of tuples; returns (losses, task_flags)."""
    b = len(batch)
    x0 = torch.stack([df.image_to_tensor(t.target_image) for t in batch]) * 2.0 - 1.0
    cond = torch.stack([df.conditioned_input(t) for t in batch])
    ldr = torch.stack([df.image_to_tensor(t.ldr_env.pixels) for t in batch])
    labels = torch.as_tensor([t.label for t in batch], dtype=torch.long)

    t_steps = torch.randint(1, schedule.T + 1, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng)
    x_t = df.q_sample(x0, t_steps, eps, schedule)
    flags = df.sample_drop_flags(rng, dropout_p, batch=b)
    packed = df.pack_conditions(x_t, cond, ldr, flags)
    pred = model(packed, t_steps, labels)
    losses = F.mse_loss(pred, eps, reduction="none").mean(dim=(1, 2, 3))
    return losses, [t.task_flag for t in batch]


def _zero_like_state(model) -> dict:
    state = {name: {"exp_avg": torch.zeros_like(p), "exp_avg_sq": torch.zeros_like(p)}
             for name, p in model.named_parameters()}
    state["step"] = 0
    return state


def _extract_opt_state(model, opt) -> dict:
    state = {}
    step = 0
    for name, p in model.named_parameters():
        s = opt.state.get(p)
        if s:
            state[name] = {"exp_avg": s["exp_avg"].clone(),
                           "exp_avg_sq": s["exp_avg_sq"].clone()}
            step = int(s["step"])
        else:
            state[name] = {"exp_avg": torch.zeros_like(p),
                           "exp_avg_sq": torch.zeros_like(p)}
    state["step"] = step
    return state


def train(manifest: ds.DatasetManifest, real_set: ds.RealDomainSet | None,
          config: TrainConfig, out_dir, model_config: net.UNetConfig | None = None,
          log_every: int = 25) -> Checkpoint:
    """Optimize the UNet on the mixed objective; returns the final checkpoint."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        torch.set_num_threads(1)

    model_config = model_config or net.UNetConfig(resolution=manifest.resolution)
    model = net.init_model(model_config, config.seed)
    schedule = df.make_schedule(config.T, config.beta_start, config.beta_end)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    data_rng = np.random.default_rng(np.random.SeedSequence([17, config.seed]))
    torch_rng = torch.Generator().manual_seed(config.seed)

    ema = None
    if config.ema_decay is not None:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    mhash = hashlib.sha256(ds.manifest_bytes(manifest)).hexdigest()
    log_path = out / "loss_log.csv"
    log_f = open(log_path, "a")
    if log_f.tell() == 0:
        log_f.write("step,total_loss,relight_loss,t2i_loss,lr\n")

    def snapshot(step):
        return Checkpoint(
            params={k: v.detach().clone() for k, v in model.state_dict().items()},
            opt_state=_extract_opt_state(model, opt) if step > 0 else _zero_like_state(model),
            ema_params=None if ema is None else {k: v.clone() for k, v in ema.items()},
            step=step,
            train_config=config.to_dict(),
            model_config=model_config.to_dict(),
            manifest_hash=mhash,
        )

    try:
        for step in range(1, config.steps + 1):
            batch = ds.mix_batch(manifest, real_set, config.batch_size,
                                 config.relight_ratio, data_rng)
            losses, tasks = batch_losses(model, batch, schedule, torch_rng,
                                         config.dropout_p)
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"loss became non-finite at step {step}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            opt.step()

            if ema is not None:
                with torch.no_grad():
                    msd = model.state_dict()
                    for k in ema:
                        ema[k].mul_(config.ema_decay).add_(msd[k], alpha=1 - config.ema_decay)

            if step % log_every == 0 or step == 1 or step == config.steps:
                det = losses.detach()
                rel = [float(v) for v, tk in zip(det, tasks) if tk == "relight"]
                t2i = [float(v) for v, tk in zip(det, tasks) if tk == "text_to_image"]
                log_f.write("%d,%.6f,%s,%s,%.2e\n" % (
                    step, float(loss.detach()),
                    "%.6f" % (sum(rel) / len(rel)) if rel else "nan",
                    "%.6f" % (sum(t2i) / len(t2i)) if t2i else "nan",
                    config.learning_rate,
                ))
                log_f.flush()

            if config.checkpoint_every and step % config.checkpoint_every == 0 \
                    and step < config.steps:
                save_checkpoint(snapshot(step), out / f"ckpt_{step}.rlck")
    finally:
        log_f.close()

    final = snapshot(config.steps)
    save_checkpoint(final, out / "ckpt_final.rlck")
    return final


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def _flatten_tensors(ckpt: Checkpoint) -> list:
    """Stable (name, tensor) list covering params, optimizer state, and EMA."""
    entries = [(f"model.{k}", v) for k, v in sorted(ckpt.params.items())]
    for k in sorted(ckpt.opt_state):
        if k == "step":
            continue
        entries.append((f"opt.{k}.exp_avg", ckpt.opt_state[k]["exp_avg"]))
        entries.append((f"opt.{k}.exp_avg_sq", ckpt.opt_state[k]["exp_avg_sq"]))
    entries.append(("opt.step", torch.tensor([float(ckpt.opt_state.get("step", 0))])))
    if ckpt.ema_params is not None:
        entries += [(f"ema.{k}", v) for k, v in sorted(ckpt.ema_params.items())]
    return entries


def save_checkpoint(ckpt: Checkpoint, path):
    entries = _flatten_tensors(ckpt)
    blobs, tensor_meta, offset = [], [], 0
    for name, tensor in entries:
        raw = np.ascontiguousarray(
            tensor.detach().to(torch.float32).numpy(), dtype="<f4"
        ).tobytes()
        tensor_meta.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "step": ckpt.step,
        "train_config": ckpt.train_config,
        "model_config": ckpt.model_config,
        "manifest_hash": ckpt.manifest_hash,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": tensor_meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(b"RLCKPT %d %d\n" % (CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no checkpoint at {path}")
    with open(path, "rb") as f:
        magic = f.readline(64)
        parts = magic.split()
        if len(parts) != 3 or parts[0] != b"RLCKPT":
            raise CorruptCheckpoint(f"bad magic line {magic!r}")
        version, header_len = int(parts[1]), int(parts[2])
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise CorruptCheckpoint("truncated header")
        try:
            header = json.loads(header_bytes)
        except json.JSONDecodeError as exc:
            raise CorruptCheckpoint(f"unparseable header: {exc}") from exc
        payload = f.read()

    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpoint("payload hash mismatch")

    tensors = {}
    for meta in header["tensors"]:
        n_elem = int(np.prod(meta["shape"])) if meta["shape"] else 1
        if n_elem * 4 != meta["nbytes"]:
            raise CorruptCheckpoint(
                f"tensor {meta['name']}: shape {meta['shape']} disagrees with "
                f"{meta['nbytes']} payload bytes"
            )
        start, end = meta["offset"], meta["offset"] + meta["nbytes"]
        if end > len(payload):
            raise CorruptCheckpoint(f"tensor {meta['name']} extends past payload")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(meta["shape"])
        tensors[meta["name"]] = torch.from_numpy(arr.copy())

    params, opt_state, ema = {}, {}, {}
    for name, tensor in tensors.items():
        if name.startswith("model."):
            params[name[len("model."):]] = tensor
        elif name == "opt.step":
            opt_state["step"] = int(tensor.item())
        elif name.startswith("opt."):
            base, kind = name[len("opt."):].rsplit(".", 1)
            opt_state.setdefault(base, {})[kind] = tensor
        elif name.startswith("ema."):
            ema[name[len("ema."):]] = tensor
    return Checkpoint(
        params=params,
        opt_state=opt_state,
        ema_params=ema or None,
        step=header["step"],
        train_config=header["train_config"],
        model_config=header["model_config"],
        manifest_hash=header["manifest_hash"],
    )
