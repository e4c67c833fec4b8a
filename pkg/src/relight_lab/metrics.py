"""Image-fidelity metrics and the held-out-split evaluation driver.

PSNR and SSIM follow the standard definitions on [0, 1] images (SSIM with an
8x8 uniform window, stride 1). The identity proxy is an exposure-discounted
masked distance: a per-channel least-squares gain aligns the two images
before the RMS, so global lighting level and tint changes are absorbed while
multi-color identity structure (skin vs hair vs clothing arrangement,
silhouette) is not; a small raw-RMS term keeps the distance zero only for
identical masked content.
"""

from __future__ import annotations

import csv
import math
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyMask, EmptySplit, ShapeMismatch, TooSmall

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0, 1] images, capped at 99 dB when identical."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _window_means(x: np.ndarray, w: int) -> np.ndarray:
    """Means of all w*w windows (stride 1, valid), via an integral image."""
    ii = np.cumsum(np.cumsum(x, axis=0), axis=1)
    ii = np.pad(ii, ((1, 0), (1, 0)), mode="constant")
    sums = ii[w:, w:] - ii[:-w, w:] - ii[w:, :-w] + ii[:-w, :-w]
    return sums / (w * w)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM, channel-averaged, dynamic range 1."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise TooSmall(f"image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    vals = []
    for c in range(a.shape[2]):
        xa = a[..., c].astype(np.float64)
        xb = b[..., c].astype(np.float64)
        mu_a = _window_means(xa, SSIM_WINDOW)
        mu_b = _window_means(xb, SSIM_WINDOW)
        var_a = _window_means(xa * xa, SSIM_WINDOW) - mu_a ** 2
        var_b = _window_means(xb * xb, SSIM_WINDOW) - mu_b ** 2
        cov = _window_means(xa * xb, SSIM_WINDOW) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + _C1) * (2 * cov + _C2)) / (
            (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
        )
        vals.append(s.mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Identity proxy
# ---------------------------------------------------------------------------

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_RAW_TERM_WEIGHT = 0.05


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur with edge clamping."""
    pad = np.pad(x, ((2, 2), (0, 0), (0, 0)), mode="edge")
    x = sum(_BINOMIAL5[i] * pad[i:i + x.shape[0]] for i in range(5))
    pad = np.pad(x, ((0, 0), (2, 2), (0, 0)), mode="edge")
    return sum(_BINOMIAL5[i] * pad[:, i:i + x.shape[1]] for i in range(5))


def _upsample2(x: np.ndarray, h: int, w: int) -> np.ndarray:
    up = np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)[:h, :w]
    return _blur(up)


def _gain_matched_rms(x: np.ndarray, y: np.ndarray) -> float:
    """RMS after the per-channel least-squares gain aligning y to x."""
    g = (x * y).sum(axis=0) / np.maximum((y * y).sum(axis=0), 1e-9)
    return float(np.sqrt(np.mean((x - g * y) ** 2)))


def identity_proxy(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Exposure-discounted masked distance; 0 iff masked content identical.

    Symmetrized gain-matched RMS (lighting level/tint absorbed by the gain)
    plus a small raw-RMS term so the distance is a true zero only when the
    masked regions agree exactly.
    """
    if a.shape != b.shape or mask.shape != a.shape[:2]:
        raise ShapeMismatch(f"{a.shape} vs {b.shape} with mask {mask.shape}")
    if not np.any(mask):
        raise EmptyMask("mask selects no pixels")
    av = a[mask].astype(np.float64)
    bv = b[mask].astype(np.float64)
    core = 0.5 * (_gain_matched_rms(av, bv) + _gain_matched_rms(bv, av))
    raw = float(np.sqrt(np.mean((av - bv) ** 2)))
    return float(np.sqrt(core ** 2 + (_RAW_TERM_WEIGHT * raw) ** 2))


# ---------------------------------------------------------------------------
# Held-out evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list          # dicts with subject/env/rotation/psnr_db/ssim/identity_proxy
    aggregates: dict    # column -> mean
    config: dict

    def write_csv(self, path):
        cols = ["subject", "env", "rotation", "psnr_db", "ssim", "identity_proxy"]
        if self.rows and "external" in self.rows[0]:
            cols.append("external")
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in cols})


def run_external_metric(cmd: str, path_a, path_b) -> float:
    """`<cmd> <imgA> <imgB>` -> one float on stdout (e.g. an LPIPS wrapper)."""
    out = subprocess.run([cmd, str(path_a), str(path_b)],
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def pairing_plan(manifest, seed: int) -> list:
    """Seeded plan: every test-subject image under a test env is relit toward
    another held-out (env, rotation) variant."""
    rng = np.random.default_rng(np.random.SeedSequence([19, seed]))
    subjects = manifest.subjects("test")
    variants = manifest.variants("test")
    plan = []
    for si in subjects:
        for vin in variants:
            vtgt = variants[int(rng.integers(0, len(variants)))]
            plan.append((si, vin, vtgt))
    return plan


def eval_set(model, schedule, manifest, guidance, out_path=None, seed: int = 0,
             steps: int = 50, stub: str | None = None,
             external_cmd: str | None = None) -> EvalReport:
    """Relight every held-out pairing and score against the rendered truth.

    `stub` bypasses the trained model: "copy" scores the input unchanged (the
    no-relighting baseline), "oracle-eps" drives the full DDIM loop with the
    closed-form noise oracle toward the input image.
    """
    from . import renderer as rnd
    from . import sampler as sp
    plan = pairing_plan(manifest, seed)
    if not plan:
        raise EmptySplit("no test-split pairings to evaluate")
    rows = []
    tmp_dir = None
    if external_cmd:
        import tempfile
        tmp_dir = Path(tempfile.mkdtemp(prefix="relight_eval_"))
    for si, (ei_in, ri_in), (ei_t, ri_t) in plan:
        inp = manifest.load_image(si, ei_in, ri_in)
        mask_in = manifest.load_mask(si, ei_in, ri_in)
        target = manifest.load_image(si, ei_t, ri_t)
        mask_t = manifest.load_mask(si, ei_t, ri_t)
        label = rnd.make_subject(manifest.subject_seeds[si]).label
        if stub == "copy":
            out = inp
        else:
            request = sp.SampleRequest(
                input_image=inp, env=manifest.load_env(ei_t),
                rotation=manifest.rotation(ei_t, ri_t), label=label,
                steps=steps, guidance=guidance,
                seed=int(np.random.SeedSequence([23, seed, si, ei_t, ri_t]).generate_state(1)[0]),
                mask=mask_in, clip_max=manifest.clip_max,
            )
            active = sp.CopyStubModel(schedule) if stub == "oracle-eps" else model
            out = sp.relight(active, schedule, request).output
        row = {
            "subject": si, "env": ei_t, "rotation": ri_t,
            "psnr_db": psnr(out, target), "ssim": ssim(out, target),
            "identity_proxy": identity_proxy(out, target, mask_t),
        }
        if external_cmd:
            from PIL import Image
            pa = tmp_dir / f"out_{len(rows)}.png"
            pb = tmp_dir / f"tgt_{len(rows)}.png"
            Image.fromarray((out * 255).round().astype(np.uint8)).save(pa)
            Image.fromarray((target * 255).round().astype(np.uint8)).save(pb)
            row["external"] = run_external_metric(external_cmd, pa, pb)
        rows.append(row)
    agg_cols = [k for k in rows[0] if k not in ("subject", "env", "rotation")]
    aggregates = {k: float(np.mean([r[k] for r in rows])) for k in agg_cols}
    report = EvalReport(rows=rows, aggregates=aggregates,
                        config={"seed": seed, "steps": steps, "stub": stub})
    if out_path is not None:
        report.write_csv(out_path)
    return report


def spearman_rank(x, y) -> float:
    """Spearman rank correlation of two equal-length sequences."""
    xs = np.argsort(np.argsort(x)).astype(np.float64)
    ys = np.argsort(np.argsort(y)).astype(np.float64)
    xs -= xs.mean()
    ys -= ys.mean()
    denom = math.sqrt(float((xs ** 2).sum() * (ys ** 2).sum()))
    if denom == 0.0:
        return 0.0
    return float((xs * ys).sum() / denom)
