"""Paired relighting dataset: build/persist renders, sample training tuples,
and manage the auxiliary real-domain set for multi-task training.

On-disk layout under the dataset root:
    manifest.json
    images/s{subject}_e{env}_r{rotation}.png      8-bit sRGB render
    images/s{subject}_e{env}_r{rotation}_mask.png foreground mask
    envs/e{env}.envf                              unrotated HDR map
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np
from PIL import Image

from . import envmap as em
from . import renderer as rnd
from .errors import EmptyRealSet, EmptySplit, IoFailure

MANIFEST_VERSION = 1


@dataclass
class DatasetManifest:
    root: Path
    data: dict

    @property
    def subject_seeds(self) -> list:
        return self.data["subject_seeds"]

    @property
    def n_envs(self) -> int:
        return len(self.data["env_specs"])

    @property
    def rotations_per_env(self) -> int:
        return self.data["rotations_per_env"]

    @property
    def resolution(self) -> int:
        return self.data["resolution"]

    @property
    def clip_max(self) -> float:
        return self.data["clip_max"]

    def env_spec(self, ei: int) -> em.EnvSpec:
        return em.EnvSpec.from_dict(self.data["env_specs"][ei])

    def rotation(self, ei: int, ri: int) -> float:
        offset = self.data["rotation_offsets"][ei]
        return (offset + ri * 2.0 * math.pi / self.rotations_per_env) % (2.0 * math.pi)

    def subjects(self, split: str) -> list:
        return [i for i in range(len(self.subject_seeds))
                if self.data["subject_split"][str(i)] == split]

    def envs(self, split: str) -> list:
        return [i for i in range(self.n_envs)
                if self.data["env_split"][str(i)] == split]

    def variants(self, split: str) -> list:
        """Sorted (env, rotation) pairs in the split."""
        return [(ei, ri) for ei in self.envs(split)
                for ri in range(self.rotations_per_env)]

    def image_path(self, si: int, ei: int, ri: int) -> Path:
        return self.root / self.data["image_dir"] / f"s{si}_e{ei}_r{ri}.png"

    def mask_path(self, si: int, ei: int, ri: int) -> Path:
        return self.root / self.data["image_dir"] / f"s{si}_e{ei}_r{ri}_mask.png"

    def env_path(self, ei: int) -> Path:
        return self.root / self.data["env_dir"] / f"e{ei}.envf"

    # --- cached loads ---

    def load_env(self, ei: int) -> em.EnvMap:
        cache = self.__dict__.setdefault("_env_cache", {})
        if ei not in cache:
            cache[ei] = em.load_raster(self.env_path(ei))
        return cache[ei]

    def load_image(self, si: int, ei: int, ri: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_img_cache", {})
        key = (si, ei, ri)
        if key not in cache:
            arr = np.asarray(Image.open(self.image_path(si, ei, ri)).convert("RGB"))
            cache[key] = arr.astype(np.float32) / 255.0
        return cache[key]

    def load_mask(self, si: int, ei: int, ri: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_mask_cache", {})
        key = (si, ei, ri)
        if key not in cache:
            arr = np.asarray(Image.open(self.mask_path(si, ei, ri)).convert("L"))
            cache[key] = arr > 127
        return cache[key]

    def ldr_condition(self, ei: int, ri: int) -> em.LdrEnvImage:
        """Tonemapped target-lighting condition at image resolution."""
        cache = self.__dict__.setdefault("_ldr_cache", {})
        key = (ei, ri)
        if key not in cache:
            rotated = em.rotate(self.load_env(ei), self.rotation(ei, ri))
            cache[key] = em.tonemap_ldr(rotated, self.clip_max,
                                        self.resolution, self.resolution)
        return cache[key]


@dataclass
class RelightTuple:
    input_image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    target_image: np.ndarray
    ldr_env: em.LdrEnvImage
    label: tuple
    task_flag: str                 # "relight" | "text_to_image"
    input_mask: np.ndarray | None = None  # foreground of the input, if known
    provenance: dict = field(default_factory=dict)


@dataclass
class RealDomainSet:
    directory: Path
    files: list
    labels: dict  # filename -> label list

    def __len__(self):
        return len(self.files)


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------

def _make_env_specs(n_envs: int, rng: np.random.Generator) -> list:
    """A varied, deterministic mix of lighting archetypes.

    Suns are soft and elevated and tints near-neutral so faces stay exposed
    across rotations; lighting varies in direction and structure, which is
    what the relighting task needs, without the exposure whiplash that would
    swamp identity cues.
    """
    specs = []
    kinds = ["sun_sky", "sun_sky", "point_lights", "studio_preset"]
    presets = ["backlight", "rembrandt"]
    for e in range(n_envs):
        kind = kinds[e % len(kinds)]
        base = rng.uniform(0.3, 0.55)
        tint = tuple(np.clip(base + rng.uniform(-0.06, 0.06, 3), 0.05, 1.0))
        if kind == "sun_sky":
            azim = rng.uniform(-math.pi, math.pi)
            elev = rng.uniform(0.35, 1.1)
            d = (math.cos(elev) * math.sin(azim), math.sin(elev),
                 math.cos(elev) * math.cos(azim))
            norm = math.sqrt(sum(v * v for v in d))
            spec = em.EnvSpec(
                kind="sun_sky",
                sun_direction=tuple(v / norm for v in d),
                sun_intensity=float(rng.uniform(4.0, 16.0)),
                sun_angular_radius=float(rng.uniform(0.25, 0.5)),
                sky_tint=tint,
                seed=int(rng.integers(0, 2**31)),
            )
        elif kind == "point_lights":
            spec = em.EnvSpec(
                kind="point_lights",
                sun_intensity=float(rng.uniform(3.0, 10.0)),
                sky_tint=tint,
                seed=int(rng.integers(0, 2**31)),
            )
        else:
            spec = em.EnvSpec(
                kind="studio_preset",
                preset=presets[(e // len(kinds)) % 2],
                sun_intensity=float(rng.uniform(8.0, 25.0)),
                sky_tint=tint,
                seed=int(rng.integers(0, 2**31)),
            )
        specs.append(spec)
    return specs


def _holdout_split(n: int, rng: np.random.Generator, warnings: list, what: str) -> dict:
    """10% test rounded up; degenerate single-item sets fall back to train."""
    split = {str(i): "train" for i in range(n)}
    if n <= 1:
        warnings.append(f"only {n} {what}; forcing train split")
        return split
    n_test = math.ceil(0.1 * n)
    order = rng.permutation(n)
    for i in order[:n_test]:
        split[str(int(i))] = "test"
    return split


def _sample_seed(seed: int, si: int, ei: int, ri: int) -> int:
    return int(np.random.SeedSequence([seed, si, ei, ri]).generate_state(1)[0])


def normalized_env(spec: em.EnvSpec, width: int, height: int,
                   mean_luminance: float = 1.0) -> em.EnvMap:
    """Procedural env with a sky-fill floor, rescaled to a fixed
    solid-angle-weighted mean luminance.

    The fill keys non-sky archetypes with the same vertical gradient the sun
    maps carry, so subjects are never rendered unlit; the normalization pins
    exposure so lighting varies in direction/color/structure only.
    """
    env = em.procedural_env(spec, width, height)
    pixels = env.pixels.copy()
    if spec.kind in ("point_lights", "studio_preset"):
        dirs = em.texel_directions(width, height)
        up_frac = (dirs[..., 1] + 1.0) * 0.5
        pixels = pixels + 0.3 * up_frac[..., None] * np.asarray(spec.sky_tint)
    lum = pixels @ np.array([0.2126, 0.7152, 0.0722])
    omega = em.texel_solid_angles(width, height)[:, None]
    mean = float((lum * omega).sum() / (4.0 * np.pi))
    scale = mean_luminance / max(mean, 1e-9)
    return em.EnvMap.from_pixels((pixels * scale).astype(np.float32))


def _render_one(args):
    (root, image_dir, subject, env_path, rotation, cfg_kwargs, si, ei, ri) = args
    env = em.load_raster(env_path)
    cfg = rnd.RenderConfig(**cfg_kwargs)
    img = rnd.render(subject, env, rotation, cfg)
    _save_render(root / image_dir, img, si, ei, ri)
    return (si, ei, ri)


def _save_render(img_dir: Path, img: rnd.LinearImage, si: int, ei: int, ri: int):
    srgb = rnd.linear_to_srgb(img)
    Image.fromarray(srgb).save(img_dir / f"s{si}_e{ei}_r{ri}.png")
    mask8 = (img.foreground_mask * np.uint8(255))
    Image.fromarray(mask8, mode="L").save(img_dir / f"s{si}_e{ei}_r{ri}_mask.png")


def build_dataset(n_subjects: int, n_envs: int, rotations_per_env: int,
                  seed: int, out_dir, resolution: int = 64,
                  clip_max: float = 8.0, env_height: int = 64,
                  render_config: rnd.RenderConfig | None = None,
                  jobs: int = 1) -> DatasetManifest:
    """Render subjects x envs x rotations, write images and manifest."""
    if min(n_subjects, n_envs, rotations_per_env) < 1:
        raise IoFailure("counts must be >= 1")
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "envs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create dataset directories: {exc}") from exc

    rng = np.random.default_rng(np.random.SeedSequence([11, seed]))
    subject_seeds = [int(s) for s in rng.integers(0, 2**31, size=n_subjects)]
    env_specs = _make_env_specs(n_envs, rng)
    rotation_offsets = [float(rng.uniform(0.0, 2.0 * math.pi)) for _ in range(n_envs)]

    warnings: list = []
    subject_split = _holdout_split(n_subjects, rng, warnings, "subjects")
    env_split = _holdout_split(n_envs, rng, warnings, "envs")

    base_cfg = render_config or rnd.RenderConfig()
    base_cfg.validate()

    for ei, spec in enumerate(env_specs):
        env = normalized_env(spec, 2 * env_height, env_height)
        em.write_raster(env, root / "envs" / f"e{ei}.envf")

    data = {
        "format_version": MANIFEST_VERSION,
        "seed": int(seed),
        "subject_seeds": subject_seeds,
        "env_specs": [s.to_dict() for s in env_specs],
        "rotations_per_env": int(rotations_per_env),
        "rotation_offsets": rotation_offsets,
        "env_height": int(env_height),
        "resolution": int(resolution),
        "clip_max": float(clip_max),
        "render": {
            "shadow_samples": base_cfg.shadow_samples,
            "env_cosine_samples": base_cfg.env_cosine_samples,
            "bright_texel_count": base_cfg.bright_texel_count,
            "camera_distance": base_cfg.camera_distance,
            "frame_fill": base_cfg.frame_fill,
            "background_clip": base_cfg.background_clip,
        },
        "subject_split": subject_split,
        "env_split": env_split,
        "image_dir": "images",
        "env_dir": "envs",
        "warnings": warnings,
    }
    manifest = DatasetManifest(root=root, data=data)

    tasks = []
    for si, sseed in enumerate(subject_seeds):
        subject = rnd.make_subject(sseed)
        for ei in range(n_envs):
            for ri in range(rotations_per_env):
                cfg_kwargs = {
                    "resolution": resolution,
                    "shadow_samples": base_cfg.shadow_samples,
                    "env_cosine_samples": base_cfg.env_cosine_samples,
                    "bright_texel_count": base_cfg.bright_texel_count,
                    "camera_distance": base_cfg.camera_distance,
                    "frame_fill": base_cfg.frame_fill,
                    "background_clip": base_cfg.background_clip,
                    "rng_seed": _sample_seed(seed, si, ei, ri),
                }
                tasks.append((root, "images", subject, root / "envs" / f"e{ei}.envf",
                              manifest.rotation(ei, ri), cfg_kwargs, si, ei, ri))

    if jobs > 1:
        with Pool(jobs) as pool:
            for _ in pool.imap_unordered(_render_one, tasks, chunksize=4):
                pass
    else:
        for t in tasks:
            _render_one(t)

    save_manifest(manifest)
    return manifest


def save_manifest(manifest: DatasetManifest):
    text = json.dumps(manifest.data, indent=2, sort_keys=True)
    (manifest.root / "manifest.json").write_text(text + "\n")


def manifest_bytes(manifest: DatasetManifest) -> bytes:
    return (json.dumps(manifest.data, indent=2, sort_keys=True) + "\n").encode()


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise IoFailure(f"no manifest at {path}")
    data = json.loads(path.read_text())
    if data.get("format_version") != MANIFEST_VERSION:
        raise IoFailure(f"unsupported manifest version {data.get('format_version')}")
    manifest = DatasetManifest(root=root, data=data)
    missing = []
    for si in range(len(manifest.subject_seeds)):
        for ei in range(manifest.n_envs):
            for ri in range(manifest.rotations_per_env):
                for p in (manifest.image_path(si, ei, ri), manifest.mask_path(si, ei, ri)):
                    if not p.exists():
                        missing.append(str(p))
    for ei in range(manifest.n_envs):
        if not manifest.env_path(ei).exists():
            missing.append(str(manifest.env_path(ei)))
    if missing:
        raise IoFailure(f"{len(missing)} referenced files missing, first: {missing[0]}")
    return manifest


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_tuple(manifest: DatasetManifest, rng: np.random.Generator,
                 split: str = "train", forbid_identity: bool = False) -> RelightTuple:
    """Draw (input i, target j) for one subject; i == j is permitted."""
    subjects = manifest.subjects(split)
    variants = manifest.variants(split)
    if not subjects or not variants:
        raise EmptySplit(f"split {split!r} has no subjects or lighting variants")
    if forbid_identity and len(variants) < 2:
        raise EmptySplit("cannot forbid identity pairs with a single variant")
    si = subjects[int(rng.integers(0, len(subjects)))]
    i = int(rng.integers(0, len(variants)))
    j = int(rng.integers(0, len(variants)))
    while forbid_identity and j == i:
        j = int(rng.integers(0, len(variants)))
    ei, ri = variants[i]
    ej, rj = variants[j]
    subject = rnd.make_subject(manifest.subject_seeds[si])
    return RelightTuple(
        input_image=manifest.load_image(si, ei, ri),
        target_image=manifest.load_image(si, ej, rj),
        ldr_env=manifest.ldr_condition(ej, rj),
        label=subject.label,
        task_flag="relight",
        input_mask=manifest.load_mask(si, ei, ri),
        provenance={"subject": si, "input": (ei, ri), "target": (ej, rj)},
    )


def sample_t2i(real_set: RealDomainSet, rng: np.random.Generator,
               resolution: int | None = None) -> RelightTuple:
    """Label-to-image tuple: black image and env conditions, real target."""
    if real_set is None or len(real_set) == 0:
        raise EmptyRealSet("real-domain set is empty")
    name = real_set.files[int(rng.integers(0, len(real_set)))]
    cache = real_set.__dict__.setdefault("_cache", {})
    if name not in cache:
        arr = np.asarray(Image.open(real_set.directory / name).convert("RGB"))
        cache[name] = arr.astype(np.float32) / 255.0
    target = cache[name]
    res = resolution or target.shape[0]
    if target.shape[0] != res or target.shape[1] != res:
        img = Image.fromarray((target * 255).round().astype(np.uint8)).resize(
            (res, res), Image.BILINEAR)
        target = np.asarray(img).astype(np.float32) / 255.0
    zeros_img = np.zeros((res, res, 3), dtype=np.float32)
    ldr = em.LdrEnvImage(width=res, height=res, pixels=zeros_img.copy())
    label = tuple(real_set.labels.get(name, (0, 0)))
    return RelightTuple(
        input_image=zeros_img,
        target_image=target,
        ldr_env=ldr,
        label=label,
        task_flag="text_to_image",
        input_mask=None,
        provenance={"real_file": name},
    )


def mix_batch(manifest: DatasetManifest, real_set: RealDomainSet | None,
              batch_size: int, relight_ratio: float,
              rng: np.random.Generator, split: str = "train",
              forbid_identity: bool = False) -> list:
    """Independent per-tuple task assignment with P(relight) = relight_ratio."""
    if not (0.0 <= relight_ratio <= 1.0):
        raise EmptySplit(f"relight_ratio {relight_ratio} out of [0, 1]")
    batch = []
    for _ in range(batch_size):
        if rng.uniform() < relight_ratio:
            batch.append(sample_tuple(manifest, rng, split, forbid_identity))
        else:
            batch.append(sample_t2i(real_set, rng, manifest.resolution))
    return batch


# ---------------------------------------------------------------------------
# Real-domain set
# ---------------------------------------------------------------------------

def load_real_set(directory) -> RealDomainSet:
    directory = Path(directory)
    files = sorted(p.name for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    labels_path = directory / "labels.json"
    labels = json.loads(labels_path.read_text()) if labels_path.exists() else {}
    return RealDomainSet(directory=directory, files=files, labels=labels)


def build_real_set(out_dir, n_images: int, seed: int, resolution: int = 64) -> RealDomainSet:
    """Default stand-in for in-the-wild portraits: a second procedural set
    with perturbed rendering (different framing, gamma shift, speckle noise)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([13, seed]))
    labels = {}
    for i in range(n_images):
        sseed = int(rng.integers(0, 2**31))
        subject = rnd.make_subject(sseed)
        spec = _make_env_specs(1, rng)[0]
        env = normalized_env(spec, 2 * 32, 32)
        cfg = rnd.RenderConfig(
            resolution=resolution,
            shadow_samples=2,
            env_cosine_samples=32,
            bright_texel_count=8,
            frame_fill=0.55,
            rng_seed=int(rng.integers(0, 2**31)),
        )
        img = rnd.render(subject, env, float(rng.uniform(0, 2 * math.pi)), cfg)
        srgb = rnd.linear_to_srgb(img).astype(np.float32) / 255.0
        # style perturbations: gamma shift + speckle
        srgb = np.power(srgb, 0.85)
        srgb = np.clip(srgb + rng.normal(0.0, 0.02, srgb.shape), 0.0, 1.0)
        name = f"real_{i}.png"
        Image.fromarray((srgb * 255).round().astype(np.uint8)).save(out / name)
        labels[name] = list(subject.label)
    (out / "labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n")
    return load_real_set(out)
