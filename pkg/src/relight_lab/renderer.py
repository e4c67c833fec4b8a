"""Monte-Carlo direct-illumination renderer over a procedural head proxy.

The scene is a sphere head with a nose bump plus an ellipsoid shoulder mass,
lit by an equirectangular environment map. Shading splits the light integral
into two unbiased halves: the brightest map texels are integrated explicitly
(with jittered sub-texel shadow rays), and the smooth remainder is estimated
with cosine-hemisphere draws whose lookups exclude those texels. Lookups use
the piecewise-constant (nearest-texel) view of the map so the two halves
partition the energy exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import envmap as em
from .errors import DegenerateScene, InvalidSpec

GENERATOR_VERSION = 1

# Linear-RGB skin albedo anchors, light to deep; jittered per subject.
SKIN_ANCHORS = np.array([
    (0.847, 0.638, 0.552),
    (0.799, 0.576, 0.474),
    (0.743, 0.513, 0.412),
    (0.682, 0.457, 0.362),
    (0.614, 0.395, 0.305),
    (0.523, 0.326, 0.243),
    (0.436, 0.263, 0.194),
    (0.356, 0.208, 0.152),
    (0.277, 0.155, 0.114),
    (0.202, 0.110, 0.081),
])

# Hair and clothing albedo anchors (linear RGB); per-subject choice and
# jitter derive from the subject seed, giving identity cues beyond skin tone.
HAIR_ANCHORS = np.array([
    (0.035, 0.028, 0.022),   # black
    (0.110, 0.062, 0.038),   # dark brown
    (0.240, 0.140, 0.065),   # auburn
    (0.470, 0.350, 0.180),   # blonde
    (0.420, 0.420, 0.440),   # gray
])
CLOTH_ANCHORS = np.array([
    (0.550, 0.090, 0.090),   # red
    (0.090, 0.160, 0.480),   # blue
    (0.100, 0.360, 0.150),   # green
    (0.480, 0.420, 0.330),   # tan
    (0.070, 0.070, 0.085),   # charcoal
    (0.700, 0.690, 0.660),   # off-white
    (0.420, 0.150, 0.380),   # plum
    (0.620, 0.400, 0.080),   # mustard
    (0.120, 0.400, 0.420),   # teal
    (0.300, 0.220, 0.520),   # violet
    (0.520, 0.260, 0.180),   # rust
    (0.180, 0.180, 0.300),   # navy
])


@dataclass
class SubjectParams:
    seed: int
    albedo: tuple
    head_radius: float
    nose_scale: float
    shoulder_extent: float
    specular_strength: float
    shininess: float
    pose_yaw: float
    label: tuple  # (skin-tone bucket, geometry bucket)


@dataclass
class RenderConfig:
    resolution: int = 64
    shadow_samples: int = 4        # jittered rays per pixel per bright-texel light term
    env_cosine_samples: int = 64   # cosine-hemisphere draws for the residual env term
    bright_texel_count: int = 16
    camera_distance: float = 6.0
    rng_seed: int = 0
    frame_fill: float = 0.7        # head diameter / frame height
    background_clip: float = 8.0   # tonemap knee for backdrop pixels

    def validate(self):
        if self.resolution < 16:
            raise InvalidSpec(f"resolution {self.resolution} < 16")
        for name in ("shadow_samples", "env_cosine_samples", "bright_texel_count"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if not (0.1 < self.frame_fill <= 1.0):
            raise InvalidSpec(f"frame_fill {self.frame_fill} out of range")
        if self.camera_distance <= 0 or self.background_clip <= 0:
            raise InvalidSpec("camera_distance and background_clip must be positive")


@dataclass
class LinearImage:
    resolution: int
    pixels: np.ndarray          # (res, res, 3) float32, linear, >= 0
    foreground_mask: np.ndarray  # (res, res) bool

    def __post_init__(self):
        if self.pixels.shape != (self.resolution, self.resolution, 3):
            raise InvalidSpec("pixel grid does not match resolution")
        if self.foreground_mask.shape != (self.resolution, self.resolution):
            raise InvalidSpec("mask dimensions do not match pixels")


def make_subject(seed: int) -> SubjectParams:
    """Deterministic subject parameters for a seed (generator version 1)."""
    rng = np.random.default_rng(np.random.SeedSequence([GENERATOR_VERSION, int(seed)]))
    skin = int(rng.integers(0, len(SKIN_ANCHORS)))
    albedo = SKIN_ANCHORS[skin] * (1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=3))
    albedo = np.clip(albedo, 1e-3, 0.999)
    head_radius = float(rng.uniform(0.85, 1.15))
    nose_scale = float(rng.uniform(0.2, 1.0))
    shoulder_extent = float(rng.uniform(1.25, 2.0))
    specular_strength = float(rng.uniform(0.05, 0.45))
    shininess = float(rng.uniform(8.0, 64.0))
    pose_yaw = float(rng.uniform(-np.pi / 6, np.pi / 6))
    geometry = (2 if head_radius >= 1.0 else 0) + (1 if nose_scale >= 0.6 else 0)
    return SubjectParams(
        seed=int(seed),
        albedo=tuple(float(a) for a in albedo),
        head_radius=head_radius,
        nose_scale=nose_scale,
        shoulder_extent=shoulder_extent,
        specular_strength=specular_strength,
        shininess=shininess,
        pose_yaw=pose_yaw,
        label=(skin, geometry),
    )


# ---------------------------------------------------------------------------
# Scene geometry
# ---------------------------------------------------------------------------

def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def surface_style(subject: SubjectParams) -> dict:
    """Seed-derived hair and clothing appearance.

    Hair covers the head sphere above ``hairline_y`` (in the unposed head
    frame, units of head radius) plus the back of the skull; shoulders wear
    the cloth color. Exposed so tests can tell skin pixels from styled ones.
    """
    rng = np.random.default_rng(np.random.SeedSequence([4, subject.seed]))
    hair = HAIR_ANCHORS[int(rng.integers(0, len(HAIR_ANCHORS)))]
    hair = np.clip(hair * (1.0 + 0.2 * rng.uniform(-1, 1, 3)), 1e-3, 0.999)
    cloth = CLOTH_ANCHORS[int(rng.integers(0, len(CLOTH_ANCHORS)))]
    cloth = np.clip(cloth * (1.0 + 0.25 * rng.uniform(-1, 1, 3)), 1e-3, 0.999)
    return {
        "hairline_y": float(rng.uniform(0.25, 0.55)),
        "hair_back_z": float(rng.uniform(0.15, 0.45)),
        "hair_albedo": hair,
        "cloth_albedo": cloth,
    }


def build_scene(subject: SubjectParams) -> dict:
    """Sphere head + nose sphere + shoulder ellipsoid, posed by yaw.

    The camera sits on -Z, so the face (nose) points toward -Z.
    """
    r = subject.head_radius
    if r <= 0 or subject.shoulder_extent <= 0:
        raise DegenerateScene("non-positive radii")
    rot = _yaw_matrix(subject.pose_yaw)
    nose_radius = r * (0.10 + 0.18 * subject.nose_scale)
    nose_center = rot @ np.array([0.0, -0.12 * r, -0.97 * r])
    albedo = np.asarray(subject.albedo)
    style = surface_style(subject)
    return {
        "spheres": [
            {"center": np.zeros(3), "radius": r, "albedo": albedo},
            {"center": nose_center, "radius": nose_radius, "albedo": albedo},
        ],
        "ellipsoid": {
            "center": np.array([0.0, -1.45 * r, 0.0]),
            "semi": np.array([subject.shoulder_extent, 0.55 * r, 0.62 * r]),
            "albedo": style["cloth_albedo"],
        },
        "head_radius": r,
        "yaw": subject.pose_yaw,
        "style": style,
    }


def _ray_sphere(origins, dirs, center, radius):
    """Smallest positive hit parameter per ray, or +inf."""
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
    return np.where(hit, t, np.inf)


def _ray_ellipsoid(origins, dirs, center, semi):
    o = (origins - center) / semi
    d = dirs / semi
    a = np.einsum("ij,ij->i", d, d)
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - 1.0
    disc = b * b - a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
    return np.where(hit, t, np.inf)


def _scene_hit(scene, origins, dirs):
    """Nearest hit over all primitives: (t, primitive index) with -1 = miss."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=np.int64)
    for idx, sph in enumerate(scene["spheres"]):
        t = _ray_sphere(origins, dirs, sph["center"], sph["radius"])
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, idx, best_id)
    ell = scene["ellipsoid"]
    t = _ray_ellipsoid(origins, dirs, ell["center"], ell["semi"])
    closer = t < best_t
    best_t = np.where(closer, t, best_t)
    best_id = np.where(closer, 2, best_id)
    return best_t, best_id


def _occluded(scene, origins, dirs):
    """True where a shadow ray hits any primitive."""
    t, _ = _scene_hit(scene, origins, dirs)
    return np.isfinite(t)


def _surface_normal(scene, prim_id, points):
    normals = np.zeros_like(points)
    for idx, sph in enumerate(scene["spheres"]):
        sel = prim_id == idx
        if np.any(sel):
            normals[sel] = points[sel] - sph["center"]
    sel = prim_id == 2
    if np.any(sel):
        ell = scene["ellipsoid"]
        normals[sel] = (points[sel] - ell["center"]) / ell["semi"] ** 2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals


def _surface_albedo(scene, prim_id, points):
    albedo = np.zeros((prim_id.shape[0], 3))
    for idx, sph in enumerate(scene["spheres"]):
        albedo[prim_id == idx] = sph["albedo"]
    albedo[prim_id == 2] = scene["ellipsoid"]["albedo"]
    # hair cap: head-sphere points above the hairline or behind the skull,
    # evaluated in the unposed head frame so hair turns with the yaw
    head = prim_id == 0
    if np.any(head):
        style = scene["style"]
        r = scene["head_radius"]
        local = points[head] @ _yaw_matrix(scene["yaw"])  # inverse yaw
        hairy = (local[:, 1] > style["hairline_y"] * r) | (local[:, 2] > style["hair_back_z"] * r)
        idx = np.where(head)[0][hairy]
        albedo[idx] = style["hair_albedo"]
    return albedo


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

def camera_rays(subject_head_radius: float, config: RenderConfig):
    """Pinhole rays through a square frame on the z=0 plane.

    Framing: head diameter spans frame_fill of the frame height, frame center
    dropped below the head center so the shoulders read as a headshot crop.
    """
    res = config.resolution
    r = subject_head_radius
    frame_h = 2.0 * r / config.frame_fill
    cy = -0.35 * r
    cam = np.array([0.0, cy, -config.camera_distance])
    px = (np.arange(res) + 0.5) / res
    xs = (px - 0.5) * frame_h
    ys = (0.5 - px) * frame_h + cy
    gx, gy = np.meshgrid(xs, ys)
    targets = np.stack([gx, gy, np.zeros_like(gx)], axis=-1).reshape(-1, 3)
    dirs = targets - cam
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam, dirs.shape).copy()
    return origins, dirs


def _cosine_hemisphere(normals, u1, u2):
    """Cosine-weighted directions about each normal (Malley mapping)."""
    phi = 2.0 * np.pi * u1
    sin_t = np.sqrt(u2)
    local = np.stack([
        np.cos(phi) * sin_t,
        np.sin(phi) * sin_t,
        np.sqrt(np.clip(1.0 - u2, 0.0, None)),
    ], axis=-1)
    w = normals
    helper = np.where(np.abs(w[..., 0:1]) > 0.9, [0.0, 1.0, 0.0], [1.0, 0.0, 0.0])
    v = np.cross(w, helper)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    u = np.cross(w, v)
    return (
        local[..., 0:1] * u + local[..., 1:2] * v + local[..., 2:3] * w
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_background(env: em.EnvMap, rotation: float, config: RenderConfig,
                      head_radius: float = 1.0) -> np.ndarray:
    """Tonemapped environment backdrop seen by the camera, (res, res, 3)."""
    env_r = em.rotate(env, rotation) if rotation != 0.0 else env
    _, dirs = camera_rays(head_radius, config)
    radiance = em.sample_dir(env_r, dirs)
    bg = em.tonemap_curve(radiance, config.background_clip)
    res = config.resolution
    return bg.reshape(res, res, 3).astype(np.float32)


def render(subject: SubjectParams, env: em.EnvMap, rotation: float,
           config: RenderConfig) -> LinearImage:
    """Render the subject under the rotated environment."""
    config.validate()
    scene = build_scene(subject)
    env_r = em.rotate(env, rotation) if rotation != 0.0 else env
    res = config.resolution

    origins, dirs = camera_rays(subject.head_radius, config)
    t, prim_id = _scene_hit(scene, origins, dirs)
    hit = prim_id >= 0

    image = np.zeros((res * res, 3))
    # backdrop: tonemapped env along the miss rays
    if np.any(~hit):
        radiance = em.sample_dir(env_r, dirs[~hit])
        image[~hit] = em.tonemap_curve(radiance, config.background_clip)

    if np.any(hit):
        points = origins[hit] + t[hit, None] * dirs[hit]
        normals = _surface_normal(scene, prim_id[hit], points)
        albedo = _surface_albedo(scene, prim_id[hit], points)
        view = -dirs[hit]
        shading = _shade(scene, env_r, points, normals, albedo, view,
                         subject, config)
        image[hit] = shading

    return LinearImage(
        resolution=res,
        pixels=np.clip(image, 0.0, None).reshape(res, res, 3).astype(np.float32),
        foreground_mask=hit.reshape(res, res),
    )


def _shade(scene, env_r, points, normals, albedo, view, subject, config):
    n_pix = points.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([2, config.rng_seed]))
    eps = 1e-4 * scene["head_radius"]
    offset = points + eps * normals

    ks = subject.specular_strength
    shin = subject.shininess
    # view reflection for the Phong lobe, energy-normalized (shin+2)/(2pi)
    refl = 2.0 * np.einsum("ij,ij->i", normals, view)[:, None] * normals - view
    phong_norm = (shin + 2.0) / (2.0 * np.pi)

    h, w = env_r.height, env_r.width
    texels = env_r.pixels.reshape(-1, 3)
    lum = texels @ np.array([0.2126, 0.7152, 0.0722])
    k = min(config.bright_texel_count, texels.shape[0])
    bright = np.argsort(lum)[::-1][:k].copy()
    bright_set = np.zeros(h * w, dtype=bool)
    bright_set[bright] = True
    solid = em.texel_solid_angles(w, h)

    diffuse = np.zeros((n_pix, 3))
    specular = np.zeros((n_pix, 3))

    # --- explicit bright-texel term, jittered over each texel's footprint ---
    rows, cols = bright // w, bright % w
    s = config.shadow_samples
    for row, col, tex_idx in zip(rows, cols, bright):
        radiance = texels[tex_idx]
        if not np.any(radiance > 0.0):
            continue
        omega = solid[row]
        ju = (col + rng.uniform(0.0, 1.0, size=(n_pix, s))) / w
        jv = (row + rng.uniform(0.0, 1.0, size=(n_pix, s))) / h
        azim = ju * 2.0 * np.pi - np.pi
        theta = jv * np.pi
        st = np.sin(theta)
        ldir = np.stack([st * np.sin(azim), np.cos(theta), st * np.cos(azim)], axis=-1)
        cos_t = np.clip(np.einsum("pj,psj->ps", normals, ldir), 0.0, None)
        active = cos_t > 0.0
        vis = np.zeros_like(cos_t)
        if np.any(active):
            o = np.repeat(offset, s, axis=0)[active.ravel()]
            d = ldir.reshape(-1, 3)[active.ravel()]
            vis_flat = ~_occluded(scene, o, d)
            vis[active] = vis_flat.astype(np.float64)
        weight = (vis * cos_t).mean(axis=1)
        diffuse += (omega / np.pi) * weight[:, None] * radiance[None, :] * albedo
        if ks > 0.0:
            ralign = np.clip(np.einsum("pj,psj->ps", refl, ldir), 0.0, None) ** shin
            sweight = (vis * cos_t * ralign).mean(axis=1)
            specular += ks * phong_norm * omega * sweight[:, None] * radiance[None, :]

    # --- residual environment term via cosine-hemisphere sampling ----------
    n_cos = config.env_cosine_samples
    u1 = rng.uniform(0.0, 1.0, size=(n_pix, n_cos))
    u2 = rng.uniform(0.0, 1.0, size=(n_pix, n_cos))
    ldir = _cosine_hemisphere(normals[:, None, :], u1, u2)
    flat_dir = ldir.reshape(-1, 3)
    trow, tcol = em.nearest_texel_index(env_r, flat_dir)
    tex_idx = trow * w + tcol
    radiance = texels[tex_idx]
    radiance[bright_set[tex_idx]] = 0.0  # already counted explicitly
    lit = np.any(radiance > 0.0, axis=1)
    vis = np.zeros(n_pix * n_cos)
    if np.any(lit):
        o = np.repeat(offset, n_cos, axis=0)[lit]
        vis[lit] = (~_occluded(scene, o, flat_dir[lit])).astype(np.float64)
    contrib = (radiance * vis[:, None]).reshape(n_pix, n_cos, 3)
    diffuse += contrib.mean(axis=1) * albedo
    if ks > 0.0:
        ralign = np.clip(np.einsum("pj,psj->ps", refl, ldir), 0.0, None) ** shin
        spec_c = contrib * ralign[..., None]
        specular += ks * phong_norm * np.pi * spec_c.mean(axis=1)

    return diffuse + specular


def linear_to_srgb(image: LinearImage) -> np.ndarray:
    """Standard sRGB transfer to an 8-bit (res, res, 3) array."""
    return srgb_encode(image.pixels)


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(linear, 0.0, 1.0)
    low = x * 12.92
    high = 1.055 * np.power(x, 1.0 / 2.4, where=x > 0, out=np.zeros_like(x)) - 0.055
    encoded = np.where(x <= 0.0031308, low, high)
    return np.clip(np.round(encoded * 255.0), 0, 255).astype(np.uint8)


def srgb_decode(img8: np.ndarray) -> np.ndarray:
    """Inverse of srgb_encode for [0,255] uint8 input, to linear float."""
    x = img8.astype(np.float64) / 255.0
    low = x / 12.92
    high = np.power((x + 0.055) / 1.055, 2.4)
    return np.where(x <= 0.04045, low, high).astype(np.float32)


def write_linear_raster(image: LinearImage, path):
    """`IMGF w h` float raster for linear images (no aspect constraint)."""
    with open(path, "wb") as f:
        f.write(b"IMGF %d %d\n" % (image.resolution, image.resolution))
        f.write(np.ascontiguousarray(image.pixels, dtype="<f4").tobytes())
