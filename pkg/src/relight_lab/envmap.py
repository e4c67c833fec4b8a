"""Equirectangular HDR environment maps: file I/O, directional sampling,
rotation about the vertical axis, LDR tonemapping, and procedural generation.

Direction convention (used by the renderer as well): +Y is up, +Z is forward.
The polar angle theta is measured from +Y; azimuth is 0 at +Z and increases
toward +X. A map column at horizontal coordinate u covers azimuth
u / width * 2*pi - pi, so the left edge is azimuth -pi and the center
column looks down +Z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AspectViolation,
    InvalidSpec,
    MalformedHeader,
    NonNegativeViolation,
    NonPositiveClip,
    NonUnitDirection,
    TruncatedPayload,
)

_UNIT_TOL = 1e-6
_ENVF_MAGIC = b"ENVF"

ENV_KINDS = ("sun_sky", "point_lights", "studio_preset")
ENV_PRESETS = ("backlight", "rembrandt", "none")


@dataclass
class EnvMap:
    """Linear-radiance equirectangular raster. width == 2 * height.

    ``pixels`` is a read-only float32 array of shape (height, width, 3).
    """

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.shape != (self.height, self.width, 3):
            raise AspectViolation(
                f"pixel grid {px.shape} does not match {self.height}x{self.width}x3"
            )
        if self.height < 2 or self.width != 2 * self.height:
            raise AspectViolation(
                f"equirectangular map needs width == 2*height >= 4, got {self.width}x{self.height}"
            )
        if not np.all(np.isfinite(px)):
            raise NonNegativeViolation("non-finite radiance value")
        if np.any(px < 0.0):
            raise NonNegativeViolation("negative radiance value")
        px.flags.writeable = False
        self.pixels = px

    @classmethod
    def from_pixels(cls, pixels: np.ndarray) -> "EnvMap":
        pixels = np.asarray(pixels, dtype=np.float32)
        h, w = pixels.shape[:2]
        return cls(width=w, height=h, pixels=pixels)


@dataclass
class LdrEnvImage:
    """Tonemapped lighting condition; all channels in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.shape != (self.height, self.width, 3):
            raise AspectViolation(
                f"pixel grid {px.shape} does not match {self.height}x{self.width}x3"
            )
        if np.any(px < 0.0) or np.any(px > 1.0) or not np.all(np.isfinite(px)):
            raise NonNegativeViolation("LDR channels must lie in [0, 1]")
        px.flags.writeable = False
        self.pixels = px


@dataclass
class EnvSpec:
    """Recipe for a procedural lighting environment."""

    kind: str = "sun_sky"
    preset: str = "none"
    sun_direction: tuple = (0.0, 0.0, 1.0)
    sun_intensity: float = 50.0
    sun_angular_radius: float = 0.15
    sky_tint: tuple = (0.3, 0.4, 0.6)
    seed: int = 0

    def validate(self):
        if self.kind not in ENV_KINDS:
            raise InvalidSpec(f"unknown kind {self.kind!r}")
        if self.preset not in ENV_PRESETS:
            raise InvalidSpec(f"unknown preset {self.preset!r}")
        if self.kind == "studio_preset" and self.preset == "none":
            raise InvalidSpec("studio_preset requires a named preset")
        if not (self.sun_intensity >= 0.0 and np.isfinite(self.sun_intensity)):
            raise InvalidSpec(f"sun_intensity {self.sun_intensity} out of range")
        if not (0.0 < self.sun_angular_radius < np.pi / 2):
            raise InvalidSpec(f"sun_angular_radius {self.sun_angular_radius} out of range")
        d = np.asarray(self.sun_direction, dtype=np.float64)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > _UNIT_TOL:
            raise InvalidSpec("sun_direction must be a unit 3-vector")
        tint = np.asarray(self.sky_tint, dtype=np.float64)
        if tint.shape != (3,) or np.any(tint < 0.0) or not np.all(np.isfinite(tint)):
            raise InvalidSpec("sky_tint must be nonnegative rgb")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "preset": self.preset,
            "sun_direction": [float(v) for v in self.sun_direction],
            "sun_intensity": float(self.sun_intensity),
            "sun_angular_radius": float(self.sun_angular_radius),
            "sky_tint": [float(v) for v in self.sky_tint],
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(
            kind=d["kind"],
            preset=d["preset"],
            sun_direction=tuple(d["sun_direction"]),
            sun_intensity=d["sun_intensity"],
            sun_angular_radius=d["sun_angular_radius"],
            sky_tint=tuple(d["sky_tint"]),
            seed=d["seed"],
        )


# ---------------------------------------------------------------------------
# ENVF raster I/O
# ---------------------------------------------------------------------------

def load_raster(path) -> EnvMap:
    """Read an `ENVF <width> <height>\\n` + float32-LE payload raster."""
    with open(path, "rb") as f:
        header = f.readline(128)
        if not header.endswith(b"\n"):
            raise MalformedHeader("missing newline-terminated header")
        parts = header[:-1].split(b" ")
        if len(parts) != 3 or parts[0] != _ENVF_MAGIC:
            raise MalformedHeader(f"bad magic/field count in {header!r}")
        try:
            width, height = int(parts[1]), int(parts[2])
        except ValueError:
            raise MalformedHeader(f"non-integer dimensions in {header!r}") from None
        if width <= 0 or height <= 0:
            raise MalformedHeader(f"non-positive dimensions {width}x{height}")
        if height < 2 or width != 2 * height:
            raise AspectViolation(f"width {width} != 2 * height {height}")
        count = width * height * 3
        payload = f.read(count * 4)
    if len(payload) < count * 4:
        raise TruncatedPayload(
            f"expected {count} floats, got {len(payload) // 4}"
        )
    pixels = np.frombuffer(payload, dtype="<f4", count=count).reshape(height, width, 3)
    return EnvMap(width=width, height=height, pixels=pixels)


def write_raster(env: EnvMap, path):
    """Emit the byte layout load_raster reads; round-trips bit-exactly."""
    with open(path, "wb") as f:
        f.write(b"ENVF %d %d\n" % (env.width, env.height))
        f.write(np.ascontiguousarray(env.pixels, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# Directional sampling
# ---------------------------------------------------------------------------

def _dirs_to_uv(direction: np.ndarray, width: int, height: int):
    """Map unit directions (..., 3) to continuous pixel coordinates (u, v)."""
    x, y, z = direction[..., 0], direction[..., 1], direction[..., 2]
    theta = np.arccos(np.clip(y, -1.0, 1.0))
    azimuth = np.arctan2(x, z)
    u = (azimuth + np.pi) / (2.0 * np.pi) * width
    v = theta / np.pi * height
    return u, v


def _bilinear(pixels: np.ndarray, u, v):
    """Bilinear lookup at pixel-center coordinates, wrapping in longitude and
    clamping in latitude."""
    h, w = pixels.shape[:2]
    xs = np.asarray(u) - 0.5
    ys = np.asarray(v) - 0.5
    c0 = np.floor(xs).astype(np.int64)
    r0 = np.floor(ys).astype(np.int64)
    fx = (xs - c0)[..., None]
    fy = (ys - r0)[..., None]
    c1 = (c0 + 1) % w
    c0 = c0 % w
    r1 = np.clip(r0 + 1, 0, h - 1)
    r0 = np.clip(r0, 0, h - 1)
    top = pixels[r0, c0] * (1.0 - fx) + pixels[r0, c1] * fx
    bot = pixels[r1, c0] * (1.0 - fx) + pixels[r1, c1] * fx
    return top * (1.0 - fy) + bot * fy


def sample_dir(env: EnvMap, direction) -> np.ndarray:
    """Bilinear radiance lookup for a unit direction (or an (N, 3) batch)."""
    d = np.asarray(direction, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise NonUnitDirection(f"direction norm {norms} outside 1 +- {_UNIT_TOL}")
    u, v = _dirs_to_uv(d, env.width, env.height)
    out = _bilinear(env.pixels, u, v)
    return out.astype(np.float32)


def nearest_texel_index(env: EnvMap, direction: np.ndarray):
    """(row, col) of the texel containing each direction; no interpolation.

    The renderer uses this piecewise-constant view of the map so its split
    light estimator can exclude explicitly-sampled texels without bilinear
    energy leaking across texel borders.
    """
    u, v = _dirs_to_uv(np.asarray(direction, dtype=np.float64), env.width, env.height)
    col = np.floor(u).astype(np.int64) % env.width
    row = np.clip(np.floor(v).astype(np.int64), 0, env.height - 1)
    return row, col


def texel_directions(width: int, height: int) -> np.ndarray:
    """(height, width, 3) array of unit directions at texel centers."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    azimuth = u * 2.0 * np.pi - np.pi
    theta = v * np.pi
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    x = st * np.sin(azimuth)[None, :]
    z = st * np.cos(azimuth)[None, :]
    y = np.broadcast_to(ct, (height, width))
    return np.stack([x, y, z], axis=-1)


def texel_solid_angles(width: int, height: int) -> np.ndarray:
    """(height,) exact solid angle of one texel in each row."""
    theta_edges = np.arange(height + 1) / height * np.pi
    band = np.cos(theta_edges[:-1]) - np.cos(theta_edges[1:])
    return band * (2.0 * np.pi / width)


# ---------------------------------------------------------------------------
# Rotation and tonemapping
# ---------------------------------------------------------------------------

def rotate(env: EnvMap, angle: float) -> EnvMap:
    """Rotate the environment about +Y by ``angle`` radians.

    Implemented as a longitudinal shift of angle/(2*pi)*width columns; content
    moves toward increasing azimuth, so sampling the rotated map along d
    equals sampling the original along d rotated by -angle about +Y.
    """
    if not np.isfinite(angle):
        raise InvalidSpec(f"rotation angle {angle} not finite")
    shift = float(angle) / (2.0 * np.pi) * env.width
    k = int(np.floor(shift))
    frac = shift - k
    rolled = np.roll(env.pixels, k % env.width, axis=1)
    if frac == 0.0:
        out = rolled
    else:
        out = (1.0 - frac) * rolled + frac * np.roll(env.pixels, (k + 1) % env.width, axis=1)
    return EnvMap(width=env.width, height=env.height, pixels=out.astype(np.float32))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix of exact interval overlaps."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                w[o, i] = overlap / scale
    return w


def area_resize(pixels: np.ndarray, out_width: int, out_height: int) -> np.ndarray:
    """Energy-preserving box resize of an (H, W, C) array."""
    h, w = pixels.shape[:2]
    wr = _area_weights(h, out_height)
    wc = _area_weights(w, out_width)
    mid = np.einsum("oh,hwc->owc", wr, pixels.astype(np.float64))
    return np.einsum("pw,owc->opc", wc, mid)


def tonemap_curve(values: np.ndarray, clip_max: float) -> np.ndarray:
    """clip -> divide by clip_max -> gamma 1/2.2; monotone into [0, 1]."""
    if not (clip_max > 0):
        raise NonPositiveClip(f"clip_max must be positive, got {clip_max}")
    clipped = np.clip(values, 0.0, clip_max) / clip_max
    return np.power(clipped, 1.0 / 2.2)


def tonemap_ldr(env: EnvMap, clip_max: float, out_width: int, out_height: int) -> LdrEnvImage:
    """Resize (area average), then clip/normalize/gamma into an LDR condition."""
    if not (clip_max > 0):
        raise NonPositiveClip(f"clip_max must be positive, got {clip_max}")
    if out_width < 1 or out_height < 1:
        raise InvalidSpec(f"output dimensions {out_width}x{out_height} invalid")
    resized = area_resize(env.pixels, out_width, out_height)
    ldr = tonemap_curve(resized, clip_max)
    return LdrEnvImage(width=out_width, height=out_height, pixels=ldr.astype(np.float32))


# ---------------------------------------------------------------------------
# Procedural environments
# ---------------------------------------------------------------------------

def _gaussian_disc(dirs: np.ndarray, center: np.ndarray, angular_radius: float) -> np.ndarray:
    """Smooth compact disc: Gaussian falloff with sigma = radius/2, truncated
    at 3 sigma so a sun-only map is exactly zero away from the disc."""
    cosang = np.clip(dirs @ center, -1.0, 1.0)
    ang = np.arccos(cosang)
    sigma = angular_radius / 2.0
    g = np.exp(-0.5 * (ang / sigma) ** 2)
    g[ang > 3.0 * sigma] = 0.0
    return g


def procedural_env(spec: EnvSpec, width: int, height: int) -> EnvMap:
    """Deterministically synthesize an HDR environment from a spec."""
    spec.validate()
    if height < 2 or width != 2 * height:
        raise InvalidSpec(f"requested {width}x{height} is not equirectangular")
    dirs = texel_directions(width, height)
    flat = dirs.reshape(-1, 3)
    out = np.zeros((height * width, 3), dtype=np.float64)

    if spec.kind == "sun_sky":
        tint = np.asarray(spec.sky_tint, dtype=np.float64)
        up_frac = (flat[:, 1] + 1.0) * 0.5  # 0 at nadir, 1 at zenith
        out += up_frac[:, None] * tint[None, :]
        sun = np.asarray(spec.sun_direction, dtype=np.float64)
        g = _gaussian_disc(flat, sun, spec.sun_angular_radius)
        out += spec.sun_intensity * g[:, None]

    elif spec.kind == "point_lights":
        rng = np.random.default_rng(np.random.SeedSequence([7, spec.seed]))
        n_lights = int(rng.integers(2, 5))
        tint = np.asarray(spec.sky_tint, dtype=np.float64)
        out += 0.05 * tint[None, :]
        for _ in range(n_lights):
            azim = rng.uniform(-np.pi, np.pi)
            elev = rng.uniform(-0.2, 1.1)
            c = np.array([
                np.cos(elev) * np.sin(azim),
                np.sin(elev),
                np.cos(elev) * np.cos(azim),
            ])
            radius = rng.uniform(0.08, 0.25)
            intensity = rng.uniform(5.0, spec.sun_intensity if spec.sun_intensity > 5 else 50.0)
            color = rng.uniform(0.6, 1.0, size=3)
            g = _gaussian_disc(flat, c, radius)
            out += intensity * g[:, None] * color[None, :]

    else:  # studio_preset
        tint = np.asarray(spec.sky_tint, dtype=np.float64)
        if spec.preset == "backlight":
            # key light directly behind the subject, mid elevation
            azim, elev = np.pi, np.pi / 5
            key = np.array([
                np.cos(elev) * np.sin(azim),
                np.sin(elev),
                np.cos(elev) * np.cos(azim),
            ])
            g = _gaussian_disc(flat, key, 0.35)
            out += spec.sun_intensity * g[:, None]
            # faint front fill keeps the face from going fully black
            front = np.clip(flat @ np.array([0.0, 0.2, -0.98]) / np.linalg.norm([0.0, 0.2, -0.98]), 0, None)
            out += 0.04 * spec.sun_intensity / 50.0 * front[:, None] * tint[None, :]
        else:  # rembrandt
            azim, elev = np.pi / 4, np.pi / 6
            key = np.array([
                np.cos(elev) * np.sin(azim),
                np.sin(elev),
                np.cos(elev) * np.cos(azim),
            ])
            g = _gaussian_disc(flat, key, 0.3)
            out += spec.sun_intensity * g[:, None]
            # dim gradient fill restricted to the key's hemisphere
            side = np.clip(flat @ key, 0.0, None)
            out += 0.03 * spec.sun_intensity / 50.0 * side[:, None] * tint[None, :]

    pixels = out.reshape(height, width, 3).astype(np.float32)
    return EnvMap(width=width, height=height, pixels=pixels)
