import numpy as np
import pytest

from relight_lab import envmap as em
from relight_lab import renderer as rnd
from relight_lab.errors import DegenerateScene, InvalidSpec


def _own_ray_sphere_hit(origin, direction, center, radius):
    """Independent quadratic-solve occlusion oracle for the tests."""
    oc = origin - center
    b = float(np.dot(oc, direction))
    c = float(np.dot(oc, oc)) - radius * radius
    disc = b * b - c
    if disc < 0:
        return False
    sq = np.sqrt(disc)
    return (-b - sq) > 1e-6 or (-b + sq) > 1e-6


class TestMakeSubject:
    def test_deterministic(self):
        assert rnd.make_subject(0) == rnd.make_subject(0)

    def test_ranges(self):
        for seed in range(30):
            s = rnd.make_subject(seed)
            assert all(0 < a < 1 for a in s.albedo)
            assert s.head_radius > 0
            assert 0 <= s.nose_scale <= 1
            assert s.shininess >= 1
            assert 0 <= s.specular_strength <= 1
            assert -np.pi / 6 <= s.pose_yaw <= np.pi / 6
            assert 0 <= s.label[0] < 10 and 0 <= s.label[1] < 4

    def test_seeds_differ(self):
        assert rnd.make_subject(0) != rnd.make_subject(1)

    def test_style_deterministic(self):
        s = rnd.make_subject(5)
        a = rnd.surface_style(s)
        b = rnd.surface_style(s)
        assert np.array_equal(a["hair_albedo"], b["hair_albedo"])
        assert a["hairline_y"] == b["hairline_y"]


def _skin_pixel_rows(subject, config):
    """Rows/cols of pixels that hit bare skin on the head sphere with a fully
    unoccluded upper hemisphere (checked with the test's own oracle)."""
    scene = rnd.build_scene(subject)
    origins, dirs = rnd.camera_rays(subject.head_radius, config)
    t, prim = rnd._scene_hit(scene, origins, dirs)
    res = config.resolution
    style = scene["style"]
    r = subject.head_radius
    hits = []
    for idx in np.flatnonzero(prim == 0):
        p = origins[idx] + t[idx] * dirs[idx]
        local = rnd._yaw_matrix(subject.pose_yaw).T @ p
        if local[1] > (style["hairline_y"] - 0.1) * r or local[2] > (style["hair_back_z"] - 0.1) * r:
            continue  # hair or too close to it
        n = p / np.linalg.norm(p)
        # oracle: a fan of hemisphere directions must all be unoccluded
        clear = True
        rng = np.random.default_rng(0)
        for _ in range(60):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            if np.dot(d, n) <= 0.05:
                continue
            o = p + 1e-4 * n
            for sph in scene["spheres"]:
                if _own_ray_sphere_hit(o, d, sph["center"], sph["radius"]):
                    clear = False
            ell = scene["ellipsoid"]
            so = (o - ell["center"]) / ell["semi"]
            sd = d / ell["semi"]
            aa = np.dot(sd, sd)
            bb = np.dot(so, sd)
            cc = np.dot(so, so) - 1
            if bb * bb - aa * cc >= 0:
                tq = (-bb - np.sqrt(bb * bb - aa * cc)) / aa
                tq2 = (-bb + np.sqrt(bb * bb - aa * cc)) / aa
                if tq > 1e-6 or tq2 > 1e-6:
                    clear = False
            if not clear:
                break
        if clear:
            hits.append((idx // res, idx % res))
    return hits


class TestRenderAnalytic:
    def test_zero_env_black_image(self):
        subject = rnd.make_subject(1)
        env = em.EnvMap.from_pixels(np.zeros((16, 32, 3), np.float32))
        cfg = rnd.RenderConfig(resolution=32, rng_seed=0)
        img = rnd.render(subject, env, 0.0, cfg)
        assert np.all(img.pixels == 0.0)
        assert img.foreground_mask.any() and not img.foreground_mask.all()

    def test_uniform_env_lambertian_equals_albedo(self):
        # for uniform radiance L, (1/pi) * integral(L cos) = L, so an
        # unoccluded Lambertian point renders exactly albedo * L
        subject = rnd.make_subject(3)
        subject.specular_strength = 0.0
        env = em.EnvMap.from_pixels(np.ones((32, 64, 3), np.float32))
        cfg = rnd.RenderConfig(resolution=32, shadow_samples=256,
                               env_cosine_samples=256, rng_seed=2)
        img = rnd.render(subject, env, 0.0, cfg)
        skin = _skin_pixel_rows(subject, cfg)
        assert len(skin) >= 3
        albedo = np.asarray(subject.albedo)
        for row, col in skin[:5]:
            rel = np.abs(img.pixels[row, col] / albedo - 1.0).max()
            assert rel < 0.02, f"pixel ({row},{col}) off by {rel:.3%}"

    def test_sun_occlusion_zero_diffuse(self):
        # elevated sun behind the head; shoulder points that face the sun but
        # whose shadow rays (own oracle) hit the head must get no direct light
        sun_dir = np.array([0.0, np.sqrt(0.5), np.sqrt(0.5)])
        spec = em.EnvSpec(kind="sun_sky", sun_direction=tuple(sun_dir),
                          sun_intensity=100.0, sun_angular_radius=0.1,
                          sky_tint=(0.0, 0.0, 0.0))
        env = em.procedural_env(spec, 64, 32)
        n_lit = int((env.pixels.sum(axis=2) > 0).sum())
        subject = rnd.make_subject(5)
        subject.specular_strength = 0.0
        subject.pose_yaw = 0.0
        cfg = rnd.RenderConfig(resolution=48, shadow_samples=8,
                               env_cosine_samples=64,
                               bright_texel_count=max(n_lit, 8), rng_seed=3)
        img = rnd.render(subject, env, 0.0, cfg)

        scene = rnd.build_scene(subject)
        origins, dirs = rnd.camera_rays(subject.head_radius, cfg)
        t, prim = rnd._scene_hit(scene, origins, dirs)
        head = scene["spheres"][0]
        # fan of directions covering the truncated sun disc (3 sigma = 0.15 rad)
        u = np.cross(sun_dir, [1.0, 0.0, 0.0])
        u /= np.linalg.norm(u)
        v = np.cross(sun_dir, u)
        fan = [sun_dir]
        for ang in np.linspace(0, 2 * np.pi, 8, endpoint=False):
            d = sun_dir + 0.17 * (np.cos(ang) * u + np.sin(ang) * v)
            fan.append(d / np.linalg.norm(d))
        checked = 0
        for idx in np.flatnonzero(prim == 2):  # shoulder ellipsoid
            p = origins[idx] + t[idx] * dirs[idx]
            ell = scene["ellipsoid"]
            n = (p - ell["center"]) / ell["semi"] ** 2
            n /= np.linalg.norm(n)
            if np.dot(n, sun_dir) < 0.2:
                continue
            o = p + 1e-4 * n
            if not all(_own_ray_sphere_hit(o, d, head["center"], head["radius"])
                       for d in fan):
                continue  # not safely inside the cast shadow of the whole disc
            row, col = idx // cfg.resolution, idx % cfg.resolution
            assert np.all(img.pixels[row, col] == 0.0)
            checked += 1
        assert checked >= 3

    def test_radiance_linearity(self):
        rng = np.random.default_rng(4)
        spec = em.EnvSpec(kind="sun_sky", sun_direction=(0.5, 0.5, np.sqrt(0.5)),
                          sun_intensity=10.0, sun_angular_radius=0.3,
                          sky_tint=(0.3, 0.25, 0.2))
        env1 = em.procedural_env(spec, 64, 32)
        env2 = em.EnvMap.from_pixels(env1.pixels * 2.0)
        for seed in range(10):
            subject = rnd.make_subject(100 + seed)
            cfg = rnd.RenderConfig(resolution=24, shadow_samples=2,
                                   env_cosine_samples=32, rng_seed=7)
            a = rnd.render(subject, env1, 0.3, cfg)
            b = rnd.render(subject, env2, 0.3, cfg)
            m = a.foreground_mask
            # the estimator is exactly linear in radiance at fixed seed
            assert np.allclose(b.pixels[m], 2.0 * a.pixels[m], atol=1e-5)

    def test_determinism(self):
        subject = rnd.make_subject(6)
        env = em.procedural_env(em.EnvSpec(seed=1), 64, 32)
        cfg = rnd.RenderConfig(resolution=24, rng_seed=9)
        a = rnd.render(subject, env, 1.0, cfg)
        b = rnd.render(subject, env, 1.0, cfg)
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.foreground_mask, b.foreground_mask)

    def test_rotation_period(self):
        subject = rnd.make_subject(6)
        env = em.procedural_env(em.EnvSpec(seed=2), 64, 32)
        cfg = rnd.RenderConfig(resolution=24, rng_seed=9)
        a = rnd.render(subject, env, 0.0, cfg)
        b = rnd.render(subject, env, 2 * np.pi, cfg)
        assert np.array_equal(a.pixels, b.pixels)

    def test_mask_matches_background(self):
        subject = rnd.make_subject(7)
        env = em.procedural_env(em.EnvSpec(seed=3), 64, 32)
        cfg = rnd.RenderConfig(resolution=24, rng_seed=1)
        img = rnd.render(subject, env, 0.7, cfg)
        bg = rnd.render_background(env, 0.7, cfg, subject.head_radius)
        m = img.foreground_mask
        assert np.allclose(img.pixels[~m], bg[~m], atol=1e-6)

    def test_degenerate_scene(self):
        subject = rnd.make_subject(0)
        subject.head_radius = -1.0
        env = em.procedural_env(em.EnvSpec(), 64, 32)
        with pytest.raises(DegenerateScene):
            rnd.render(subject, env, 0.0, rnd.RenderConfig(resolution=16))

    def test_config_validation(self):
        with pytest.raises(InvalidSpec):
            rnd.RenderConfig(resolution=8).validate()
        with pytest.raises(InvalidSpec):
            rnd.RenderConfig(env_cosine_samples=0).validate()


class TestSrgb:
    def test_fixed_points(self):
        img = rnd.LinearImage(
            resolution=16,
            pixels=np.zeros((16, 16, 3), np.float32),
            foreground_mask=np.zeros((16, 16), bool),
        )
        assert np.all(rnd.linear_to_srgb(img) == 0)
        img.pixels = np.ones((16, 16, 3), np.float32)
        assert np.all(rnd.linear_to_srgb(img) == 255)

    def test_half_value(self):
        # round(255 * (1.055 * 0.5**(1/2.4) - 0.055)) = 188
        assert rnd.srgb_encode(np.array([[[0.5, 0.5, 0.5]]]))[0, 0, 0] == 188

    def test_decode_inverts_encode(self):
        vals = np.linspace(0, 1, 64).reshape(1, -1, 1).repeat(3, axis=2)
        enc = rnd.srgb_encode(vals)
        dec = rnd.srgb_decode(enc)
        assert np.abs(dec - vals).max() < 1.0 / 255.0

    def test_linear_raster(self, tmp_path):
        img = rnd.LinearImage(
            resolution=16,
            pixels=np.random.default_rng(0).uniform(0, 2, (16, 16, 3)).astype(np.float32),
            foreground_mask=np.zeros((16, 16), bool),
        )
        path = tmp_path / "img.imgf"
        rnd.write_linear_raster(img, path)
        raw = path.read_bytes()
        assert raw.startswith(b"IMGF 16 16\n")
        payload = np.frombuffer(raw[len(b"IMGF 16 16\n"):], dtype="<f4")
        assert np.array_equal(payload.reshape(16, 16, 3), img.pixels)
