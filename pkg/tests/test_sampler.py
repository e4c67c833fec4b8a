import numpy as np
import pytest
import torch

from relight_lab import diffusion as df
from relight_lab import envmap as em
from relight_lab import sampler as sp
from relight_lab.errors import EmptyList, InvalidSpec, StepOrderViolation, StepOutOfRange


class _ScriptedStub:
    """Model whose output depends only on which conditions are active:
    base (image dropped) -> v0, image kept w/o label -> v1, full -> v2."""

    def __init__(self, v0=0.0, v1=1.0, v2=2.0):
        self.vals = (v0, v1, v2)

    def __call__(self, packed, t, label):
        ch = packed.channels
        img_on = float(ch[:, 3:6].abs().sum() > 0)
        flag = packed.drop_flags.label_dropped
        lab_on = 0.0 if (flag is True or (torch.is_tensor(flag) and bool(flag.all()))) else 1.0
        if not img_on:
            v = self.vals[0]
        elif not lab_on:
            v = self.vals[1]
        else:
            v = self.vals[2]
        return torch.full_like(ch[:, 0:3], v)


class _HashStub:
    """Deterministic pseudo-random output per distinct (input, flags) call."""

    def __call__(self, packed, t, label):
        ch = packed.channels
        flag = packed.drop_flags.label_dropped
        lab_on = 0 if (flag is True or (torch.is_tensor(flag) and bool(flag.all()))) else 1
        key = int(abs(float(ch.sum())) * 977) % 99991 + 13 * lab_on
        gen = torch.Generator().manual_seed(key)
        return torch.randn(ch[:, 0:3].shape, generator=gen)


def _args(x=None, res=8):
    x = torch.zeros(1, 3, res, res) if x is None else x
    return (x, torch.ones(1, 3, res, res), torch.ones(1, 3, res, res),
            torch.zeros(1, 2, dtype=torch.long))


class TestCfgEpsilon:
    def test_scalar_example(self):
        x, img, env, lab = _args()
        g = sp.GuidanceParams(lambda_t=2.0, lambda_i=3.0)
        out = sp.cfg_epsilon(_ScriptedStub(), x, img, env, lab, 1, g)
        assert torch.all(out == 5.0)

    def test_lambda_one_collapses_exactly(self):
        x, img, env, lab = _args()
        g = sp.GuidanceParams(lambda_t=1.0, lambda_i=1.0)
        for trial in range(100):
            stub = _HashStub()
            guided = sp.cfg_epsilon(stub, x + trial * 0.01, img, env, lab, 1, g)
            direct = stub(df.pack_conditions(x + trial * 0.01, img, env,
                                             df.DropFlags()), 1, lab)
            assert torch.equal(guided, direct)

    def test_lambda_zero_is_base(self):
        x, img, env, lab = _args()
        g = sp.GuidanceParams(lambda_t=0.0, lambda_i=0.0)
        out = sp.cfg_epsilon(_ScriptedStub(7.0, 1.0, 2.0), x, img, env, lab, 1, g)
        assert torch.all(out == 7.0)

    def test_linear_in_lambdas(self):
        # three-point collinearity in each guidance parameter
        x, img, env, lab = _args()
        stub = _ScriptedStub(0.3, 1.1, 2.7)
        for param in ("lambda_t", "lambda_i"):
            outs = []
            for v in (0.0, 1.0, 2.0):
                kwargs = {"lambda_t": 1.5, "lambda_i": 1.5}
                kwargs[param] = v
                out = sp.cfg_epsilon(stub, x, img, env, lab, 1,
                                     sp.GuidanceParams(**kwargs))
                outs.append(out[0, 0, 0, 0])
            assert float(outs[2] - outs[1]) == pytest.approx(float(outs[1] - outs[0]), abs=1e-6)

    def test_uncond_keeps_text_still_collapses(self):
        x, img, env, lab = _args()
        g = sp.GuidanceParams(lambda_t=1.0, lambda_i=1.0, uncond_keeps_text=True)
        stub = _HashStub()
        guided = sp.cfg_epsilon(stub, x, img, env, lab, 1, g)
        direct = stub(df.pack_conditions(x, img, env, df.DropFlags()), 1, lab)
        assert torch.equal(guided, direct)

    def test_invalid_guidance(self):
        with pytest.raises(InvalidSpec):
            sp.GuidanceParams(lambda_t=-1.0).validate()


class TestDdimStep:
    def test_scalar_example(self):
        # abar: t=1 -> 0.81, t=2 -> 0.25
        sch = df.make_schedule(2, 0.19, 1 - 0.25 / 0.81)
        out = sp.ddim_step(torch.tensor([1.0]), torch.tensor([0.0]), 2, 1, sch)
        assert float(out) == pytest.approx(1.8, abs=1e-6)

    def test_terminal_step_returns_x0_hat(self):
        sch = df.make_schedule(10, 1e-3, 0.02)
        x = torch.randn(2, 3, 4, 4)
        eps = torch.randn(2, 3, 4, 4)
        ab = sch.alpha_bar(10).float()
        x0_hat = (x - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)
        assert torch.allclose(sp.ddim_step(x, eps, 10, 0, sch), x0_hat)

    def test_step_order_violation(self):
        sch = df.make_schedule(10, 1e-3, 0.02)
        x = torch.zeros(1)
        with pytest.raises(StepOrderViolation):
            sp.ddim_step(x, x, 5, 5, sch)
        with pytest.raises(StepOrderViolation):
            sp.ddim_step(x, x, 5, 7, sch)

    def test_oracle_inversion_all_strides(self):
        sch = df.make_schedule(1000)
        for seed in range(10):
            x0 = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(seed))
            oracle = sp.OracleEpsModel(x0, sch)
            for steps in (10, 50, 250):
                taus = sp.ddim_timesteps(1000, steps)
                x = torch.randn(1, 3, 8, 8,
                                generator=torch.Generator().manual_seed(seed + 100))
                for tn, tp in zip(taus[:-1], taus[1:]):
                    packed = df.PackedInput(
                        channels=torch.cat([x, torch.zeros_like(x), torch.zeros_like(x)], 1),
                        drop_flags=df.DropFlags())
                    x = sp.ddim_step(x, oracle(packed, tn, None), tn, tp, sch)
                assert float((x - x0).abs().max()) < 1e-5

    def test_timestep_sequences(self):
        assert sp.ddim_timesteps(1000, 1) == [1000, 0]
        full = sp.ddim_timesteps(10, 10)
        assert full == list(range(10, -1, -1))
        with pytest.raises(StepOutOfRange):
            sp.ddim_timesteps(10, 11)
        with pytest.raises(StepOutOfRange):
            sp.ddim_timesteps(10, 0)


@pytest.fixture(scope="module")
def stub_setup():
    schedule = df.make_schedule(50, 1e-3, 0.02)
    model = sp.CopyStubModel(schedule)
    rng = np.random.default_rng(0)
    env = em.EnvMap.from_pixels(rng.uniform(0, 2, (16, 32, 3)).astype(np.float32))
    inp = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True
    return schedule, model, env, inp, mask


class TestRelight:
    def test_deterministic(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        req = sp.SampleRequest(input_image=inp, env=env, rotation=0.5,
                               steps=8, seed=3, mask=mask)
        a = sp.relight(model, schedule, req)
        b = sp.relight(model, schedule, req)
        assert np.array_equal(a.output, b.output)
        assert np.array_equal(a.composite, b.composite)

    def test_rotation_full_turn_bit_identical(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        a = sp.relight(model, schedule, sp.SampleRequest(
            input_image=inp, env=env, rotation=0.0, steps=8, seed=3))
        b = sp.relight(model, schedule, sp.SampleRequest(
            input_image=inp, env=env, rotation=2 * np.pi, steps=8, seed=3))
        assert np.array_equal(a.output, b.output)

    def test_single_step_jump(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        out = sp.relight(model, schedule, sp.SampleRequest(
            input_image=inp, env=env, steps=1, seed=0)).output
        assert out.shape == inp.shape
        assert np.all((out >= 0) & (out <= 1)) and np.all(np.isfinite(out))

    def test_copy_stub_reproduces_masked_input(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        req = sp.SampleRequest(input_image=inp, env=env, steps=25, seed=1, mask=mask)
        out = sp.relight(model, schedule, req).output
        masked = inp * mask[..., None]
        assert np.abs(out - np.clip(masked, 0, 1)).max() < 0.02

    def test_composite_uses_env_backdrop(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        req = sp.SampleRequest(input_image=inp, env=env, rotation=1.0,
                               steps=4, seed=1, mask=mask)
        res = sp.relight(model, schedule, req)
        from relight_lab import renderer as rnd
        cfg = rnd.RenderConfig(resolution=16, background_clip=req.clip_max)
        backdrop = rnd.render_background(em.rotate(env, 1.0), 0.0, cfg)
        assert np.allclose(res.composite[~mask], backdrop[~mask], atol=1e-6)
        assert np.allclose(res.composite[mask], res.output[mask], atol=1e-6)


class TestSweeps:
    def test_sweep_single_lambda_matches_relight(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        base = sp.SampleRequest(input_image=inp, env=env, steps=6, seed=2,
                                guidance=sp.GuidanceParams(lambda_t=2.0, lambda_i=3.0))
        result = sp.sweep_lambda(model, schedule, base, [3.0])
        direct = sp.relight(model, schedule, base)
        assert np.array_equal(result["outputs"][0], direct.output)
        assert result["rows"][0]["lambda_i"] == 3.0

    def test_sweep_empty_list(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        base = sp.SampleRequest(input_image=inp, env=env, steps=4, seed=2)
        with pytest.raises(EmptyList):
            sp.sweep_lambda(model, schedule, base, [])

    def test_sweep_structural(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        base = sp.SampleRequest(input_image=inp, env=env, steps=4, seed=2)
        result = sp.sweep_lambda(model, schedule, base, [1.0, 2.0, 3.0, 5.0])
        assert len(result["outputs"]) == 4
        assert all("psnr_vs_input" in r for r in result["rows"])

    def test_rotation_sweep_single(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        base = sp.SampleRequest(input_image=inp, env=env, steps=4, seed=5)
        frames = sp.rotation_sweep(model, schedule, base, 1)["frames"]
        direct = sp.relight(model, schedule, sp.SampleRequest(
            input_image=inp, env=env, rotation=0.0, steps=4, seed=5))
        assert np.array_equal(frames[0], direct.output)

    def test_rotation_sweep_constant_env(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        const = em.EnvMap.from_pixels(np.full((16, 32, 3), 0.7, np.float32))
        base = sp.SampleRequest(input_image=inp, env=const, steps=4, seed=5)
        result = sp.rotation_sweep(model, schedule, base, 4)
        for frame in result["frames"][1:]:
            assert np.array_equal(frame, result["frames"][0])
        assert result["mean_frame_l1"] == 0.0

    def test_rotation_sweep_paper_count(self, stub_setup):
        schedule, model, env, inp, mask = stub_setup
        base = sp.SampleRequest(input_image=inp, env=env, steps=1, seed=5)
        result = sp.rotation_sweep(model, schedule, base, 36)
        assert len(result["frames"]) == 36
        assert len(result["frame_l1"]) == 35
