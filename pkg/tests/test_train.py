import numpy as np
import pytest

from hifm.data import Dataset, DatasetMeta, KIND_PARTICLES
from hifm.energy import QuadraticEnergy, zero_com_project
from hifm.errors import ValidationError
from hifm.flow import interpolant_time, cond_field_time, ot_field
from hifm.model import ModeTransform, apply_mode_transform, init, forward_batch
from hifm.train import (
    TrainConfig,
    TrainContext,
    TrainLog,
    TrainLogRow,
    make_flow_spec_for_sample,
    train_loop,
    training_step,
)


def quad_energy(dim=2, eigs=(1.0, 4.0)):
    return QuadraticEnergy(matrix=np.diag(np.array(eigs[:dim])))


def gaussian_dataset(rng, n=64, dim=2):
    return Dataset(samples=rng.normal(size=(n, dim)))


def particle_dataset(rng, n=16, m=4, sd=3):
    samples = np.stack([zero_com_project(rng.normal(size=m * sd), sd)
                        for _ in range(n)])
    return Dataset(samples=samples,
                   meta=DatasetMeta(kind=KIND_PARTICLES, m=m, spatial_dim=sd))


class TestMakeFlowSpec:
    def test_isotropic_data_formula(self):
        cfg = TrainConfig(method="isotropic_data", eps=np.exp(-5.0))
        y1 = np.array([1.0, 0.0])
        fs = make_flow_spec_for_sample(cfg, y1)
        assert np.allclose(fs.alphas, 5.0)
        assert np.allclose(fs.basis, np.eye(2))

    def test_isotropic_interpolant_constant_alpha(self):
        cfg = TrainConfig(method="isotropic_interpolant", eps=np.exp(-2.0),
                          kappa=2.0)
        fs = make_flow_spec_for_sample(cfg, np.ones(3))
        assert np.allclose(fs.alphas, 1.0)

    @pytest.mark.parametrize("m", [7, 13])
    def test_formation_sample_with_hyperbolize(self, m):
        rng = np.random.default_rng(0)
        ds = particle_dataset(rng, n=1, m=m, sd=3)
        cfg = TrainConfig(method="hessian_formation", hyperbolize=True)
        fs = make_flow_spec_for_sample(cfg, ds.samples[0], meta=ds.meta)
        assert fs.dim == 3 * m
        assert int(fs.spectrum.null_mask.sum()) == 6
        assert np.all(fs.alphas > 0)

    def test_ot_marker(self):
        cfg = TrainConfig(method="optimal_transport")
        assert make_flow_spec_for_sample(cfg, np.ones(2)) is None

    def test_quadratic_requires_energy(self):
        cfg = TrainConfig(method="hessian_quadratic")
        with pytest.raises(ValidationError):
            make_flow_spec_for_sample(cfg, np.ones(2))


class TestTrainingStep:
    def test_ot_target_matches_direct_field(self):
        # the drawn (y, target) pair must satisfy the straight-path field
        from hifm.train import _draw_state_and_target
        cfg = TrainConfig(method="optimal_transport", batch_size=4, seed=1,
                          finite=False, sigma_min=1e-5)
        rng = np.random.default_rng(3)
        for _ in range(10):
            y1 = rng.normal(size=2)
            z = float(rng.uniform(0, cfg.z_max))
            y, t_vy, t_vz = _draw_state_and_target(cfg, None, y1, z, rng,
                                                   None)
            direct, one = ot_field(y, z, y1, cfg.sigma_min)
            assert t_vz == one == 1.0
            assert np.allclose(t_vy, direct, atol=1e-12)

    def test_projected_gradients_ignore_null_output_directions(self):
        # a final-layer bias perturbation that only adds null components to
        # v_y cannot change the loss, so its gradient must vanish
        rng = np.random.default_rng(40)
        energy = QuadraticEnergy(matrix=np.diag([0.0, 1.0, 4.0]))
        cfg = TrainConfig(method="hessian_quadratic", project=True,
                          finite=True, batch_size=8, seed=41)
        ds = gaussian_dataset(rng, n=8, dim=3)
        ctx = TrainContext(energy=energy, meta=ds.meta)
        fs = ctx.spec_for(cfg, 0, ds.samples[0])
        proj = fs.spectrum.hyperbolic_projector()
        null_vec = (np.eye(3) - proj) @ rng.normal(size=3)

        from hifm.model import loss_and_grad
        params = init([4, 16, 4], seed=42)
        ys = ds.samples
        zs = rng.uniform(0, 0.9, size=8)
        t_vy = rng.normal(size=(8, 3))
        t_vz = rng.normal(size=8)
        mode = ModeTransform(finite=True, projector=np.stack([proj] * 8))
        _, grads, _ = loss_and_grad(params, ys, zs, t_vy, t_vz, mode)
        # gradient along the (null_vec, 0) direction of the output bias
        directional = grads.biases[-1][:3] @ null_vec
        assert abs(directional) < 1e-12

    def test_projection_makes_null_components_free(self):
        # with project on, adding a null-direction vector to the model's
        # v_y output must not change the loss
        rng = np.random.default_rng(4)
        energy = QuadraticEnergy(matrix=np.diag([0.0, 1.0, 4.0]))
        cfg = TrainConfig(method="hessian_quadratic", project=True,
                          batch_size=8, seed=5)
        ds = gaussian_dataset(rng, n=8, dim=3)
        ctx = TrainContext(energy=energy, meta=ds.meta)
        fs = ctx.spec_for(cfg, 0, ds.samples[0])
        proj = fs.spectrum.hyperbolic_projector()
        null_dir = (np.eye(3) - proj) @ rng.normal(size=3)

        vy = rng.normal(size=(8, 3))
        vz = rng.normal(size=8)
        mode = ModeTransform(finite=True, projector=np.stack([proj] * 8))
        base, _, _ = apply_mode_transform(vy, vz, mode)
        shifted, _, _ = apply_mode_transform(vy + null_dir, vz, mode)
        assert np.allclose(base, shifted, atol=1e-12)

    def test_determinism(self):
        rng = np.random.default_rng(6)
        ds = gaussian_dataset(rng, n=32)
        energy = quad_energy()
        cfg = TrainConfig(method="hessian_quadratic", batch_size=8, seed=7)
        params = init([3, 16, 3], seed=7)
        outs = []
        for _ in range(2):
            from hifm.model import adamw_init
            p = params.copy()
            opt = adamw_init(p)
            step_rng = np.random.default_rng(11)
            ctx = TrainContext(energy=energy, meta=ds.meta)
            idx = np.arange(8)
            p, opt, loss, _ = training_step(p, opt, cfg, idx,
                                            ds.samples[idx], step_rng, ctx)
            outs.append((loss, p))
        assert outs[0][0] == outs[1][0]
        assert all(np.array_equal(a, b) for a, b in
                   zip(outs[0][1].weights, outs[1][1].weights))

    def test_nonfinite_target_aborts_with_diagnostics(self):
        cfg = TrainConfig(method="isotropic_data", eps=0.5, batch_size=1,
                          seed=0)
        ds = Dataset(samples=np.array([[1e6, 0.0]]))
        ctx = TrainContext()
        params = init([3, 8, 3], seed=0)
        from hifm.model import adamw_init
        opt = adamw_init(params)
        bad = Dataset(samples=np.array([[0.0, 0.0]]))  # ||y1|| = 0 < eps
        with pytest.raises(Exception):
            training_step(params, opt, cfg, np.array([0]), bad.samples,
                          np.random.default_rng(0), ctx)

    def test_particle_draws_stay_centered(self):
        rng = np.random.default_rng(8)
        ds = particle_dataset(rng, n=4, m=3, sd=2)
        cfg = TrainConfig(method="hessian_formation", hyperbolize=True,
                          batch_size=4, seed=9)
        ctx = TrainContext(meta=ds.meta)
        params = init([7, 16, 7], seed=1)
        from hifm.model import adamw_init
        opt = adamw_init(params)
        # centering is enforced inside the draw; run a step and check the
        # cached specs' sampled states through a fresh draw
        from hifm.train import _draw_state_and_target
        for i in range(4):
            fs = ctx.spec_for(cfg, i, ds.samples[i])
            y, _, _ = _draw_state_and_target(cfg, fs, ds.samples[i], 0.4,
                                             rng, 2)
            assert np.max(np.abs(y.reshape(3, 2).mean(axis=0))) < 1e-10


class TestSharedTransformPath:
    def test_loss_zero_when_targets_equal_model_output(self):
        rng = np.random.default_rng(10)
        params = init([3, 8, 3], seed=2)
        ys = rng.normal(size=(6, 2))
        zs = rng.uniform(0, 0.99, size=6)
        vy, vz = forward_batch(params, ys, zs)
        from hifm.model import loss_and_grad
        for finite in (False, True):
            loss, _, _ = loss_and_grad(params, ys, zs, vy, vz,
                                       ModeTransform(finite=finite))
            assert loss == 0.0


class TestTrainLoop:
    def test_zero_steps_returns_init(self):
        rng = np.random.default_rng(11)
        ds = gaussian_dataset(rng, n=16)
        cfg = TrainConfig(method="optimal_transport", steps=0, batch_size=4)
        params, log, _ = train_loop(cfg, ds)
        ref = init([3, *cfg.hidden, 3], cfg.seed)
        assert all(np.array_equal(a, b)
                   for a, b in zip(params.weights, ref.weights))
        assert log.rows == []

    def test_loss_decreases_on_quadratic_well(self):
        rng = np.random.default_rng(12)
        ds = gaussian_dataset(rng, n=128)
        cfg = TrainConfig(method="hessian_quadratic", steps=150,
                          batch_size=32, seed=13, lr=1e-3)
        params, log, _ = train_loop(cfg, ds, energy=quad_energy())
        losses = log.losses()
        assert losses[-10:].mean() < losses[:10].mean()

    def test_identical_configs_identical_logs(self):
        rng = np.random.default_rng(14)
        ds = gaussian_dataset(rng, n=32)
        cfg = TrainConfig(method="optimal_transport", steps=20, batch_size=8,
                          seed=15)
        p1, log1, _ = train_loop(cfg, ds)
        p2, log2, _ = train_loop(cfg, ds)
        assert [r.loss for r in log1.rows] == [r.loss for r in log2.rows]
        assert all(np.array_equal(a, b)
                   for a, b in zip(p1.weights, p2.weights))

    def test_eval_rows_recorded(self):
        rng = np.random.default_rng(16)
        ds = gaussian_dataset(rng, n=32)
        cfg = TrainConfig(method="optimal_transport", steps=10, batch_size=8,
                          seed=17, eval_every=5, eval_n=4,
                          hidden=(16,))
        _, log, _ = train_loop(cfg, ds, eval_set=gaussian_dataset(rng, n=4))
        steps_with_eval = [s for s, _, _ in log.eval_points()]
        assert steps_with_eval == [5, 10]

    def test_empty_dataset_rejected(self):
        cfg = TrainConfig(method="optimal_transport")
        with pytest.raises(ValidationError):
            train_loop(cfg, Dataset(samples=np.zeros((0, 2))))


class TestTrainLogContainer:
    def test_monotone_steps_enforced(self):
        log = TrainLog()
        log.append(TrainLogRow(1, 0.5, None, None, 1.0, 0))
        with pytest.raises(ValidationError):
            log.append(TrainLogRow(1, 0.4, None, None, 2.0, 0))

    def test_csv_round_trip_shape(self, tmp_path):
        log = TrainLog()
        log.append(TrainLogRow(1, 0.5, None, None, 1.0, 0))
        log.append(TrainLogRow(2, 0.25, 1.5, 32.0, 2.0, 3))
        path = tmp_path / "log.csv"
        log.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == TrainLog.HEADER
        assert lines[1].startswith("1,0.5,,,")
        assert lines[2].startswith("2,0.25,1.5,32,")


class TestSampleY0Flag:
    def test_alternative_prior_reading_runs_and_differs(self):
        rng = np.random.default_rng(50)
        ds = gaussian_dataset(rng, n=16)
        energy = quad_energy()
        outs = {}
        for flag in (False, True):
            cfg = TrainConfig(method="hessian_quadratic", batch_size=8,
                              steps=5, seed=51, sample_y0=flag)
            params, log, _ = train_loop(cfg, ds, energy=energy)
            outs[flag] = log.losses()
        assert not np.array_equal(outs[False], outs[True])
        assert np.all(np.isfinite(outs[True]))


class TestHyperbolizeNullDynamics:
    def test_hyperbolize_moves_null_targets(self):
        # with hyperbolize off the conditional field is identically zero on
        # null directions; with it on, those directions contract
        rng = np.random.default_rng(18)
        ds = particle_dataset(rng, n=1, m=4, sd=3)
        y1 = ds.samples[0]
        base = TrainConfig(method="hessian_formation", batch_size=1)
        on = TrainConfig(method="hessian_formation", hyperbolize=True,
                         batch_size=1)
        fs_off = make_flow_spec_for_sample(base, y1, meta=ds.meta)
        fs_on = make_flow_spec_for_sample(on, y1, meta=ds.meta)
        pi_null = fs_off.spectrum.null_projector()
        y = y1 + pi_null @ rng.normal(size=12)
        t = interpolant_time(fs_off, 0.5)
        v_off, _ = cond_field_time(fs_off, y, t, np.zeros(12))
        v_on, _ = cond_field_time(fs_on, y, interpolant_time(fs_on, 0.5),
                                  np.zeros(12))
        assert np.linalg.norm(pi_null @ v_off) < 1e-10
        assert np.linalg.norm(pi_null @ v_on) > 1e-6
