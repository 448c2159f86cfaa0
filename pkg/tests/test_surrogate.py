import numpy as np
import pytest

from membrane_forge import surrogate as sg
from membrane_forge.dataset import Dataset, NormStats, TrialRecord
from membrane_forge.designs import MembraneDesign, Ring
from membrane_forge.errors import (
    ConfigError,
    EmptyBatch,
    EmptyDataset,
    InvariantViolation,
    RankDeficient,
)
from membrane_forge.surrogate import (
    ModelConfig,
    SurrogateModel,
    curvefit_baseline,
    design_row,
    encode_rings,
    evaluate_rmse,
    forward_coeffs,
    init_params,
    loss_and_grad,
    predict_batch,
    predict_force,
    predict_with_input_grad,
    train,
)

UNIT_STATS = NormStats(mean=(0.0,) * 10, std=(1.0,) * 10, f_mean=0.0, f_std=1.0)


def small_model(seed=0, poly_degree=1, stats=UNIT_STATS):
    cfg = ModelConfig(mlp_depth=2, mlp_width=8, ring_latent_dim=4,
                      poly_degree=poly_degree, seed=seed)
    return SurrogateModel(cfg, stats, init_params(cfg))


def random_rows(rng, n):
    x = np.zeros((n, 10))
    x[:, 0] = rng.uniform(1.0, 3.0, n)       # thickness
    x[:, 1] = rng.uniform(25.4, 38.1, n)     # contact radius
    for (ci, wi, fi) in ((2, 3, 4), (5, 6, 7)):
        pres = rng.integers(0, 2, n).astype(float)
        x[:, ci] = pres * rng.uniform(40.0, 65.0, n)
        x[:, wi] = pres * rng.uniform(5.0, 8.0, n)
        x[:, fi] = pres
    x[:, 8] = rng.uniform(0.0, 50.0, n)      # height
    x[:, 9] = rng.uniform(0.0, 8.0, n)       # pressure
    return x


class TestConfig:
    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(mlp_depth=0)
        with pytest.raises(ConfigError):
            ModelConfig(poly_degree=4)
        with pytest.raises(ConfigError):
            ModelConfig(activation="sigmoid")

    def test_seeded_init_deterministic(self):
        a = init_params(ModelConfig(seed=7))
        b = init_params(ModelConfig(seed=7))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_flatten_roundtrip(self):
        cfg = ModelConfig(mlp_depth=2, mlp_width=5, ring_latent_dim=3)
        p = init_params(cfg)
        back = sg.unflatten_params(sg.flatten_params(p, cfg), cfg)
        assert all(np.array_equal(p[k], back[k]) for k in p)


class TestRingEncoder:
    def test_swap_rings_identical_latent(self):
        model = small_model()
        d1 = MembraneDesign(contact_radius=25.4, thickness=2.0,
                            rings=(Ring(49.0, 5.0), Ring(62.0, 5.0)))
        # bypass the design type's canonical ordering: swap slots in the raw row
        x = design_row(d1, 10.0, 3.0)
        x_sw = x.copy()
        x_sw[[2, 3, 4, 5, 6, 7]] = x[[5, 6, 7, 2, 3, 4]]
        fa = predict_batch(model, x[None, :])[0]
        fb = predict_batch(model, x_sw[None, :])[0]
        assert fa == fb  # exact: summed encoding, float add commutes

    def test_zero_rings_is_double_empty_encoding(self):
        model = small_model()
        bare = MembraneDesign(contact_radius=25.4, thickness=2.0)
        lat = encode_rings(model, bare)
        pr, act = model.params, model.config.activation
        empty = (np.tanh(np.zeros(3) @ pr["enc_w1"] + pr["enc_b1"])
                 @ pr["enc_w2"] + pr["enc_b2"])
        assert np.allclose(lat, 2 * empty, rtol=0, atol=0)

    def test_one_ring_is_ring_plus_empty(self):
        model = small_model()
        one = MembraneDesign(contact_radius=25.4, thickness=2.0,
                             rings=(Ring(49.0, 5.0),))
        x = design_row(one, 0.0, 0.0)[None, :]
        _, slots, _ = sg._normalize_inputs(model.stats, x)
        pr, act = model.params, model.config.activation
        enc = lambda z: (np.tanh(z @ pr["enc_w1"] + pr["enc_b1"])
                         @ pr["enc_w2"] + pr["enc_b2"])
        expect = enc(slots[0][0]) + enc(slots[1][0])
        assert np.allclose(encode_rings(model, one), expect, rtol=0, atol=0)


class TestForward:
    def test_deterministic(self):
        model = small_model()
        d = MembraneDesign(contact_radius=30.0, thickness=2.0)
        a = forward_coeffs(model, d, 15.0)
        b = forward_coeffs(model, d, 15.0)
        assert np.array_equal(a, b)

    def test_coefficients_finite_for_reference_designs(self):
        model = small_model()
        designs = [
            MembraneDesign(contact_radius=25.4, thickness=2.0),
            MembraneDesign(contact_radius=25.4, thickness=2.0,
                           rings=(Ring(49.0, 5.0), Ring(62.0, 5.0))),
            MembraneDesign(contact_radius=31.8, thickness=2.5,
                           rings=(Ring(45.0, 6.0),)),
        ]
        for d in designs:
            assert np.all(np.isfinite(forward_coeffs(model, d, 20.0)))

    def test_degree_one_prediction_affine_in_pressure(self):
        model = small_model(poly_degree=1)
        d = MembraneDesign(contact_radius=28.0, thickness=2.0)
        f = [predict_force(model, d, 10.0, p) for p in (1.0, 2.0, 3.0)]
        assert f[2] - 2 * f[1] + f[0] == pytest.approx(0.0, abs=1e-12)

    def test_degree_two_third_difference_zero(self):
        model = small_model(poly_degree=2)
        d = MembraneDesign(contact_radius=28.0, thickness=2.0)
        f = [predict_force(model, d, 10.0, p) for p in (1.0, 2.0, 3.0, 4.0)]
        third = f[3] - 3 * f[2] + 3 * f[1] - f[0]
        assert third == pytest.approx(0.0, abs=1e-10)


class TestGradients:
    def test_parameter_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        model = small_model(seed=3)
        x = random_rows(rng, 12)
        f_true = rng.normal(0, 1, 12)
        _, grads = loss_and_grad(model, x, f_true)
        flat_g = sg.flatten_params(grads, model.config)
        vec = sg.flatten_params(model.params, model.config)
        idx = rng.choice(vec.size, 120, replace=False)
        step = 1e-4
        for i in idx:
            v_hi, v_lo = vec.copy(), vec.copy()
            v_hi[i] += step
            v_lo[i] -= step
            m_hi = SurrogateModel(model.config, model.stats,
                                  sg.unflatten_params(v_hi, model.config))
            m_lo = SurrogateModel(model.config, model.stats,
                                  sg.unflatten_params(v_lo, model.config))
            l_hi, _ = loss_and_grad(m_hi, x, f_true)
            l_lo, _ = loss_and_grad(m_lo, x, f_true)
            fd = (l_hi - l_lo) / (2 * step)
            assert abs(flat_g[i] - fd) <= 1e-4 * max(abs(fd), 1e-6)

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        model = small_model(seed=5)
        x = random_rows(rng, 6)
        _, dx = predict_with_input_grad(model, x)
        step = 1e-5
        for row in range(6):
            for col in (0, 1, 8, 9):  # t, r0, h, p (continuous coordinates)
                x_hi, x_lo = x.copy(), x.copy()
                x_hi[row, col] += step
                x_lo[row, col] -= step
                fd = (predict_batch(model, x_hi)[row]
                      - predict_batch(model, x_lo)[row]) / (2 * step)
                assert abs(dx[row, col] - fd) <= 1e-3 * max(abs(fd), 1e-8)

    def test_ring_geometry_gradient_when_present(self):
        model = small_model(seed=8)
        d = MembraneDesign(contact_radius=25.4, thickness=2.0,
                           rings=(Ring(49.0, 5.0), Ring(62.0, 5.0)))
        x = design_row(d, 12.0, 4.0)[None, :]
        _, dx = predict_with_input_grad(model, x)
        step = 1e-5
        for col in (2, 3, 5, 6):
            x_hi, x_lo = x.copy(), x.copy()
            x_hi[0, col] += step
            x_lo[0, col] -= step
            fd = (predict_batch(model, x_hi)[0]
                  - predict_batch(model, x_lo)[0]) / (2 * step)
            assert dx[0, col] == pytest.approx(fd, rel=1e-3, abs=1e-9)

    def test_perfect_fit_zero_loss_zero_grad(self):
        model = small_model()
        x = random_rows(np.random.default_rng(0), 5)
        f = predict_batch(model, x)
        loss, grads = loss_and_grad(model, x, f)
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_duplicated_batch_same_loss_and_grad(self):
        model = small_model()
        rng = np.random.default_rng(1)
        x = random_rows(rng, 4)
        f = rng.normal(0, 1, 4)
        l1, g1 = loss_and_grad(model, x, f)
        l2, g2 = loss_and_grad(model, np.vstack([x, x]), np.concatenate([f, f]))
        assert l2 == pytest.approx(l1, rel=1e-14)
        for k in g1:
            assert np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)

    def test_empty_batch_rejected(self):
        model = small_model()
        with pytest.raises(EmptyBatch):
            loss_and_grad(model, np.zeros((0, 10)), np.zeros(0))


def linear_dataset(slope=2.0, heights=(5.0, 15.0, 30.0), r0s=(25.4, 30.0, 34.0)):
    """Synthetic records with F = slope * p at every height."""
    recs = []
    for r0 in r0s:
        for h in heights:
            samples = tuple((p, slope * p) for p in (0.5, 2.0, 4.0, 6.0, 8.0))
            recs.append(TrialRecord(
                design=MembraneDesign(contact_radius=r0, thickness=2.0),
                height_mm=h, samples=samples, meta={}))
    return Dataset(recs)


class TestTraining:
    def test_zero_force_dataset_predicts_near_zero(self):
        ds = linear_dataset(slope=0.0)
        res = train(ModelConfig(mlp_depth=2, mlp_width=16, ring_latent_dim=4,
                                seed=0),
                    ds, ds, max_epochs=300, patience=300)
        flat = ds.flatten()
        assert np.max(np.abs(predict_batch(res.model, flat.x))) <= 0.1

    def test_recovers_linear_slope(self):
        ds = linear_dataset(slope=2.0)
        res = train(ModelConfig(mlp_depth=2, mlp_width=16, ring_latent_dim=4,
                                seed=1),
                    ds, ds, max_epochs=1500, patience=1500)
        d = ds.records[0].design
        f3 = predict_force(res.model, d, 5.0, 3.0)
        f5 = predict_force(res.model, d, 5.0, 5.0)
        slope = (f5 - f3) / 2.0
        assert slope == pytest.approx(2.0, rel=0.01)

    def test_three_point_linear_reaches_tiny_loss(self):
        recs = [TrialRecord(
            design=MembraneDesign(contact_radius=25.4, thickness=2.0),
            height_mm=10.0,
            samples=((1.0, 1.0), (2.0, 2.0), (3.0, 3.0)), meta={})]
        ds = Dataset(recs)
        res = train(ModelConfig(mlp_depth=1, mlp_width=8, ring_latent_dim=2,
                                seed=0),
                    ds, ds, max_epochs=2000, patience=2000)
        flat = ds.flatten()
        loss, _ = loss_and_grad(res.model, flat.x, flat.f)
        assert loss < 1e-4

    def test_seeded_training_deterministic(self):
        ds = linear_dataset()
        cfg = ModelConfig(mlp_depth=1, mlp_width=8, ring_latent_dim=2, seed=4)
        a = train(cfg, ds, ds, max_epochs=30, patience=30)
        b = train(cfg, ds, ds, max_epochs=30, patience=30)
        for k in a.model.params:
            assert np.array_equal(a.model.params[k], b.model.params[k])

    def test_best_checkpoint_not_worse_than_init(self):
        ds = linear_dataset()
        res = train(ModelConfig(mlp_depth=1, mlp_width=8, ring_latent_dim=2,
                                seed=2),
                    ds, ds, max_epochs=50, patience=50)
        assert res.val_curve[-1] <= res.val_curve[0] or min(
            res.val_curve) <= res.val_curve[0]
        assert evaluate_rmse(res.model, ds) == pytest.approx(
            min(res.val_curve), abs=1e-12)

    def test_empty_dataset_rejected(self):
        ds = linear_dataset()
        with pytest.raises(EmptyDataset):
            train(ModelConfig(), Dataset([]), ds)


class TestEvaluate:
    def test_constant_zero_on_constant_three(self):
        recs = [TrialRecord(
            design=MembraneDesign(contact_radius=25.4, thickness=2.0),
            height_mm=5.0, samples=((1.0, 3.0), (2.0, 3.0)), meta={})]
        ds = Dataset(recs)
        model = small_model()
        # force the network output to exactly 0 N
        for k in model.params:
            model.params[k][:] = 0.0
        assert evaluate_rmse(model, ds) == pytest.approx(3.0, abs=1e-14)

    def test_matches_single_pass_oracle(self):
        ds = linear_dataset()
        model = small_model(stats=UNIT_STATS)
        flat = ds.flatten()
        pred = predict_batch(model, flat.x)
        acc = 0.0
        for p, t in zip(pred, flat.f):
            acc += (p - t) ** 2
        assert evaluate_rmse(model, ds) == pytest.approx(
            np.sqrt(acc / len(pred)), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptyDataset):
            evaluate_rmse(small_model(), Dataset([]))


class TestBaseline:
    def test_exact_polynomial_recovered(self):
        recs = []
        for r0 in (25.4, 28.0, 31.0, 34.0):
            for h in (5.0, 15.0, 25.0, 40.0):
                samples = tuple(
                    (p, 0.5 * p + 0.1 * p * p - 0.02 * h * p + 0.3 * r0 * 0.01 * p)
                    for p in (1.0, 3.0, 5.0, 7.0))
                recs.append(TrialRecord(
                    design=MembraneDesign(contact_radius=r0, thickness=2.0),
                    height_mm=h, samples=samples, meta={}))
        ds = Dataset(recs)
        train_ds = Dataset(recs[: len(recs) // 2])
        test_ds = Dataset(recs[len(recs) // 2:])
        assert curvefit_baseline(train_ds, test_ds) < 1e-6

    def test_rank_deficient_when_underdetermined(self):
        recs = [TrialRecord(
            design=MembraneDesign(contact_radius=25.4, thickness=2.0),
            height_mm=5.0, samples=((1.0, 1.0), (2.0, 2.0)), meta={})]
        ds = Dataset(recs)
        with pytest.raises(RankDeficient):
            curvefit_baseline(ds, ds)

    def test_mixed_ring_counts_rejected(self):
        ringless = linear_dataset().records[0]
        ringed = TrialRecord(
            design=MembraneDesign(contact_radius=25.4, thickness=2.0,
                                  rings=(Ring(49.0, 5.0),)),
            height_mm=5.0, samples=((1.0, 1.0),), meta={})
        with pytest.raises(InvariantViolation):
            curvefit_baseline(Dataset([ringless, ringed]), Dataset([ringless]))


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = small_model(seed=11)
        path = tmp_path / "model.json"
        sg.save_model(model, path)
        back = sg.load_model(path)
        assert back.config == model.config
        assert back.stats == model.stats
        for k in model.params:
            assert np.array_equal(back.params[k], model.params[k])
        x = random_rows(np.random.default_rng(0), 4)
        assert np.array_equal(predict_batch(back, x), predict_batch(model, x))

    def test_bad_format_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ConfigError):
            sg.load_model(path)
