"""Coupling, path, loss, and training-loop contracts for the flow-matching stage."""

import itertools

import numpy as np
import pytest

import motionflow as mf
from motionflow.disentangle import TrainingDiverged
from motionflow.fieldnet import FieldPredictor, PredictorConfig
from motionflow.flowmatch import (
    DiffusionSchedule,
    FeatureSpace,
    FlowBatch,
    TrainConfig,
    cfm_loss,
    constant_shift_batches,
    ddpm_baseline_step,
    ddpm_sample,
    noise_prediction_loss,
    ot_couple,
    sample_path,
    train_flow,
    train_step,
    velocity_consistency_loss,
    window_batches,
)
from motionflow.optim import Adam
from motionflow.rng import SeededRng
from motionflow.tensor import ShapeError, Tensor, no_grad

MICRO = PredictorConfig(d=4, h=8, heads=2, layers=1, T=1, F=3,
                        time_dim=4, cond_dim=3, context=1)


def micro_predictor(seed=0, config=MICRO):
    return FieldPredictor(config, seed=seed)


def micro_batch(rng, config=MICRO, batch=4):
    return FlowBatch(
        x1=rng.normal(size=(batch, config.F, config.d)),
        cond=rng.normal(size=(batch, config.F, config.cond_dim)),
        prev=rng.normal(size=(batch, config.context, config.d)),
    )


# -- coupling -------------------------------------------------------------------------


def brute_force_cost(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n))
               for p in itertools.permutations(range(n)))


@pytest.mark.parametrize("method", ["exact", "greedy"])
def test_self_coupling_is_identity(method, rng):
    x = rng.normal(size=(5, 3, 2))
    out = ot_couple(x, x, method=method)
    assert np.array_equal(out.permutation, np.arange(5))
    assert out.total_cost == 0.0


@pytest.mark.parametrize("method", ["exact", "greedy"])
def test_self_coupling_with_duplicate_rows_prefers_low_index(method):
    row = np.ones((1, 4))
    x = np.concatenate([row * 2.0, row * 2.0, row * -1.0], axis=0)
    out = ot_couple(x, x, method=method)
    assert np.array_equal(out.permutation, np.arange(3))
    assert out.total_cost == 0.0


@pytest.mark.parametrize("method", ["exact", "greedy"])
def test_hand_checked_swap(method):
    x0 = np.array([[0.0], [10.0]])
    x1 = np.array([[9.0], [1.0]])
    out = ot_couple(x0, x1, method=method)
    assert np.array_equal(out.permutation, [1, 0])
    assert out.total_cost == pytest.approx(2.0)
    identity = float(((x0 - x1) ** 2).sum())
    assert identity == pytest.approx(162.0)


def test_coupling_validation(rng):
    with pytest.raises(ShapeError, match="equal batches"):
        ot_couple(rng.normal(size=(3, 2)), rng.normal(size=(4, 2)))
    with pytest.raises(ValueError, match="at most 64"):
        ot_couple(np.zeros((65, 2)), np.zeros((65, 2)), method="exact")
    with pytest.raises(ValueError, match="method"):
        ot_couple(np.zeros((2, 2)), np.zeros((2, 2)), method="soft")


def test_exact_matches_brute_force_on_200_batches(rng):
    for trial in range(200):
        n = int(rng.integers(2, 7))
        x0 = rng.normal(size=(n, 2, 3))
        x1 = rng.normal(size=(n, 2, 3))
        out = ot_couple(x0, x1, method="exact")
        flat0 = x0.reshape(n, -1)
        flat1 = x1.reshape(n, -1)
        cost = ((flat0[:, None, :] - flat1[None, :, :]) ** 2).sum(-1)
        assert out.total_cost == pytest.approx(brute_force_cost(cost), abs=1e-9)
        assert sorted(out.permutation.tolist()) == list(range(n))


def test_cost_monotonicity_exact_greedy_identity(rng):
    for _ in range(40):
        n = int(rng.integers(2, 12))
        x0 = rng.normal(size=(n, 4))
        x1 = rng.normal(size=(n, 4)) + 0.5
        exact = ot_couple(x0, x1, method="exact").total_cost
        greedy = ot_couple(x0, x1, method="greedy").total_cost
        identity = float(((x0 - x1) ** 2).sum())
        assert exact <= greedy + 1e-9
        assert greedy <= identity + 1e-12


# -- path -----------------------------------------------------------------------------


def test_path_endpoints_exact(rng):
    x0 = rng.normal(size=(3, 4))
    x1 = rng.normal(size=(3, 4))
    assert np.array_equal(sample_path(x0, x1, 0.0).x_t, x0)
    assert np.array_equal(sample_path(x0, x1, 1.0).x_t, x1)


def test_velocity_constant_along_path(rng):
    x0 = rng.normal(size=(5, 2))
    x1 = rng.normal(size=(5, 2))
    a = sample_path(x0, x1, 0.25)
    b = sample_path(x0, x1, 0.75)
    assert np.array_equal(a.u, b.u)
    assert np.array_equal(a.u, x1 - x0)


def test_path_midpoint_value(rng):
    x0 = np.zeros((2, 2))
    x1 = np.full((2, 2), 4.0)
    assert np.array_equal(sample_path(x0, x1, 0.5).x_t, np.full((2, 2), 2.0))


def test_path_time_validation(rng):
    x = rng.normal(size=(2, 2))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        sample_path(x, x, -0.1)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        sample_path(x, x, 1.1)
    with pytest.raises(ShapeError):
        sample_path(rng.normal(size=(2, 2)), rng.normal(size=(3, 2)), 0.5)
    with pytest.raises(ShapeError, match="one time per batch row"):
        sample_path(rng.normal(size=(4, 2, 2)), rng.normal(size=(4, 2, 2)),
                    np.array([0.1, 0.2]))


def test_per_row_times_match_scalar_loop(rng):
    x0 = rng.normal(size=(4, 3, 2))
    x1 = rng.normal(size=(4, 3, 2))
    ts = rng.uniform(size=4)
    batched = sample_path(x0, x1, ts)
    for i, t in enumerate(ts):
        single = sample_path(x0[i], x1[i], float(t))
        assert np.array_equal(batched.x_t[i], single.x_t)
        assert np.array_equal(batched.u[i], single.u)


def test_sigma_min_widens_the_endpoint(rng):
    x0 = rng.normal(size=(3, 2))
    x1 = rng.normal(size=(3, 2))
    s = sample_path(x0, x1, 1.0, sigma_min=0.1)
    assert np.allclose(s.x_t, 0.1 * x0 + x1)
    assert np.allclose(s.u, x1 - 0.9 * x0)


def test_marginal_means_per_time_stratum(rng):
    mu0, mu1 = 2.0, -1.0
    sd0, sd1 = 1.0, 1.5
    n = 4000
    for t in (0.1, 0.35, 0.5, 0.75, 0.9):
        x0 = rng.normal(mu0, sd0, size=(n, 2))
        x1 = rng.normal(mu1, sd1, size=(n, 2))
        x_t = sample_path(x0, x1, t).x_t
        expected = (1.0 - t) * mu0 + t * mu1
        entry_sd = np.sqrt((1.0 - t) ** 2 * sd0 ** 2 + t ** 2 * sd1 ** 2)
        se = entry_sd / np.sqrt(x_t.size)
        assert abs(x_t.mean() - expected) < 3.0 * se


# -- losses ---------------------------------------------------------------------------


def test_cfm_loss_zero_at_match_and_one_at_unit_offset(rng):
    u = rng.normal(size=(3, 4))
    assert float(cfm_loss(Tensor(u), u)) == 0.0
    assert float(cfm_loss(Tensor(u + 1.0), u)) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        cfm_loss(Tensor(u), u[:2])


def test_cfm_loss_gradcheck(rng):
    u = rng.normal(size=(3, 4))
    x = rng.normal(size=(3, 4))
    rep = mf.gradcheck(lambda p: cfm_loss(p, u), [x], tol=1e-4)
    assert rep.passed, rep.summary()


def test_velocity_loss_zero_cases(rng):
    u = rng.normal(size=(4, 3))
    assert float(velocity_consistency_loss(Tensor(u), u)) == 0.0
    # integer data keeps the per-frame offset cancellation bit-exact
    ui = SeededRng(3).integers(-5, 6, size=(5, 2)).astype(np.float64)
    offset = np.array([3.0, -2.0])
    assert float(velocity_consistency_loss(Tensor(ui + offset), ui)) == 0.0
    shifted = rng.normal(size=(6, 3)) + rng.normal(size=3)
    base = shifted - (shifted[0] - rng.normal(size=3))
    assert float(velocity_consistency_loss(Tensor(shifted), base)) < 1e-12


def test_velocity_loss_hand_case():
    pred = np.array([[0.0], [2.0], [4.0]])
    u = np.array([[0.0], [1.0], [2.0]])
    assert float(velocity_consistency_loss(Tensor(pred), u)) == pytest.approx(1.0)


def test_velocity_loss_single_frame_warns(rng):
    x = rng.normal(size=(1, 4))
    with pytest.warns(RuntimeWarning, match="at least 2 frames"):
        out = velocity_consistency_loss(Tensor(x), x + 3.0)
    assert float(out) == 0.0


def test_velocity_loss_validation(rng):
    with pytest.raises(ShapeError, match="mismatch"):
        velocity_consistency_loss(Tensor(rng.normal(size=(3, 2))), rng.normal(size=(3, 3)))
    with pytest.raises(ShapeError, match="frames"):
        velocity_consistency_loss(Tensor(rng.normal(size=4)), rng.normal(size=4))


def test_velocity_loss_gradcheck(rng):
    u = rng.normal(size=(4, 3))
    x = rng.normal(size=(4, 3))
    rep = mf.gradcheck(lambda p: velocity_consistency_loss(p, u), [x], tol=1e-4)
    assert rep.passed, rep.summary()


def test_velocity_loss_batched_matches_flat(rng):
    pred = rng.normal(size=(2, 5, 3))
    u = rng.normal(size=(2, 5, 3))
    batched = float(velocity_consistency_loss(Tensor(pred), u))
    per = [float(velocity_consistency_loss(Tensor(pred[i]), u[i])) for i in range(2)]
    assert batched == pytest.approx(np.mean(per))


def test_noise_prediction_loss_examples(rng):
    eps = rng.normal(size=(2, 3, 4))
    assert float(noise_prediction_loss(Tensor(eps), eps)) == 0.0
    assert float(noise_prediction_loss(Tensor(eps + 1.0), eps)) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        noise_prediction_loss(Tensor(eps), eps[0])


# -- training -------------------------------------------------------------------------


def test_zero_weights_leave_parameters_unchanged(rng):
    net = micro_predictor(seed=11)
    before = {k: v.data.copy() for k, v in net.store.items()}
    cfg = TrainConfig(lambda_ot=0.0, lambda_vel=0.0, steps=1)
    opt = Adam(net.store, lr=cfg.lr)
    train_step(net, opt, micro_batch(rng), cfg, SeededRng(5), step=0)
    for k, v in net.store.items():
        assert np.array_equal(v.data, before[k]), k


def test_training_is_deterministic_per_seed():
    curves = []
    stores = []
    for _ in range(2):
        net = micro_predictor(seed=3)
        cfg = TrainConfig(steps=12, batch=4, seed=21)
        stream = constant_shift_batches(np.full(MICRO.d, 0.7), cfg.batch,
                                        MICRO.F, MICRO.cond_dim, MICRO.context,
                                        SeededRng(77))
        curves.append(train_flow(net, stream, cfg))
        stores.append({k: v.data.copy() for k, v in net.store.items()})
    assert curves[0]["total"] == curves[1]["total"]
    for k in stores[0]:
        assert np.array_equal(stores[0][k], stores[1][k])


def test_non_finite_loss_aborts(rng):
    # data at the float ceiling makes the weighted loss overflow to inf
    net = micro_predictor(seed=2)
    cfg = TrainConfig(steps=1, lambda_ot=10.0)
    opt = Adam(net.store, lr=cfg.lr)
    bad = FlowBatch(
        x1=np.full((2, MICRO.F, MICRO.d), 1e308),
        cond=np.zeros((2, MICRO.F, MICRO.cond_dim)),
        prev=np.zeros((2, MICRO.context, MICRO.d)),
        x0=np.zeros((2, MICRO.F, MICRO.d)),
    )
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(TrainingDiverged) as info:
            train_step(net, opt, bad, cfg, SeededRng(1), step=7)
    assert info.value.step == 7


def test_constant_shift_loss_decreases():
    net = micro_predictor(seed=8)
    shift = np.array([0.5, -0.3, 0.8, 0.1])
    cfg = TrainConfig(steps=300, batch=8, seed=4, lr=1e-3)
    stream = constant_shift_batches(shift, cfg.batch, MICRO.F, MICRO.cond_dim,
                                    MICRO.context, SeededRng(12))
    curves = train_flow(net, stream, cfg)
    early = np.mean(curves["total"][:40])
    late = np.mean(curves["total"][-40:])
    assert late < 0.5 * early
    # the learned field should be drifting toward the constant shift
    x = SeededRng(9).normal(size=(MICRO.F, MICRO.d))
    cond = np.zeros((MICRO.F, MICRO.cond_dim))
    prev = np.zeros((MICRO.context, MICRO.d))
    field = net.field(x, cond, 0.5, prev)
    assert np.abs(field - shift).max() < np.abs(shift).max()


def test_pre_paired_batches_report_identity_cost(rng):
    net = micro_predictor(seed=1)
    cfg = TrainConfig(steps=1)
    opt = Adam(net.store, lr=cfg.lr)
    x0 = rng.normal(size=(3, MICRO.F, MICRO.d))
    shift = 0.25
    batch = FlowBatch(x1=x0 + shift, cond=np.zeros((3, MICRO.F, MICRO.cond_dim)),
                      prev=np.zeros((3, MICRO.context, MICRO.d)), x0=x0)
    out = train_step(net, opt, batch, cfg, SeededRng(2))
    assert out["coupling_cost"] == pytest.approx(shift ** 2 * 3 * MICRO.F * MICRO.d)


def test_train_flow_streams_csv(tmp_path, rng):
    net = micro_predictor(seed=6)
    cfg = TrainConfig(steps=5, batch=3, seed=10)
    stream = constant_shift_batches(np.ones(MICRO.d), cfg.batch, MICRO.F,
                                    MICRO.cond_dim, MICRO.context, SeededRng(3))
    path = tmp_path / "losses.csv"
    curves = train_flow(net, stream, cfg, csv_path=path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,l_cfm,l_vel,total,coupling_cost"
    assert len(lines) == 6
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        assert int(cells[0]) == i
        assert float(cells[3]) == pytest.approx(curves["total"][i])


# -- diffusion baseline ---------------------------------------------------------------


def test_schedule_shape_and_monotonicity():
    sched = DiffusionSchedule.build()
    assert sched.steps == 1000
    assert sched.betas[0] == pytest.approx(1e-4)
    assert sched.betas[-1] == pytest.approx(0.02)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.time_slot(0) == 0.0
    assert sched.time_slot(999) == 1.0


def test_ddpm_step_requires_ddpm_config(rng):
    net = micro_predictor(seed=0)
    opt = Adam(net.store)
    with pytest.raises(ValueError, match="baseline='ddpm'"):
        ddpm_baseline_step(net, opt, micro_batch(rng), TrainConfig(), SeededRng(0))


def test_ddpm_zero_predictor_sees_unit_noise_energy(rng):
    # the readout starts at zero, so the first loss is E[eps^2] ~= 1
    net = micro_predictor(seed=5)
    cfg = TrainConfig(baseline="ddpm", batch=64)
    opt = Adam(net.store, lr=cfg.lr)
    batch = FlowBatch(
        x1=rng.normal(size=(64, MICRO.F, MICRO.d)),
        cond=rng.normal(size=(64, MICRO.F, MICRO.cond_dim)),
        prev=rng.normal(size=(64, MICRO.context, MICRO.d)),
    )
    out = ddpm_baseline_step(net, opt, batch, cfg, SeededRng(8))
    assert out["loss"] == pytest.approx(1.0, rel=0.15)


def test_ddpm_training_deterministic():
    stores = []
    for _ in range(2):
        net = micro_predictor(seed=14)
        cfg = TrainConfig(steps=10, batch=4, seed=31, baseline="ddpm")
        stream = constant_shift_batches(np.full(MICRO.d, 0.4), cfg.batch, MICRO.F,
                                        MICRO.cond_dim, MICRO.context, SeededRng(6))
        train_flow(net, stream, cfg)
        stores.append({k: v.data.copy() for k, v in net.store.items()})
    for k in stores[0]:
        assert np.array_equal(stores[0][k], stores[1][k])


def test_ddpm_sampler_runs_and_is_finite(rng):
    net = micro_predictor(seed=4)
    sched = DiffusionSchedule.build(steps=12)
    cond = np.zeros((MICRO.F, MICRO.cond_dim))
    prev = np.zeros((MICRO.context, MICRO.d))
    with no_grad():
        out = ddpm_sample(net, cond, prev, SeededRng(19), schedule=sched)
    assert out.shape == (MICRO.F, MICRO.d)
    assert np.all(np.isfinite(out))


# -- feature space and batch assembly ---------------------------------------------------


def test_feature_space_roundtrip_and_standardisation(rng):
    feats = rng.normal(3.0, 2.5, size=(500, 6))
    space = FeatureSpace.fit(feats)
    enc = space.encode(feats)
    assert np.abs(enc.mean(axis=0)).max() < 1e-12
    assert np.abs(enc.std(axis=0) - 1.0).max() < 1e-12
    assert np.allclose(space.decode(enc), feats)


def test_feature_space_floors_constant_features():
    feats = np.ones((50, 3))
    space = FeatureSpace.fit(feats)
    assert np.all(space.std == 1e-6)
    with pytest.raises(ShapeError):
        FeatureSpace.fit(np.zeros(5))


def test_window_batches_cut_real_slices():
    rng = SeededRng(40)
    seqs = [rng.normal(size=(30, 5)) for _ in range(3)]
    conds = [rng.normal(size=(30, 2)) for _ in range(3)]
    stream = window_batches(seqs, conds, window=8, context=2, batch=6,
                            rng=SeededRng(41))
    batch = next(stream)
    assert batch.x1.shape == (6, 8, 5)
    assert batch.cond.shape == (6, 2)[0:1] + (8, 2)
    assert np.array_equal(batch.prev, batch.x1[:, :2])
    # every window must be a contiguous slice of one of the sources
    for row in batch.x1:
        found = any(
            np.array_equal(row, seq[s:s + 8])
            for seq in seqs for s in range(seq.shape[0] - 7)
        )
        assert found


def test_window_batches_validation():
    rng = SeededRng(1)
    z = [np.zeros((4, 3))]
    c = [np.zeros((4, 2))]
    with pytest.raises(ValueError, match="shorter than"):
        next(window_batches(z, c, window=8, context=2, batch=1, rng=rng))
    with pytest.raises(ShapeError, match="lengths differ"):
        next(window_batches([np.zeros((4, 3))], [np.zeros((5, 2))],
                            window=2, context=1, batch=1, rng=rng))
    with pytest.raises(ValueError, match="non-empty"):
        next(window_batches([], [], window=2, context=1, batch=1, rng=rng))


def test_train_config_validation():
    with pytest.raises(ValueError, match="non-negative"):
        TrainConfig(lambda_ot=-0.1)
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="baseline"):
        TrainConfig(baseline="vae")
    with pytest.raises(ValueError, match="coupling"):
        TrainConfig(coupling="sinkhorn")
    with pytest.raises(ValueError, match="sigma_min"):
        TrainConfig(sigma_min=1.0)
    cfg = TrainConfig()
    assert (cfg.lambda_ot, cfg.lambda_vel, cfg.lr, cfg.batch) == (0.6, 1.0, 1e-4, 16)
