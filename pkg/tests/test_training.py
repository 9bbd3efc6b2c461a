import math

import numpy as np
import pytest

from conftest import tiny_fusion_spec
from volnet import data as vdata
from volnet import network, training
from volnet.errors import FormatError, InvalidConfig, NumericError
from volnet.network import Network
from volnet.training import (
    Checkpoint,
    PlateauScheduler,
    TrainConfig,
    load_checkpoint,
    restore_params,
    rmsprop_init,
    rmsprop_step,
    save_checkpoint,
    scale_lr,
    train_loop,
    xavier_init,
)


class TestXavierInit:
    def test_dense_bound(self):
        spec = network.build_fusion_network(("smri_l", "smri_r"), f0=8)
        store = xavier_init(spec, 0)
        w = store["tail/blk2/w"]  # dense 82 -> 2
        fan_in, fan_out = w.shape[1], w.shape[0]
        a = math.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(w) < a)
        assert np.abs(w).max() > 0.5 * a  # actually spreads over the interval

    def test_conv_bound_formula(self):
        # conv 1 -> 8 with k=3: fan_in 27, fan_out 216, a = sqrt(6/243)
        spec = network.build_fusion_network(("smri_l", "smri_r"), f0=8)
        store = xavier_init(spec, 1)
        w = store["pipe0/blk0/conv/w"]
        a = math.sqrt(6.0 / (27 + 216))
        assert a == pytest.approx(0.1571, abs=1e-4)
        assert np.all(np.abs(w) < a)

    def test_dense_100_bound_value(self):
        assert math.sqrt(6.0 / 200) == pytest.approx(0.1732, abs=1e-4)

    def test_biases_beta_gamma(self):
        spec = tiny_fusion_spec()
        store = xavier_init(spec, 2)
        assert not store["pipe0/blk0/conv/b"].any()
        assert not store["pipe0/blk0/bn/beta"].any()
        assert np.all(store["pipe0/blk0/bn/gamma"] == 1.0)
        assert not store["pipe0/blk0/bn/rm"].any()
        assert np.all(store["pipe0/blk0/bn/rv"] == 1.0)

    def test_same_seed_bit_identical(self):
        spec = tiny_fusion_spec()
        a = xavier_init(spec, 3)
        b = xavier_init(spec, 3)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = xavier_init(spec, 4)
        assert any(not np.array_equal(a[k], c[k]) for k in a)


def rmsprop_scalar_oracle(g_seq, lr, rho, eps):
    """Hand-unrolled scalar recurrence."""
    s, theta = 0.0, 0.0
    for g in g_seq:
        s = rho * s + (1 - rho) * g * g
        theta = theta - lr * g / (math.sqrt(s) + eps)
    return theta


class TestRmsprop:
    def _scalar_setup(self):
        params = {"w": np.array([0.0], dtype=np.float32)}
        state = rmsprop_init(params, ["w"])
        return params, state

    def test_zero_gradient(self):
        params, state = self._scalar_setup()
        params["w"][0] = 1.5
        state["w"][0] = 0.4
        rmsprop_step(params, {"w": np.zeros(1, dtype=np.float32)}, state, lr=0.1)
        assert params["w"][0] == 1.5
        assert state["w"][0] == pytest.approx(0.9 * 0.4)

    def test_fresh_state_magnitude(self):
        # with s=0 and rho=0.9 the first step is ~ lr / sqrt(0.1)
        params, state = self._scalar_setup()
        g = np.array([0.7], dtype=np.float32)
        lr = 1e-3
        rmsprop_step(params, {"w": g}, state, lr=lr, rho=0.9, epsilon=1e-12)
        assert -params["w"][0] == pytest.approx(lr / math.sqrt(0.1), rel=1e-4)

    def test_two_steps_match_recurrence(self):
        params, state = self._scalar_setup()
        lr, rho, eps = 0.01, 0.9, 1e-7
        g = 0.3
        for _ in range(2):
            rmsprop_step(
                params, {"w": np.array([g], dtype=np.float32)}, state, lr, rho, eps
            )
        want = rmsprop_scalar_oracle([g, g], lr, rho, eps)
        assert params["w"][0] == pytest.approx(want, abs=1e-6)

    def test_accumulator_stays_nonnegative(self):
        rng = np.random.default_rng(0)
        params = {"w": np.zeros(32, dtype=np.float32)}
        state = rmsprop_init(params, ["w"])
        for _ in range(50):
            g = (10 * rng.standard_normal(32)).astype(np.float32)
            rmsprop_step(params, {"w": g}, state, lr=1e-3)
            assert np.all(state["w"] >= 0)

    def test_nonfinite_gradient_aborts(self):
        params, state = self._scalar_setup()
        before = params["w"].copy()
        with pytest.raises(NumericError):
            rmsprop_step(params, {"w": np.array([np.nan], dtype=np.float32)}, state, 0.1)
        assert np.array_equal(params["w"], before)


class TestScaleLr:
    def test_doubling_batch_halves_lr(self):
        assert scale_lr(1e-3, 15, 30) == pytest.approx(5e-4)

    def test_identity(self):
        assert scale_lr(1e-3, 15, 15) == pytest.approx(1e-3)

    def test_shrinking_batch_raises_lr(self):
        assert scale_lr(1e-3, 15, 5) == pytest.approx(3e-3)


class TestPlateauScheduler:
    def test_decreasing_loss_keeps_lr(self):
        sched = PlateauScheduler(lr=1.0, patience=3, min_delta=1e-4)
        for loss in (1.0, 0.9, 0.8, 0.7, 0.6, 0.5):
            sched.step(loss)
        assert sched.lr == 1.0

    def test_constant_loss_halves_at_6_and_11(self):
        sched = PlateauScheduler(lr=1.0, factor=0.5, patience=5, min_delta=1e-4)
        lrs = [sched.step(1.0) for _ in range(12)]
        # epoch numbering: first call is epoch 1 and sets the baseline
        assert lrs[:5] == [1.0] * 5
        assert lrs[5] == 0.5  # epoch 6
        assert lrs[6:10] == [0.5] * 4
        assert lrs[10] == 0.25  # epoch 11
        assert lrs[11] == 0.25

    def test_exact_min_delta_improvement_resets(self):
        sched = PlateauScheduler(lr=1.0, factor=0.5, patience=2, min_delta=0.1)
        sched.step(1.0)
        sched.step(0.9)  # improvement of exactly min_delta
        assert sched.bad_epochs == 0
        sched.step(0.85)  # below min_delta: counts as stagnation
        assert sched.bad_epochs == 1

    def test_lr_floor(self):
        sched = PlateauScheduler(lr=1e-5, factor=0.1, patience=1, lr_min=1e-6)
        for _ in range(10):
            sched.step(1.0)
        assert sched.lr == pytest.approx(1e-6)

    def test_nonfinite_loss_rejected(self):
        with pytest.raises(NumericError):
            PlateauScheduler(lr=1.0).step(float("nan"))


# ---------------------------------------------------------------------------
# the loop itself, on a small phantom dataset
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    # 26 per class: 15 test, 1 validation, 10 train
    out = tmp_path_factory.mktemp("loop-data")
    manifest_path = vdata.generate_phantoms(
        vdata.default_class_specs(2), n_per_class=26, seed=21, out_dir=out
    )
    manifest = vdata.load_manifest(manifest_path)
    split = vdata.split_dataset(manifest, seed=21)
    return manifest, split


def small_config(**kw):
    base = dict(
        task="AD_NC",
        preset="proposed-4roi",
        tau=1,
        eta=4,
        lr0=1e-3,
        eta0=4,
        max_epochs=2,
        seed=5,
        f0=4,
        keep_prob=0.9,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_zero_epochs(self, small_dataset):
        manifest, split = small_dataset
        config = small_config(max_epochs=0)
        result = train_loop(config.build_spec(), manifest, split, config)
        assert result.history == []
        init = xavier_init(config.build_spec(), config.seed)
        assert all(np.array_equal(result.final_params[k], init[k]) for k in init)

    def test_zero_lr_freezes_parameters(self, small_dataset):
        manifest, split = small_dataset
        config = small_config(lr0=1e-30, lr_min=1e-32, max_epochs=1)
        spec = config.build_spec()
        result = train_loop(spec, manifest, split, config)
        init = xavier_init(spec, config.seed)
        trainable = {
            ps.name
            for ps in Network.structure_only(spec).param_specs()
            if ps.trainable and not ps.name.endswith(("gamma", "beta"))
        }
        for name in trainable:
            np.testing.assert_allclose(result.final_params[name], init[name], atol=1e-22)

    def test_loss_decreases(self, small_dataset):
        manifest, split = small_dataset
        config = small_config(max_epochs=4, tau=3)
        result = train_loop(config.build_spec(), manifest, split, config)
        assert result.history[-1].train_loss < result.history[0].train_loss

    def test_iteration_count_matches_epoch_plan(self, small_dataset):
        manifest, split = small_dataset
        config = small_config(max_epochs=1)
        n_train = sum(len(split.train[c]) for c in ("AD", "NC"))
        images, iters = vdata.epoch_plan(n_train, config.tau, config.eta)
        assert images == config.tau * n_train
        assert iters == images // config.eta
        # loop-level confirmation: the averaged train loss exists and the
        # history row count equals max_epochs
        result = train_loop(config.build_spec(), manifest, split, config)
        assert len(result.history) == 1

    def test_same_seed_identical_history(self, small_dataset):
        manifest, split = small_dataset
        config = small_config(max_epochs=2)
        r1 = train_loop(config.build_spec(), manifest, split, config)
        r2 = train_loop(config.build_spec(), manifest, split, config)
        assert [row.__dict__ for row in r1.history] == [row.__dict__ for row in r2.history]
        assert all(
            np.array_equal(r1.final_params[k], r2.final_params[k]) for k in r1.final_params
        )

    def test_lr_column_nonincreasing(self, small_dataset):
        manifest, split = small_dataset
        config = small_config(max_epochs=4, patience=1, plateau_factor=0.5)
        result = train_loop(config.build_spec(), manifest, split, config)
        lrs = [row.lr for row in result.history]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_missing_class_rejected(self, small_dataset):
        manifest, split = small_dataset
        config = small_config(task="AD_MCI_NC")
        with pytest.raises(InvalidConfig):
            train_loop(config.build_spec(), manifest, split, config)


class TestCheckpoint:
    def _roundtrip(self, tmp_path, config, params, opt, history=(), best=None):
        sched = PlateauScheduler(lr=0.5)
        path = tmp_path / "t.ckpt"
        save_checkpoint(
            path, config, epoch=len(history), params=params, optimizer=opt,
            scheduler=sched, history=list(history), best_epoch=0, best_params=best,
        )
        return load_checkpoint(path)

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(31)
        config = small_config()
        spec = config.build_spec()
        params = xavier_init(spec, 7)
        net = Network(spec, params)
        opt = {n: rng.random(params[n].shape).astype(np.float32)
               for n in training.trainable_names(net)}
        ckpt = self._roundtrip(tmp_path, config, params, opt)
        assert set(ckpt.params) == set(params)
        for k in params:
            assert np.array_equal(
                ckpt.params[k].view(np.uint32), params[k].view(np.uint32)
            ), k
        for k in opt:
            assert np.array_equal(ckpt.optimizer[k], opt[k])

    def test_restore_validates_shapes(self, tmp_path):
        config = small_config()
        params = xavier_init(config.build_spec(), 8)
        ckpt = self._roundtrip(tmp_path, config, params, {})
        other = xavier_init(tiny_fusion_spec(), 9)
        with pytest.raises(FormatError):
            restore_params(other, ckpt.params)

    def test_wrong_preset_rejected_on_resume(self, tmp_path, small_dataset):
        manifest, split = small_dataset
        config = small_config()
        params = xavier_init(config.build_spec(), 10)
        ckpt = self._roundtrip(tmp_path, config, params, {})
        bad = Checkpoint({**ckpt.meta, "preset": "alexnet-4roi"}, ckpt.params, {}, {})
        with pytest.raises(FormatError):
            train_loop(config.build_spec(), manifest, split, config, resume=bad)

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTCKPT" + b"0" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_resume_matches_unbroken_run(self, small_dataset, tmp_path):
        manifest, split = small_dataset
        config5 = small_config(max_epochs=5, tau=2)
        spec = config5.build_spec()
        full = train_loop(spec, manifest, split, config5)

        config3 = small_config(max_epochs=3, tau=2)
        mid = train_loop(spec, manifest, split, config3)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(
            path, config5, epoch=3, params=mid.final_params,
            optimizer=mid.optimizer_state, scheduler=mid.scheduler,
            history=mid.history, best_epoch=mid.best_epoch,
            best_params=mid.best_params,
        )
        resumed = train_loop(spec, manifest, split, config5, resume=load_checkpoint(path))
        assert len(resumed.history) == 5
        for a, b in zip(full.history, resumed.history):
            assert b.__dict__ == pytest.approx(a.__dict__)
        for k in full.final_params:
            np.testing.assert_array_equal(resumed.final_params[k], full.final_params[k])
