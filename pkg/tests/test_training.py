"""Optimizers, checkpoints, and the two training loops."""

import numpy as np
import pytest

from splicematch import datagen, training
from splicematch.errors import (CheckpointFormatError, CheckpointShapeError,
                                CheckpointVersionError, DimensionError,
                                ParameterError)
from splicematch.training import (AdadeltaState, AdamState, Checkpoint,
                                  TrainConfig, adadelta_step, adam_step,
                                  adversarial_train, load_checkpoint,
                                  pretrain, save_checkpoint)


class TestAdam:
    def test_first_step_closed_form(self):
        p = np.array([1.0])
        state = AdamState(m=[np.zeros(1)], v=[np.zeros(1)])
        adam_step([p], [np.array([1.0])], state, lr=1e-3)
        # bias correction gives mhat = vhat**0.5 = 1 on the first step
        assert abs(p[0] - (1.0 - 1e-3)) < 1e-9

    def test_zero_gradient_no_change(self):
        p = np.array([2.0, -3.0])
        state = AdamState(m=[np.zeros(2)], v=[np.zeros(2)])
        adam_step([p], [np.zeros(2)], state, lr=1e-2)
        assert np.array_equal(p, [2.0, -3.0])

    def test_two_steps_match_hand_recurrence(self):
        g = np.array([0.7])
        p = np.array([0.0])
        state = AdamState(m=[np.zeros(1)], v=[np.zeros(1)])
        adam_step([p], [g.copy()], state, lr=1e-3)
        adam_step([p], [g.copy()], state, lr=1e-3)
        m = v = 0.0
        ref = 0.0
        for t in (1, 2):
            m = 0.9 * m + 0.1 * 0.7
            v = 0.999 * v + 0.001 * 0.49
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            ref -= 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)
        assert abs(p[0] - ref) < 1e-10

    def test_shape_mismatch(self):
        state = AdamState(m=[np.zeros(2)], v=[np.zeros(2)])
        with pytest.raises(DimensionError):
            adam_step([np.zeros(2)], [np.zeros(3)], state, lr=1e-3)


class TestAdadelta:
    def test_zero_gradient_no_change(self):
        p = np.array([1.5])
        state = AdadeltaState(sq_grad=[np.zeros(1)], sq_update=[np.zeros(1)])
        adadelta_step([p], [np.zeros(1)], state)
        assert p[0] == 1.5

    def test_first_step_closed_form(self):
        g = 0.3
        p = np.array([0.0])
        state = AdadeltaState(sq_grad=[np.zeros(1)], sq_update=[np.zeros(1)])
        adadelta_step([p], [np.array([g])], state)
        expected = -np.sqrt(1e-6 / (0.1 * g * g + 1e-6)) * g
        assert abs(p[0] - expected) < 1e-12

    def test_update_opposes_gradient(self):
        rng = np.random.default_rng(0)
        p = rng.standard_normal(20)
        g = rng.standard_normal(20)
        g[np.abs(g) < 1e-3] = 1.0
        before = p.copy()
        state = AdadeltaState(sq_grad=[np.zeros(20)], sq_update=[np.zeros(20)])
        adadelta_step([p], [g], state)
        assert np.all(np.sign(p - before) == -np.sign(g))


class TestCheckpointIO:
    def _make(self):
        rng = np.random.default_rng(0)
        return Checkpoint(
            config={"preset": "toy", "lr_g": 1e-5},
            rng_state=np.random.default_rng(3).bit_generator.state,
            arrays={"matcher.w": rng.standard_normal((3, 4)).astype(np.float32),
                    "opt_g.t": np.array([7], dtype=np.int64),
                    "matcher.b": rng.standard_normal(5)},
            meta={"iteration": 7, "phase": "pretrain"})

    def test_round_trip_byte_identical(self, tmp_path):
        ckpt = self._make()
        p1, p2 = tmp_path / "a.splck", tmp_path / "b.splck"
        save_checkpoint(ckpt, p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for name in ckpt.arrays:
            assert np.array_equal(loaded.arrays[name], ckpt.arrays[name])
            assert loaded.arrays[name].dtype == ckpt.arrays[name].dtype
        assert loaded.config == ckpt.config
        assert loaded.meta["iteration"] == 7

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "c.splck"
        save_checkpoint(self._make(), path)
        data = path.read_bytes().replace(b"SPLCKPT 1", b"SPLCKPT 9", 1)
        path.write_bytes(data)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_corrupted_header(self, tmp_path):
        path = tmp_path / "d.splck"
        save_checkpoint(self._make(), path)
        raw = bytearray(path.read_bytes())
        raw[20] = ord("}")    # break the JSON
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "e.splck"
        save_checkpoint(self._make(), path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "f.splck"
        path.write_bytes(b"hello world\n")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "g.splck"
        save_checkpoint(self._make(), path)
        raw = path.read_bytes()
        # lie about a stored shape in the header
        bad = raw.replace(b'"shape": [3, 4]', b'"shape": [9, 9]', 1)
        header_len = int(bad.split(b"\n", 2)[1])
        delta = len(bad) - len(raw)
        head, rest = bad.split(b"\n", 1)
        path.write_bytes(head + b"\n" + str(header_len + delta).encode()
                         + b"\n" + rest.split(b"\n", 1)[1])
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)


@pytest.fixture(scope="module")
def toy_dataset():
    return datagen.make_toy_dataset(4, size=64, seed=3)


@pytest.fixture(scope="module")
def quick_config():
    return TrainConfig(preset="toy", batch_size=3, iterations=6, seed=1,
                       dtype="float32")


class TestPretrain:
    def test_empty_dataset_rejected(self, quick_config):
        with pytest.raises(ParameterError):
            pretrain(datagen.PairDataset([]), quick_config)

    def test_initial_loss_near_uniform_baseline(self, toy_dataset, quick_config):
        result = pretrain(toy_dataset, quick_config)
        baseline = 2 * 8 * 8 * np.log(2.0)
        assert abs(result.history[0]["loss_ce"] - baseline) < 0.2 * baseline

    def test_same_seed_identical_trajectories(self, toy_dataset, quick_config):
        r1 = pretrain(toy_dataset, quick_config)
        r2 = pretrain(toy_dataset, quick_config)
        l1 = [row["loss_ce"] for row in r1.history]
        l2 = [row["loss_ce"] for row in r2.history]
        assert l1 == l2
        for name in r1.checkpoint.arrays:
            assert np.array_equal(r1.checkpoint.arrays[name],
                                  r2.checkpoint.arrays[name])

    def test_epoch_schedule(self, toy_dataset):
        config = TrainConfig(preset="toy", batch_size=6, epochs=1, seed=0)
        result = pretrain(toy_dataset, config)
        assert len(result.history) == 2   # ceil(12 / 6)

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(k=0)
        with pytest.raises(ParameterError):
            TrainConfig(lr_g=0.0)
        with pytest.raises(ParameterError):
            TrainConfig(batch_size=0)
        with pytest.raises(ParameterError):
            TrainConfig(dtype="float16")


class TestResume:
    def test_pretrain_resume_bitwise(self, toy_dataset, tmp_path):
        full_cfg = TrainConfig(preset="toy", batch_size=3, iterations=8,
                               seed=2, dtype="float32", checkpoint_every=4)
        full = pretrain(toy_dataset, full_cfg, out_dir=str(tmp_path / "full"))
        mid = load_checkpoint(tmp_path / "full" / "ckpt_000004.splck")
        resumed = pretrain(toy_dataset, full_cfg, resume=mid)
        tail_full = [row["loss_ce"] for row in full.history[4:]]
        tail_res = [row["loss_ce"] for row in resumed.history]
        assert tail_full == tail_res
        for name in full.checkpoint.arrays:
            assert np.array_equal(full.checkpoint.arrays[name],
                                  resumed.checkpoint.arrays[name]), name

    def test_adversarial_resume_bitwise(self, toy_dataset, tmp_path):
        pre_cfg = TrainConfig(preset="toy", batch_size=3, iterations=3, seed=4)
        base = pretrain(toy_dataset, pre_cfg).checkpoint
        adv_cfg = TrainConfig(preset="toy", batch_size=3, adv_iterations=6,
                              seed=5, checkpoint_every=3)
        full = adversarial_train(base, toy_dataset, adv_cfg,
                                 out_dir=str(tmp_path / "adv"))
        mid = load_checkpoint(tmp_path / "adv" / "adv_ckpt_000003.splck")
        resumed = adversarial_train(None, toy_dataset, adv_cfg, resume=mid)
        assert ([row["loss_total"] for row in full.history[3:]]
                == [row["loss_total"] for row in resumed.history])
        for name in full.checkpoint.arrays:
            assert np.array_equal(full.checkpoint.arrays[name],
                                  resumed.checkpoint.arrays[name]), name


class TestAdversarialLoop:
    def test_requires_pretrained_checkpoint(self, toy_dataset, quick_config):
        with pytest.raises(ParameterError):
            adversarial_train(None, toy_dataset, quick_config)

    def test_event_order_per_outer_iteration(self, toy_dataset):
        pre = pretrain(toy_dataset,
                       TrainConfig(preset="toy", batch_size=3, iterations=2,
                                   seed=6)).checkpoint
        config = TrainConfig(preset="toy", batch_size=3, adv_iterations=2,
                             k=2, seed=6)
        result = adversarial_train(pre, toy_dataset, config)
        for row in result.history:
            assert row["events"] == ["det", "dis", "det", "dis", "gen"]

    def test_losses_finite_and_sigma_bounded(self, toy_dataset):
        pre = pretrain(toy_dataset,
                       TrainConfig(preset="toy", batch_size=3, iterations=2,
                                   seed=7)).checkpoint
        config = TrainConfig(preset="toy", batch_size=3, adv_iterations=4, seed=7)
        result = adversarial_train(pre, toy_dataset, config)
        for row in result.history:
            for key in ("loss_ce", "loss_det_d", "loss_total"):
                assert np.isfinite(row[key])
            assert row["max_sn_sigma"] <= 1.05

    def test_zero_weights_match_plain_adam_ce_steps(self, toy_dataset):
        pre_cfg = TrainConfig(preset="toy", batch_size=3, iterations=2, seed=8)
        base = pretrain(toy_dataset, pre_cfg).checkpoint
        config = TrainConfig(preset="toy", batch_size=3, adv_iterations=3,
                             seed=8, lambda_det=0.0, lambda_dis=0.0)
        result = adversarial_train(base, toy_dataset, config)

        # manual loop: same sampling pattern, pure cross-entropy Adam steps
        matcher = training.build_matcher(config)
        training._apply_arrays(matcher, base.arrays, "matcher")
        opt = training.Adam(matcher, config.lr_g)
        rng = np.random.default_rng(config.seed)
        losses = []
        for _ in range(3):
            dataset = toy_dataset
            dataset.batch(dataset.sample_indices(rng, 3), 8)  # the k-step draw
            batch = dataset.batch(dataset.sample_indices(rng, 3), 8)
            _, loss = training._forward_ce(matcher, batch)
            matcher.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.item()))
        assert losses == [row["loss_ce"] for row in result.history]

    def test_hinge_variant_runs(self, toy_dataset):
        pre = pretrain(toy_dataset,
                       TrainConfig(preset="toy", batch_size=3, iterations=2,
                                   seed=9)).checkpoint
        config = TrainConfig(preset="toy", batch_size=3, adv_iterations=2,
                             seed=9, loss_variant="hinge")
        result = adversarial_train(pre, toy_dataset, config)
        assert all(np.isfinite(row["loss_total"]) for row in result.history)
