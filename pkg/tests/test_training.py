"""Loss, gradient clipping, Adam, and the training loop."""

import csv
import math

import numpy as np
import pytest

from lka3d import network, training
from lka3d import tensor as T
from lka3d.pipeline import Volume, one_hot_labels
from lka3d.training import (Adam, NonFiniteGradientError, TrainConfig,
                            TrainingDivergedError, clip_grad_norm,
                            dice_ce_loss, smoothed, train, write_loss_curve)


def tiny_model(seed=0, in_channels=1, num_classes=2):
    cfg = network.ModelConfig(variant="plain_unet", in_channels=in_channels,
                              num_classes=num_classes,
                              stage_channels=(2, 4), stage_repeats=(1, 1))
    return network.build(cfg, seed=seed)


def tiny_dataset(n=4, shape=(8, 8, 8), channels=1, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img = rng.standard_normal((channels,) + shape).astype(np.float32)
        lbl = (rng.random(shape) > 0.7).astype(np.uint8)
        out.append((Volume(img), Volume(lbl)))
    return out


class TestDiceCELoss:
    def test_uniform_logits_hand_value(self):
        # zero logits, 2 classes, all-background target
        n, k, s = 1, 2, 4
        logits = T.Tensor(np.zeros((n, k, s, s, s), dtype=np.float64))
        target = np.zeros((n, k, s, s, s))
        target[:, 0] = 1.0
        v = s ** 3
        eps = 1e-5
        # softmax is 1/k everywhere; per class: (2*sum(p*t)+eps)/(sum p + sum t + eps)
        d0 = (2 * (v / k) + eps) / (v / k + v + eps)
        d1 = (0.0 + eps) / (v / k + 0.0 + eps)
        expect = (1.0 - (d0 + d1) / 2.0) + math.log(k)
        loss = dice_ce_loss(logits, target)
        assert float(loss.data) == pytest.approx(expect, abs=1e-12)

    def test_exclude_background(self):
        n, k, s = 1, 2, 4
        logits = T.Tensor(np.zeros((n, k, s, s, s), dtype=np.float64))
        target = np.zeros((n, k, s, s, s))
        target[:, 0] = 1.0
        v = s ** 3
        eps = 1e-5
        d1 = eps / (v / k + eps)
        expect = (1.0 - d1) + math.log(k)
        loss = dice_ce_loss(logits, target, include_background=False)
        assert float(loss.data) == pytest.approx(expect, abs=1e-12)

    def test_perfect_prediction_approaches_zero(self):
        rng = np.random.default_rng(0)
        labels = (rng.random((1, 4, 4, 4)) > 0.5).astype(np.int64)
        target = one_hot_labels(labels, 2)
        logits = T.Tensor((target * 200.0 - 100.0).astype(np.float64))
        loss = float(dice_ce_loss(logits, target.astype(np.float64)).data)
        assert 0.0 <= loss < 1e-4

    def test_extreme_logits_stay_finite(self):
        logits_data = np.zeros((1, 2, 2, 2, 2))
        logits_data[0, 0] = 1e4
        logits_data[0, 1] = -1e4
        target = np.zeros_like(logits_data)
        target[:, 1] = 1.0  # worst case: confident and wrong
        loss = dice_ce_loss(T.Tensor(logits_data, requires_grad=True), target)
        assert np.isfinite(float(loss.data))
        loss.backward()

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = T.Tensor(rng.standard_normal((2, 3, 3, 3, 3)),
                          requires_grad=True)
        labels = rng.integers(0, 3, (2, 3, 3, 3))
        target = one_hot_labels(labels, 3).astype(np.float64)
        err = T.gradient_check(lambda a: dice_ce_loss(a, target), [logits])
        assert err < 1e-5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dice_ce_loss(T.Tensor(np.zeros((1, 2, 2, 2, 2))),
                         np.zeros((1, 3, 2, 2, 2)))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            dice_ce_loss(T.Tensor(np.zeros((1, 1, 2, 2, 2))),
                         np.zeros((1, 1, 2, 2, 2)))


class TestClipGradNorm:
    def test_returns_preclip_norm_and_scales(self):
        p = T.Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        norm = clip_grad_norm([p], 2.5)
        assert norm == pytest.approx(5.0)
        assert np.allclose(p.grad, [1.5, 2.0])  # scaled by 0.5

    def test_under_threshold_untouched(self):
        p = T.Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.3, 0.4])
        norm = clip_grad_norm([p], 2.5)
        assert norm == pytest.approx(0.5)
        assert np.allclose(p.grad, [0.3, 0.4])

    def test_global_norm_across_params(self):
        a = T.Tensor(np.zeros(1), requires_grad=True)
        b = T.Tensor(np.zeros(1), requires_grad=True)
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 100.0) == pytest.approx(5.0)

    def test_none_grads_skipped(self):
        a = T.Tensor(np.zeros(1), requires_grad=True)
        a.grad = None
        assert clip_grad_norm([a], 1.0) == 0.0

    def test_nonfinite_raises(self):
        p = T.Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([1.0, np.nan])
        with pytest.raises(NonFiniteGradientError):
            clip_grad_norm([p], 1.0)


class TestAdam:
    def test_matches_textbook_reference(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal(5)
        p = T.Tensor(data.copy(), requires_grad=True)
        opt = Adam([p], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        ref = data.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        for t in range(1, 4):
            g = rng.standard_normal(5)
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            ref = ref - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
            assert np.allclose(p.data, ref, atol=1e-14)

    def test_zero_grad_leaves_nonzero_update_after_history(self):
        # Adam momentum keeps moving a param whose current grad is zero
        p = T.Tensor(np.zeros(1), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        before = p.data.copy()
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] != before[0]

    def test_state_arrays_roundtrip(self):
        rng = np.random.default_rng(3)
        p = T.Tensor(rng.standard_normal(4), requires_grad=True)
        opt = Adam([p], lr=0.01)
        for _ in range(3):
            p.grad = rng.standard_normal(4)
            opt.step()
        state = {k: v.copy() for k, v in opt.state_arrays().items()}
        q = T.Tensor(p.data.copy(), requires_grad=True)
        opt2 = Adam([q], lr=0.01)
        opt2.load_state_arrays(state)
        assert opt2.t == 3
        g = rng.standard_normal(4)
        p.grad, q.grad = g.copy(), g.copy()
        opt.step()
        opt2.step()
        assert np.array_equal(p.data, q.data)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.beta1 == 0.9
        assert cfg.beta2 == 0.999
        assert cfg.eps == 1e-8
        assert cfg.flips is True
        assert cfg.include_background is True

    def test_crop_size_coerced_to_int_tuple(self):
        assert TrainConfig(crop_size=[8, 8, 8]).crop_size == (8, 8, 8)
        assert TrainConfig(crop_size=(4.0, 8, 8)).crop_size == (4, 8, 8)
        assert TrainConfig().crop_size is None

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=-1)
        with pytest.raises(ValueError):
            TrainConfig(clip_norm=0.0)


class TestTrainLoop:
    CFG = dict(lr=1e-3, batch_size=2, crop_size=(8, 8, 8), seed=3)

    def test_history_rows_and_drop_last(self):
        model = tiny_model()
        data = tiny_dataset(n=5)  # batch 2 -> 2 steps/epoch, last case dropped
        history = train(model, data, TrainConfig(epochs=3, **self.CFG))
        assert len(history) == 6
        steps = [row[0] for row in history]
        epochs = [row[1] for row in history]
        assert steps == list(range(6))
        assert epochs == [0, 0, 1, 1, 2, 2]
        assert all(np.isfinite(row[2]) and np.isfinite(row[3])
                   for row in history)

    def test_max_steps_cuts_short(self):
        model = tiny_model()
        history = train(model, tiny_dataset(), TrainConfig(epochs=10, **self.CFG),
                        max_steps=3)
        assert len(history) == 3

    def test_deterministic_under_seed(self):
        h1 = train(tiny_model(seed=1), tiny_dataset(),
                   TrainConfig(epochs=2, **self.CFG))
        h2 = train(tiny_model(seed=1), tiny_dataset(),
                   TrainConfig(epochs=2, **self.CFG))
        assert [r[2] for r in h1] == [r[2] for r in h2]

    def test_zero_lr_keeps_params(self):
        model = tiny_model()
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        train(model, tiny_dataset(),
              TrainConfig(lr=0.0, batch_size=2, crop_size=(8, 8, 8), epochs=1))
        for n, p in model.named_parameters():
            assert np.array_equal(p.data, before[n]), n

    def test_zero_epochs_noop(self, tmp_path):
        model = tiny_model()
        history = train(model, tiny_dataset(),
                        TrainConfig(epochs=0, **self.CFG), out_dir=tmp_path)
        assert history == []
        assert (tmp_path / "ckpt_final.lka3d").exists()

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_model(), [], TrainConfig(epochs=1, **self.CFG))

    def test_checkpoints_and_loss_curve(self, tmp_path):
        model = tiny_model()
        train(model, tiny_dataset(), TrainConfig(epochs=2, **self.CFG),
              out_dir=tmp_path)
        assert (tmp_path / "ckpt_epoch_000.lka3d").exists()
        assert (tmp_path / "ckpt_epoch_001.lka3d").exists()
        assert (tmp_path / "ckpt_final.lka3d").exists()
        with open(tmp_path / "loss_curve.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "epoch", "loss", "grad_norm"]
        assert len(rows) == 5  # header + 2 epochs x 2 steps
        _, extra, arrays = network.load_checkpoint(tmp_path / "ckpt_final.lka3d")
        assert extra["step"] == 4
        assert int(arrays["adam/t"][0]) == 4

    def test_resume_continues_numbering_and_optimizer(self, tmp_path):
        data = tiny_dataset()
        part = tiny_model(seed=9)
        h1 = train(part, data, TrainConfig(epochs=2, **self.CFG),
                   out_dir=tmp_path)
        model2, extra, arrays = network.load_checkpoint(tmp_path / "ckpt_final.lka3d")
        opt = training.Adam(model2.parameters(), 1e-3)
        opt.load_state_arrays(arrays)
        assert opt.t == len(h1)
        h2 = train(model2, data, TrainConfig(epochs=4, **self.CFG),
                   optimizer=opt, start_step=extra["step"],
                   start_epoch=extra["epoch"])
        assert [r[0] for r in h2] == [4, 5, 6, 7]
        assert [r[1] for r in h2] == [2, 2, 3, 3]
        assert opt.t == 8

    def test_diverged_loss_aborts(self):
        model = tiny_model()
        data = tiny_dataset()
        bad = np.full_like(data[0][0].data, np.nan)
        data[0] = (Volume(bad), data[0][1])
        data[1] = (Volume(bad.copy()), data[1][1])
        data[2] = (Volume(bad.copy()), data[2][1])
        data[3] = (Volume(bad.copy()), data[3][1])
        with pytest.raises(TrainingDivergedError):
            train(model, data, TrainConfig(epochs=1, lr=1e-3, batch_size=2,
                                           crop_size=(8, 8, 8), seed=0))

    def test_nonfinite_gradient_skips_step(self, monkeypatch):
        calls = {"n": 0}
        real_clip = training.clip_grad_norm

        def flaky_clip(params, max_norm):
            calls["n"] += 1
            if calls["n"] == 1:
                raise NonFiniteGradientError("injected")
            return real_clip(params, max_norm)

        monkeypatch.setattr(training, "clip_grad_norm", flaky_clip)
        model = tiny_model()
        before = {n: p.data.copy() for n, p in model.named_parameters()}
        # one step only: the injected failure must skip the update entirely
        h1 = train(model, tiny_dataset(), TrainConfig(epochs=1, **self.CFG),
                   max_steps=1)
        assert math.isnan(h1[0][3])  # skipped step logs NaN grad norm
        for n, p in model.named_parameters():
            assert np.array_equal(before[n], p.data), n
        # the loop recovers on subsequent steps
        h2 = train(model, tiny_dataset(), TrainConfig(epochs=1, **self.CFG))
        assert np.isfinite(h2[-1][3])
        changed = any(not np.array_equal(before[n], p.data)
                      for n, p in model.named_parameters())
        assert changed


class TestSmoothing:
    def test_disjoint_block_means(self):
        assert smoothed([1, 2, 3, 4, 5, 6, 7], 3) == [2.0, 5.0]

    def test_window_equal_length(self):
        assert smoothed([2.0, 4.0], 2) == [3.0]

    def test_too_short_gives_empty(self):
        assert smoothed([1.0], 2) == []

    def test_write_loss_curve_append(self, tmp_path):
        path = tmp_path / "curve.csv"
        write_loss_curve(path, [(0, 0, 1.0, 2.0)])
        write_loss_curve(path, [(1, 0, 0.5, 1.0)], append=True)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 3
        assert rows[1][0] == "0"
        assert rows[2][0] == "1"
