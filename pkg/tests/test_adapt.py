import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from tica.adapt import (
    AdaptConfig,
    TrainConfig,
    _entropy_batch,
    _set_modes,
    adapt,
    adapt_bn,
    adapt_eta,
    adapt_tent,
    adapt_tica,
    mean_entropy,
    predict,
    train_supervised,
)
from tica.data import SynthConfig, generate_synthetic
from tica.geometry import AugmentConfig
from tica.losses import LossWeights, entropy_loss
from tica.model import ModelConfig, build_model, changed_tensors, norm_affine_names, scope_parameter_names, state_equal, to_batch

SMALL = ModelConfig(widths=(4, 8, 8, 8), decoder_width=8, input_size=(32, 32))
AUG = AugmentConfig(crop_size=(16, 16))


@pytest.fixture(scope="module")
def data():
    train, test = generate_synthetic(SynthConfig(size=(32, 32), n_train=16, n_test=8, seed=11))
    return train, [s.image for s in test]  # the test split carries the intensity shift


@pytest.fixture(scope="module")
def trained(data):
    train, _ = data
    return train_supervised(build_model(SMALL, 0), train, TrainConfig(epochs=3, batch_size=4, augment=AUG)).model


def _cfg(method, **kw):
    return AdaptConfig(**{"method": method, "epochs": 2, "batch_size": 4, "augment": AUG, **kw})


def _params_equal(a, b):
    return all(torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))


class TestTrain:
    def test_single_step_descent(self, data):
        train, _ = data
        model = build_model(SMALL, 1)
        cfg = TrainConfig(epochs=1, lr=1e-3, batch_size=1, cosine=False,
                          augment=AugmentConfig(flip_prob=0.0, scale_range=(1.0, 1.0), crop_size=(32, 32)))
        res = train_supervised(model, train[:1], cfg)
        after = train_supervised(res.model, train[:1], cfg)
        assert after.trace[0]["loss"] < res.trace[0]["loss"]

    def test_zero_lr_unchanged(self, data):
        model = build_model(SMALL, 2)
        res = train_supervised(model, data[0][:4], TrainConfig(epochs=1, lr=0.0, augment=AUG))
        assert _params_equal(model, res.model)

    def test_deterministic(self, data):
        cfg = TrainConfig(epochs=1, batch_size=4, augment=AUG)
        a = train_supervised(build_model(SMALL, 3), data[0][:8], cfg)
        b = train_supervised(build_model(SMALL, 3), data[0][:8], cfg)
        assert state_equal(a.model, b.model)
        assert a.epoch_losses == b.epoch_losses

    def test_empty_set(self):
        with pytest.raises(ValueError):
            train_supervised(build_model(SMALL), [], TrainConfig(epochs=1))

    def test_resume_continues_step_counter(self, data):
        cfg = TrainConfig(epochs=1, batch_size=4, augment=AUG)
        first = train_supervised(build_model(SMALL, 4), data[0][:8], cfg)
        second = train_supervised(first.model, data[0][:8], cfg, start_step=first.steps, total_steps=2 * first.steps)
        assert second.trace[0]["step"] == first.steps
        assert second.steps == 2 * first.steps


class TestTica:
    def test_zero_weights_leave_parameters(self, trained, data):
        res = adapt_tica(trained, data[1], _cfg("tica", lr=1e-3, weights=LossWeights(0.0, 0.0)))
        assert _params_equal(trained, res.model)
        # batch statistics still flow into the encoder running buffers
        assert changed_tensors(trained, res.model) <= {
            k for k in trained.state_dict() if k.startswith("encoder.")
        }

    def test_zero_weights_frozen_stats_bit_exact(self, trained, data):
        res = adapt_tica(trained, data[1], _cfg("tica", lr=1e-3, weights=LossWeights(0.0, 0.0), norm_stats="eval"))
        assert state_equal(trained, res.model)

    def test_decoder_bit_identical(self, trained, data):
        res = adapt_tica(trained, data[1], _cfg("tica", lr=1e-3))
        changed = changed_tensors(trained, res.model)
        assert changed, "adaptation should move the encoder"
        assert all(k.startswith("encoder.") for k in changed)

    def test_modes_split(self, trained):
        model = copy.deepcopy(trained)
        _set_modes(model, AdaptConfig(method="tica"))
        assert model.encoder.training and not model.decoder.training

    def test_trace_records(self, trained, data):
        res = adapt_tica(trained, data[1], _cfg("tica"))
        assert len(res.trace) == 2 * math.ceil(len(data[1]) / 4)
        assert {"loss", "fc", "bc", "fg_pixels", "bg_pixels", "epoch", "step"} <= set(res.trace[0])

    def test_empty(self, trained):
        with pytest.raises(ValueError):
            adapt_tica(trained, [], _cfg("tica"))

    def test_input_model_untouched(self, trained, data):
        before = copy.deepcopy(trained)
        adapt_tica(trained, data[1], _cfg("tica", lr=1e-3))
        assert state_equal(before, trained)


class TestBaselines:
    def test_bn_keeps_learnables(self, trained, data):
        res = adapt_bn(trained, data[1], _cfg("bn"))
        assert _params_equal(trained, res.model)
        assert not state_equal(trained, res.model)  # statistics replaced

    def test_bn_empty(self, trained):
        with pytest.raises(ValueError):
            adapt_bn(trained, [], _cfg("bn"))

    def test_tent_zero_lr(self, trained, data):
        res = adapt_tent(trained, data[1], _cfg("tent", lr=0.0))
        assert _params_equal(trained, res.model)

    def test_tent_scope(self, trained, data):
        res = adapt_tent(trained, data[1], _cfg("tent"))
        params = {n for n, _ in trained.named_parameters()}
        moved = changed_tensors(trained, res.model) & params
        assert moved and moved <= norm_affine_names(trained)

    def test_tent_entropy_descends(self, trained, data):
        curve = [mean_entropy(trained, data[1])]
        cfg = AdaptConfig(method="tent", epochs=5, batch_size=4, lr=1e-4, norm_stats="eval")
        adapt_tent(trained, data[1], cfg, on_epoch_end=lambda e, m: curve.append(mean_entropy(m, data[1])))
        drops = sum(b <= a for a, b in zip(curve, curve[1:]))
        assert drops >= 4, curve

    def test_eta_threshold_zero(self, trained, data):
        res = adapt_eta(trained, data[1], _cfg("eta", eta_entropy_threshold=0.0, norm_stats="eval"))
        assert _params_equal(trained, res.model)
        assert all(r["selected"] == 0 for r in res.trace)

    def test_eta_infinite_threshold_matches_tent(self, trained, data):
        a = adapt_eta(trained, data[1], _cfg("eta", eta_entropy_threshold=math.inf))
        b = adapt_tent(trained, data[1], _cfg("tent"))
        assert state_equal(a.model, b.model)

    def test_eta_zeroing(self, trained, data):
        # a black frame and a scene image give different prediction entropies
        confident = np.zeros((32, 32, 3), np.float32)
        model = copy.deepcopy(trained)
        imgs = [confident, data[1][0]]
        ent = [entropy_loss(torch.from_numpy(predict(model, im))).value for im in imgs]
        threshold = 0.5 * (ent[0] + ent[1])
        assert min(ent) < threshold < max(ent)
        low = int(np.argmin(ent))
        cfg = AdaptConfig(method="eta", eta_entropy_threshold=threshold, norm_stats="eval")
        _set_modes(model, cfg)
        outs, grads, rec = _entropy_batch(model, imgs, cfg, torch.float32, select=True)
        assert rec["selected"] == 1
        eta_grad = torch.autograd.grad(outs, list(model.parameters()), grads, allow_unused=True)
        probs = torch.sigmoid(model(to_batch(imgs)))[:, 0]
        ref = torch.zeros_like(probs)
        ref[low] = entropy_loss(probs[low]).grad_y1 / 2
        ref_grad = torch.autograd.grad([probs], list(model.parameters()), [ref], allow_unused=True)
        for g1, g2 in zip(eta_grad, ref_grad):
            torch.testing.assert_close(g1, g2)


@pytest.mark.parametrize("method", ["none", "tica", "tent", "bn", "eta"])
def test_scope_safety_and_reproducibility(method, trained, data):
    cfg = _cfg(method, lr=1e-3 if method != "none" else None)
    a = adapt(trained, data[1], cfg)
    b = adapt(trained, data[1], cfg)
    assert state_equal(a.model, b.model)
    params = {n for n, _ in trained.named_parameters()}
    moved = changed_tensors(trained, a.model) & params
    assert moved <= scope_parameter_names(trained, cfg.scope)


def test_unknown_method():
    with pytest.raises(ValueError):
        AdaptConfig(method="sar").validate()


def test_method_lr_defaults():
    assert AdaptConfig(method="tica").learning_rate == 1e-5
    assert AdaptConfig(method="tent").learning_rate == 1e-3
    assert AdaptConfig(method="tica", lr=0.0).learning_rate == 0.0


def test_episodic_isolation(trained, data):
    cfg = _cfg("tica", mode="episodic", epochs=1, lr=1e-3)
    imgs = list(data[1][:3])
    a = adapt(trained, imgs, cfg).predictions
    other = imgs.copy()
    other[2] = np.ascontiguousarray(imgs[2][::-1])
    b = adapt(trained, other, cfg).predictions
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[2], b[2])


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 1000), method=st.sampled_from(["tica", "tent", "eta"]), scale=st.floats(0.0, 3.0))
def test_trace_finite(seed, method, scale, trained):
    rng = np.random.default_rng(seed)
    imgs = [np.clip(rng.random((32, 32, 3)) * scale, 0, 1).astype(np.float32) for _ in range(2)]
    res = adapt(trained, imgs, AdaptConfig(method=method, epochs=1, batch_size=2, lr=1e-3, augment=AUG, seed=seed))
    assert all(math.isfinite(r["loss"]) for r in res.trace)
