import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graftnet.config import ConfigError, ModelConfig, TrainConfig
from graftnet.data import Sample, render_sample
from graftnet.model import GraftNet
from graftnet.nn import Parameter
from graftnet.objective import joint_loss
from graftnet.tensor import Tensor
from graftnet.trainer import SGD, NumericalError, augment, cosine_lr, sgd_update, train

NO_AUG = dict(hflip=False, vflip=False, rotate_deg=0.0, brightness_delta=0.0)


def _samples(n, size=64, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, mask = render_sample(rng, size)
        out.append(Sample(f"s{i}", (img.transpose(2, 0, 1) / 255.0).astype(np.float32), mask.astype(np.float32)))
    return out


# -- schedule -------------------------------------------------------------

def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 0.03) == 0.03
    assert cosine_lr(100, 100, 0.03, 0.001) == 0.001
    assert cosine_lr(100, 100, 0.03) == 0.0
    assert abs(cosine_lr(50, 100, 0.03) - 0.015) < 1e-15


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5000), st.floats(1e-6, 1.0), st.floats(0, 1))
def test_cosine_monotone(total, lr0, frac):
    eta = lr0 * frac
    ts = np.linspace(0, total, 50).round().astype(int)
    lrs = [cosine_lr(int(t), total, lr0, eta) for t in ts]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cosine_rejects_out_of_range():
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)


# -- optimizer ------------------------------------------------------------

def test_plain_sgd_step_scalar():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    SGD([("p", p)], momentum=0.0).step(0.1)
    assert p.data[0] == 1.0 - 0.1 * 0.5


def test_momentum_two_steps_constant_grad():
    lr, g = 0.1, 2.0
    p = Parameter(np.array([[3.0]]))
    opt = SGD([("p", p)], momentum=0.9)
    for _ in range(2):
        p.grad = np.array([[g]])
        opt.step(lr)
    assert abs(p.data[0, 0] - (3.0 - lr * g * (1 + 1.9))) < 1e-15
    # the functional form agrees
    state = {}
    x = [np.array(3.0)]
    for _ in range(2):
        x = sgd_update(x, [np.array(g)], state, lr, 0.9, 0.0)
    assert abs(float(x[0]) - p.data[0, 0]) < 1e-15


def test_weight_decay_geometric_and_skips_vectors():
    w = Parameter(np.full((2, 2), 1.0))
    b = Parameter(np.full(2, 1.0))
    opt = SGD([("w", w), ("b", b)], momentum=0.0, weight_decay=0.1)
    for k in range(1, 4):
        w.grad = np.zeros((2, 2))
        b.grad = np.zeros(2)
        opt.step(0.5)
        assert np.allclose(w.data, 0.95**k, atol=1e-15)
    assert np.array_equal(b.data, np.ones(2))


# -- augmentation ---------------------------------------------------------

def test_augment_all_off_is_identity():
    s = _samples(1)[0]
    out = augment(s, TrainConfig(**NO_AUG), np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_hflip_involution():
    s = _samples(1)[0]
    cfg = TrainConfig(**{**NO_AUG, "hflip": True})
    # find a seed whose first draw flips, then apply twice
    rng_seed = next(k for k in range(100) if np.random.default_rng(k).random() < 0.5)
    once = augment(s, cfg, np.random.default_rng(rng_seed))
    twice = augment(once, cfg, np.random.default_rng(rng_seed))
    assert np.array_equal(once.mask, s.mask[:, ::-1])
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


def test_rotation_keeps_mask_binary():
    s = _samples(1)[0]
    cfg = TrainConfig(**{**NO_AUG, "rotate_deg": 30.0})
    for k in range(5):
        out = augment(s, cfg, np.random.default_rng(k))
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert out.image.shape == s.image.shape and out.image.dtype == s.image.dtype


def test_brightness_stays_in_range():
    s = _samples(1)[0]
    out = augment(s, TrainConfig(**{**NO_AUG, "brightness_delta": 0.5}), np.random.default_rng(0))
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert np.array_equal(out.mask, s.mask)


# -- loop -----------------------------------------------------------------

def test_lr_zero_leaves_parameters_bitwise():
    model = GraftNet(ModelConfig.tiny())
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    train(model, _samples(4), TrainConfig(lr0=0.0, epochs=1, batch_size=2, **NO_AUG))
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_fixed_seed_reproduces_epoch_one_bitwise():
    data = _samples(4)
    logs = []
    for _ in range(2):
        res = train(GraftNet(ModelConfig.tiny()), data, TrainConfig(epochs=1, batch_size=2))
        logs.append(res.log[0])
    assert logs[0] == logs[1]


def test_epoch_log_line_format():
    lines = []
    res = train(GraftNet(ModelConfig.tiny()), _samples(2), TrainConfig(epochs=2, batch_size=2), on_epoch=lines.append)
    assert lines == res.lines and len(lines) == 2
    assert lines[0].startswith("epoch=1 lr=") and "l_seg=" in lines[0] and "l_total=" in lines[0]


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_single_step_decreases_loss_on_frozen_batch(lr):
    cfg = ModelConfig.tiny()
    model = GraftNet(cfg)
    data = _samples(2)
    img = Tensor(np.stack([s.image for s in data]))
    mask = np.stack([s.mask for s in data])[:, None]
    opt = SGD(model.named_parameters(), momentum=0.0)
    before, _ = joint_loss(model(img), mask, cfg)
    before.backward()
    opt.step(lr)
    after, _ = joint_loss(model(img), mask, cfg)
    assert after.item() < before.item()


def test_nan_loss_raises():
    model = GraftNet(ModelConfig.tiny())
    model.decoder.head.bias.data[:] = np.nan
    with pytest.raises(NumericalError):
        train(model, _samples(2), TrainConfig(epochs=1, batch_size=2))


def test_empty_dataset_and_bad_config():
    with pytest.raises(ValueError):
        train(GraftNet(ModelConfig.tiny()), [], TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train(GraftNet(ModelConfig.tiny()), _samples(1), TrainConfig(epochs=0))


def test_training_reduces_loss():
    res = train(GraftNet(ModelConfig.tiny()), _samples(4), TrainConfig(epochs=6, batch_size=2, **NO_AUG))
    assert res.log[-1].l_seg < res.log[0].l_seg
    assert all(math.isfinite(r.l_total) for r in res.log)
