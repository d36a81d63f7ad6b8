import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graftnet.config import ModelConfig
from graftnet.gradcheck import check_function
from graftnet.objective import (
    _adaptive_avg_pool,
    aux_loss,
    att_loss,
    bce,
    gt_attention_map,
    iou_loss,
    joint_loss,
    seg_loss,
    total_loss,
)
from graftnet.tensor import Tensor, default_dtype


@pytest.fixture(autouse=True)
def f64():
    with default_dtype(np.float64):
        yield


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def bce_oracle(z, t, w=None):
    total = 0.0
    zs, ts = z.ravel().tolist(), t.ravel().tolist()
    ws = [1.0] * len(zs) if w is None else w.ravel().tolist()
    for zi, ti, wi in zip(zs, ts, ws):
        p = _sig(zi)
        total += -wi * (ti * math.log(p) + (1 - ti) * math.log(1 - p))
    return total / len(zs)


def iou_oracle(z, t, eps=1.0):
    inter = ps = tsum = 0.0
    for zi, ti in zip(z.ravel().tolist(), t.ravel().tolist()):
        p = _sig(zi)
        inter += p * ti
        ps += p
        tsum += ti
    return 1 - (inter + eps) / (ps + tsum - inter + eps)


# -- bce ------------------------------------------------------------------

def test_bce_closed_forms():
    assert abs(bce(Tensor([0.0]), [0.5]).item() - math.log(2)) < 1e-15
    assert bce(Tensor([50.0]), [1.0]).item() < 1e-20
    # saturated logits stay finite
    assert math.isfinite(bce(Tensor([1e4, -1e4]), [0.0, 1.0]).item())


def test_bce_matches_oracle_4x4():
    rng = np.random.default_rng(0)
    z, t = rng.standard_normal((4, 4)) * 3, rng.uniform(0, 1, (4, 4))
    assert abs(bce(Tensor(z), t).item() - bce_oracle(z, t)) <= 1e-10


def test_bce_rejects_bad_targets():
    with pytest.raises(ValueError):
        bce(Tensor([0.0]), [1.5])


# -- soft iou -------------------------------------------------------------

def test_iou_perfect_limit_and_worst_case():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert iou_loss(Tensor(np.where(t > 0, 60.0, -60.0)), t).item() < 1e-12
    n = 9
    # p = 1 everywhere, t = 0: 1 - 1/(n+1)
    assert abs(iou_loss(Tensor(np.full((3, 3), 80.0)), np.zeros((3, 3))).item() - (1 - 1 / (n + 1))) < 1e-12


def test_iou_matches_oracle_3x3():
    rng = np.random.default_rng(1)
    z, t = rng.standard_normal((3, 3)), (rng.random((3, 3)) > 0.5).astype(float)
    assert abs(iou_loss(Tensor(z), t).item() - iou_oracle(z, t)) <= 1e-10


def test_iou_batch_is_mean_of_samples():
    rng = np.random.default_rng(2)
    z, t = rng.standard_normal((3, 1, 4, 4)), (rng.random((3, 1, 4, 4)) > 0.5).astype(float)
    ref = np.mean([iou_oracle(z[i], t[i]) for i in range(3)])
    assert abs(iou_loss(Tensor(z), t).item() - ref) <= 1e-12


def test_iou_gradient():
    t = (np.random.default_rng(3).random((2, 1, 3, 3)) > 0.5).astype(float)
    assert check_function(lambda z: iou_loss(z, t), np.random.default_rng(4).standard_normal((2, 1, 3, 3))) <= 1e-6


# -- segmentation, attention, auxiliary -----------------------------------

def test_seg_loss_is_mean_of_parts():
    rng = np.random.default_rng(5)
    z, t = Tensor(rng.standard_normal((4, 4))), (rng.random((4, 4)) > 0.5).astype(float)
    assert abs(seg_loss(z, t).item() - 0.5 * (bce(z, t).item() + iou_loss(z, t).item())) <= 1e-12


def test_seg_loss_hand_case():
    z = Tensor([[50.0, -50.0], [-50.0, 50.0]])
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert seg_loss(z, t).item() < 1e-12


def test_gt_attention_map_examples():
    assert np.array_equal(gt_attention_map(np.ones((8, 8)), 4), np.ones((16, 16)))
    assert np.array_equal(gt_attention_map(np.zeros((8, 8)), 4), np.zeros((16, 16)))
    m = np.zeros((8, 8))
    m[:2, :2] = 1.0
    out = gt_attention_map(m, 4)
    ref = np.zeros((16, 16))
    ref[0, 0] = 1.0
    assert np.array_equal(out, ref)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 3, 4, 6]), st.integers(0, 10_000))
def test_gt_attention_map_is_rank_one(g, seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((2, 12, 12)) > 0.6).astype(float)
    out = gt_attention_map(mask, g)
    for b in range(2):
        # independent pooling: equal blocks since g divides 12
        v = mask[b].reshape(g, 12 // g, g, 12 // g).mean(axis=(1, 3)).ravel()
        assert np.abs(out[b] - np.outer(v, v)).max() <= 1e-15
        assert np.linalg.matrix_rank(out[b]) <= 1
        # exact outer product of its own pooled vector
        pooled = _adaptive_avg_pool(mask[b], g).ravel()
        assert np.array_equal(out[b], np.outer(pooled, pooled))


def test_att_loss_examples():
    ctam = Tensor(np.zeros((1, 1, 4, 4)))
    assert abs(att_loss(ctam, np.zeros((1, 8, 8))).item() - math.log(2)) < 1e-15
    rng = np.random.default_rng(6)
    ctam = Tensor(rng.standard_normal((1, 1, 4, 4)))
    mask = (rng.random((1, 8, 8)) > 0.5).astype(float)
    plain = bce(ctam, gt_attention_map(mask, 2).reshape(1, 1, 4, 4)).item()
    assert abs(att_loss(ctam, mask, pos_weight=0.0).item() - plain) < 1e-15


def test_att_loss_matches_weighted_oracle_8x8():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((1, 1, 64, 64))
    mask = (rng.random((1, 16, 16)) > 0.5).astype(float)
    t = gt_attention_map(mask, 8).reshape(z.shape)
    got = att_loss(Tensor(z), mask, pos_weight=4.0).item()
    assert abs(got - bce_oracle(z, t, 1 + 4 * t)) <= 1e-10


def test_aux_loss_sum_and_symmetry():
    rng = np.random.default_rng(8)
    a, b = Tensor(rng.standard_normal((2, 1, 4, 4))), Tensor(rng.standard_normal((2, 1, 4, 4)))
    t = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
    ref = seg_loss(a, t).item() + seg_loss(b, t).item()
    assert abs(aux_loss(a, b, t).item() - ref) <= 1e-12
    assert aux_loss(a, b, t).item() == aux_loss(b, a, t).item()
    assert aux_loss(None, None, t) is None
    perfect = Tensor(np.where(t > 0, 60.0, -60.0))
    assert aux_loss(perfect, perfect, t).item() < 1e-12


def test_total_loss_examples():
    one = Tensor(1.0)
    tot, rep = total_loss(Tensor(0.7), Tensor(0.2), Tensor(0.9), 0.0)
    assert abs(tot.item() - 0.9) < 1e-15
    tot, rep = total_loss(one, one, one, 1.0)
    assert tot.item() == 3.0
    with pytest.raises(ValueError):
        total_loss(one, one, one, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 2))
def test_report_identity(s, a, x, lam):
    _, rep = total_loss(Tensor(s), Tensor(a), Tensor(x), lam)
    assert abs(rep.l_total - (rep.l_seg + rep.l_att + lam * rep.l_aux)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_finite(seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-50, 50, (2, 1, 8, 8))
    t = (rng.random((2, 1, 8, 8)) > 0.5).astype(float)
    for v in (bce(Tensor(z), t).item(), iou_loss(Tensor(z), t).item(), seg_loss(Tensor(z), t).item(),
              att_loss(Tensor(rng.uniform(-50, 50, (2, 1, 16, 16))), t, 4.0).item()):
        assert math.isfinite(v) and v >= 0


def test_joint_loss_report_matches_parts():
    cfg = ModelConfig.tiny()
    rng = np.random.default_rng(9)
    g = cfg.resolved_graft_grid()
    out = SimpleNamespace(
        logits=Tensor(rng.standard_normal((2, 1, 8, 8))),
        aux_r=Tensor(rng.standard_normal((2, 1, 8, 8))),
        aux_s=Tensor(rng.standard_normal((2, 1, 8, 8))),
        graft=SimpleNamespace(ctam=Tensor(rng.standard_normal((2, 1, g * g, g * g)))),
    )
    mask = (rng.random((2, 8, 8)) > 0.5).astype(float)
    loss, rep = joint_loss(out, mask, cfg)
    assert abs(rep.l_seg - seg_loss(out.logits, mask).item()) < 1e-12
    assert abs(rep.l_att - att_loss(out.graft.ctam, mask, cfg.att_pos_weight).item()) < 1e-12
    assert abs(rep.l_total - loss.item()) < 1e-12
    assert abs(rep.l_total - (rep.l_seg + rep.l_att + cfg.lambda_aux * rep.l_aux)) < 1e-12
