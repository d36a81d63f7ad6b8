import numpy as np
import pytest

from graftnet import functional as F
from graftnet.config import ConfigError, ModelConfig
from graftnet.decoder import AuxHead, Decoder, decoder_widths
from graftnet.model import GraftNet
from graftnet.objective import joint_loss
from graftnet.tensor import ShapeError, Tensor, default_dtype, no_grad


def _img(cfg, b=2, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (b, 3) + cfg.cnn_input_hw).astype(np.float32))


def _features(cfg, b=2, seed=0):
    rng = np.random.default_rng(seed)
    cnn = {i: Tensor(rng.standard_normal((b, cfg.cnn_channels(i)) + cfg.cnn_grid(i))) for i in (2, 3, 4, 5)}
    trans = {i: Tensor(rng.standard_normal((b, cfg.trans_channels(i)) + cfg.trans_grid(i))) for i in (1, 2, 3, 4)}
    g = cfg.resolved_graft_grid()
    z = Tensor(rng.standard_normal((b, cfg.d_graft, g, g)))
    return cnn, trans, z


@pytest.mark.parametrize("cfg", [ModelConfig.tiny(), ModelConfig.tiny(cnn_input_hw=(96, 64)), ModelConfig.toy()],
                         ids=["tiny", "tiny-96x64", "toy"])
def test_logits_match_input_resolution(cfg):
    with no_grad():
        out = GraftNet(cfg)(_img(cfg))
    assert out.logits.shape == (2, 1) + cfg.cnn_input_hw
    assert out.aux_r.shape == out.aux_s.shape == (2, 1) + cfg.cnn_input_hw


def test_decoder_widths():
    assert decoder_widths(ModelConfig.toy()) == (64, 32, 16)
    assert decoder_widths(ModelConfig.full()) == (256, 128, 64)
    assert decoder_widths(ModelConfig.tiny(d_graft=4)) == (16, 16, 16)


def test_zero_head_gives_constant_logits():
    cfg = ModelConfig.tiny()
    with default_dtype(np.float64):
        dec = Decoder(cfg, np.random.default_rng(0))
        dec.head.weight.data[:] = 0.0
        dec.head.bias.data[:] = -1.25
        logits = dec(*_features(cfg)).data
    assert np.allclose(logits, -1.25, atol=1e-14)


def test_head_commutes_with_upsampling():
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        x = Tensor(rng.standard_normal((1, 5, 4, 6)))
        w, b = Tensor(rng.standard_normal((1, 5, 1, 1))), Tensor(rng.standard_normal(1))
        a = F.resize_bilinear(F.conv2d(x, w, b), 16, 24).data
        c = F.conv2d(F.resize_bilinear(x, 16, 24), w, b).data
    assert np.allclose(a, c, atol=1e-12)


def test_grafted_features_are_live():
    cfg = ModelConfig.tiny()
    with default_dtype(np.float64):
        dec = Decoder(cfg, np.random.default_rng(1))
        cnn, trans, z = _features(cfg)
        a = dec(cnn, trans, z).data
        b = dec(cnn, trans, Tensor(np.zeros(z.shape))).data
    assert np.abs(a - b).max() > 1e-6


def test_decoder_rejects_wrong_grids():
    cfg = ModelConfig.tiny()
    dec = Decoder(cfg, np.random.default_rng(0))
    cnn, trans, z = _features(cfg)
    bad = dict(cnn)
    bad[3] = Tensor(np.zeros((2, cfg.cnn_channels(3), 3, 3)))
    with pytest.raises(ShapeError, match="CNN stage 3"):
        dec(bad, trans, z)
    with pytest.raises(ShapeError, match="grafted"):
        dec(cnn, trans, Tensor(np.zeros((2, 3, 2, 2))))


def test_aux_head_zero_weights_and_shape():
    head = AuxHead(6, np.random.default_rng(0))
    head.conv.weight.data[:] = 0.0
    head.conv.bias.data[:] = 0.0
    out = head(Tensor(np.ones((2, 6, 4, 4), dtype=np.float32)), (32, 32))
    assert out.shape == (2, 1, 32, 32)
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_aux_heads_alone_reach_backbone():
    cfg = ModelConfig.tiny()
    model = GraftNet(cfg)
    out = model(_img(cfg))
    mask = (np.random.default_rng(0).random((2,) + cfg.cnn_input_hw) > 0.5).astype(np.float32)
    from graftnet.objective import aux_loss

    aux_loss(out.aux_r, out.aux_s, mask).backward()
    g = model.cnn.stages[-1].blocks[-1].conv2.weight.grad
    assert g is not None and np.abs(g).max() > 0
    g = model.trans.stages[1].blocks[0].fc2.weight.grad
    assert g is not None and np.abs(g).max() > 0


def test_eval_forward_deterministic():
    cfg = ModelConfig.tiny()
    outs = []
    for _ in range(2):
        m = GraftNet(cfg)
        with no_grad():
            m(_img(cfg))
            m.eval()
            outs.append(m(_img(cfg, b=1, seed=4)).logits.data)
    assert np.array_equal(outs[0], outs[1])


@pytest.mark.parametrize(
    "flags",
    [dict(use_cnn=True, use_trans=False, use_cgm=False),
     dict(use_cnn=False, use_trans=True, use_cgm=False),
     dict(use_cnn=True, use_trans=True, use_cgm=False)],
    ids=["cnn-only", "trans-only", "no-cgm"],
)
def test_ablation_variants_run_and_train(flags):
    cfg = ModelConfig.tiny(**flags)
    model = GraftNet(cfg)
    out = model(_img(cfg))
    assert out.graft is None
    assert (out.aux_r is None) != cfg.use_cnn
    assert (out.aux_s is None) != cfg.use_trans
    mask = np.zeros((2,) + cfg.cnn_input_hw, dtype=np.float32)
    loss, rep = joint_loss(out, mask, cfg)
    assert rep.l_att == 0.0
    loss.backward()
    # the learned constants stand in for the missing pieces and receive gradient
    consts = [p for n, p in model.named_parameters() if n.endswith("value")]
    assert consts and any(p.grad is not None and np.abs(p.grad).max() > 0 for p in consts)


def test_ablation_without_both_branches_or_cgm_without_branch_is_rejected():
    with pytest.raises(ConfigError):
        GraftNet(ModelConfig.tiny(use_cnn=False, use_trans=False, use_cgm=False))
    with pytest.raises(ConfigError):
        GraftNet(ModelConfig.tiny(use_trans=False))


@pytest.mark.parametrize("stage", [1, 2, 3, 4])
def test_graft_stage_choice(stage):
    cfg = ModelConfig.tiny(graft_stage=stage)
    with no_grad():
        out = GraftNet(cfg)(_img(cfg))
    g = cfg.trans_grid(stage)[0]
    assert out.graft.z.shape == (2, cfg.d_graft, g, g)
    assert out.logits.shape == (2, 1) + cfg.cnn_input_hw


def test_state_dict_roundtrip():
    cfg = ModelConfig.tiny()
    a, b = GraftNet(cfg), GraftNet(ModelConfig.tiny(seed=9))
    with no_grad():
        a(_img(cfg))
    b.load_state_dict(a.state_dict())
    a.eval()
    b.eval()
    with no_grad():
        assert np.array_equal(a(_img(cfg, 1)).logits.data, b(_img(cfg, 1)).logits.data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})
