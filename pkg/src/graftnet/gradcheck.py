"""Central finite-difference checks of analytic gradients.

Everything here runs in float64. Relative error between an analytic gradient
``a`` and a numerical one ``n`` is ``|a - n| / max(|a|, |n|)`` using L2 norms
for arrays; pairs where both sides are below ``atol`` count as agreeing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, concat, default_dtype, matmul

H = 1e-5


def rel_error(a, n, atol: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < atol:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = H) -> np.ndarray:
    """Gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place, restored after)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_function(fn: Callable[..., Tensor], *arrays: np.ndarray, seed: int = 0, h: float = H) -> float:
    """Max relative error over all inputs of ``fn`` for the loss ``sum(fn(*x) * R)``."""
    rng = np.random.default_rng(seed)
    xs = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(x, requires_grad=True) for x in xs]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)

    def loss_value() -> float:
        return float((fn(*[Tensor(x) for x in xs]).data * weights).sum())

    (out * Tensor(weights)).sum().backward()
    worst = 0.0
    for t, x in zip(tensors, xs):
        num = numerical_grad(loss_value, x, h)
        ana = t.grad if t.grad is not None else np.zeros_like(x)
        worst = max(worst, rel_error(ana, num))
    return worst


@dataclass
class ParamCheck:
    name: str
    analytic: float
    numeric: float
    rel_err: float


def check_parameters(
    params: Sequence[tuple[str, Tensor]],
    loss_fn: Callable[[], Tensor],
    seed: int = 0,
    h: float = H,
    atol: float = 1e-8,
) -> list[ParamCheck]:
    """Directional derivative check: one random Gaussian direction per parameter tensor.

    ``atol`` sits above the central-difference roundoff floor (about
    ``eps * abs(loss) / h``) so parameters with an exactly zero gradient, such
    as a key bias under softmax or a conv bias feeding batch norm, pass.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    results = []
    for name, p in params:
        u = rng.standard_normal(p.shape)
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        analytic = float((g * u).sum())
        base = p.data.copy()
        p.data = base + h * u
        fp = loss_fn().item()
        p.data = base - h * u
        fm = loss_fn().item()
        p.data = base
        numeric = (fp - fm) / (2 * h)
        results.append(ParamCheck(name, analytic, numeric, rel_error(analytic, numeric, atol)))
    return results


# -- check suites used by the CLI and the acceptance tests -----------------

def primitive_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per primitive, each over three input shapes."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    res: dict[str, float] = {}

    def rec(name, fn, *shape_sets):
        worst = 0.0
        for k, shapes in enumerate(shape_sets):
            arrays = [s() if callable(s) else r(s) for s in shapes]
            worst = max(worst, check_function(fn, *arrays, seed=seed + k))
        res[name] = worst

    with default_dtype(np.float64):
        rec("add", lambda a, b: a + b, [(3,), (3,)], [(2, 3), (1, 3)], [(2, 1, 4), (3, 1)])
        rec("mul", lambda a, b: a * b, [(3,), (3,)], [(2, 3), (1, 3)], [(2, 1, 4), (3, 1)])
        rec("div", lambda a, b: a / (b * b + 1.0), [(3,), (3,)], [(2, 3), (2, 3)], [(2, 2, 2), (2,)])
        rec("matmul", matmul, [(5, 7), (7, 3)], [(2, 3, 4), (4, 2)], [(2, 2, 3), (2, 3, 5)])
        rec("sum_mean", lambda a: a.sum(axis=1) + a.mean(axis=1), [(2, 3)], [(3, 4, 2)], [(1, 5)])
        rec("exp_log", lambda a: (a * 0.5).exp() + (a * a + 1.0).log(), [(4,)], [(2, 3)], [(2, 2, 2)])
        rec("sigmoid", F.sigmoid, [(4,)], [(2, 3)], [(2, 2, 3)])
        rec("gelu", F.gelu, [(4,)], [(2, 3)], [(2, 2, 3)])
        rec("softmax_rows", F.softmax_rows, [(2, 5)], [(3, 4)], [(2, 3, 3)])
        rec(
            "layer_norm",
            lambda x, g, b: F.layer_norm(x, g, b, 1e-6),
            [(4, 8), (8,), (8,)],
            [(2, 3, 5), (5,), (5,)],
            [(1, 6), (6,), (6,)],
        )

        def bn(x, g, b):
            st = F.BatchNormState(x.shape[1])
            return F.batch_norm(x, st, g, b, training=True)

        rec("batch_norm", bn, [(2, 3, 4, 4), (3,), (3,)], [(4, 2), (2,), (2,)], [(1, 2, 3, 3), (2,), (2,)])
        rec("conv2d_s1p1", lambda x, w, b: F.conv2d(x, w, b, 1, 1), [(1, 2, 5, 5), (3, 2, 3, 3), (3,)],
            [(2, 1, 4, 4), (2, 1, 3, 3), (2,)], [(1, 3, 3, 3), (1, 3, 3, 3), (1,)])
        rec("conv2d_s2", lambda x, w: F.conv2d(x, w, None, 2, 1), [(1, 2, 5, 5), (2, 2, 3, 3)],
            [(2, 1, 6, 6), (1, 1, 3, 3)], [(1, 2, 4, 4), (3, 2, 1, 1)])
        rec("resize_bilinear", lambda x: F.resize_bilinear(x, 5, 3), [(1, 2, 3, 4)], [(2, 1, 7, 6)], [(1, 1, 2, 2)])
        rec("avg_pool2d", lambda x: F.avg_pool2d(x, 2), [(1, 2, 4, 4)], [(2, 1, 2, 6)], [(1, 3, 4, 2)])
        rec("max_pool2d", lambda x: F.max_pool2d(x, 2), [(1, 2, 4, 4)], [(2, 1, 2, 6)], [(1, 3, 4, 2)])
        rec("concat", lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)], [(1, 2, 3), (1, 1, 3)], [(2, 1, 2, 2), (2, 3, 2, 2)])
        rec("reshape_flatten", lambda a: a.reshape(a.shape[0], -1).flatten(0), [(2, 3)], [(2, 3, 4)], [(1, 5)])
        rec("transpose", lambda a: a.transpose(), [(2, 3)], [(2, 3, 4)], [(1, 5)])
        rec("getitem_roll", lambda a: a[:, 1:].roll(1, 0), [(3, 4)], [(2, 3, 2)], [(4, 2)])
        t_fixed = rng.uniform(0, 1, 16)

        def wbce(z):
            t = t_fixed[: z.size].reshape(z.shape)
            return F.bce_with_logits(z, t, 1.0 + 4.0 * t)

        rec("bce_weighted", wbce, [(4,)], [(2, 3)], [(3, 3)])
    return res


def _worst(checks: list[ParamCheck]) -> float:
    return max((c.rel_err for c in checks), default=0.0)


def cgm_suite(seed: int = 0) -> dict[str, float]:
    """Grafting module alone: inputs elementwise, every parameter tensor directionally."""
    from .config import ModelConfig
    from .grafting import CrossGraftingModule

    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        cfg = ModelConfig.tiny(d_graft=8, graft_grid=3)
        cgm = CrossGraftingModule(cfg, 6, 5, rng, np.float64)
        r_in = rng.standard_normal((1, 6, 4, 4))
        s_in = rng.standard_normal((1, 5, 3, 3))
        wz = rng.standard_normal((1, 8, 3, 3))
        wc = rng.standard_normal((1, 1, 9, 9))

        def loss(r=None, s=None):
            pack = cgm(r if r is not None else Tensor(r_in), s if s is not None else Tensor(s_in))
            return (pack.z * Tensor(wz)).sum() + (pack.ctam * Tensor(wc)).sum()

        params = list(cgm.named_parameters())
        res = {"cgm.params": _worst(check_parameters(params, loss, seed))}
        rt, st = Tensor(r_in.copy(), requires_grad=True), Tensor(s_in.copy(), requires_grad=True)
        loss(rt, st).backward()
        res["cgm.inputs"] = max(
            rel_error(rt.grad, numerical_grad(lambda: loss().item(), r_in)),
            rel_error(st.grad, numerical_grad(lambda: loss().item(), s_in)),
        )
    return res


def encoder_suite(seed: int = 0) -> dict[str, float]:
    from .config import ModelConfig
    from .encoders import CNNEncoder, TransformerEncoder

    rng = np.random.default_rng(seed)
    res = {}
    with default_dtype(np.float64):
        cfg = ModelConfig.tiny(shift_windows=True, trans_depths=(2, 1, 1))
        for name, enc, hw in (
            ("encoders.cnn", CNNEncoder(cfg, rng, np.float64), cfg.cnn_input_hw),
            ("encoders.transformer", TransformerEncoder(cfg, rng, np.float64), cfg.trans_input_hw),
        ):
            img = Tensor(rng.uniform(0, 1, (1, 3) + hw))
            with_w = None

            def loss(enc=enc, img=img):
                nonlocal with_w
                feats = enc(img)
                if with_w is None:
                    with_w = {k: rng.standard_normal(v.shape) for k, v in feats.items()}
                total = None
                for k, v in feats.items():
                    term = (v * Tensor(with_w[k])).sum()
                    total = term if total is None else total + term
                return total

            res[name] = _worst(check_parameters(list(enc.named_parameters()), loss, seed))
    return res


def model_suite(seed: int = 0, cfg=None) -> dict[str, float]:
    """Full network + joint objective, batch 1 (toy layout unless ``cfg`` is given)."""
    from .config import ModelConfig
    from .data import render_sample
    from .model import GraftNet
    from .objective import joint_loss

    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        cfg = cfg or ModelConfig.toy()
        model = GraftNet(cfg, rng, np.float64)
        img_u8, mask = render_sample(rng, cfg.cnn_input_hw[0])
        img = Tensor(img_u8.transpose(2, 0, 1)[None] / 255.0)
        target = mask[None, None].astype(np.float64)

        def loss():
            return joint_loss(model(img), target, cfg)[0]

        checks = check_parameters(list(model.named_parameters()), loss, seed)
    return {"model.total_loss": _worst(checks)}


SUITES = {
    "primitives": primitive_suite,
    "cgm": cgm_suite,
    "encoders": encoder_suite,
    "objective": model_suite,
}

THRESHOLDS = {"primitives": 1e-4, "cgm": 1e-4, "encoders": 1e-4, "objective": 1e-3}
