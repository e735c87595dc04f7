"""Finite-difference verification suite covering every differentiable path.

Each check compares the analytic gradient of a scalar-valued composition
against central differences in double precision and returns the max relative
error; everything here must stay below 1e-4 (observed values are ~1e-8).
"""

from __future__ import annotations

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import losses
from . import network as net
from . import seem as seem_mod
from . import synthdata as sd
from . import trainer
from .geometry import RigidTransform, axis_angle_to_matrix, compute_warp_grid, \
    warp_image, Intrinsics

TOLERANCE = 1e-4


def _rng(seed=0):
    return np.random.default_rng(seed)


def check_elementwise() -> float:
    rng = _rng(1)
    x = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 4))
    errs = [
        ad.grad_check(lambda t: ad.tsum(t * c + t / 2.0 - ad.absval(t)), x),
        ad.grad_check(lambda t: ad.tmean(ad.exp(0.3 * t) * ad.sigmoid(t)), x),
        ad.grad_check(lambda t: ad.tsum(ad.relu(t) + ad.elu(t)), x),
        ad.grad_check(lambda t: ad.tsum(ad.log(ad.exp(t) + 1.0)
                                        + ad.sqrt(t * t + 1.0)), x),
        ad.grad_check(lambda t: ad.tsum(ad.sin(t) * ad.cos(t)), x),
        ad.grad_check(lambda t: ad.tsum(ad.minimum(t, ad.Tensor(c))), x + 0.1),
        ad.grad_check(lambda t: ad.tsum(ad.clamp(t, -0.5, 0.5) * c), x),
        ad.grad_check(lambda t: ad.tsum(ad.where(c > 0, t * 2.0, -t)), x),
        ad.grad_check(lambda t: ad.tsum(ad.softmax(t) * c), x),
    ]
    return max(errs)


def check_shapes_reductions() -> float:
    rng = _rng(2)
    x = rng.normal(size=(2, 3, 4))
    c = rng.normal(size=(4, 2))
    c2 = rng.normal(size=(3, 4))
    errs = [
        ad.grad_check(lambda t: ad.tsum(ad.reshape(t, (6, 4)) @ ad.Tensor(c)), x),
        ad.grad_check(lambda t: ad.tsum(ad.transpose_last2(t) * 1.5), x),
        ad.grad_check(lambda t: ad.tsum(t[1] * c2), x),
        ad.grad_check(lambda t: ad.tsum(ad.concat([t, t * 2.0], axis=0)), x),
        ad.grad_check(lambda t: ad.tsum(ad.tmean(t, axis=(0, 2))
                                        * c2[:, 0]), x),
        ad.grad_check(lambda t: ad.tsum(ad.tmean(t, axis=-1, keepdims=True)
                                        * c2[None, :, :1]), x),
        ad.grad_check(lambda t: ad.tsum(ad.matmul(t, ad.transpose_last2(t))), x),
    ]
    return max(errs)


def check_conv_pool() -> float:
    rng = _rng(3)
    x = rng.normal(size=(2, 3, 6, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    errs = [
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            ad.conv2d(t, ad.Tensor(w), ad.Tensor(b)))), x),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            ad.conv2d(ad.Tensor(x), t, ad.Tensor(b), stride=2))), w),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            ad.conv2d(ad.Tensor(x), ad.Tensor(w), t))), b),
        ad.grad_check(lambda t: ad.tsum(ad.avg_pool3(t * t)), x),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(ad.upsample2x(t))), x),
    ]
    return max(errs)


def check_grid_sample() -> float:
    rng = _rng(4)
    inp = rng.normal(size=(3, 5, 7))
    grid = rng.uniform(0.2, 4.0, size=(9, 2))
    binp = rng.normal(size=(2, 3, 5, 7))
    bgrid = rng.uniform(0.2, 4.0, size=(2, 6, 2))
    errs = [
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            ad.grid_sample(t, ad.Tensor(grid)))), inp),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            ad.grid_sample(ad.Tensor(inp), t))), grid),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            ad.grid_sample(t, ad.Tensor(bgrid), channels_first=True))), binp),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            ad.grid_sample(ad.Tensor(binp), t))), bgrid),
    ]
    return max(errs)


def check_geometry_warp() -> float:
    rng = _rng(5)
    h, w = 6, 8
    intr = Intrinsics(fx=0.58 * w, fy=1.92 * h, cx=0.5 * w, cy=0.5 * h,
                      width=w, height=h)
    depth = rng.uniform(2.0, 8.0, size=(h, w))
    rot = rng.normal(size=3) * 0.05
    tr = rng.normal(size=3) * 0.1
    src = rng.uniform(0.1, 0.9, size=(3, h, w))

    def loss_from_depth(t):
        grid, _ = compute_warp_grid(t, intr, RigidTransform(rot, tr))
        return ad.tsum(ad.sigmoid(warp_image(ad.Tensor(src), grid)))

    def loss_from_rot(t):
        grid, _ = compute_warp_grid(ad.Tensor(depth), intr, RigidTransform(t, tr))
        return ad.tsum(ad.sigmoid(warp_image(ad.Tensor(src), grid)))

    def loss_from_trans(t):
        grid, _ = compute_warp_grid(ad.Tensor(depth), intr, RigidTransform(rot, t))
        return ad.tsum(ad.sigmoid(warp_image(ad.Tensor(src), grid)))

    rmat_weights = rng.normal(size=(3, 3))
    errs = [
        ad.grad_check(loss_from_depth, depth),
        ad.grad_check(loss_from_rot, rot),
        ad.grad_check(loss_from_trans, tr),
        ad.grad_check(lambda t: ad.tsum(axis_angle_to_matrix(t)
                                        * rmat_weights), rot),
        # smooth through the zero-rotation series branch
        ad.grad_check(lambda t: ad.tsum(axis_angle_to_matrix(t * 1e-6)), rot),
    ]
    return max(errs)


def check_ssim() -> float:
    rng = _rng(6)
    x = rng.uniform(0.1, 0.9, size=(3, 6, 8))
    y = rng.uniform(0.1, 0.9, size=(3, 6, 8))
    errs = [
        ad.grad_check(lambda t: ad.tsum(losses.ssim_map(t, ad.Tensor(y))), x),
        ad.grad_check(lambda t: ad.tsum(losses.ssim_map(ad.Tensor(x), t)), y),
    ]
    return max(errs)


def check_photometric() -> float:
    rng = _rng(7)
    cfg = losses.LossConfig(automask=False)
    tgt = rng.uniform(0.1, 0.9, size=(2, 3, 6, 8))
    s1 = rng.uniform(0.1, 0.9, size=(2, 3, 6, 8))
    s2 = rng.uniform(0.1, 0.9, size=(2, 3, 6, 8))
    valid = rng.uniform(size=(2, 6, 8)) > 0.2
    errs = [
        # fused path (constant target)
        ad.grad_check(lambda t: losses.photometric_loss(
            ad.Tensor(tgt), [t, ad.Tensor(s2)], cfg=cfg).loss, s1),
        ad.grad_check(lambda t: losses.photometric_loss(
            ad.Tensor(tgt), [ad.Tensor(s1), t], cfg=cfg, valid=valid).loss, s2),
        # composed path (tracked target)
        ad.grad_check(lambda t: losses.photometric_loss(
            t, [ad.Tensor(s1), ad.Tensor(s2)], cfg=cfg).loss, tgt),
    ]
    return max(errs)


def check_smoothness() -> float:
    rng = _rng(8)
    disp = rng.uniform(0.1, 1.0, size=(2, 6, 8))
    img = rng.uniform(0.0, 1.0, size=(2, 3, 6, 8))
    return ad.grad_check(lambda t: losses.smoothness_loss(t, img), disp)


def check_semantic_bce() -> float:
    rng = _rng(9)
    pred = rng.uniform(0.05, 0.95, size=(2, 6, 8))
    lab = (rng.uniform(size=(2, 6, 8)) > 0.5).astype(np.float64)
    return ad.grad_check(lambda t: losses.semantic_bce(t, lab), pred)


def check_seem() -> float:
    rng = _rng(10)
    h, w = 8, 12
    mask = np.zeros((h, w))
    mask[2:6, 3:9] = 1.0
    cfg = seem_mod.SamplerConfig(n_points=10, mu=0.3, disturb_radius=1, seed=0)
    pts = seem_mod.sample_points(seem_mod.edge_response(mask), cfg)
    feats = rng.normal(size=(3, h, w))
    half = rng.normal(size=(2, h // 2, w // 2))
    n = len(pts)
    pf = rng.normal(size=(n, 3))
    wlin = rng.normal(size=(4, 3))
    errs = [
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            seem_mod.extract_point_features([t, ad.Tensor(half)], pts, (h, w)))),
            feats),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(
            seem_mod._linear(ad.Tensor(pf), t, np.zeros(4)))), wlin),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(seem_mod.scatter_replace(
            t, pts, ad.Tensor(pf), order=pts.scatter_order()))), feats),
        ad.grad_check(lambda t: ad.tsum(ad.sigmoid(seem_mod.scatter_replace(
            ad.Tensor(feats), pts, t, order=pts.scatter_order()))), pf),
    ]
    return max(errs)


def check_attention() -> float:
    rng = _rng(11)
    c, h, w = 3, 4, 5
    x = rng.normal(size=(c, h, w))
    qw, kw, vw = (rng.normal(size=(c, c)) for _ in range(3))
    bias = np.zeros(c)

    def block(gamma, q=qw):
        return attn.AttentionBlock(level=4, fuse_w=None, fuse_b=None,
                                   q_w=ad.Tensor(q), q_b=ad.Tensor(bias),
                                   k_w=ad.Tensor(kw), k_b=ad.Tensor(bias),
                                   v_w=ad.Tensor(vw), v_b=ad.Tensor(bias),
                                   gamma=gamma)

    def from_input(t):
        return ad.tsum(ad.sigmoid(attn.self_attention(t, block(ad.Tensor(0.3)))))

    def from_gamma(t):
        return ad.tsum(ad.sigmoid(attn.self_attention(ad.Tensor(x), block(t))))

    def from_q(t):
        blk = attn.AttentionBlock(level=4, fuse_w=None, fuse_b=None,
                                  q_w=t, q_b=ad.Tensor(bias),
                                  k_w=ad.Tensor(kw), k_b=ad.Tensor(bias),
                                  v_w=ad.Tensor(vw), v_b=ad.Tensor(bias),
                                  gamma=ad.Tensor(0.3))
        return ad.tsum(ad.sigmoid(attn.self_attention(ad.Tensor(x), blk)))

    errs = [
        ad.grad_check(from_input, x),
        ad.grad_check(from_gamma, np.full(1, 0.3)),
        ad.grad_check(from_q, qw),
    ]
    return max(errs)


def check_composite(height: int = 32, width: int = 96) -> float:
    """Full training objective on a micro-model; gradients w.r.t. a selection
    of small parameters, checked end to end through depth, pose, SEEM,
    attention, warping, and all loss terms."""
    dcfg = sd.DatasetConfig(height=height, width=width)
    sample = sd.render(sd.SceneSpec.random(7, dcfg), dcfg)
    tcfg = trainer.TrainConfig(height=height, width=width, n_points=40,
                               dtype="float64", automask=False)
    model = net.Model(tcfg.network_config(), seed=0, dtype=np.float64)
    # non-zero pose head so its gradient path is exercised off the origin
    rng = _rng(12)
    model.params["pose_out.w"] += rng.normal(
        size=model.params["pose_out.w"].shape) * 0.01
    mask_override = [sample.mask]

    def loss_with(name, x):
        tape = x.tape or ad.Tape()
        p = {k: ad.Tensor(v) for k, v in model.params.items()}
        p[name] = ad.reshape(x, model.params[name].shape)
        _, loss, _ = trainer.training_loss(
            model, [sample], tcfg, sample_seed=0, p=p, tape=tape,
            override_masks=mask_override)
        return loss

    names = ["attn4.gamma", "attn3.gamma", "D_disp0.b", "S_disp1.b",
             "pose_out.b", "seem.conv1d_4.b"]
    errs = []
    for name in names:
        flat = model.params[name].ravel().copy()
        errs.append(ad.grad_check(lambda t, n=name: loss_with(n, t), flat))
    return max(errs)


ALL_CHECKS = [
    ("elementwise", check_elementwise),
    ("shapes_reductions", check_shapes_reductions),
    ("conv_pool", check_conv_pool),
    ("grid_sample", check_grid_sample),
    ("geometry_warp", check_geometry_warp),
    ("ssim", check_ssim),
    ("photometric", check_photometric),
    ("smoothness", check_smoothness),
    ("semantic_bce", check_semantic_bce),
    ("seem", check_seem),
    ("attention", check_attention),
    ("composite", check_composite),
]


def run(module: str | None = None) -> dict:
    """Run all (or one) named check groups; returns {name: max rel error}."""
    selected = [(n, f) for n, f in ALL_CHECKS if module in (None, n)]
    if not selected:
        raise KeyError(f"unknown gradcheck module {module!r}; choices: "
                       + ", ".join(n for n, _ in ALL_CHECKS))
    return {name: fn() for name, fn in selected}
