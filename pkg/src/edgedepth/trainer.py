"""Optimization loop, ablation switchboard, and run bookkeeping."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import losses as losses_mod
from . import metrics as metrics_mod
from . import network as net
from . import synthdata as sd
from .geometry import compute_warp_grid, warp_image


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 2000
    lr_drop_step: int = 1600    # x0.1 afterwards (same 0.8 fraction as 15/19)
    seed: int = 0
    use_seem: bool = True
    use_attention: bool = True
    optimizer: str = "adam"     # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_interval: int = 250
    height: int = 64
    width: int = 192
    n_points: int = 300
    mu: float = 0.4
    disturb_radius: int = 3
    alpha: float = 0.85
    omega: float = 0.001
    automask: bool = True
    label_noise: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def network_config(self) -> net.NetworkConfig:
        return net.NetworkConfig(
            height=self.height, width=self.width,
            use_seem=self.use_seem, use_attention=self.use_attention,
            seem=net.SeemConfig(n_points=self.n_points, mu=self.mu,
                                disturb_radius=self.disturb_radius))

    def loss_config(self) -> losses_mod.LossConfig:
        return losses_mod.LossConfig(alpha=self.alpha, omega=self.omega,
                                     automask=self.automask)


@dataclass
class RunRecord:
    config: dict
    seed: int
    steps: list = field(default_factory=list)       # (step, LossReport)
    validations: list = field(default_factory=list)  # (step, MetricReport)
    wall_clock: float = 0.0
    aborted: str | None = None
    nan_steps: list = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w") as f:
            f.write("step loss_total loss_p loss_m loss_s mask_cov\n")
            for step, rep in self.steps:
                f.write(f"{step} {rep.total!r} {rep.photometric!r} "
                        f"{rep.semantic!r} {rep.smoothness!r} "
                        f"{rep.mask_coverage!r}\n")


class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def optimizer_step(params: dict, grads: dict, state: AdamState,
                   cfg: TrainConfig, lr: float | None = None) -> bool:
    """In-place adaptive-moment update with bias correction (or plain SGD).

    Returns False (no update) when any gradient is non-finite.
    """
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            return False
    lr = cfg.lr if lr is None else lr
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if cfg.optimizer == "sgd":
            p -= (lr * g).astype(p.dtype)
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** state.t)
        vhat = v / (1 - cfg.beta2 ** state.t)
        p -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)
    return True


def _downsample_image(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling over the last two axes."""
    if factor == 1:
        return img
    s = img.shape
    return img.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor,
                                 factor)).mean(axis=(-3, -1))


def _noisy_mask(mask: np.ndarray, rng) -> np.ndarray:
    """Random boundary erosion/dilation of <= 2 px (pseudo-label imperfection)."""
    out = mask.astype(bool)
    r = int(rng.integers(1, 3))
    dilate = bool(rng.integers(0, 2))
    for _ in range(r):
        shifted = out.copy()
        for ax in (0, 1):
            for sh in (-1, 1):
                rolled = np.roll(out, sh, axis=ax)
                if dilate:
                    shifted |= rolled
                else:
                    shifted &= rolled
        out = shifted
    return out.astype(np.float64)


def split_dataset(samples, frac_val: int = 10):
    """Every frac_val-th scene (by index modulo) goes to validation."""
    train, val = [], []
    for i, s in enumerate(samples):
        (val if i % frac_val == 0 else train).append(s)
    return train, val


def training_loss(model: net.Model, batch, cfg: TrainConfig,
                  sample_seed: int = 0, masks=None, id_err_cache=None,
                  p=None, tape=None, override_masks=None):
    """Build the full per-step loss graph for a list of SceneSamples.

    `id_err_cache` optionally memoizes per-sample identity (auto-mask) error
    maps, which depend only on the input images. `p`/`tape` optionally inject
    an existing bound parameter dict (used by gradient checking), and
    `override_masks` pins the SEEM sampling masks. Returns (tape, loss
    tensor, LossReport).
    """
    lcfg = cfg.loss_config()
    ncfg = model.cfg
    dtype = np.dtype(cfg.dtype)
    n = len(batch)
    intr = batch[0].intrinsics

    tgt = np.stack([s.target for s in batch]).astype(dtype)
    prev = np.stack([s.prev for s in batch]).astype(dtype)
    nxt = np.stack([s.next for s in batch]).astype(dtype)
    gt_mask = np.stack([s.mask for s in batch])
    if masks is not None:
        gt_mask = np.stack(masks)
    gt_mask = gt_mask.astype(dtype)

    if p is None:
        tape = ad.Tape()
        p = model.bind(tape)
    out = model.forward(tgt, p=p, sample_seed=sample_seed,
                        override_masks=override_masks)
    pose_prev = model.forward_pose(np.concatenate([tgt, prev], axis=1), p=p)
    pose_next = model.forward_pose(np.concatenate([tgt, nxt], axis=1), p=p)

    target_t = ad.Tensor(tgt)
    identities = [ad.Tensor(prev), ad.Tensor(nxt)]
    tgt_stats = losses_mod.ssim_stats(target_t)
    id_err = None
    if lcfg.automask:
        if id_err_cache is None:
            id_err = losses_mod.identity_error_map(tgt, identities, lcfg,
                                                   target_stats=tgt_stats)
        else:
            rows = []
            for i, s in enumerate(batch):
                key = id(s)
                if key not in id_err_cache:
                    id_err_cache[key] = losses_mod.identity_error_map(
                        tgt[i], [prev[i], nxt[i]], lcfg)
                rows.append(id_err_cache[key])
            id_err = np.stack(rows)
    photo = []
    smooth = []
    for s in sorted(out.disparities):
        disp = out.disparities[s]
        full = disp
        for _ in range(s):
            full = ad.upsample2x(full)
        depth = net.disparity_to_depth(full, ncfg)
        depth2d = ad.reshape(depth, (n, ncfg.height, ncfg.width))
        synths = []
        valid_all = np.ones((n, ncfg.height, ncfg.width), dtype=bool)
        for src_img, pose in ((prev, pose_prev), (nxt, pose_next)):
            grid, valid = compute_warp_grid(depth2d, intr, pose)
            valid_all &= valid
            synths.append(warp_image(ad.Tensor(src_img), grid))
        photo.append(losses_mod.photometric_loss(
            target_t, synths, identities, lcfg, valid=valid_all,
            identity_error=id_err, target_stats=tgt_stats))
        img_s = _downsample_image(tgt, 2 ** s)
        disp_native = ad.reshape(disp, (n, ncfg.height >> s, ncfg.width >> s))
        smooth.append(losses_mod.smoothness_loss(disp_native, img_s))

    semantic = []
    for s in sorted(out.semantics):
        pred = out.semantics[s]
        for _ in range(s):
            pred = ad.upsample2x(pred)
        semantic.append(losses_mod.semantic_bce(
            ad.reshape(pred, (n, ncfg.height, ncfg.width)), gt_mask))

    loss, report = losses_mod.total_loss(photo, smooth, semantic, lcfg)
    return tape, loss, report


def validate(model: net.Model, val_samples, cfg: TrainConfig) -> metrics_mod.MetricReport:
    reports = []
    dtype = np.dtype(cfg.dtype)
    ncfg = model.cfg
    for s in val_samples:
        out = model.forward(s.target.astype(dtype)[None], sample_seed=0)
        depth = net.disparity_to_depth(out.disparities[0], ncfg).data[0, 0]
        reports.append(metrics_mod.evaluate(
            depth, s.depth, median_scale=True,
            min_depth=ncfg.min_depth, max_depth=ncfg.max_depth))
    return metrics_mod.merge_reports(reports)


def train(cfg: TrainConfig, dataset, out_dir=None, log_every: int = 1):
    """Full training run. Returns (RunRecord, Model)."""
    rng = np.random.default_rng(cfg.seed)
    ncfg = cfg.network_config()
    model = net.Model(ncfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    state = AdamState()
    train_set, val_set = split_dataset(dataset)
    record = RunRecord(config=asdict(cfg), seed=cfg.seed)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    best_absrel = np.inf

    noise_rng = np.random.default_rng(cfg.seed + 9999)
    id_err_cache = {}  # identity errors depend only on the images
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train_set), size=cfg.batch_size)
        batch = [train_set[i] for i in idx]
        masks = None
        if cfg.label_noise:
            masks = [_noisy_mask(s.mask, noise_rng) for s in batch]
        tape, loss, report = training_loss(
            model, batch, cfg, sample_seed=cfg.seed * 1_000_003 + step,
            masks=masks, id_err_cache=id_err_cache)
        if not np.isfinite(loss.data):
            record.aborted = f"non-finite loss at step {step}"
            break
        ad.backward(loss)
        grads = {k: t.grad for k, t in tape.params.items()}
        lr = cfg.lr * (0.1 if step >= cfg.lr_drop_step else 1.0)
        if not optimizer_step(model.params, grads, state, cfg, lr=lr):
            record.nan_steps.append(step)
        if step % log_every == 0 or step == cfg.steps - 1:
            record.steps.append((step, report))
        if val_set and (step + 1) % cfg.val_interval == 0:
            rep = validate(model, val_set, cfg)
            record.validations.append((step, rep))
            if out_dir and rep.abs_rel < best_absrel:
                best_absrel = rep.abs_rel
                net.save_checkpoint(os.path.join(out_dir, "best.ckpt"),
                                    model.params, ncfg)
    if val_set:
        rep = validate(model, val_set, cfg)
        record.validations.append((cfg.steps - 1, rep))
        if out_dir and rep.abs_rel < best_absrel:
            net.save_checkpoint(os.path.join(out_dir, "best.ckpt"),
                                model.params, ncfg)
    record.wall_clock = time.time() - t0
    if out_dir:
        net.save_checkpoint(os.path.join(out_dir, "final.ckpt"),
                            model.params, ncfg)
        record.write_log(os.path.join(out_dir, "train_log.txt"))
    return record, model


def load_dataset(data_dir):
    dirs = sorted(d for d in os.listdir(data_dir) if d.startswith("scene_"))
    if not dirs:
        raise FileNotFoundError(f"no scene_* directories in {data_dir}")
    return [sd.read_sample(os.path.join(data_dir, d)) for d in dirs]
