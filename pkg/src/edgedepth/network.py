"""Scaled-down shared-encoder depth/semantic network with edge-point
enhancement and multi-level attention, plus the pose network and the
checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import seem as seem_mod
from .autodiff import ShapeError, Tensor
from .geometry import RigidTransform

CHECKPOINT_MAGIC = b"SDL1"


@dataclass
class SeemConfig:
    n_points: int = 300   # pixel-area rescale of 3000 at 192x640
    mu: float = 0.4
    disturb_radius: int = 3
    # per-source projection output channels, then the four kernel-1 stages
    enc_proj: int = 16
    dec_proj: int = 14
    sem_proj: int = 14
    hidden: int = 32


@dataclass
class NetworkConfig:
    enc_channels: tuple = (16, 32, 64, 128, 256)
    dec_channels: tuple = (32, 16, 8, 8, 4)  # levels 4..0
    height: int = 64
    width: int = 192
    min_depth: float = 0.1
    max_depth: float = 100.0
    scales: tuple = (0, 1, 2, 3)
    use_seem: bool = True
    use_attention: bool = True
    semantic_branch: bool = True
    seem: SeemConfig = field(default_factory=SeemConfig)
    pose_channels: tuple = (16, 32, 64)

    def __post_init__(self):
        if len(self.enc_channels) != 5 or len(self.dec_channels) != 5:
            raise ValueError("expected 5 encoder stages and 5 decoder levels")
        if self.height % 32 or self.width % 32:
            raise ValueError("input size must be divisible by 32")

    def digest(self) -> bytes:
        return hashlib.sha256(repr(self).encode()).digest()


@dataclass
class ModelOutput:
    disparities: dict       # scale -> Tensor (N,1,h,w) sigmoid outputs
    semantics: dict         # scale -> Tensor (N,1,h,w) probabilities
    encoder_features: list  # econv0..econv4
    fused_features: dict    # level -> aconv/attention output
    semantic_features: dict  # level -> S_upconv output
    point_sets: list        # per-item PointSet used by SEEM (or empty)


def disparity_to_depth(sigma, cfg: NetworkConfig) -> Tensor:
    """Affine-in-inverse-depth mapping of the sigmoid output to metric depth."""
    sigma = ad.as_tensor(sigma)
    lo, hi = 1.0 / cfg.max_depth, 1.0 / cfg.min_depth
    disp = lo + (hi - lo) * sigma
    return 1.0 / disp


def _he(rng, shape, fan_in, dtype):
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Model:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameter construction -------------------------------------------

    def _conv(self, rng, name, cin, cout):
        self.params[f"{name}.w"] = _he(rng, (cout, cin, 3, 3), cin * 9, self.dtype)
        self.params[f"{name}.b"] = np.zeros(cout, dtype=self.dtype)

    def _lin(self, rng, name, cin, cout, zero=False):
        if zero:
            self.params[f"{name}.w"] = np.zeros((cout, cin), dtype=self.dtype)
        else:
            self.params[f"{name}.w"] = _he(rng, (cout, cin), cin, self.dtype)
        self.params[f"{name}.b"] = np.zeros(cout, dtype=self.dtype)

    def _init_params(self, rng):
        cfg = self.cfg
        enc = cfg.enc_channels
        dec = cfg.dec_channels  # index 0 -> level 4
        ch_in = 3
        for i, c in enumerate(enc):
            self._conv(rng, f"econv{i}", ch_in, c)
            ch_in = c
        skips = [None, enc[0], enc[1], enc[2], enc[3]]  # skip at level l

        def dc(level):
            return dec[4 - level]

        sem = cfg.semantic_branch
        if sem:
            self._conv(rng, "S_upconv4", enc[4], dc(4))
            self._conv(rng, "S_iconv4", dc(4) + skips[4], dc(4))
            prev = dc(4)
            for lvl in (3, 2, 1):
                self._conv(rng, f"S_upconv{lvl}", prev, dc(lvl))
                self._conv(rng, f"S_iconv{lvl}", dc(lvl) + skips[lvl], dc(lvl))
                self._conv(rng, f"S_disp{lvl}", dc(lvl), 1)
                prev = dc(lvl)
            self._conv(rng, "S_upconv0", prev, dc(0))
            self._conv(rng, "S_iconv0", dc(0), dc(0))
            self._conv(rng, "S_disp0", dc(0), 1)

        self._conv(rng, "D_upconv4", enc[4], dc(4))
        prev = dc(4)
        for lvl in (4, 3, 2, 1, 0):
            fuse_in = dc(lvl) * 2 if sem else dc(lvl)
            self._conv(rng, f"aconv{lvl}", fuse_in, dc(lvl))
            if cfg.use_attention and lvl in attn.ATTENTION_LEVELS:
                for nm in ("q", "k", "v"):
                    self._lin(rng, f"attn{lvl}.{nm}", dc(lvl), dc(lvl))
                self.params[f"attn{lvl}.gamma"] = np.zeros((), dtype=self.dtype)
            if lvl > 0:
                self._conv(rng, f"D_iconv{lvl}", dc(lvl) + skips[lvl], dc(lvl))
                if lvl <= 3:
                    self._conv(rng, f"D_disp{lvl}", dc(lvl), 1)
                self._conv(rng, f"D_upconv{lvl - 1}", dc(lvl), dc(lvl - 1))
        self._conv(rng, "D_iconv0", dc(0), dc(0))
        self._conv(rng, "D_disp0", dc(0), 1)

        if cfg.use_seem and sem:
            sc = cfg.seem
            enc_in = enc[1] + enc[0]
            dec_in = dc(2) + dc(1) + dc(0)
            self._lin(rng, "seem.enc_conv", enc_in, sc.enc_proj)
            self._lin(rng, "seem.dec_conv", dec_in, sc.dec_proj)
            self._lin(rng, "seem.sem_conv", dec_in, sc.sem_proj)
            cat = sc.enc_proj + sc.dec_proj + sc.sem_proj
            self._lin(rng, "seem.conv1d_1", cat, sc.hidden)
            self._lin(rng, "seem.conv1d_2", sc.hidden, sc.hidden)
            self._lin(rng, "seem.conv1d_3", sc.hidden, sc.hidden)
            self._lin(rng, "seem.conv1d_4", sc.hidden, dc(0))

        pc = cfg.pose_channels
        ch_in = 6
        for i, c in enumerate(pc):
            self._conv(rng, f"pose{i}", ch_in, c)
            ch_in = c
        self._lin(rng, "pose_out", pc[-1], 6, zero=True)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def bind(self, tape: ad.Tape) -> dict:
        return {k: tape.param(k, v) for k, v in self.params.items()}

    # -- forward passes ----------------------------------------------------

    def forward(self, image, p: dict | None = None, tape: ad.Tape | None = None,
                sample_seed: int = 0, override_masks=None) -> ModelOutput:
        """Full depth + semantic forward pass.

        image: (3,H,W) or (N,3,H,W) in [0,1]. `p` is a bound parameter dict
        (from bind); pass `tape` instead to bind internally. `override_masks`
        optionally replaces the predicted semantic probability as the SEEM
        sampling mask (one HxW array per item).
        """
        cfg = self.cfg
        if p is None:
            p = self.bind(tape) if tape is not None else \
                {k: ad.Tensor(v) for k, v in self.params.items()}
        x = ad.as_tensor(image)
        single = x.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        n, c_in, h, w = x.shape
        if (c_in, h, w) != (3, cfg.height, cfg.width):
            raise ShapeError(f"expected (3,{cfg.height},{cfg.width}) input, got {x.shape[1:]}")

        def conv(name, t, stride=1, act="elu"):
            out = ad.conv2d(t, p[f"{name}.w"], p[f"{name}.b"], stride=stride)
            if act == "elu":
                return ad.elu(out)
            if act == "sigmoid":
                return ad.sigmoid(out)
            return out

        enc_feats = []
        t = x
        for i in range(5):
            t = conv(f"econv{i}", t, stride=2)
            enc_feats.append(t)

        sem_up = {}
        sem_out = {}
        if cfg.semantic_branch:
            sem_up[4] = conv("S_upconv4", enc_feats[4])
            t = conv("S_iconv4", ad.concat([ad.upsample2x(sem_up[4]), enc_feats[3]], axis=-3))
            for lvl, scale in ((3, 3), (2, 2), (1, 1)):
                sem_up[lvl] = conv(f"S_upconv{lvl}", t)
                t = conv(f"S_iconv{lvl}",
                         ad.concat([ad.upsample2x(sem_up[lvl]), enc_feats[lvl - 1]], axis=-3))
                sem_out[scale] = conv(f"S_disp{lvl}", t, act="sigmoid")
            sem_up[0] = conv("S_upconv0", t)
            t = conv("S_iconv0", ad.upsample2x(sem_up[0]))
            sem_out[0] = conv("S_disp0", t, act="sigmoid")

        blocks = self._blocks(p) if cfg.semantic_branch else None

        fused = {}
        disp_out = {}
        t = conv("D_upconv4", enc_feats[4])
        for lvl in (4, 3, 2, 1, 0):
            if lvl < 4:
                t = conv(f"D_upconv{lvl}", t)
            if cfg.semantic_branch:
                f = attn.fuse_features(t, sem_up[lvl], blocks[lvl])
                if cfg.use_attention and lvl in attn.ATTENTION_LEVELS:
                    f = attn.self_attention(f, blocks[lvl])
            else:
                f = conv(f"aconv{lvl}", t)
            fused[lvl] = f
            if lvl > 0:
                t = conv(f"D_iconv{lvl}",
                         ad.concat([ad.upsample2x(f), enc_feats[lvl - 1]], axis=-3))
                if lvl <= 3:
                    disp_out[lvl] = conv(f"D_disp{lvl}", t, act="sigmoid")

        f0 = ad.upsample2x(fused[0])  # full resolution, dc(0) channels
        point_sets = []
        if cfg.use_seem and cfg.semantic_branch:
            f0 = self._apply_seem(p, f0, enc_feats, fused, sem_up, sem_out,
                                  sample_seed, override_masks, point_sets)
        t = conv("D_iconv0", f0)
        disp_out[0] = conv("D_disp0", t, act="sigmoid")

        if single:
            disp_out = {k: v for k, v in disp_out.items()}
        return ModelOutput(disparities=disp_out, semantics=sem_out,
                           encoder_features=enc_feats, fused_features=fused,
                           semantic_features=sem_up, point_sets=point_sets)

    def _blocks(self, p) -> dict:
        cfg = self.cfg
        blocks = {}
        for lvl in (4, 3, 2, 1, 0):
            kw = dict(level=lvl, fuse_w=p[f"aconv{lvl}.w"], fuse_b=p[f"aconv{lvl}.b"])
            if cfg.use_attention and lvl in attn.ATTENTION_LEVELS:
                kw.update(q_w=p[f"attn{lvl}.q.w"], q_b=p[f"attn{lvl}.q.b"],
                          k_w=p[f"attn{lvl}.k.w"], k_b=p[f"attn{lvl}.k.b"],
                          v_w=p[f"attn{lvl}.v.w"], v_b=p[f"attn{lvl}.v.b"],
                          gamma=p[f"attn{lvl}.gamma"])
            blocks[lvl] = attn.AttentionBlock(**kw)
        return blocks

    def _pfe(self, p) -> seem_mod.PfeParams:
        return seem_mod.PfeParams(
            enc_w=p["seem.enc_conv.w"], enc_b=p["seem.enc_conv.b"],
            dec_w=p["seem.dec_conv.w"], dec_b=p["seem.dec_conv.b"],
            sem_w=p["seem.sem_conv.w"], sem_b=p["seem.sem_conv.b"],
            conv_w=[p[f"seem.conv1d_{i}.w"] for i in (1, 2, 3, 4)],
            conv_b=[p[f"seem.conv1d_{i}.b"] for i in (1, 2, 3, 4)])

    def _apply_seem(self, p, f0, enc_feats, fused, sem_up, sem_out,
                    sample_seed, override_masks, point_sets):
        cfg = self.cfg
        pfe = self._pfe(p)
        hw = (cfg.height, cfg.width)
        n = f0.shape[0]
        items = []
        for i in range(n):
            if override_masks is not None:
                mask = np.asarray(override_masks[i])
            else:
                mask = sem_out[0].data[i, 0]
            scfg = seem_mod.SamplerConfig(n_points=cfg.seem.n_points, mu=cfg.seem.mu,
                                          disturb_radius=cfg.seem.disturb_radius,
                                          seed=sample_seed + i)
            pts = seem_mod.sample_points(seem_mod.edge_response(mask), scfg)
            point_sets.append(pts)
            f_enc = seem_mod.extract_point_features(
                [enc_feats[1][i], enc_feats[0][i]], pts, hw)
            f_dec = seem_mod.extract_point_features(
                [fused[2][i], fused[1][i], fused[0][i]], pts, hw)
            f_sem = seem_mod.extract_point_features(
                [sem_up[2][i], sem_up[1][i], sem_up[0][i]], pts, hw)
            enhanced = seem_mod.enhance_point_features(f_enc, f_dec, f_sem, pfe)
            item = seem_mod.scatter_replace(f0[i], pts, enhanced,
                                            order=pts.scatter_order())
            items.append(ad.reshape(item, (1,) + item.shape))
        return ad.concat(items, axis=0)

    def forward_pose(self, pair, p: dict | None = None) -> RigidTransform:
        """6-DoF pose from a stacked image pair (6,H,W) or (N,6,H,W);
        outputs scaled by 0.01."""
        if p is None:
            p = {k: ad.Tensor(v) for k, v in self.params.items()}
        x = ad.as_tensor(pair)
        single = x.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[-3] != 6:
            raise ShapeError(f"pose input must stack two RGB images, got {x.shape}")
        t = x
        for i in range(len(self.cfg.pose_channels)):
            t = ad.elu(ad.conv2d(t, p[f"pose{i}.w"], p[f"pose{i}.b"], stride=2))
        pooled = ad.tmean(t, axis=(-2, -1))  # (N, C)
        out = (ad.matmul(pooled, ad.transpose_last2(ad.as_tensor(p["pose_out.w"])))
               + ad.as_tensor(p["pose_out.b"])) * 0.01
        if single:
            out = ad.reshape(out, (6,))
            return RigidTransform(out[0:3], out[3:6])
        return RigidTransform(out[:, 0:3], out[:, 3:6])


# ---------------------------------------------------------------------------
# checkpoint format: magic, sha256 config digest, u32 count, then per param
# (u32 name length, name, u32 rank, u32 extents..., float32 data)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, cfg: NetworkConfig):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(cfg.digest())
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f4")  # keeps 0-d scalars 0-d
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[bytes, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what} "
                                  f"at byte {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    digest = take(32, "config digest")
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode()
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4")
        params[name] = data.reshape(shape).copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes at {off}")
    return digest, params
