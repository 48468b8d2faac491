"""The occupancy-plane predictor: a small multi-scale encoder plus three
convolutional heads, producing fine spatial logits and coarse inner-product
logits for a batch of query depths. Image features are computed once per
image and shared by every plane."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .planes import PE_CHANNELS, depth_diff_image

__all__ = ["ModelConfig", "ModelParams", "ForwardOutput", "OPlanesModel",
           "save_checkpoint", "load_checkpoint"]


@dataclass
class ModelConfig:
    height: int = 512
    width: int = 512
    c_enc: int = 256
    c_head: int = 128
    encoder_widths: tuple = (64, 128, 256, 512)
    spatial_1x1: bool = False     # per-point classification ablation
    dtype: str = "float32"

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError("input resolution must be divisible by 16")
        if len(self.encoder_widths) != 4:
            raise ValueError("encoder needs a 4-stage width schedule")

    # operating resolution (fine plane logits)
    @property
    def out_h(self):
        return self.height // 2

    @property
    def out_w(self):
        return self.width // 2

    # intermediate resolution (coarse inner-product logits)
    @property
    def coarse_h(self):
        return self.height // 4

    @property
    def coarse_w(self):
        return self.width // 4

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        """Reduced widths at 128x128 input; resolution ratios preserved."""
        kw.setdefault("height", 128)
        kw.setdefault("width", 128)
        kw.setdefault("c_enc", 32)
        kw.setdefault("c_head", 16)
        kw.setdefault("encoder_widths", (16, 32, 64, 64))
        return cls(**kw)

    def to_lines(self):
        return [f"height={self.height}", f"width={self.width}",
                f"c_enc={self.c_enc}", f"c_head={self.c_head}",
                "encoder_widths=" + ",".join(str(w) for w in self.encoder_widths),
                f"spatial_1x1={int(self.spatial_1x1)}", f"dtype={self.dtype}"]

    @classmethod
    def from_lines(cls, lines):
        kv = dict(line.split("=", 1) for line in lines if "=" in line)
        return cls(height=int(kv["height"]), width=int(kv["width"]),
                   c_enc=int(kv["c_enc"]), c_head=int(kv["c_head"]),
                   encoder_widths=tuple(int(x) for x in kv["encoder_widths"].split(",")),
                   spatial_1x1=bool(int(kv["spatial_1x1"])), dtype=kv["dtype"])


def _gn_groups(channels):
    return 32 if channels >= 32 and channels % 32 == 0 else channels


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def conv(self, name, in_ch, out_ch, k, rng):
        w = T.Param(T.kaiming_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k,
                                      self.config.np_dtype), name=f"{name}.weight")
        b = T.Param(np.zeros(out_ch, dtype=self.config.np_dtype), name=f"{name}.bias")
        self.params[w.name] = w
        self.params[b.name] = b
        return w, b

    def norm(self, name, channels):
        g = T.Param(np.ones(channels, dtype=self.config.np_dtype), name=f"{name}.gamma")
        b = T.Param(np.zeros(channels, dtype=self.config.np_dtype), name=f"{name}.beta")
        self.params[g.name] = g
        self.params[b.name] = b
        return g, b

    def all_params(self):
        return list(self.params.values())

    def count(self):
        return sum(p.data.size for p in self.params.values())


class OPlanesModel:
    """Parameter container plus the forward passes of the four sub-networks."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.p = ModelParams(config)
        rng = np.random.default_rng(seed)
        cw = config.encoder_widths
        c_enc, c_head = config.c_enc, config.c_head

        # encoder: 4 stride-2 stages (conv + GN + ReLU + 2x pool), then
        # top-down lateral fusion emitting the H/4 level at c_enc channels
        ins = [5] + list(cw[:-1])
        self.enc_layers = []
        for i, (ci, co) in enumerate(zip(ins, cw)):
            conv = self.p.conv(f"enc.stage{i}", ci, co, 3, rng)
            norm = self.p.norm(f"enc.stage{i}", co)
            self.enc_layers.append((conv, norm))
        self.lateral = [self.p.conv(f"enc.lateral{i}", cw[i + 1], c_enc, 1, rng)
                        for i in range(3)]
        self.smooth = self.p.conv("enc.smooth", c_enc, c_enc, 3, rng)
        self.smooth_norm = self.p.norm("enc.smooth", c_enc)

        # rgb head: (c_enc, c_head, 3), (c_head, c_head, 3), (c_head, c_head, 1)
        self.rgb_convs = [self.p.conv("rgb.0", c_enc, c_head, 3, rng),
                          self.p.conv("rgb.1", c_head, c_head, 3, rng),
                          self.p.conv("rgb.2", c_head, c_head, 1, rng)]
        self.rgb_norms = [self.p.norm("rgb.0", c_head), self.p.norm("rgb.1", c_head)]

        # depth head: (64, c_head, 1), (c_head, c_head, 1), GN+ReLU after each
        self.depth_convs = [self.p.conv("depth.0", PE_CHANNELS, c_head, 1, rng),
                            self.p.conv("depth.1", c_head, c_head, 1, rng)]
        self.depth_norms = [self.p.norm("depth.0", c_head), self.p.norm("depth.1", c_head)]

        # spatial head: (2*c_head, c_head, 3), (c_head, c_head, 3), (c_head, 1, 1)
        ks = 1 if config.spatial_1x1 else 3
        self.spatial_convs = [self.p.conv("spatial.0", 2 * c_head, c_head, ks, rng),
                              self.p.conv("spatial.1", c_head, c_head, ks, rng),
                              self.p.conv("spatial.2", c_head, 1, 1, rng)]
        self.spatial_norms = [self.p.norm("spatial.0", c_head), self.p.norm("spatial.1", c_head)]

        self.encoder_calls = 0  # instrumentation: must stay 1 per image

    def parameters(self):
        return self.p.all_params()

    # -- sub-network forwards ------------------------------------------------

    def encoder_forward(self, aug_input) -> T.Tensor:
        cfg = self.config
        x = aug_input if isinstance(aug_input, T.Tensor) else \
            T.Tensor(np.asarray(aug_input, dtype=cfg.np_dtype))
        if x.shape[-3] != 5:
            raise T.ShapeError(f"augmented input must have 5 channels, got {x.shape}")
        self.encoder_calls += 1
        feats = []
        for (w, b), (g, be) in self.enc_layers:
            x = T.conv2d(x, w, b)
            x = T.group_norm(x, _gn_groups(w.shape[0]), g, be)
            x = T.relu(x)
            x = T.avg_pool2x(x)
            feats.append(x)
        # top-down: H/16 -> H/8 -> H/4 with 1x1 laterals and upsample-add
        (w, b) = self.lateral[2]
        top = T.conv2d(feats[3], w, b)
        for level, (w, b) in ((feats[2], self.lateral[1]), (feats[1], self.lateral[0])):
            lat = T.conv2d(level, w, b)
            top = T.add(T.bilinear_upsample(top, lat.shape[-2], lat.shape[-1]), lat)
        w, b = self.smooth
        g, be = self.smooth_norm
        out = T.relu(T.group_norm(T.conv2d(top, w, b), _gn_groups(self.config.c_enc), g, be))
        return out

    def rgb_head(self, enc: T.Tensor) -> T.Tensor:
        x = enc
        for i, (w, b) in enumerate(self.rgb_convs):
            x = T.conv2d(x, w, b)
            if i < 2:
                g, be = self.rgb_norms[i]
                x = T.group_norm(x, _gn_groups(w.shape[0]), g, be)
            x = T.relu(x)
        return x

    def depth_head(self, diff: T.Tensor) -> T.Tensor:
        x = diff
        for (w, b), (g, be) in zip(self.depth_convs, self.depth_norms):
            x = T.conv2d(x, w, b)
            x = T.group_norm(x, _gn_groups(w.shape[0]), g, be)
            x = T.relu(x)
        return x

    def spatial_head(self, fused: T.Tensor) -> T.Tensor:
        x = fused
        for i, (w, b) in enumerate(self.spatial_convs):
            x = T.conv2d(x, w, b)
            if i < 2:
                g, be = self.spatial_norms[i]
                x = T.group_norm(x, _gn_groups(w.shape[0]), g, be)
                x = T.relu(x)
        return x  # raw logits

    # -- full forward ----------------------------------------------------------

    def predict_planes(self, aug_input, depth, depths, frustum=None,
                       precomputed_features=None) -> "ForwardOutput":
        """Fine and coarse plane logits for a batch of query depths.

        The encoder and rgb head run once; each depth contributes only a
        depth-difference image. ``precomputed_features`` reuses a previous
        (coarse, fine) image-feature pair across chunks.
        """
        cfg = self.config
        depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
        if depths.size == 0:
            raise ValueError("need at least one query depth")
        if frustum is not None:
            if np.any(depths < frustum.z_min - 1e-9) or np.any(depths > frustum.z_max + 1e-9):
                raise ValueError("query depth outside the frustum window")
        z_max = frustum.z_max if frustum is not None else float(depths.max())

        if precomputed_features is None:
            enc = self.encoder_forward(aug_input)
            f_rgb_coarse = self.rgb_head(enc)
            f_rgb_fine = T.bilinear_upsample(f_rgb_coarse, cfg.out_h, cfg.out_w)
        else:
            f_rgb_coarse, f_rgb_fine = precomputed_features

        n = depths.size
        diff_c = np.stack([depth_diff_image(depth, z, cfg.coarse_h, cfg.coarse_w, z_max)
                           for z in depths]).astype(cfg.np_dtype)
        diff_f = np.stack([depth_diff_image(depth, z, cfg.out_h, cfg.out_w, z_max)
                           for z in depths]).astype(cfg.np_dtype)

        fz_coarse = self.depth_head(T.Tensor(diff_c))
        coarse_logits = T.pixelwise_inner_product(T.broadcast_batch(f_rgb_coarse, n), fz_coarse)

        fz_fine = self.depth_head(T.Tensor(diff_f))
        fused = T.concat_channels([T.broadcast_batch(f_rgb_fine, n), fz_fine])
        fine_logits = self.spatial_head(fused)
        return ForwardOutput(fine_logits, coarse_logits, (f_rgb_coarse, f_rgb_fine),
                             depths.copy())


@dataclass
class ForwardOutput:
    fine_logits: T.Tensor     # (N, 1, H_O, W_O)
    coarse_logits: T.Tensor   # (N, 1, h_O, w_O)
    features: tuple           # cached (coarse, fine) image features
    depths: np.ndarray


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"OPCK"
_CKPT_VERSION = 1


def save_checkpoint(model: OPlanesModel, path, extra=None):
    """Binary checkpoint: magic, version, config block, named float32 records."""
    lines = model.config.to_lines()
    for k, v in (extra or {}).items():
        lines.append(f"extra.{k}={v}")
    blob = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HI", _CKPT_VERSION, len(blob)))
        f.write(blob)
        items = sorted(model.p.params.items())
        f.write(struct.pack("<I", len(items)))
        for name, p in items:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            shape = p.data.shape
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (model, extra-dict)."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not an OPCK checkpoint")
        version, blob_len = struct.unpack("<HI", f.read(6))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        lines = f.read(blob_len).decode().splitlines()
        cfg_lines = [ln for ln in lines if not ln.startswith("extra.")]
        extra = dict(ln[len("extra."):].split("=", 1) for ln in lines if ln.startswith("extra."))
        config = ModelConfig.from_lines(cfg_lines)
        model = OPlanesModel(config, seed=0)
        (n_records,) = struct.unpack("<I", f.read(4))
        for _ in range(n_records):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape)
            if name not in model.p.params:
                raise ValueError(f"{path}: unknown parameter record {name!r}")
            p = model.p.params[name]
            if p.data.shape != tuple(shape):
                raise ValueError(f"{path}: shape mismatch for {name!r}")
            p.data = data.astype(config.np_dtype)
    return model, extra
