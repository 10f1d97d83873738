"""Network graphs: segmentation U-net, two-branch regressor, refiner.

Three models cover the pipeline. The segmentation net turns a camera
image into a foreground probability map. The first-stage regressor
fuses a long motion-history feature with a deliberately narrow shape
feature and reads out body keypoints plus the two head axes. The
second-stage refiner looks at the occupancy volume and adds a residual
correction to the initial keypoints.

All graphs are built from the hand-written layers in ``egospan.nn``;
widths come from NetConfig, never from constants in this file.
"""

import numpy as np

from .config import NetConfig
from .exceptions import ConfigError, DataError
from .motionhist import COLUMN_DIM, WINDOW
from .nn import (
    BilinearUpsample2d,
    Conv2d,
    Conv3d,
    Flatten,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    Sequential,
    concat_backward,
    concat_forward,
    scoped,
)
from .skeleton import NUM_KEYPOINTS
from .volume import VOLUME_GRID

MASK_SIZE = 256
HEIGHT_COLUMN = 12
BODY_DIM = NUM_KEYPOINTS * 3


def coordinate_maps(height, width):
    """Constant (2, H, W) coordinate channels in [-1, 1]: x map, y map."""
    x = np.broadcast_to(np.linspace(-1.0, 1.0, width)[None, :],
                        (height, width))
    y = np.broadcast_to(np.linspace(-1.0, 1.0, height)[:, None],
                        (height, width))
    return np.stack([x, y]).copy()


def shape_net_input(images, use_coordinate_maps=True):
    """Stack coordinate channels under a batch of images.

    Args:
        images: (B, 3, H, W) float array in [0, 1].
        use_coordinate_maps: append the two constant position channels,
            giving the net a way to tell where a silhouette sits in the
            frame.

    Returns:
        (B, 5, H, W) tensor, or (B, 3, H, W) when the maps are disabled.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[1] != 3:
        raise DataError(
            f"images must be (batch, 3, height, width), got {imgs.shape}")
    if not use_coordinate_maps:
        return imgs
    b, _, h, w = imgs.shape
    maps = np.broadcast_to(coordinate_maps(h, w), (b, 2, h, w))
    return np.concatenate([imgs, maps], axis=1)


def _strided_out(n, stages):
    """Spatial size after `stages` k3/s2/p1 convolutions."""
    for _ in range(stages):
        n = (n - 1) // 2 + 1
    return n


def _motion_net(cfg, rng, rows, cols):
    layers = []
    in_ch = 1
    for i, ch in enumerate(cfg.motion_channels):
        layers.append((f"conv{i + 1}",
                       Conv2d(in_ch, ch, 3, rng, stride=2, pad=1)))
        layers.append((f"act{i + 1}", ReLU()))
        in_ch = ch
    stages = len(cfg.motion_channels)
    flat = in_ch * _strided_out(rows, stages) * _strided_out(cols, stages)
    layers.append(("flat", Flatten()))
    layers.append(("fc", Linear(flat, cfg.motion_feature_dim, rng)))
    layers.append(("fcact", ReLU()))
    return Sequential(layers)


def _shape_feature_net(cfg, rng, mask_size):
    layers = [("pool0", MaxPool2d(cfg.shape_pool))]
    size = mask_size // cfg.shape_pool
    in_ch = 1
    for i, ch in enumerate(cfg.shapefeat_channels):
        layers.append((f"conv{i + 1}", Conv2d(in_ch, ch, 3, rng, pad=1)))
        layers.append((f"act{i + 1}", ReLU()))
        layers.append((f"pool{i + 1}", MaxPool2d(2)))
        in_ch = ch
        size //= 2
    layers.append(("flat", Flatten()))
    layers.append(("fc", Linear(in_ch * size * size, 64, rng)))
    layers.append(("fcact", ReLU()))
    # the balancer: squeeze the silhouette down to a few dimensions so
    # the wide motion feature cannot be shouted down, nor vice versa
    layers.append(("balance", Linear(64, cfg.balanced_dim, rng)))
    return Sequential(layers)


def _head(in_dim, hidden, out_dim, rng):
    return Sequential([
        ("fc1", Linear(in_dim, hidden, rng)),
        ("act", ReLU()),
        ("fc2", Linear(hidden, out_dim, rng)),
    ])


class Stage1Net(Network):
    """Two-branch regressor: motion history + silhouette -> pose.

    forward takes a (B, window, 13) motion history and a (B, 256, 256)
    binary mask; it returns (body, facing, up) as (B, 45), (B, 3),
    (B, 3). The `variant` config selects which branches exist: "fused"
    uses both, "motion_only" and "shape_only" drop one branch entirely
    (their weight files are not interchangeable with the fused net's).
    """

    def __init__(self, cfg=None, rng=None, history_rows=WINDOW,
                 mask_size=MASK_SIZE):
        super().__init__()
        self.cfg = cfg if cfg is not None else NetConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.history_rows = history_rows
        self.mask_size = mask_size
        cfg = self.cfg
        dims = []
        if cfg.variant != "shape_only":
            self.add("motion", _motion_net(cfg, rng, history_rows,
                                           COLUMN_DIM))
            dims.append(cfg.motion_feature_dim)
        if cfg.variant != "motion_only":
            self.add("shape", _shape_feature_net(cfg, rng, mask_size))
            dims.append(cfg.balanced_dim)
        fused = sum(dims)
        self.add("body", _head(fused, cfg.body_hidden, BODY_DIM, rng))
        self.add("facing", _head(fused, cfg.head_hidden, 3, rng))
        self.add("up", _head(fused, cfg.head_hidden, 3, rng))
        self._shapes = None

    def _check_inputs(self, mhi, mask):
        if mhi.shape[1:] != (self.history_rows, COLUMN_DIM):
            raise DataError(
                f"motion history must be (batch, {self.history_rows},"
                f" {COLUMN_DIM}), got {mhi.shape}")
        if mask.shape[1:] != (self.mask_size, self.mask_size):
            raise DataError(
                f"mask must be (batch, {self.mask_size}, {self.mask_size}),"
                f" got {mask.shape}")
        if mhi.shape[0] != mask.shape[0]:
            raise DataError(
                f"batch mismatch: {mhi.shape[0]} histories,"
                f" {mask.shape[0]} masks")

    def forward(self, mhi, mask):
        mhi = np.asarray(mhi, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        self._check_inputs(mhi, mask)
        if not self.cfg.use_height_channel:
            mhi = mhi.copy()
            mhi[:, :, HEIGHT_COLUMN] = 0.0
        parts = []
        if self.cfg.variant != "shape_only":
            parts.append(self.layer("motion").forward(mhi[:, None]))
        if self.cfg.variant != "motion_only":
            parts.append(self.layer("shape").forward(mask[:, None]))
        fused = concat_forward(parts) if len(parts) > 1 else parts[0]
        self._shapes = [p.shape for p in parts]
        body = self.layer("body").forward(fused)
        f = self.layer("facing").forward(fused)
        u = self.layer("up").forward(fused)
        return body, f, u

    def backward(self, gout):
        """gout is (gbody, gf, gu); returns the parameter gradient dict."""
        if self._shapes is None:
            raise DataError("backward called before forward")
        gbody, gf, gu = gout
        grads = {}
        gfused = 0.0
        for name, g in (("body", gbody), ("facing", gf), ("up", gu)):
            gx, sub = self.layer(name).backward(g)
            grads.update(scoped(name, sub))
            gfused = gfused + gx
        if len(self._shapes) > 1:
            gparts = concat_backward(gfused, self._shapes)
        else:
            gparts = [gfused]
        branches = []
        if self.cfg.variant != "shape_only":
            branches.append("motion")
        if self.cfg.variant != "motion_only":
            branches.append("shape")
        for name, g in zip(branches, gparts):
            _, sub = self.layer(name).backward(g)
            grads.update(scoped(name, sub))
        return grads

    def infer(self, mhi, mask):
        """Single-sample forward: (window, 13) + (256, 256) -> flat outputs."""
        body, f, u = self.forward(np.asarray(mhi)[None],
                                  np.asarray(mask)[None])
        return body[0], f[0], u[0]

    def motion_features(self, mhi):
        """Motion-branch features (B, motion_feature_dim) for the refiner."""
        if self.cfg.variant == "shape_only":
            raise ConfigError(
                "a shape_only regressor has no motion branch to share")
        mhi = np.asarray(mhi, dtype=np.float64)
        if mhi.shape[1:] != (self.history_rows, COLUMN_DIM):
            raise DataError(
                f"motion history must be (batch, {self.history_rows},"
                f" {COLUMN_DIM}), got {mhi.shape}")
        if not self.cfg.use_height_channel:
            mhi = mhi.copy()
            mhi[:, :, HEIGHT_COLUMN] = 0.0
        return self.layer("motion").forward(mhi[:, None])


class ShapeNet(Network):
    """Segmentation U-net: image (+ coordinate maps) -> foreground logits.

    Encoder stages are conv/relu/pool; the decoder upsamples, concatenates
    the matching encoder activation, and convolves back down. The output
    is a logit map; `probabilities` applies the sigmoid.
    """

    def __init__(self, cfg=None, rng=None):
        super().__init__()
        self.cfg = cfg if cfg is not None else NetConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = self.cfg
        self.in_channels = 3 + 2 * bool(cfg.use_coordinate_maps)
        enc = cfg.seg_encoder_channels
        dec = cfg.seg_decoder_channels
        in_ch = self.in_channels
        for i, ch in enumerate(enc):
            self.add(f"enc{i + 1}", Conv2d(in_ch, ch, 3, rng, pad=1))
            in_ch = ch
        for i, ch in enumerate(dec):
            skip = enc[len(enc) - 2 - i]
            self.add(f"dec{i + 1}", Conv2d(in_ch + skip, ch, 3, rng, pad=1))
            in_ch = ch
        self.add("out", Conv2d(in_ch, 1, 1, rng))
        self._relu = ReLU()
        self._pool = MaxPool2d(2)
        self._up = BilinearUpsample2d()
        self._tape = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DataError(
                f"expected (batch, {self.in_channels}, H, W) input,"
                f" got {x.shape}")
        enc = self.cfg.seg_encoder_channels
        dec = self.cfg.seg_decoder_channels
        enc_cache = []
        skips = []
        h = x
        for i in range(len(enc)):
            conv_in = h
            a = self.layer(f"enc{i + 1}").forward(h)
            r = self._relu.forward(a)
            enc_cache.append((conv_in, a, r))
            if i < len(enc) - 1:
                skips.append(r)
                h = self._pool.forward(r)
            else:
                h = r
        dec_cache = []
        for j in range(len(dec)):
            up_in = h
            u = self._up.forward(h)
            cat = concat_forward([u, skips[len(enc) - 2 - j]])
            a = self.layer(f"dec{j + 1}").forward(cat)
            h = self._relu.forward(a)
            dec_cache.append((up_in, u.shape, cat, a))
        self._tape = (enc_cache, dec_cache, h)
        return self.layer("out").forward(h)

    def backward(self, gy):
        if self._tape is None:
            raise DataError("backward called before forward")
        enc_cache, dec_cache, head_in = self._tape
        enc = self.cfg.seg_encoder_channels
        dec = self.cfg.seg_decoder_channels
        grads = {}
        g, sub = self.layer("out").backward(head_in, gy)
        grads.update(scoped("out", sub))
        skip_grads = [None] * (len(enc) - 1)
        for j in reversed(range(len(dec))):
            up_in, u_shape, cat, a = dec_cache[j]
            g, _ = self._relu.backward(a, g)
            g, sub = self.layer(f"dec{j + 1}").backward(cat, g)
            grads.update(scoped(f"dec{j + 1}", sub))
            skip_idx = len(enc) - 2 - j
            skip_shape = enc_cache[skip_idx][2].shape
            gu, gskip = concat_backward(g, [u_shape, skip_shape])
            if skip_grads[skip_idx] is None:
                skip_grads[skip_idx] = gskip
            else:
                skip_grads[skip_idx] = skip_grads[skip_idx] + gskip
            g, _ = self._up.backward(up_in, gu)
        for i in reversed(range(len(enc))):
            conv_in, a, r = enc_cache[i]
            if i < len(enc) - 1:
                g, _ = self._pool.backward(r, g)
                if skip_grads[i] is not None:
                    g = g + skip_grads[i]
            g, _ = self._relu.backward(a, g)
            g, sub = self.layer(f"enc{i + 1}").backward(conv_in, g)
            grads.update(scoped(f"enc{i + 1}", sub))
        return grads

    def probabilities(self, x):
        """Foreground probability map(s) in [0, 1], shape (B, H, W)."""
        z = self.forward(x)[:, 0]
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out

    def segment(self, x, threshold=0.5):
        """Binary masks from thresholded probabilities, shape (B, H, W)."""
        return (self.probabilities(x) >= threshold).astype(np.uint8)


def sigmoid_bce_loss(logits, targets):
    """Mean binary cross entropy on logits.

    Returns (value, gradient wrt logits). Uses the stable max/log1p
    form, so large logits of either sign cannot overflow.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise DataError(f"logits {z.shape} and targets {t.shape} differ")
    value = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    n = z.size
    return float(value.mean()), (sig - t) / n


class Stage2Net(Network):
    """Residual refiner: occupancy volume + evidence -> corrected body.

    The volume passes through strided 3D convolutions into a compact
    code, which is concatenated with the motion feature and the initial
    body estimate. The final layer is zero-initialized, so an untrained
    refiner returns the initial body exactly and training can only move
    away from that baseline if the loss improves.
    """

    def __init__(self, cfg=None, rng=None):
        super().__init__()
        self.cfg = cfg if cfg is not None else NetConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        cfg = self.cfg
        layers = []
        in_ch = 1
        for i, ch in enumerate(cfg.volume_channels):
            layers.append((f"conv{i + 1}",
                           Conv3d(in_ch, ch, 3, rng, stride=2, pad=1)))
            layers.append((f"act{i + 1}", ReLU()))
            in_ch = ch
        side = _strided_out(VOLUME_GRID, len(cfg.volume_channels))
        layers.append(("flat", Flatten()))
        layers.append(("fc", Linear(in_ch * side ** 3, cfg.volume_fc_dim,
                                    rng)))
        layers.append(("fcact", ReLU()))
        self.add("volume", Sequential(layers))
        fused = cfg.volume_fc_dim + cfg.motion_feature_dim + BODY_DIM
        self.add("refine", Sequential([
            ("fc1", Linear(fused, cfg.stage2_hidden, rng)),
            ("act", ReLU()),
            ("fc2", Linear(cfg.stage2_hidden, BODY_DIM, rng,
                           zero_init=True)),
        ]))
        self._shapes = None

    def forward(self, volume, motion_feature, initial_body):
        v = np.asarray(volume, dtype=np.float64)
        m = np.asarray(motion_feature, dtype=np.float64)
        b = np.asarray(initial_body, dtype=np.float64)
        if v.ndim != 5 or v.shape[1] != 1 or v.shape[2:] != (VOLUME_GRID,) * 3:
            raise DataError(
                f"volume must be (batch, 1, {VOLUME_GRID}, {VOLUME_GRID},"
                f" {VOLUME_GRID}), got {v.shape}")
        if m.ndim != 2 or m.shape[1] != self.cfg.motion_feature_dim:
            raise DataError(
                f"motion feature must be (batch,"
                f" {self.cfg.motion_feature_dim}), got {m.shape}")
        if b.ndim != 2 or b.shape[1] != BODY_DIM:
            raise DataError(
                f"initial body must be (batch, {BODY_DIM}), got {b.shape}")
        code = self.layer("volume").forward(v)
        cat = concat_forward([code, m, b])
        self._shapes = [code.shape, m.shape, b.shape]
        residual = self.layer("refine").forward(cat)
        return b + residual

    def backward(self, gy):
        if self._shapes is None:
            raise DataError("backward called before forward")
        grads = {}
        gcat, sub = self.layer("refine").backward(gy)
        grads.update(scoped("refine", sub))
        gcode, _, _ = concat_backward(gcat, self._shapes)
        _, sub = self.layer("volume").backward(gcode)
        grads.update(scoped("volume", sub))
        return grads

    def refine(self, volume, motion_feature, initial_body):
        """Single-sample forward with unbatched inputs."""
        grid = np.asarray(volume, dtype=np.float64)
        out = self.forward(grid[None, None],
                           np.asarray(motion_feature)[None],
                           np.asarray(initial_body)[None])
        return out[0]
