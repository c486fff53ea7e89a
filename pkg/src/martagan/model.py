"""Generator / discriminator pair with a multi-scale fused feature head.

Both networks are stacks of 4x4 stride-2 convolutions (pad 1), so every
stage exactly halves or doubles the spatial size. An image of side S
needs log2(S) - 2 stages to reach the 4x4 bottleneck. Discriminator
stage widths grow as base_width * 2^j capped at max_width; the
generator mirrors them in reverse.

The discriminator's representation is not just its deepest activation:
the last ``fusion_depth`` stages are max-pooled to 4x4, concatenated
along channels, and flattened. That fused vector feeds the real/fake
head and doubles as the feature extractor for downstream classifiers.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, ops
from .autodiff.ops import BatchNormState

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ArchConfig:
    image_size: int = 64
    channels: int = 3
    z_dim: int = 100
    base_width: int = 16
    max_width: int = 512
    fusion_depth: int = 3
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {s}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.z_dim < 1:
            raise ValueError(f"z_dim must be >= 1, got {self.z_dim}")
        if self.base_width < 1 or self.max_width < self.base_width:
            raise ValueError(
                f"need 1 <= base_width <= max_width, got {self.base_width}, {self.max_width}"
            )
        if not 1 <= self.fusion_depth <= self.n_stages:
            raise ValueError(
                f"fusion_depth must be in [1, {self.n_stages}] for image_size "
                f"{self.image_size}, got {self.fusion_depth}"
            )
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")
        if self.init_std <= 0:
            raise ValueError(f"init_std must be positive, got {self.init_std}")

    @property
    def n_stages(self):
        return int(self.image_size).bit_length() - 3  # log2(size) - 2

    @property
    def disc_widths(self):
        return tuple(min(self.base_width << j, self.max_width) for j in range(self.n_stages))

    @property
    def fusion_dim(self):
        return sum(self.disc_widths[-self.fusion_depth :]) * 16  # 4x4 per fused map

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "z_dim": self.z_dim,
            "base_width": self.base_width,
            "max_width": self.max_width,
            "fusion_depth": self.fusion_depth,
            "init_std": self.init_std,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Generator:
    """z in [-1,1]^z_dim -> image in (-1,1)^(C x S x S).

    Dense projection to the 4x4 bottleneck, then stride-2 transposed
    convolutions doubling the side each stage. Batch norm + ReLU
    everywhere except the output stage, which has a bias and tanh.
    """

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng([int(seed), 1])
        dt = cfg.np_dtype
        self.cfg = cfg
        gw = cfg.disc_widths[::-1]

        def init(shape):
            return Tensor(rng.normal(0.0, cfg.init_std, shape).astype(dt), requires_grad=True)

        self.project_w = init((cfg.z_dim, gw[0] * 16))
        self.project_bn = BatchNormState(gw[0], dtype=dt)
        self.deconv_w = []
        self.deconv_bn = []
        for i in range(cfg.n_stages):
            cin = gw[i]
            cout = gw[i + 1] if i + 1 < cfg.n_stages else cfg.channels
            self.deconv_w.append(init((cin, cout, 4, 4)))
            if i + 1 < cfg.n_stages:
                self.deconv_bn.append(BatchNormState(cout, dtype=dt))
        self.output_b = Tensor(np.zeros(cfg.channels, dtype=dt), requires_grad=True)

    def forward(self, z, training):
        if not isinstance(z, Tensor):
            z = Tensor(z)
        if z.data.ndim != 2 or z.shape[1] != self.cfg.z_dim:
            raise ValueError(f"generator expects (N, {self.cfg.z_dim}) noise, got {z.shape}")
        n = z.shape[0]
        gw0 = self.cfg.disc_widths[-1]
        h = ops.dense(z, self.project_w)
        h = ops.reshape(h, (n, gw0, 4, 4))
        h = ops.relu(ops.batch_norm2d(h, self.project_bn, training))
        last = self.cfg.n_stages - 1
        for i, w in enumerate(self.deconv_w):
            if i < last:
                h = ops.conv_transpose2d(h, w, stride=2, pad=1)
                h = ops.relu(ops.batch_norm2d(h, self.deconv_bn[i], training))
            else:
                h = ops.conv_transpose2d(h, w, b=self.output_b, stride=2, pad=1)
                h = ops.tanh(h)
        return h

    def named_params(self):
        out = OrderedDict()
        out["g/project/w"] = self.project_w
        out["g/project/bn/gamma"] = self.project_bn.gamma
        out["g/project/bn/beta"] = self.project_bn.beta
        for i, w in enumerate(self.deconv_w):
            out[f"g/deconv{i}/w"] = w
            if i < len(self.deconv_bn):
                out[f"g/deconv{i}/bn/gamma"] = self.deconv_bn[i].gamma
                out[f"g/deconv{i}/bn/beta"] = self.deconv_bn[i].beta
        out["g/output/b"] = self.output_b
        return out

    def named_buffers(self):
        out = OrderedDict()
        out["g/project/bn/running_mean"] = self.project_bn.running_mean
        out["g/project/bn/running_var"] = self.project_bn.running_var
        for i, bn in enumerate(self.deconv_bn):
            out[f"g/deconv{i}/bn/running_mean"] = bn.running_mean
            out[f"g/deconv{i}/bn/running_var"] = bn.running_var
        return out

    def batch_norm_states(self):
        return [self.project_bn] + list(self.deconv_bn)


class DiscOutput:
    """Discriminator forward result: logits/probs plus the fused features."""

    __slots__ = ("logit", "prob", "features", "stage_activations")

    def __init__(self, logit, prob, features, stage_activations):
        self.logit = logit
        self.prob = prob
        self.features = features
        self.stage_activations = stage_activations


class Discriminator:
    """Image -> (real/fake logit, fused multi-scale features)."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng([int(seed), 2])
        dt = cfg.np_dtype
        self.cfg = cfg
        widths = cfg.disc_widths

        def init(shape):
            return Tensor(rng.normal(0.0, cfg.init_std, shape).astype(dt), requires_grad=True)

        self.conv_w = []
        self.conv_bn = []
        for i, cout in enumerate(widths):
            cin = cfg.channels if i == 0 else widths[i - 1]
            self.conv_w.append(init((cout, cin, 4, 4)))
            if i > 0:
                self.conv_bn.append(BatchNormState(cout, dtype=dt))
        self.conv0_b = Tensor(np.zeros(widths[0], dtype=dt), requires_grad=True)
        self.head_w = init((cfg.fusion_dim, 1))
        self.head_b = Tensor(np.zeros(1, dtype=dt), requires_grad=True)

    def forward(self, x, training):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        cfg = self.cfg
        expect = (cfg.channels, cfg.image_size, cfg.image_size)
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ValueError(f"discriminator expects (N, {expect[0]}, {expect[1]}, {expect[2]}) images, got {x.shape}")
        n = x.shape[0]
        acts = []
        h = x
        for i, w in enumerate(self.conv_w):
            if i == 0:
                h = ops.conv2d(h, w, b=self.conv0_b, stride=2, pad=1)
            else:
                h = ops.conv2d(h, w, stride=2, pad=1)
                h = ops.batch_norm2d(h, self.conv_bn[i - 1], training)
            h = ops.leaky_relu(h, 0.2)
            acts.append(h)
        feats = fuse_features(acts, cfg.fusion_depth)
        logit = ops.reshape(ops.dense(feats, self.head_w, self.head_b), (n,))
        prob = ops.sigmoid(logit)
        return DiscOutput(logit, prob, feats, acts)

    def named_params(self):
        out = OrderedDict()
        for i, w in enumerate(self.conv_w):
            out[f"d/conv{i}/w"] = w
            if i == 0:
                out["d/conv0/b"] = self.conv0_b
            else:
                out[f"d/conv{i}/bn/gamma"] = self.conv_bn[i - 1].gamma
                out[f"d/conv{i}/bn/beta"] = self.conv_bn[i - 1].beta
        out["d/head/w"] = self.head_w
        out["d/head/b"] = self.head_b
        return out

    def named_buffers(self):
        out = OrderedDict()
        for i, bn in enumerate(self.conv_bn, start=1):
            out[f"d/conv{i}/bn/running_mean"] = bn.running_mean
            out[f"d/conv{i}/bn/running_var"] = bn.running_var
        return out

    def batch_norm_states(self):
        return list(self.conv_bn)


def fuse_features(stage_activations, fusion_depth):
    """Pool the deepest ``fusion_depth`` activations to 4x4 and flatten.

    Concatenation runs shallow-to-deep, so the flat layout is
    (stage, channel, row, column).
    """
    if not 1 <= fusion_depth <= len(stage_activations):
        raise ValueError(
            f"fusion_depth {fusion_depth} out of range for {len(stage_activations)} stages"
        )
    pooled = []
    for act in stage_activations[-fusion_depth:]:
        side = act.shape[2]
        if side % 4:
            raise ValueError(f"cannot pool {side}x{side} activation down to 4x4")
        pooled.append(ops.max_pool2d(act, side // 4))
    return ops.flatten(ops.concat_channels(pooled))


def sample_z(n, z_dim, rng, dtype=np.float32):
    """Noise batch, uniform on [-1, 1)."""
    return rng.uniform(-1.0, 1.0, size=(n, z_dim)).astype(dtype)


def generate(gen, z):
    """Eager image synthesis (inference mode, no tape)."""
    if Graph.current() is not None:
        raise RuntimeError("generate() is eager-only; call gen.forward inside a Graph instead")
    return gen.forward(Tensor(np.asarray(z)), training=False).data


def discriminate(disc, images):
    """Eager scoring: returns (logits, probs, features) as numpy arrays."""
    if Graph.current() is not None:
        raise RuntimeError("discriminate() is eager-only; call disc.forward inside a Graph instead")
    out = disc.forward(Tensor(np.asarray(images)), training=False)
    return out.logit.data, out.prob.data, out.features.data


def param_count(model):
    return int(sum(t.numel for t in model.named_params().values()))


def generator_activations(gen, z):
    """Per-stage eager outputs of the generator, for shape debugging."""
    z = Tensor(np.asarray(z))
    n = z.shape[0]
    gw0 = gen.cfg.disc_widths[-1]
    h = ops.relu(
        ops.batch_norm2d(
            ops.reshape(ops.dense(z, gen.project_w), (n, gw0, 4, 4)), gen.project_bn, False
        )
    )
    acts = [h]
    last = gen.cfg.n_stages - 1
    for i, w in enumerate(gen.deconv_w):
        if i < last:
            h = ops.relu(ops.batch_norm2d(ops.conv_transpose2d(h, w, stride=2, pad=1), gen.deconv_bn[i], False))
        else:
            h = ops.tanh(ops.conv_transpose2d(h, w, b=gen.output_b, stride=2, pad=1))
        acts.append(h)
    return [a.data for a in acts]
