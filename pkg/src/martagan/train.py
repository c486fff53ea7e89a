"""Adversarial training: losses, Adam, and the alternating update loop.

All objectives are computed from logits through a numerically stable
log-sigmoid, never through the saturating probability. The generator
objective is perceptual (fool the discriminator) plus feature matching
(first moment of the fused discriminator features over the batch); both
terms are recorded every iteration regardless of which combination is
being optimized.

Randomness is derived per iteration from seed sequences
``[seed, tag, iteration]`` (tags: 10 batch indices, 11 noise for the
discriminator step, 12 noise for the generator step), so a run resumed
from a checkpoint replays the identical stream.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Graph, Tensor, ops
from .ioutil import atomic_open

LOSS_MODES = ("final", "perceptual_only")


def d_loss(logit_real, logit_fake):
    """-E[log D(x)] - E[log(1 - D(G(z)))], from logits."""
    real_term = ops.mean_all(ops.log_sigmoid(logit_real))
    fake_term = ops.mean_all(ops.log_sigmoid(ops.neg(logit_fake)))
    return ops.neg(ops.add(real_term, fake_term))


def g_perceptual_loss(logit_fake, non_saturating=False):
    """Generator fooling term.

    Default is the saturating form E[log(1 - D(G(z)))] (minimized); the
    non-saturating alternative -E[log D(G(z))] has the same fixed points
    but stronger early gradients.
    """
    if non_saturating:
        return ops.neg(ops.mean_all(ops.log_sigmoid(logit_fake)))
    return ops.mean_all(ops.log_sigmoid(ops.neg(logit_fake)))


def g_feature_match_loss(fake_features, real_feature_mean):
    """|| E[f(x)] - E[f(G(z))] ||^2 over the fused features.

    ``real_feature_mean`` is a constant (already averaged, detached).
    """
    target = real_feature_mean if isinstance(real_feature_mean, Tensor) else Tensor(real_feature_mean)
    diff = ops.sub(ops.mean_over_batch(fake_features), ops.reshape(target, (target.numel,)))
    return ops.sum_all(ops.square(diff))


def g_final_loss(perceptual, feature_match):
    return ops.add(perceptual, feature_match)


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, named_params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.names = list(named_params)
        self.params = [named_params[k] for k in self.names]
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise RuntimeError(f"Adam.step: no gradient for parameter {self.names[i]!r}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)

    def state_arrays(self):
        """Moment estimates keyed by parameter name, for checkpointing."""
        out = {}
        for i, name in enumerate(self.names):
            out[f"{name}/adam_m"] = self.m[i]
            out[f"{name}/adam_v"] = self.v[i]
        return out

    def load_state_arrays(self, arrays, t):
        for i, name in enumerate(self.names):
            m = arrays[f"{name}/adam_m"]
            v = arrays[f"{name}/adam_v"]
            if m.shape != self.m[i].shape or v.shape != self.v[i].shape:
                raise ValueError(f"Adam state shape mismatch for {name!r}")
            self.m[i] = m.astype(self.m[i].dtype, copy=True)
            self.v[i] = v.astype(self.v[i].dtype, copy=True)
        self.t = int(t)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 1
    d_steps_per_g_step: int = 1
    loss_mode: str = "final"
    non_saturating: bool = False
    seed: int = 0
    max_iterations: Optional[int] = None

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.d_steps_per_g_step < 1:
            raise ValueError(f"d_steps_per_g_step must be >= 1, got {self.d_steps_per_g_step}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    def to_dict(self):
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "d_steps_per_g_step": self.d_steps_per_g_step,
            "loss_mode": self.loss_mode,
            "non_saturating": self.non_saturating,
            "seed": self.seed,
            "max_iterations": self.max_iterations,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossRecord:
    iteration: int
    d_loss: float
    g_perceptual: float
    g_feature_match: float
    g_final: float

    def is_finite(self):
        return all(
            np.isfinite(v)
            for v in (self.d_loss, self.g_perceptual, self.g_feature_match, self.g_final)
        )


class TrainingDiverged(RuntimeError):
    def __init__(self, record):
        self.record = record
        super().__init__(
            f"non-finite loss at iteration {record.iteration}: "
            f"d={record.d_loss} g_perceptual={record.g_perceptual} "
            f"g_feature_match={record.g_feature_match}"
        )


@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    iterations_run: int = 0


class _FrozenParams:
    """Temporarily turn off requires_grad so no weight gradients are computed."""

    def __init__(self, params):
        self.params = list(params)
        self.saved = []

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, s in zip(self.params, self.saved):
            p.requires_grad = s
        return False


def total_iterations(cfg, n_images):
    per_epoch = max(1, n_images // cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_iterations is not None:
        total = min(total, cfg.max_iterations)
    return total


def train(gen, disc, images, cfg, start_iteration=0, opt_g=None, opt_d=None, on_iteration=None):
    """Alternating D/G updates over a (N, C, H, W) array of images in [-1, 1].

    The discriminator step scores a real minibatch against freshly
    generated (detached) fakes and updates D. The generator step pushes
    gradients through a frozen discriminator held in inference mode, so
    the feature maps being matched stay fixed while G moves. Returns a
    TrainResult; raises TrainingDiverged on the first non-finite loss.

    Pass the optimizers and ``start_iteration`` from a restored
    checkpoint to continue a run; the iteration-indexed random streams
    make the continuation identical to the uninterrupted run.
    """
    images = np.ascontiguousarray(images, dtype=gen.cfg.np_dtype)
    n = images.shape[0]
    if n == 0:
        raise ValueError("train: empty image set")
    if images.ndim != 4:
        raise ValueError(f"train: images must be 4-D (N,C,H,W), got {images.shape}")

    opt_g = opt_g or Adam(gen.named_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    opt_d = opt_d or Adam(disc.named_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    d_params = list(disc.named_params().values())

    total = total_iterations(cfg, n)
    result = TrainResult()
    dtype = gen.cfg.np_dtype
    z_dim = gen.cfg.z_dim
    bs = cfg.batch_size

    for it in range(start_iteration, total):
        # ----- discriminator step(s) -----
        d_val = 0.0
        for sub in range(cfg.d_steps_per_g_step):
            rng_b = np.random.default_rng([cfg.seed, 10, it * cfg.d_steps_per_g_step + sub])
            idx = rng_b.choice(n, size=bs, replace=n < bs)
            reals = images[idx]
            z = np.random.default_rng(
                [cfg.seed, 11, it * cfg.d_steps_per_g_step + sub]
            ).uniform(-1.0, 1.0, size=(bs, z_dim)).astype(dtype)
            fakes = gen.forward(Tensor(z), training=True).data  # eager: detached from D's tape

            with Graph() as g:
                out_real = disc.forward(Tensor(reals), training=True)
                out_fake = disc.forward(Tensor(fakes), training=True)
                loss_d = d_loss(out_real.logit, out_fake.logit)
                g.backward(loss_d)
            opt_d.step()
            d_val = loss_d.item()

        # ----- generator step -----
        rng_b = np.random.default_rng([cfg.seed, 10, it * cfg.d_steps_per_g_step])
        idx = rng_b.choice(n, size=bs, replace=n < bs)
        real_out = disc.forward(Tensor(images[idx]), training=False)
        real_mean = real_out.features.data.mean(axis=0)  # constant target

        z = np.random.default_rng([cfg.seed, 12, it]).uniform(
            -1.0, 1.0, size=(bs, z_dim)
        ).astype(dtype)

        with _FrozenParams(d_params), Graph() as g:
            imgs = gen.forward(Tensor(z), training=True)
            out = disc.forward(imgs, training=False)  # fixed feature map: running stats, no updates
            perc = g_perceptual_loss(out.logit, cfg.non_saturating)
            fm = g_feature_match_loss(out.features, real_mean)
            final = g_final_loss(perc, fm)
            target = final if cfg.loss_mode == "final" else perc
            g.backward(target)
        opt_g.step()

        record = LossRecord(
            iteration=it,
            d_loss=d_val,
            g_perceptual=perc.item(),
            g_feature_match=fm.item(),
            g_final=final.item(),
        )
        result.records.append(record)
        result.iterations_run += 1
        if not record.is_finite():
            raise TrainingDiverged(record)
        if on_iteration is not None:
            on_iteration(it, record)

    return result


def render_loss_rows(records, header=False):
    """CSV text for the loss log: %.8g floats, one row per iteration."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf)
    if header:
        writer.writerow(["iteration", "d_loss", "g_perceptual", "g_feature_match", "g_final"])
    for r in records:
        writer.writerow(
            [r.iteration, f"{r.d_loss:.8g}", f"{r.g_perceptual:.8g}",
             f"{r.g_feature_match:.8g}", f"{r.g_final:.8g}"]
        )
    return buf.getvalue()


def write_loss_csv(path, records, append=False):
    """Append mode skips the header (and, being an in-place append, is
    the one non-atomic writer here)."""
    if append:
        with open(path, "a", newline="") as fh:
            fh.write(render_loss_rows(records))
    else:
        with atomic_open(path, "w") as fh:
            fh.write(render_loss_rows(records, header=True))
