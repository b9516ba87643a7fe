"""Data-free distillation: a generator and a student trained adversarially
against a frozen teacher. The generator's samples ("anchors") stand in for
the unavailable training data.

This is a deliberately small variant of adversarial data-free distillation:
l1 logit discrepancy, Adam, one generator step per ``student_steps`` student
steps, with class-confidence and class-balance terms on the generator so
that its samples do not collapse onto a few saturated textures.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)


class Generator:
    """Latent vector to image network with outputs squashed into [0, 1]."""

    def __init__(self, net, latent_dim, image_shape):
        self.net = net
        self.latent_dim = int(latent_dim)
        self.image_shape = tuple(image_shape)

    @classmethod
    def init(cls, latent_dim, image_shape, seed, hidden=256):
        layers = [
            nn.dense(latent_dim, hidden), nn.RELU,
            nn.dense(hidden, math.prod(image_shape)), nn.SIGMOID,
            nn.LayerSpec("reshape", image_shape),
        ]
        return cls(nn.Model.init(layers, (latent_dim,), seed), latent_dim, image_shape)

    def generate(self, z):
        return nn.forward(self.net, np.asarray(z, dtype=np.float32))

    def sample_latents(self, count, rng):
        return rng.standard_normal((count, self.latent_dim)).astype(np.float32)

    def copy(self):
        return Generator(self.net.copy(), self.latent_dim, self.image_shape)

    def save(self, path):
        nn.save(self.net, path, flags=nn.FLAG_GENERATOR, extra=self.image_shape)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            net, flags, extra = nn.loads(fh.read())
        if not flags & nn.FLAG_GENERATOR:
            raise ValueError(f"{path} is a classifier checkpoint, not a generator")
        return cls(net, net.input_shape[0], extra)


@dataclass
class AnchorSet:
    images: np.ndarray
    logits: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def as_dataset(self):
        return nn.Dataset(self.images, self.labels, self.logits)


def sample_anchors(gen, teacher, count, seed):
    """``count`` generator images with the teacher's logits and argmax labels."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = nn._rng(seed)
    images = gen.generate(gen.sample_latents(count, rng))
    logits = nn.forward(teacher, images)
    return AnchorSet(images, logits, logits.argmax(axis=1))


@dataclass
class DistillConfig:
    student_lr: float = 1e-3
    generator_lr: float = 1e-3
    batch_size: int = 64
    student_steps: int = 5  # per generator step
    onehot_weight: float = 1.0
    balance_weight: float = 5.0
    tv_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.student_lr <= 0 or self.generator_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.student_steps < 1:
            raise ValueError("batch_size and student_steps must be >= 1")


@dataclass
class DistillReport:
    discrepancy: list = field(default_factory=list)  # student-step l1 on fresh latents
    generator_loss: list = field(default_factory=list)
    diverged: bool = False
    steps_done: int = 0


def distill(teacher, latent_dim=64, steps=2000, cfg=None, student=None, chance_margin=0.05,
            probe=None):
    """Alternate student steps (minimise the teacher/student l1 logit gap on
    generated images) with generator steps (maximise it). Returns
    ``(generator, student, report)``; ``teacher`` is never modified.

    Both nets use Adam. Besides the adversarial gap the generator is pushed
    towards images the teacher labels confidently (one-hot CE), towards a
    balanced class mix (entropy of the batch-mean prediction) and optionally
    towards smooth images (total variation). ``probe`` is an optional labelled
    dataset used only to warn when the teacher is at chance.
    """
    if steps < 1:
        raise ValueError("distillation needs steps >= 1")
    cfg = cfg or DistillConfig()
    if probe is not None and nn.evaluate_accuracy(teacher, probe) <= 1.0 / teacher.num_classes + chance_margin:
        log.warning("teacher is at chance level; distillation is vacuous")
    rng = nn._rng(cfg.seed)
    gen = Generator.init(latent_dim, teacher.input_shape, seed=cfg.seed + 1)
    if student is None:
        student = nn.Model.init(teacher.layers, teacher.input_shape, seed=cfg.seed + 2)
    s_opt, g_opt = nn.Adam(cfg.student_lr), nn.Adam(cfg.generator_lr)
    report = DistillReport()
    step = 0
    try:
        for step in range(steps):
            x = gen.generate(gen.sample_latents(cfg.batch_size, rng))
            t_logits = nn.forward(teacher, x)
            g = nn.grad(student, x, nn.L1Logits(t_logits), input_grad=False)
            s_opt.step(student, g)
            report.discrepancy.append(g.loss)
            if (step + 1) % cfg.student_steps == 0:
                report.generator_loss.append(_generator_step(gen, teacher, student, rng, cfg, g_opt))
            report.steps_done = step + 1
    except nn.NumericError as exc:
        log.warning("distillation diverged at step %d: %s", step, exc)
        report.diverged = True
    return gen, student, report


def _softmax(logits):
    return np.exp(nn.log_softmax(logits.astype(np.float64)))


def _generator_step(gen, teacher, student, rng, cfg, opt):
    z = gen.sample_latents(cfg.batch_size, rng)
    g_trace = nn.forward_cached(gen.net, z)
    x = g_trace.output
    t_trace = nn.forward_cached(teacher, x)
    s_trace = nn.forward_cached(student, x)
    gap, d_s = nn.L1Logits(t_trace.output)(s_trace.output)
    B = len(x)
    # generator minimises -gap, so the gap gradients enter with flipped sign
    p = _softmax(t_trace.output)
    hot = p.copy()
    hot[np.arange(B), p.argmax(1)] -= 1.0
    pbar = p.mean(0)
    v = np.log(pbar + 1e-12) + 1.0
    d_t = d_s + cfg.onehot_weight * hot / B + cfg.balance_weight * p * (v - (p * v).sum(1, keepdims=True)) / B
    _, dx_t = nn.backward(teacher, t_trace, d_t.astype(np.float32))
    _, dx_s = nn.backward(student, s_trace, -d_s)
    dx = dx_t + dx_s
    if cfg.tv_weight:
        dy, dxx = np.sign(np.diff(x, axis=1)), np.sign(np.diff(x, axis=2))
        tv = np.zeros_like(x)
        tv[:, 1:] += dy
        tv[:, :-1] -= dy
        tv[:, :, 1:] += dxx
        tv[:, :, :-1] -= dxx
        dx = dx + cfg.tv_weight * tv / B
    grads, _ = nn.backward(gen.net, g_trace, dx, need_input_grad=False)
    opt.step(gen.net, grads)
    return -gap


def agreement(teacher, student, gen, count=1000, seed=12345):
    """Fraction of fresh anchors where student and teacher argmax agree."""
    anchors = sample_anchors(gen, teacher, count, seed)
    return float((nn.predict(student, anchors.images) == anchors.labels).mean())
