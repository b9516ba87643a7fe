"""Post-trigger generation and watermark injection.

Injection schemes: ``B`` triggers only, ``D`` triggers plus cross-entropy on
S training samples, ``A`` triggers plus an l1 logit-matching term on S
generator anchors. Backdoor categories: ``T`` plain triggers, ``P``
post-triggers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec, nn
from .dfd import Generator
from .verifier import VerificationConfig, pixel_l1

log = logging.getLogger(__name__)

SCHEMES = ("B", "D", "A")
BACKDOORS = ("T", "P")


class InjectionError(RuntimeError):
    pass


@dataclass
class PostTriggerConfig:
    lambda1: float = 0.5
    Q: int = 30
    R: int = 100
    pixel_steps: int = 20
    pixel_lr: float = 0.05
    finetune_epochs: int = 5  # full-batch SGD steps for each of the two fine-tunes
    finetune_lr: float = 0.01

    def __post_init__(self):
        if self.Q < 0:
            raise ValueError("Q must be >= 0")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.pixel_lr <= 0:
            raise ValueError("pixel_lr must be > 0")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")


def _finetune(model, images, target, steps, lr, loss):
    for _ in range(steps):
        g = nn.grad(model, images, loss(target), input_grad=False)
        nn.sgd_step(model, g, lr)


def generate_post_triggers(clean, gen, triggers, labels, cfg, seed, return_model=False):
    """Alternating post-trigger search for a batch of triggers.

    Each round q fine-tunes a fresh copy of ``clean`` on the current
    post-triggers, then on R anchors labelled by ``clean``; the post-triggers
    then take ``pixel_steps`` gradient steps on
    ``CE(M_hat(P), label) + lambda1 * ||P - T||^2``. The CE term is summed over
    the batch so every image follows its own gradient. With ``return_model``
    the last round's fine-tuned model (None when no round ran) is returned too.
    """
    T = np.asarray(triggers, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    P = T.copy()
    m = None
    if cfg.Q == 0 or len(T) == 0:
        return (P, m) if return_model else P
    rng = nn._rng(seed)
    lr, lam = cfg.pixel_lr, cfg.lambda1
    for q in range(cfg.Q):
        try:
            m = clean.copy()
            _finetune(m, P, labels, cfg.finetune_epochs, cfg.finetune_lr, nn.CrossEntropy)
            ax = gen.generate(gen.sample_latents(cfg.R, rng))
            _finetune(m, ax, nn.forward(clean, ax), cfg.finetune_epochs, cfg.finetune_lr,
                      nn.L1Logits)
        except nn.NumericError as exc:
            raise InjectionError(f"fine-tune diverged in round q={q + 1}: {exc}") from exc
        for _ in range(cfg.pixel_steps):
            g = nn.grad(m, P, nn.CrossEntropy(labels, reduction="sum")).input
            # the quadratic proximity term is taken as an exact proximal step,
            # which stays stable for very large lambda1
            P = (P - lr * g + 2 * lr * lam * T) / (1 + 2 * lr * lam)
            P = np.clip(P, 0.0, 1.0).astype(np.float32)
    return (P, m) if return_model else P


def generate_post_trigger(clean, gen, trigger, label, cfg, seed):
    return generate_post_triggers(clean, gen, np.asarray(trigger)[None], [label], cfg, seed)[0]


# -- injection --------------------------------------------------------------

@dataclass
class InjectionConfig:
    scheme: str = "A"
    backdoor: str = "T"
    lambda2: float = 5.0
    S: int = 500
    trigger_acc_target: float = 0.9
    max_epochs: int = 400
    learning_rate: float = 1e-3
    batch_size: int = 100  # anchors or training samples per step

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.backdoor not in BACKDOORS:
            raise ValueError(f"backdoor must be one of {BACKDOORS}")
        if self.S < 0 or self.lambda2 < 0:
            raise ValueError("S and lambda2 must be >= 0")
        if not 0.0 < self.trigger_acc_target <= 1.0:
            raise ValueError("trigger_acc_target must lie in (0, 1]")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")


@dataclass
class WatermarkPackage:
    model: nn.Model
    triggers: codec.TriggerSet  # post-trigger images when backdoor is P
    encoder: codec.EncoderSpec
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return len(self.triggers)

    @property
    def below_target(self):
        return bool(self.meta.get("below_target", False))

    def verification_config(self, tau=0.05):
        if self.meta.get("backdoor") == "P":
            return VerificationConfig(self.num_classes, tau, self.meta["epsilon"], "fuzzy")
        return VerificationConfig(self.num_classes, tau)

    def trigger_accuracy(self, model=None):
        m = model or self.model
        return nn.accuracy(m, self.triggers.images, self.triggers.labels)


def _trigger_acc(model, images, labels):
    return 1.0 if len(labels) == 0 else nn.accuracy(model, images, labels)


def inject(clean, triggers, gen=None, train_data=None, cfg=None, seed=0, encoder=None):
    """Fine-tune a copy of ``clean`` until the trigger set is learned.

    Losses are averaged rather than summed: mean CE over the triggers plus
    ``lambda2`` times the batch mean of the regulariser (mean absolute logit
    gap to ``clean`` for A, CE for D). An epoch is ``ceil(S / batch_size)``
    steps; anchor latents are redrawn each epoch and their clean logits
    computed once per epoch.
    """
    cfg = cfg or InjectionConfig()
    if cfg.scheme == "A" and gen is None:
        raise ValueError("scheme A needs a generator")
    if cfg.scheme == "D" and train_data is None:
        raise ValueError("scheme D needs training data")
    rng = nn._rng(seed)
    model = clean.copy()
    opt = nn.Adam(cfg.learning_rate)
    images, labels = triggers.images, triggers.labels
    steps_per_epoch = max(1, -(-cfg.S // cfg.batch_size))
    if cfg.scheme == "D":
        pool = train_data.subset(rng.choice(len(train_data), min(cfg.S, len(train_data)), replace=False))
    history = []
    acc = _trigger_acc(model, images, labels)
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.scheme == "A" and cfg.S:
            ax = gen.generate(gen.sample_latents(cfg.S, rng))
            a_logits = nn.forward(clean, ax)
        elif cfg.scheme == "D":
            order = rng.permutation(len(pool))
        for s in range(steps_per_epoch):
            sl = slice(s * cfg.batch_size, (s + 1) * cfg.batch_size)
            grads = None
            if len(labels):
                grads = nn.grad(model, images, nn.CrossEntropy(labels), input_grad=False).params
            extra = None
            if cfg.scheme == "A" and cfg.S:
                extra = nn.grad(model, ax[sl], nn.L1Logits(a_logits[sl]), input_grad=False)
            elif cfg.scheme == "D" and len(pool):
                idx = order[sl]
                extra = nn.grad(model, pool.images[idx], nn.CrossEntropy(pool.labels[idx]), input_grad=False)
            if extra is not None:
                scaled = [cfg.lambda2 * g for g in extra.params]
                grads = scaled if grads is None else nn.add_scaled(grads, extra.params, cfg.lambda2)
            if grads is not None:
                opt.step(model, grads)
        acc = _trigger_acc(model, images, labels)
        history.append(acc)
        if acc >= cfg.trigger_acc_target:
            break
    below = acc < cfg.trigger_acc_target
    if below:
        log.warning("trigger accuracy %.3f below target %.2f after %d epochs", acc, cfg.trigger_acc_target, epoch)
    meta = {
        "scheme": cfg.scheme, "backdoor": cfg.backdoor, "lambda2": cfg.lambda2, "S": cfg.S,
        "trigger_acc_target": cfg.trigger_acc_target, "seed": seed, "epochs": epoch,
        "trigger_acc": acc, "below_target": bool(below), "trigger_acc_history": history,
    }
    return WatermarkPackage(model, triggers, encoder, clean.num_classes, meta)


def calibrate_epsilon(triggers, post_triggers):
    """Largest per-pixel mean l1 distance between a trigger and its post-trigger."""
    if len(triggers) == 0:
        return 0.0
    return max(pixel_l1(t, p) for t, p in zip(triggers, post_triggers))


def prepare_triggers(clean, key, N, encoder, backdoor="T", gen=None, pt_cfg=None, seed=0):
    """Trigger set for ``key`` plus package metadata; post-triggers for ``P``.

    Returned separately from :func:`inject` so several schemes can share one
    (costly) post-trigger generation.
    """
    C = clean.num_classes
    seq = codec.build_sequence(key, N)
    triggers = codec.build_trigger_set(seq, encoder, C)
    extra = {"N": N}
    if backdoor == "P":
        if gen is None:
            raise ValueError("post-triggers need a generator")
        pt_cfg = pt_cfg or PostTriggerConfig()
        post = generate_post_triggers(clean, gen, triggers.images, triggers.labels, pt_cfg, seed)
        extra["epsilon"] = calibrate_epsilon(triggers.images, post)
        extra["post_trigger"] = asdict(pt_cfg)
        triggers = triggers.replace_images(post)
    return triggers, extra


def embed(clean, key, N, encoder, gen=None, train_data=None, cfg=None, pt_cfg=None, seed=0, prepared=None):
    """Code sequence, triggers (or post-triggers) and injection in one call.

    ``prepared`` takes the output of :func:`prepare_triggers` to skip
    regenerating the trigger set.
    """
    cfg = cfg or InjectionConfig()
    if prepared is None:
        prepared = prepare_triggers(clean, key, N, encoder, cfg.backdoor, gen, pt_cfg, seed)
    triggers, extra = prepared
    pkg = inject(clean, triggers, gen, train_data, cfg, seed, encoder)
    pkg.meta.update(extra)
    return pkg


# -- persistence ------------------------------------------------------------

def save_package(pkg, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nn.save(pkg.model, d / "model.wmdl")
    if pkg.encoder.generator is not None:
        pkg.encoder.generator.save(d / "encoder_generator.wmdl")
    (d / "triggers.json").write_text(json.dumps(codec.trigger_set_document(pkg.triggers)))
    doc = {"num_classes": pkg.num_classes, "encoder": pkg.encoder.to_dict(), "meta": pkg.meta}
    (d / "package.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_package(directory):
    d = Path(directory)
    doc = json.loads((d / "package.json").read_text())
    gen_path = d / "encoder_generator.wmdl"
    gen = Generator.load(gen_path) if gen_path.exists() else None
    encoder = codec.EncoderSpec.from_dict(doc["encoder"], gen)
    triggers = codec.trigger_set_from_document(json.loads((d / "triggers.json").read_text()), encoder.shape)
    return WatermarkPackage(nn.load(d / "model.wmdl"), triggers, encoder, doc["num_classes"], doc["meta"])
