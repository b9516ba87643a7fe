"""Attacks on a watermarked model: fine-tuning, adversarial tuning with
forged triggers, and global magnitude pruning. The package is never mutated;
every attack works on a copy of its model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import codec, nn
from .verifier import build_evidence, verify


@dataclass
class AttackOutcome:
    model_attacked: nn.Model
    normal_acc_curve: list
    trigger_acc_curve: list
    verification_after: object = None
    extra: dict = field(default_factory=dict)


def _verify_full(pkg, model, tau=0.05):
    if pkg.N < 3:
        return None
    ev = build_evidence(pkg.triggers, pkg.N, 0)
    return verify(model, ev, pkg.encoder, pkg.verification_config(tau))


def _point(pkg, model, eval_data):
    return nn.evaluate_accuracy(model, eval_data), pkg.trigger_accuracy(model)


def fine_tune_attack(pkg, data, epochs, cfg, eval_data):
    """Plain CE training on ``data``; curves hold epoch 0 plus one point per epoch."""
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    model = pkg.model.copy()
    normal, trig = zip(*[_point(pkg, model, eval_data)])
    normal, trig = list(normal), list(trig)
    for e in range(epochs):
        nn.train(model, data, replace(cfg, epochs=1, seed=cfg.seed + e))
        n, t = _point(pkg, model, eval_data)
        normal.append(n)
        trig.append(t)
    return AttackOutcome(model, normal, trig, _verify_full(pkg, model))


def forge_triggers(encoder, c_adv, W, seed):
    codes = codec.random_codes(W, seed)
    return codec.encode_many(encoder, codes), np.full(W, c_adv, dtype=np.int64)


def adversarial_tune_attack(pkg, encoder, c_adv, W, epochs, seed, eval_data, lr=0.01, batch_size=64,
                            data=None):
    """Teach the model to send any encoder output to ``c_adv``.

    The attacker knows the encoder but not the key, so the W forged codes are
    random. One epoch is a shuffled pass over the forged set, joined with the
    attacker's own clean ``data`` when given so normal accuracy survives.
    """
    if not 0 <= c_adv < pkg.num_classes:
        raise ValueError(f"c_adv must lie in [0, {pkg.num_classes})")
    if W < 0 or epochs < 0:
        raise ValueError("W and epochs must be >= 0")
    model = pkg.model.copy()
    normal, trig = [], []
    n, t = _point(pkg, model, eval_data)
    normal.append(n)
    trig.append(t)
    if W > 0:
        images, labels = forge_triggers(encoder, c_adv, W, seed)
        forged = nn.Dataset(images, labels)
        if data is not None:
            forged = nn.Dataset(np.concatenate([images, data.images]), np.concatenate([labels, data.labels]))
        tc = nn.TrainConfig(learning_rate=lr, batch_size=batch_size, epochs=1, seed=seed)
        for e in range(epochs):
            nn.train(model, forged, replace(tc, seed=seed + e))
            n, t = _point(pkg, model, eval_data)
            normal.append(n)
            trig.append(t)
    return AttackOutcome(model, normal, trig, _verify_full(pkg, model), {"c_adv": c_adv, "W": W})


def unseen_trigger_rate(model, encoder, c_adv, count, seed):
    """Share of fresh, never-forged triggers the model sends to ``c_adv``."""
    images, _ = forge_triggers(encoder, c_adv, count, seed)
    return float((nn.predict(model, images) == c_adv).mean())


def prune(model, fraction):
    """Copy of ``model`` with the smallest-magnitude ``fraction`` of all
    weights (across layers) set to zero. Biases are left alone."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("pruning fraction must lie in [0, 1)")
    out = model.copy()
    idx = [i for i, p in enumerate(out.params) if p.ndim > 1]
    flat = np.concatenate([np.abs(out.params[i]).ravel() for i in idx])
    k = int(math.floor(fraction * flat.size))
    if k == 0:
        return out
    # rank-based cut so exactly k weights go, ties broken by position
    order = np.argsort(flat, kind="stable")
    mask = np.ones(flat.size, dtype=bool)
    mask[order[:k]] = False
    pos = 0
    for i in idx:
        n = out.params[i].size
        out.params[i] = out.params[i] * mask[pos:pos + n].reshape(out.params[i].shape)
        pos += n
    return out


def prune_attack(pkg, fractions, eval_data):
    fractions = list(fractions)
    if fractions != sorted(fractions):
        raise ValueError("fractions must be sorted ascending")
    outcomes = []
    for f in fractions:
        m = prune(pkg.model, f)
        n, t = _point(pkg, m, eval_data)
        outcomes.append(AttackOutcome(m, [n], [t], _verify_full(pkg, m), {"fraction": f}))
    return outcomes


def pruning_sacrifice(outcomes, chance):
    """Normal-accuracy loss at the first fraction where trigger accuracy falls
    below ``chance``; ``inf`` if it never does within the sweep."""
    base = outcomes[0].normal_acc_curve[0]
    for o in outcomes:
        if o.trigger_acc_curve[-1] < chance:
            return base - o.normal_acc_curve[-1]
    return math.inf


def write_curves(path, outcome, header=None, index_name="epoch"):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow([index_name, "normal_acc", "trigger_acc"])
        for i, (n, t) in enumerate(zip(outcome.normal_acc_curve, outcome.trigger_acc_curve)):
            w.writerow([i, repr(n), repr(t)])


def write_prune_table(path, outcomes, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["fraction", "normal_acc", "trigger_acc"])
        for o in outcomes:
            w.writerow([o.extra["fraction"], repr(o.normal_acc_curve[-1]), repr(o.trigger_acc_curve[-1])])
