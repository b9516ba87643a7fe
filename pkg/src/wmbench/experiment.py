"""Experiment configuration and the per-seed desk pipeline: clean model,
distillation, injection under every requested (scheme, backdoor) cell, and
the attack suite on the anchor-injected packages.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import attacks, codec, data, dfd, injector, nn

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "builtin"  # or "idx"
    idx_train: tuple = ()  # (images, labels) paths
    idx_test: tuple = ()
    idx_holdout: tuple = ()
    noise: float = 0.25
    hidden: int = 64
    encoder: str = "seeded-noise"
    cells: tuple = tuple((s, b) for b in ("T", "P") for s in ("B", "D", "A"))
    N: int = 50
    K: int = 10
    lambda1: float = 0.5
    lambda2: float = 5.0
    S: int = 500
    Q: int = 30
    R: int = 100
    tau: float = 0.05
    epsilon_mode: str = "calibrated"
    seeds: tuple = (0,)
    train_lr: float = 0.05
    train_batch: int = 32
    train_epochs: int = 10
    clean_floor: float = 0.9
    distill_steps: int = 2000
    latent_dim: int = 64
    inject_lr: float = 1e-3
    max_epochs: int = 400
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    adv_W: int = 500
    adv_epochs: int = 10
    adv_lr: float = 0.01
    prune_fractions: tuple = tuple(round(0.05 * i, 2) for i in range(20)) + (0.97, 0.99)
    attacks: bool = True

    def validate(self):
        if self.dataset not in ("builtin", "idx"):
            raise ConfigError(f"dataset must be builtin or idx, got {self.dataset!r}")
        if self.dataset == "idx" and not (len(self.idx_train) == 2 and len(self.idx_test) == 2):
            raise ConfigError("idx dataset needs idx_train and idx_test as [images, labels]")
        if self.encoder not in codec.ENCODER_VARIANTS:
            raise ConfigError(f"encoder must be one of {codec.ENCODER_VARIANTS}")
        for cell in self.cells:
            if len(cell) != 2 or cell[0] not in injector.SCHEMES or cell[1] not in injector.BACKDOORS:
                raise ConfigError(f"cell {cell!r} is not one of the 3x2 (scheme, backdoor) grid")
        if not 3 <= self.K <= self.N:
            raise ConfigError("need 3 <= K <= N")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.epsilon_mode not in ("calibrated",) and not _is_number(self.epsilon_mode):
            raise ConfigError("epsilon_mode is 'calibrated' or a number")
        if min(self.lambda1, self.lambda2, self.S) < 0 or self.Q < 0 or self.R < 1:
            raise ConfigError("lambda1, lambda2, S, Q must be >= 0 and R >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.distill_steps < 1:
            raise ConfigError("distill_steps must be >= 1")
        if sorted(self.prune_fractions) != list(self.prune_fractions) or \
                any(not 0 <= f < 1 for f in self.prune_fractions):
            raise ConfigError("prune_fractions must be ascending values in [0, 1)")
        return self

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("idx_train", "idx_test", "idx_holdout", "seeds", "prune_fractions"):
            if k in d:
                d[k] = tuple(d[k])
        if "cells" in d:
            d["cells"] = tuple(tuple(c) for c in d["cells"])
        return cls(**d)

    def hash(self):
        return config_hash(self.to_dict())


def _is_number(x):
    try:
        float(x)
        return True
    except (TypeError, ValueError):
        return False


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_task(cfg, seed):
    if cfg.dataset == "builtin":
        return data.synthetic_task(seed, data.SyntheticTaskSpec(noise=cfg.noise))
    train = data.load_idx_dataset(*cfg.idx_train)
    test = data.load_idx_dataset(*cfg.idx_test)
    holdout = data.load_idx_dataset(*cfg.idx_holdout) if cfg.idx_holdout else test
    return data.TaskData(train, test, holdout)


def train_clean(cfg, task, seed):
    layers = nn.desk_architecture(task.num_classes, task.image_shape, cfg.hidden)
    model = nn.Model.init(layers, task.image_shape, seed)
    tc = nn.TrainConfig(cfg.train_lr, cfg.train_batch, cfg.train_epochs, seed)
    report = nn.train(model, task.train, tc)
    if report.diverged:
        raise nn.NumericError("clean training diverged")
    return model


def distill(cfg, clean, task, seed):
    gen, student, rep = dfd.distill(clean, cfg.latent_dim, cfg.distill_steps,
                                    dfd.DistillConfig(seed=seed), probe=task.test)
    return gen, student, rep


def make_encoder(cfg, task, gen):
    return codec.EncoderSpec(cfg.encoder, task.image_shape, generator=gen if cfg.encoder == "generator-latent" else None)


def post_trigger_config(cfg):
    return injector.PostTriggerConfig(lambda1=cfg.lambda1, Q=cfg.Q, R=cfg.R)


def injection_config(cfg, scheme, backdoor):
    return injector.InjectionConfig(scheme, backdoor, cfg.lambda2, cfg.S,
                                    max_epochs=cfg.max_epochs, learning_rate=cfg.inject_lr)


def owner_key(seed):
    return f"desk-owner-{seed}"


@dataclass
class SeedResult:
    seed: int
    clean_acc: float
    agreement: float
    cells: dict = field(default_factory=dict)  # "A/T" -> metrics
    attacks: dict = field(default_factory=dict)  # "A/T" -> metrics
    seconds: float = 0.0
    timings: dict = field(default_factory=dict)  # stage -> seconds


def run_seed(cfg, seed, keep=None):
    """Full pipeline for one seed; ``keep`` (a dict) receives the packages."""
    t0 = time.time()
    task = load_task(cfg, seed)
    clean = train_clean(cfg, task, seed)
    clean_acc = nn.evaluate_accuracy(clean, task.test)
    t_clean = time.time() - t0
    gen, student, _ = distill(cfg, clean, task, seed)
    res = SeedResult(seed, clean_acc, dfd.agreement(clean, student, gen, seed=seed + 7))
    res.timings["clean"] = t_clean
    res.timings["distill"] = time.time() - t0 - t_clean
    encoder = make_encoder(cfg, task, gen)
    pt_cfg = post_trigger_config(cfg)
    prepared = {}
    for scheme, backdoor in cfg.cells:
        if backdoor not in prepared:
            t1 = time.time()
            prepared[backdoor] = injector.prepare_triggers(clean, owner_key(seed), cfg.N, encoder, backdoor,
                                                           gen, pt_cfg, seed)
            res.timings[f"triggers_{backdoor}"] = time.time() - t1
        t1 = time.time()
        pkg = injector.embed(clean, owner_key(seed), cfg.N, encoder, gen, task.train,
                             injection_config(cfg, scheme, backdoor), pt_cfg, seed, prepared[backdoor])
        res.timings[f"inject_{scheme}/{backdoor}"] = time.time() - t1
        cell = f"{scheme}/{backdoor}"
        res.cells[cell] = {
            "test_acc": nn.evaluate_accuracy(pkg.model, task.test),
            "trigger_acc": pkg.meta["trigger_acc"], "epochs": pkg.meta["epochs"],
            "below_target": pkg.below_target, "epsilon": pkg.meta.get("epsilon", 0.0),
        }
        if keep is not None:
            keep[cell] = pkg
        if cfg.attacks and scheme == "A":
            t1 = time.time()
            res.attacks[cell] = attack_suite(cfg, pkg, task, seed)
            res.timings[f"attacks_{cell}"] = time.time() - t1
    res.seconds = time.time() - t0
    return res


def attack_suite(cfg, pkg, task, seed):
    C = pkg.num_classes
    chance = 1.0 / C
    tc = nn.TrainConfig(cfg.finetune_lr, cfg.train_batch, 1, seed + 100)
    ft = attacks.fine_tune_attack(pkg, task.holdout, cfg.finetune_epochs, tc, task.test)
    adv = attacks.adversarial_tune_attack(pkg, pkg.encoder, C - 1, cfg.adv_W, cfg.adv_epochs,
                                          seed + 200, task.test, cfg.adv_lr, data=task.holdout)
    pr = attacks.prune_attack(pkg, cfg.prune_fractions, task.test)
    return {
        "finetune_normal": ft.normal_acc_curve, "finetune_trigger": ft.trigger_acc_curve,
        "adv_normal": adv.normal_acc_curve, "adv_trigger": adv.trigger_acc_curve,
        "adv_unseen_rate": attacks.unseen_trigger_rate(adv.model_attacked, pkg.encoder, C - 1, 200, seed + 300),
        "adv_clean_to_cadv": float((nn.predict(adv.model_attacked, task.test.images) == C - 1).mean()),
        "prune_fraction": [o.extra["fraction"] for o in pr],
        "prune_normal": [o.normal_acc_curve[-1] for o in pr],
        "prune_trigger": [o.trigger_acc_curve[-1] for o in pr],
        "prune_sacrifice": attacks.pruning_sacrifice(pr, chance),
    }


def median(values):
    return float(np.median(np.asarray(values, dtype=np.float64)))
