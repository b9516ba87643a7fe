"""Command-line workbench.

Exit codes: 0 success / Pass, 1 verification Fail, 2 usage or input error,
3 injection stopped below the trigger-accuracy target, 4 clean model under
its accuracy floor.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, attacks, capacity, codec, dfd, experiment, injector, nn, report, verifier

log = logging.getLogger("wmbench")

EXIT_OK, EXIT_FAIL, EXIT_ERROR, EXIT_BELOW_TARGET, EXIT_FLOOR = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _load_config(args):
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    cfg = experiment.ExperimentConfig.from_dict(d)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg.validate()


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg, seed, extra=None):
    h = {"config_hash": cfg.hash(), "seed": seed, "version": __version__}
    h.update(extra or {})
    return h


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if hasattr(x, "item"):
        return x.item()
    raise TypeError(f"not serialisable: {type(x)}")


def _header_line(h):
    return " ".join(f"{k}={v}" for k, v in h.items())


# -- commands ----------------------------------------------------------------

def cmd_train_clean(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    task = experiment.load_task(cfg, seed)
    model = experiment.train_clean(cfg, task, seed)
    acc = nn.evaluate_accuracy(model, task.test)
    out = _out(args)
    nn.save(model, out / "clean.wmdl")
    _write_json(out / "clean.json", {**_header(cfg, seed), "test_acc": acc, "floor": cfg.clean_floor})
    print(f"test_acc={acc:.4f} floor={cfg.clean_floor} config_hash={cfg.hash()}")
    if acc < cfg.clean_floor:
        print(f"error: clean accuracy {acc:.4f} below floor {cfg.clean_floor}", file=sys.stderr)
        return EXIT_FLOOR
    return EXIT_OK


def cmd_distill(args):
    cfg = _load_config(args)
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be >= 1")
        cfg = replace(cfg, distill_steps=args.steps)
    seed = cfg.seeds[0]
    teacher = _load_model(args.model)
    task = experiment.load_task(cfg, seed)
    if tuple(teacher.input_shape) != tuple(task.image_shape):
        raise UsageError(f"model input {teacher.input_shape} does not match data {task.image_shape}")
    gen, student, rep = experiment.distill(cfg, teacher, task, seed)
    agree = dfd.agreement(teacher, student, gen, seed=seed + 7)
    out = _out(args)
    gen.save(out / "generator.wmdl")
    _write_json(out / "distill.json", {**_header(cfg, seed), "agreement": agree,
                                       "steps": rep.steps_done, "diverged": rep.diverged})
    print(f"agreement={agree:.4f} steps={rep.steps_done} config_hash={cfg.hash()}")
    return EXIT_ERROR if rep.diverged else EXIT_OK


def cmd_embed(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    clean = _load_model(args.model)
    gen = dfd.Generator.load(args.generator) if args.generator else None
    task = experiment.load_task(cfg, seed)
    if (args.scheme == "A" or args.backdoor == "P" or cfg.encoder == "generator-latent") and gen is None:
        raise UsageError("this configuration needs --generator")
    encoder = experiment.make_encoder(cfg, task, gen)
    icfg = experiment.injection_config(cfg, args.scheme, args.backdoor)
    pkg = injector.embed(clean, args.key, cfg.N, encoder, gen, task.train if args.scheme == "D" else None,
                         icfg, experiment.post_trigger_config(cfg), seed)
    pkg.meta.update(_header(cfg, seed))
    out = _out(args)
    injector.save_package(pkg, out)
    test_acc = nn.evaluate_accuracy(pkg.model, task.test)
    res = verifier.verify(pkg.model, verifier.build_evidence(pkg.triggers, cfg.K, 0), pkg.encoder,
                          pkg.verification_config(cfg.tau))
    _write_json(out / "embed.json", {**_header(cfg, seed), "test_acc": test_acc,
                                     "trigger_acc": pkg.meta["trigger_acc"], "epochs": pkg.meta["epochs"],
                                     "below_target": pkg.below_target, "first_window": res.decision})
    print(f"test_acc={test_acc:.4f} trigger_acc={pkg.meta['trigger_acc']:.4f} epochs={pkg.meta['epochs']} "
          f"first_window={res.decision} config_hash={cfg.hash()}")
    return EXIT_BELOW_TARGET if pkg.below_target else EXIT_OK


def cmd_evidence(args):
    pkg = _load_package(args.package)
    try:
        ev = verifier.build_evidence(pkg.triggers, args.K, args.K_prime)
    except verifier.ProtocolError as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).write_text(json.dumps(verifier.evidence_document(ev)))
    print(f"evidence K={ev.K} K_prime={ev.offset} -> {args.out}")
    return EXIT_OK


def cmd_verify(args):
    pkg = _load_package(args.package)
    model = _load_model(args.model) if args.model else pkg.model
    try:
        doc = json.loads(Path(args.evidence).read_text())
    except FileNotFoundError:
        raise UsageError(f"evidence file not found: {args.evidence}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"evidence {args.evidence} is not valid JSON: {exc}") from None
    try:
        ev = verifier.evidence_from_document(doc, pkg.encoder.shape)
        vcfg = pkg.verification_config(args.tau)
        if args.epsilon is not None:
            vcfg = verifier.VerificationConfig(vcfg.num_classes, args.tau, args.epsilon, "fuzzy")
        res = verifier.verify(model, ev, pkg.encoder, vcfg)
    except (verifier.ProtocolError, codec.CodecError) as exc:
        raise UsageError(str(exc)) from None
    t = res.tallies()
    print(f"decision={res.decision} acc={res.acc}/{res.K} mu_hat={res.mu_hat:.6f} "
          f"sigma_hat={res.sigma_hat:.6f} statistic={res.statistic:.6g} tau={vcfg.tau} mode={vcfg.match_mode}")
    print("tallies " + " ".join(f"{k}={v}" for k, v in t.items()))
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_attack(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    pkg = _load_package(args.package)
    task = experiment.load_task(cfg, seed)
    out = _out(args)
    h = _header(cfg, seed, {"attack": args.kind})
    chance = 1.0 / pkg.num_classes
    if args.kind == "finetune":
        epochs = cfg.finetune_epochs if args.epochs is None else args.epochs
        tc = nn.TrainConfig(cfg.finetune_lr, cfg.train_batch, 1, seed + 100)
        o = attacks.fine_tune_attack(pkg, task.holdout, epochs, tc, task.test)
        attacks.write_curves(out / "finetune.csv", o, _header_line(h))
        report.curves_figure(out / "finetune.png", o, "epoch", f"fine-tuning {h['config_hash']}")
        outcomes = [o]
    elif args.kind == "adversarial":
        epochs = cfg.adv_epochs if args.epochs is None else args.epochs
        c_adv = pkg.num_classes - 1 if args.c_adv is None else args.c_adv
        o = attacks.adversarial_tune_attack(pkg, pkg.encoder, c_adv, cfg.adv_W, epochs, seed + 200,
                                            task.test, cfg.adv_lr, data=task.holdout)
        attacks.write_curves(out / "adversarial.csv", o, _header_line(h))
        report.curves_figure(out / "adversarial.png", o, "epoch", f"adversarial tuning {h['config_hash']}")
        h["unseen_to_c_adv"] = attacks.unseen_trigger_rate(o.model_attacked, pkg.encoder, c_adv, 200, seed + 300)
        outcomes = [o]
    else:
        outcomes = attacks.prune_attack(pkg, cfg.prune_fractions, task.test)
        attacks.write_prune_table(out / "prune.csv", outcomes, _header_line(h))
        report.prune_figure(out / "prune.png", outcomes, chance, f"pruning {h['config_hash']}")
        h["sacrifice"] = attacks.pruning_sacrifice(outcomes, chance)
    last = outcomes[-1]
    v = last.verification_after
    h.update({"final_normal_acc": last.normal_acc_curve[-1], "final_trigger_acc": last.trigger_acc_curve[-1],
              "verification_after": None if v is None else {"decision": v.decision, "acc": v.acc, "K": v.K,
                                                            "statistic": v.statistic}})
    _write_json(out / f"{args.kind}.json", h)
    print(f"{args.kind}: normal={h['final_normal_acc']:.4f} trigger={h['final_trigger_acc']:.4f} "
          f"verify={v.decision if v else 'n/a'} config_hash={h['config_hash']}")
    return EXIT_OK


def cmd_capacity(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    out = _out(args)
    p = capacity.CapacityParams(args.N, args.C, args.log2_U, args.S_eps, args.zeta, args.gamma)
    h = _header(cfg, seed, {"N": p.N, "C": p.C, "log2_U": p.log2_U, "S_eps": p.S_eps, "zeta": p.zeta})
    n_hat = args.n_hat
    if args.sweep:
        task = experiment.load_task(cfg, seed)
        clean = _load_model(args.model) if args.model else experiment.train_clean(cfg, task, seed)
        gen = dfd.Generator.load(args.generator) if args.generator else experiment.distill(cfg, clean, task, seed)[0]
        encoder = experiment.make_encoder(cfg, task, gen)
        icfg = experiment.injection_config(cfg, "A", "P")

        def build(n):
            return injector.embed(clean, experiment.owner_key(seed), n, encoder, gen, None, icfg,
                                  experiment.post_trigger_config(cfg), seed).model

        n_hat, curve = capacity.n_hat_sweep(build, lambda m: nn.evaluate_accuracy(m, task.test),
                                            p.gamma, args.batch, args.max_n)
        with open(out / "n_hat.csv", "w", newline="") as fh:
            fh.write(f"# {_header_line(h)}\n")
            w = csv.writer(fh)
            w.writerow(["N", "test_acc"])
            w.writerows(curve)
        report.nhat_figure(out / "n_hat.png", curve, p.gamma, f"n_hat sweep {h['config_hash']}")
    if n_hat is None:
        n_hat = 0
    rep = capacity.capacity_bound(p, n_hat)
    empirical = {}
    if args.simulate:
        for J in args.simulate:
            mean, var, _ = capacity.simulate_collisions(J, p, args.trials, seed + J)
            empirical[J] = (mean, var)
    capacity.write_csv(out / "capacity.csv", rep, empirical, _header_line(h))
    report.capacity_figure(out / "capacity.png", rep, empirical, h["config_hash"])
    h.update({"J_star": rep.J_star, "n_hat": rep.n_hat, "bound": rep.bound,
              "keys_embeddable": rep.keys_embeddable, "notes": rep.notes})
    _write_json(out / "capacity.json", h)
    print(f"J_star={rep.J_star} n_hat={rep.n_hat} bound={rep.bound:.4g} config_hash={h['config_hash']}")
    for note in rep.notes:
        print(f"note: {note}")
    return EXIT_OK


def cmd_experiment(args):
    cfg = _load_config(args) if args.seed is not None else _load_config_all_seeds(args)
    out = _out(args)
    rows, per_cell, clean = [], {}, []
    for seed in cfg.seeds:
        res = experiment.run_seed(cfg, seed)
        clean.append(res.clean_acc)
        for cell, m in res.cells.items():
            per_cell.setdefault(cell, []).append(m["test_acc"])
            rows.append({"seed": seed, "cell": cell, "clean_acc": res.clean_acc, **m})
        _write_json(out / f"seed_{seed}.json", {**_header(cfg, seed), **asdict(res)})
        print(f"seed {seed}: clean={res.clean_acc:.4f} " +
              " ".join(f"{c}={m['test_acc']:.4f}" for c, m in res.cells.items()) + f" ({res.seconds:.0f}s)")
    h = _header(cfg, list(cfg.seeds))
    with open(out / "cells.csv", "w", newline="") as fh:
        fh.write(f"# {_header_line(h)}\n")
        w = csv.DictWriter(fh, fieldnames=["seed", "cell", "clean_acc", "test_acc", "trigger_acc",
                                           "epochs", "below_target", "epsilon"])
        w.writeheader()
        w.writerows(rows)
    report.cells_figure(out / "cells.png", per_cell, clean, f"test accuracy by cell {h['config_hash']}")
    h["median_test_acc"] = {c: experiment.median(v) for c, v in per_cell.items()}
    h["median_clean_acc"] = experiment.median(clean)
    _write_json(out / "summary.json", h)
    return EXIT_OK


def _load_config_all_seeds(args):
    args_seedless = argparse.Namespace(**{**vars(args), "seed": None})
    return _load_config(args_seedless)


def _load_model(path):
    try:
        return nn.load(path)
    except FileNotFoundError:
        raise UsageError(f"model checkpoint not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None


def _load_package(path):
    try:
        return injector.load_package(path)
    except FileNotFoundError as exc:
        raise UsageError(f"package incomplete: {exc}") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad package {path}: {exc}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="wmbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train-clean", help="train the clean model")
    common(sp)
    sp.set_defaults(func=cmd_train_clean)

    sp = sub.add_parser("distill", help="data-free distillation; writes the anchor generator")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("embed", help="build triggers and inject them; writes a package directory")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--generator")
    sp.add_argument("--key", required=True)
    sp.add_argument("--scheme", choices=injector.SCHEMES, default="A")
    sp.add_argument("--backdoor", choices=injector.BACKDOORS, default="T")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("evidence", help="write the evidence document for one window")
    sp.add_argument("--package", required=True)
    sp.add_argument("--K", type=int, default=10)
    sp.add_argument("--K-prime", dest="K_prime", type=int, default=0)
    sp.add_argument("--out", required=True, help="evidence JSON path")
    sp.set_defaults(func=cmd_evidence)

    sp = sub.add_parser("verify", help="ownership verification; exit 0 Pass, 1 Fail")
    sp.add_argument("--package", required=True, help="package giving encoder, C and epsilon")
    sp.add_argument("--evidence", required=True)
    sp.add_argument("--model", help="suspect model (default: the package's own)")
    sp.add_argument("--tau", type=float, default=0.05)
    sp.add_argument("--epsilon", type=float, help="force fuzzy matching with this epsilon")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attack", help="fine-tune, adversarial-tune or prune a package")
    common(sp)
    sp.add_argument("--package", required=True)
    sp.add_argument("--kind", choices=("finetune", "adversarial", "prune"), required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--c-adv", dest="c_adv", type=int)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("capacity", help="capacity analysis (analytic, Monte Carlo, N-hat sweep)")
    common(sp)
    sp.add_argument("--N", type=int, default=50)
    sp.add_argument("--C", type=int, default=10)
    sp.add_argument("--log2-U", dest="log2_U", type=float, default=16)
    sp.add_argument("--S-eps", dest="S_eps", type=int, default=8)
    sp.add_argument("--zeta", type=float, default=0.95)
    sp.add_argument("--gamma", type=float, default=0.0)
    sp.add_argument("--n-hat", dest="n_hat", type=int)
    sp.add_argument("--simulate", type=int, nargs="*", help="J values to simulate")
    sp.add_argument("--trials", type=int, default=10_000)
    sp.add_argument("--sweep", action="store_true", help="measure N-hat by injecting post-triggers")
    sp.add_argument("--model")
    sp.add_argument("--generator")
    sp.add_argument("--batch", type=int, default=50)
    sp.add_argument("--max-n", dest="max_n", type=int, default=1000)
    sp.set_defaults(func=cmd_capacity)

    sp = sub.add_parser("experiment", help="full per-seed pipeline over the configured cells")
    common(sp)
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, experiment.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
