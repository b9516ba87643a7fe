"""Acceptance suite: one test per criterion, each recording a summary line.

The twenty-seed desk pipeline behind criteria 6 to 8 is computed once per
session (about half an hour on one core).
"""

import json
import math
import time

import mpmath
import numpy as np
import pytest

from acceptance_log import record
from gradcheck import LinearProbe, all_kinds_model, check
from wmbench import capacity, codec, experiment, injector, nn, verifier
from wmbench.capacity import CapacityParams

SEEDS = tuple(range(20))


# -- 1 ----------------------------------------------------------------------

def test_c01_gradient_fidelity():
    t0 = time.time()
    worst, checked, skipped = 0.0, 0, 0
    for seed in range(20):
        rng = np.random.Generator(np.random.Philox(seed))
        model = all_kinds_model(seed)
        x = rng.uniform(0, 1, size=(3, 4, 4, 1))
        for loss in (nn.CrossEntropy(rng.integers(0, 3, 3)), LinearProbe(rng.normal(size=(3, 3)))):
            w, c, s = check(model, x, loss)
            worst, checked, skipped = max(worst, w), checked + c, skipped + s
    elapsed = time.time() - t0
    kinds = {layer.kind for layer in all_kinds_model(0).layers}
    ok = worst < 1e-4 and elapsed < 60 and kinds == set(nn.LAYER_KINDS)
    record(1, "gradient fidelity", ok,
           f"max rel err {worst:.2e} over {checked} elements ({skipped} kink-skipped), "
           f"{len(kinds)} layer kinds, 20 seeds, {elapsed:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------

def test_c02_protocol_completeness(honest_pkg):
    t0 = time.time()
    vc = honest_pkg.verification_config(0.05)
    results = [verifier.verify(honest_pkg.model, verifier.build_evidence(honest_pkg.triggers, 10, kp),
                               honest_pkg.encoder, vc) for kp in range(0, 41)]
    elapsed = time.time() - t0
    passed = sum(r.passed for r in results)
    ok = passed == 41 and honest_pkg.N == 50 and honest_pkg.num_classes == 10 and elapsed < 60
    record(2, "protocol completeness", ok, f"{passed}/41 windows K'=0..40 pass (N=50, K=10), {elapsed:.1f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_c03_unambiguity(cfg, task, encoder):
    # independently trained, never watermarked: a different initialisation seed
    other = experiment.train_clean(cfg, task, seed=101)
    vc = verifier.VerificationConfig(10, tau=0.05)
    rng = np.random.Generator(np.random.Philox(33))
    passes = 0
    for trial in range(200):
        ts = codec.build_trigger_set(codec.build_sequence(f"owner-{trial}", 50), encoder, 10)
        ev = verifier.build_evidence(ts, 10, int(rng.integers(0, 41)))
        passes += verifier.verify(other, ev, encoder, vc).passed
    rate = passes / 200
    ok = rate <= 0.08
    record(3, "unambiguity", ok, f"pass rate {rate:.3f} over 200 honest-evidence trials on an unwatermarked model")
    assert ok


# -- 4 ----------------------------------------------------------------------

def test_c04_identity_preservation(honest_pkg):
    # rounds 1..t disclosed rows 1..K'+K; the next row must satisfy
    # u_{p-1} == reduce(u_p, candidate) with p = K'+K
    K, t = 10, 5
    exposed = verifier.build_evidence(honest_pkg.triggers, K, t - 1)
    u_prev, u_last = exposed.codes[-2], exposed.codes[-1]
    rng = np.random.Generator(np.random.Philox(44))
    successes = 0
    attempts = 2 ** 20
    block = 1 << 16
    for _ in range(attempts // block):
        raw = rng.integers(0, 256, size=(block, 32), dtype=np.uint8)
        for cand in raw:
            if codec.reduce(u_last, cand.tobytes()) == u_prev:
                successes += 1
    true_next = honest_pkg.triggers.codes[t - 1 + K]
    assert codec.reduce(u_last, true_next) == u_prev  # the link itself is satisfiable
    ok = successes == 0
    record(4, "identity preservation", ok, f"{successes} successes in {attempts} brute-force forgeries")
    assert ok


# -- 5 ----------------------------------------------------------------------

def _oracle_decision(acc, K, C, tau):
    mpmath.mp.dps = 50
    mu = mpmath.mpf(acc) / K
    sigma = mpmath.sqrt(mu * (1 - mu) / K)
    if sigma == 0:
        return mu > mpmath.mpf(1) / C, None
    phi = mpmath.ncdf((mpmath.mpf(1) / C - mu) / sigma)
    return phi <= tau, phi


def test_c05_statistical_exactness(honest_pkg):
    K, C, tau = 50, 10, 0.05
    ev = verifier.build_evidence(honest_pkg.triggers, K, 0)
    vc = verifier.VerificationConfig(C, tau)
    mismatches, worst = 0, 0.0
    for acc in range(K + 1):
        labels = ev.labels.copy()
        # relabelling a row breaks only its label condition
        labels[acc:] = (labels[acc:] + 1) % C
        res = verifier.verify(honest_pkg.model, verifier.Evidence(ev.codes, ev.images, labels), honest_pkg.encoder, vc)
        assert res.acc == acc
        want, phi = _oracle_decision(acc, K, C, tau)
        mismatches += res.passed != bool(want)
        if phi is not None:
            worst = max(worst, abs(res.statistic - float(phi)))
    ok = mismatches == 0 and worst < 1e-9
    record(5, "statistical test exactness", ok,
           f"{51 - mismatches}/51 decisions match the 50-digit oracle, max |Phi err| {worst:.1e}")
    assert ok


# -- 6 to 8: twenty-seed desk pipeline ------------------------------------------

@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    cfg = experiment.ExperimentConfig(seeds=SEEDS)
    t0 = time.time()
    results = [experiment.run_seed(cfg, s) for s in SEEDS]
    out = tmp_path_factory.mktemp("pipeline") / "seeds.json"
    out.write_text(json.dumps([r.__dict__ for r in results], default=float, indent=1))
    return results, time.time() - t0


def _stage_seconds(results, prefixes):
    return sum(v for r in results for k, v in r.timings.items() if k.startswith(prefixes))


def test_c06_functionality_ordering(pipeline):
    results, _ = pipeline
    med = {cell: experiment.median([r.cells[cell]["test_acc"] for r in results])
           for cell in results[0].cells}
    clean = experiment.median([r.clean_acc for r in results])
    orders = {b: med[f"A/{b}"] >= med[f"D/{b}"] >= med[f"B/{b}"] for b in injector.BACKDOORS}
    drop = {b: clean - med[f"A/{b}"] for b in injector.BACKDOORS}
    seconds = _stage_seconds(results, ("clean", "distill", "triggers", "inject"))
    ok = all(orders.values()) and all(d <= 0.05 for d in drop.values()) and seconds < 1800
    detail = "; ".join(
        f"{b}: A {med[f'A/{b}']:.4f} D {med[f'D/{b}']:.4f} B {med[f'B/{b}']:.4f} "
        f"(order {'ok' if orders[b] else 'violated'}, A drop {100 * drop[b]:.2f} pts)" for b in injector.BACKDOORS)
    record(6, "functionality-preservation ordering", ok,
           f"clean median {clean:.4f}; {detail}; injection path {seconds / 60:.1f} min")
    assert ok


def test_c07_persistency_orderings(pipeline):
    results, _ = pipeline
    chance = 1.0 / 10
    ft_t = [r.attacks["A/T"]["finetune_trigger"][-1] for r in results]
    ft_p = [r.attacks["A/P"]["finetune_trigger"][-1] for r in results]
    adv_t = [r.attacks["A/T"]["adv_trigger"][-1] for r in results]
    adv_p = [r.attacks["A/P"]["adv_trigger"][-1] for r in results]
    above = sum(t > chance for t in ft_t)
    post_ge = sum(p >= t for p, t in zip(ft_p, ft_t))
    adv_lt = sum(t < p for p, t in zip(adv_p, adv_t))
    ok = above >= 18 and post_ge >= 14 and adv_lt >= 14
    record(7, "persistency orderings", ok,
           f"fine-tune: trigger acc > 1/C in {above}/20, post >= plain in {post_ge}/20; "
           f"adversarial: plain < post in {adv_lt}/20")
    assert ok


def test_c08_pruning_ordering(pipeline):
    results, _ = pipeline
    sac = {c: [r.attacks[c]["prune_sacrifice"] for r in results] for c in ("A/T", "A/P")}
    sac_t, sac_p = experiment.median(sac["A/T"]), experiment.median(sac["A/P"])
    finite = {c: sum(math.isfinite(v) for v in vs) for c, vs in sac.items()}
    ok = sac_p > sac_t
    record(8, "pruning ordering", ok,
           f"median sacrifice post-trigger {sac_p:.4f} vs plain {sac_t:.4f} "
           f"(trigger acc driven below 1/C within the sweep in {finite['A/P']}/20 and {finite['A/T']}/20 seeds)")
    assert ok


# -- 9 ----------------------------------------------------------------------

MC_GRID = [  # (J, N, C, log2|U|, S)
    (4, 50, 10, 16, 8),
    (10, 50, 10, 16, 8),
    (4, 50, 2, 16, 32),
    (8, 100, 10, 16, 8),
    (20, 30, 5, 14, 2),
]


def test_c09_capacity_math():
    mu, _ = capacity.collision_moments(4, CapacityParams(50, 10, 16, 8))
    hand = 4 * 50 * 50 * 9 * 8 / (65536 * 10)
    toy_ok = abs(mu - hand) / hand < 1e-9
    worst_mean = worst_var = 0.0
    for J, N, C, L, S in MC_GRID:
        p = CapacityParams(N, C, L, S)
        mu_j, s2 = capacity.collision_moments(J, p)
        assert 1 <= mu_j <= 50 and s2 > 0
        m, v, _ = capacity.simulate_collisions(J, p, 10_000, seed=J * 1000 + N)
        worst_mean = max(worst_mean, abs(m - mu_j) / mu_j)
        worst_var = max(worst_var, abs(v - s2) / s2)
    monotone, tested = True, 0
    for N in (2, 5, 50):
        for C in (2, 10, 100):
            for S in (1, 8, 64):
                p = CapacityParams(N, C, 16, S)
                prev = 1.0
                for J in range(1, 400):
                    try:
                        cur = capacity.p_success(J, p)
                    except capacity.ApproximationError:
                        break
                    monotone &= cur <= prev
                    prev = cur
                    tested += 1
    ok = toy_ok and worst_mean < 0.05 and worst_var < 0.15 and monotone
    record(9, "capacity math", ok,
           f"toy mu {mu:.10f} (hand {hand:.10f}); MC worst rel err mean {worst_mean:.3f}, var {worst_var:.3f} "
           f"over {len(MC_GRID)} points; P_Success monotone over {tested} (params, J) points")
    assert ok


# -- 10 -----------------------------------------------------------------------

def _fingerprint(res):
    rows = [(r.image_ok, r.label_ok, r.predicted_ok, r.chain_ok, r.l1_distance.hex(), r.l2_distance.hex())
            for r in res.per_row]
    return (res.passed, res.acc, res.K, res.mu_hat.hex(), res.sigma_hat.hex(), res.statistic.hex(), rows)


def test_c10_round_trip(tmp_path, honest_pkg):
    ev = verifier.build_evidence(honest_pkg.triggers, 10, 7)
    before = verifier.verify(honest_pkg.model, ev, honest_pkg.encoder, honest_pkg.verification_config())
    injector.save_package(honest_pkg, tmp_path / "pkg")
    (tmp_path / "ev.json").write_text(json.dumps(verifier.evidence_document(ev)))
    pkg = injector.load_package(tmp_path / "pkg")
    ev2 = verifier.evidence_from_document(json.loads((tmp_path / "ev.json").read_text()), pkg.encoder.shape)
    after = verifier.verify(pkg.model, ev2, pkg.encoder, pkg.verification_config())
    # a second write of the loaded package is byte-identical
    injector.save_package(pkg, tmp_path / "pkg2")
    same_bytes = all((tmp_path / "pkg" / f).read_bytes() == (tmp_path / "pkg2" / f).read_bytes()
                     for f in ("model.wmdl", "triggers.json", "package.json"))
    ok = after.passed and _fingerprint(before) == _fingerprint(after) and same_bytes
    record(10, "round-trip persistence", ok,
           f"verify after reload {after.decision}, results bitwise identical: "
           f"{_fingerprint(before) == _fingerprint(after)}, rewritten files identical: {same_bytes}")
    assert ok
