"""Evidence windows and the ownership-verification test.

An evidence window is K consecutive rows ``(code, image, label)`` taken from
positions ``K'+1 .. K'+K`` of the trigger set. A row counts toward ``acc``
when the image matches the encoder, the label matches the label map, the
suspect model predicts the label, and (except for the last two rows) the code
is the reduction of its two successors. Ownership is accepted when the
one-sided normal test against chance level 1/C is significant at ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import codec, nn


class ProtocolError(ValueError):
    pass


class ProtocolExhausted(ProtocolError):
    pass


@dataclass
class Evidence:
    codes: list
    images: np.ndarray
    labels: np.ndarray
    offset: int = 0

    def __post_init__(self):
        if len(self.codes) < 1:
            raise ProtocolError("evidence needs K >= 1 rows")
        if not len(self.codes) == len(self.images) == len(self.labels):
            raise ProtocolError("evidence columns have different lengths")
        if self.offset < 0:
            raise ProtocolError("K' must be >= 0")

    @property
    def K(self):
        return len(self.codes)

    def rows(self):
        return list(zip(self.codes, self.images, self.labels))


def build_evidence(triggers, K, K_prime=0):
    """Rows ``K'+1 .. K'+K`` (1-based) of a trigger set."""
    n = len(triggers)
    if K < 1:
        raise ProtocolError("K must be >= 1")
    if K_prime < 0 or K + K_prime > n:
        raise ProtocolError(f"window K={K}, K'={K_prime} exceeds N={n}")
    sl = slice(K_prime, K_prime + K)
    return Evidence(list(triggers.codes[sl]), triggers.images[sl].copy(),
                    triggers.labels[sl].copy(), K_prime)


def rounds_available(n, K):
    return max(n - K + 1, 0)


def next_round(triggers, prev_rounds, K):
    """Evidence for round ``prev_rounds + 1``: the window slides by one."""
    if prev_rounds + K > len(triggers):
        raise ProtocolExhausted(
            f"all {rounds_available(len(triggers), K)} windows of K={K} already disclosed")
    return build_evidence(triggers, K, prev_rounds)


def gaussian_cdf(x):
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass
class VerificationConfig:
    num_classes: int
    tau: float = 0.05
    epsilon: float = 0.0
    match_mode: str = "exact"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.match_mode not in ("exact", "fuzzy"):
            raise ValueError(f"unknown match mode {self.match_mode!r}")


@dataclass
class RowCheck:
    image_ok: bool
    label_ok: bool
    predicted_ok: bool
    chain_ok: bool
    l1_distance: float
    l2_distance: float

    @property
    def passed(self):
        return self.image_ok and self.label_ok and self.predicted_ok and self.chain_ok


@dataclass
class VerificationResult:
    passed: bool
    acc: int
    K: int
    mu_hat: float
    sigma_hat: float
    statistic: float
    per_row: list = field(default_factory=list)

    @property
    def decision(self):
        return "Pass" if self.passed else "Fail"

    def tallies(self):
        keys = ("image_ok", "label_ok", "predicted_ok", "chain_ok")
        return {k: sum(getattr(r, k) for r in self.per_row) for k in keys}


def pixel_l1(a, b):
    """Per-pixel mean absolute difference, so epsilon is resolution independent."""
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).mean())


def pixel_l2(a, b):
    return float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64)))


def decide(acc, K, num_classes, tau):
    """One-sided test of the evidence accuracy against chance.

    Returns ``(passed, mu_hat, sigma_hat, statistic)``. When the estimated
    deviation is zero the statistic is 0 or 1 depending on whether the
    accuracy sits above chance.
    """
    mu = acc / K
    sigma = math.sqrt(mu * (1.0 - mu) / K)
    chance = 1.0 / num_classes
    if sigma == 0.0:
        stat = 0.0 if mu > chance else 1.0
    else:
        stat = gaussian_cdf((chance - mu) / sigma)
    return stat <= tau, mu, sigma, stat


def verify(model, evidence, encoder, cfg):
    if model.num_classes != cfg.num_classes:
        raise ProtocolError(f"model has {model.num_classes} classes, config says {cfg.num_classes}")
    K = evidence.K
    if K < 3:
        raise ProtocolError("chain linkage needs K >= 3")
    preds = nn.predict(model, evidence.images)
    checks = []
    codes = evidence.codes
    for k, (code, image, label) in enumerate(evidence.rows()):
        try:
            expected = codec.encode_trigger(encoder, code)
        except codec.CodecError:
            checks.append(RowCheck(False, False, False, False, math.inf, math.inf))
            continue
        l1 = pixel_l1(expected, image)
        if cfg.match_mode == "exact":
            image_ok = np.array_equal(expected, np.asarray(image, dtype=np.float32))
        else:
            image_ok = l1 <= cfg.epsilon
        label_ok = codec.assign_label(code, cfg.num_classes) == int(label)
        predicted_ok = int(preds[k]) == int(label)
        # the last two rows have no successors to check against
        link_ok = k >= K - 2 or codes[k] == codec.reduce(codes[k + 1], codes[k + 2])
        checks.append(RowCheck(bool(image_ok), label_ok, predicted_ok, link_ok,
                               l1, pixel_l2(expected, image)))
    acc = sum(c.passed for c in checks)
    passed, mu, sigma, stat = decide(acc, K, cfg.num_classes, cfg.tau)
    return VerificationResult(passed, acc, K, mu, sigma, stat, checks)


# -- evidence documents -----------------------------------------------------

def evidence_document(ev):
    """Canonical JSON-ready dict; field order is K, K_prime, rows."""
    return {
        "K": ev.K,
        "K_prime": ev.offset,
        "rows": [
            {"code_hex": codec.to_hex(c), "label": int(l), "image_b64": codec.image_to_b64(img)}
            for c, img, l in ev.rows()
        ],
    }


def evidence_from_document(doc, shape):
    try:
        rows = doc["rows"]
        K, offset = int(doc["K"]), int(doc["K_prime"])
        codes = [codec.from_hex(r["code_hex"]) for r in rows]
        images = np.stack([codec.image_from_b64(r["image_b64"], shape) for r in rows])
        labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed evidence document: {exc}") from None
    if K != len(rows):
        raise ProtocolError(f"evidence declares K={K} but has {len(rows)} rows")
    return Evidence(codes, images, labels, offset)
