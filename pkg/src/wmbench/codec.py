"""Identity encoding: reverse hash chain, trigger encoders and the label map.

All hashing is SHA-256 with a one-byte role prefix so that tail derivation,
chain reduction, label assignment and trigger seeding never share inputs.
"""

from __future__ import annotations

import base64
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

CODE_BYTES = 32


class CodecError(ValueError):
    pass


def _h(tag, *parts):
    m = hashlib.sha256(bytes([tag]))
    for p in parts:
        m.update(p)
    return m.digest()


def _check_code(code):
    if not isinstance(code, (bytes, bytearray)) or len(code) != CODE_BYTES:
        raise CodecError(f"a code is exactly {CODE_BYTES} bytes")
    return bytes(code)


def derive_tail(key):
    """The last two codes ``(u_{N-1}, u_N)`` of the chain for ``key``."""
    key = key.encode() if isinstance(key, str) else bytes(key)
    return _h(0x01, key), _h(0x02, key)


def reduce(a, b):
    """Order-sensitive one-way compression of two codes into one."""
    return _h(0x03, _check_code(a), _check_code(b))


def build_sequence(key, n):
    """Codes ``u_1..u_n`` with ``u_k == reduce(u_{k+1}, u_{k+2})``."""
    if n < 2:
        raise ValueError("a code sequence needs N >= 2")
    seq = [None] * n
    seq[-2], seq[-1] = derive_tail(key)
    for k in range(n - 3, -1, -1):
        seq[k] = reduce(seq[k + 1], seq[k + 2])
    return seq


def chain_ok(seq):
    return all(seq[k] == reduce(seq[k + 1], seq[k + 2]) for k in range(len(seq) - 2))


def assign_label(code, num_classes):
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    digest = _h(0x04, _check_code(code))
    return int.from_bytes(digest[:8], "big") % num_classes


def trigger_seed(code):
    return int.from_bytes(_h(0x05, _check_code(code))[:8], "big")


def random_codes(count, seed=None):
    """``count`` uniformly random codes; OS entropy unless ``seed`` is given."""
    if seed is None:
        return [os.urandom(CODE_BYTES) for _ in range(count)]
    rng = np.random.Generator(np.random.Philox(seed))
    raw = rng.integers(0, 256, size=(count, CODE_BYTES), dtype=np.uint8)
    return [row.tobytes() for row in raw]


def to_hex(code):
    return _check_code(code).hex()


def from_hex(text):
    try:
        code = bytes.fromhex(text)
    except ValueError as exc:
        raise CodecError(f"bad code hex: {exc}") from None
    return _check_code(code)


# -- trigger encoders -------------------------------------------------------

ENCODER_VARIANTS = ("seeded-noise", "generator-latent", "continuous-linear")

# inverse normal CDF at byte midpoints (b + 0.5) / 256
_BYTE_TO_NORMAL = ndtri((np.arange(256) + 0.5) / 256.0)


@dataclass
class EncoderSpec:
    """Which trigger encoder to use and its fixed parameters.

    ``generator`` is only consulted by the generator-latent variant; the
    continuous-linear variant uses ``n_bits`` low-order code bits and basis
    patterns drawn from ``basis_seed``.
    """

    variant: str = "seeded-noise"
    shape: tuple = (16, 16, 1)
    noise_mean: float = 0.5
    noise_std: float = 0.15
    n_bits: int = 16
    basis_seed: int = 0
    generator: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in ENCODER_VARIANTS:
            raise CodecError(f"unknown encoder variant {self.variant!r}")
        self.shape = tuple(int(d) for d in self.shape)

    def to_dict(self):
        return {
            "variant": self.variant, "shape": list(self.shape),
            "noise_mean": self.noise_mean, "noise_std": self.noise_std,
            "n_bits": self.n_bits, "basis_seed": self.basis_seed,
        }

    @classmethod
    def from_dict(cls, d, generator=None):
        return cls(d["variant"], tuple(d["shape"]), d.get("noise_mean", 0.5), d.get("noise_std", 0.15),
                   d.get("n_bits", 16), d.get("basis_seed", 0), generator)

    def basis(self):
        rng = np.random.Generator(np.random.Philox(self.basis_seed))
        patterns = rng.uniform(0.0, 1.0, size=(self.n_bits,) + self.shape)
        # bit b carries weight 2^b / 2^n_bits, so the image stays inside [0, 1)
        weights = 2.0 ** np.arange(self.n_bits) / 2.0 ** self.n_bits
        return weights, patterns


def latent_from_code(code, dim):
    """Deterministic standard-normal-ish latent: code bytes, then a hash stream."""
    stream = bytearray(_check_code(code))
    counter = 0
    while len(stream) < dim:
        stream += _h(0x06, code, counter.to_bytes(4, "big"))
        counter += 1
    return _BYTE_TO_NORMAL[np.frombuffer(bytes(stream[:dim]), dtype=np.uint8)]


def code_low_bits(code, n_bits):
    value = int.from_bytes(_check_code(code), "big")
    return np.array([(value >> b) & 1 for b in range(n_bits)], dtype=np.float64)


def encode_trigger(spec, code):
    """Trigger image ``T(code)`` in [0, 1], float32."""
    code = _check_code(code)
    if spec.variant == "seeded-noise":
        rng = np.random.Generator(np.random.Philox(trigger_seed(code)))
        img = rng.normal(spec.noise_mean, spec.noise_std, size=spec.shape)
    elif spec.variant == "generator-latent":
        if spec.generator is None:
            raise CodecError("generator-latent encoder needs a generator")
        z = latent_from_code(code, spec.generator.latent_dim)
        img = spec.generator.generate(z[None])[0]
    else:
        weights, patterns = spec.basis()
        bits = code_low_bits(code, spec.n_bits)
        img = np.tensordot(bits * weights, patterns, axes=1)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def encode_many(spec, codes):
    if not codes:
        return np.zeros((0,) + spec.shape, dtype=np.float32)
    return np.stack([encode_trigger(spec, c) for c in codes])


# -- trigger sets -----------------------------------------------------------

@dataclass
class TriggerSet:
    codes: list
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.codes)

    def rows(self):
        return list(zip(self.codes, self.images, self.labels))

    def replace_images(self, images):
        return TriggerSet(list(self.codes), np.asarray(images, dtype=np.float32), self.labels.copy())


def build_trigger_set(seq, spec, num_classes):
    return TriggerSet(
        list(seq),
        encode_many(spec, list(seq)),
        np.array([assign_label(c, num_classes) for c in seq], dtype=np.int64),
    )


def consistent(triggers, spec, num_classes):
    """True when every row is exactly ``(u, T(u), c(u))``."""
    for code, img, label in triggers.rows():
        if assign_label(code, num_classes) != label:
            return False
        if not np.array_equal(encode_trigger(spec, code), img):
            return False
    return True


def image_to_b64(img):
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode("ascii")


def image_from_b64(text, shape):
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise CodecError(f"image payload has {arr.size} floats, expected shape {tuple(shape)}")
    return arr.reshape(shape).astype(np.float32)


def trigger_set_document(triggers):
    return {"rows": [
        {"code_hex": to_hex(c), "label": int(l), "image_b64": image_to_b64(img)}
        for c, img, l in triggers.rows()
    ]}


def trigger_set_from_document(doc, shape):
    rows = doc["rows"]
    codes = [from_hex(r["code_hex"]) for r in rows]
    images = np.stack([image_from_b64(r["image_b64"], shape) for r in rows]) if rows else \
        np.zeros((0,) + tuple(shape), dtype=np.float32)
    return TriggerSet(codes, images, np.array([int(r["label"]) for r in rows], dtype=np.int64))
