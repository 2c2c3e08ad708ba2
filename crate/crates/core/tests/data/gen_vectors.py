"""Regenerates random_vectors.json from the documented stream definition.

Independent of the Rust code: ChaCha8 is implemented here from the
block-function definition, and bf16/f32 rounding from first principles.
"""
import json
import math
import struct

MASK = 0xFFFFFFFF


def rotl(x, n):
    return ((x << n) | (x >> (32 - n))) & MASK


def quarter(s, a, b, c, d):
    s[a] = (s[a] + s[b]) & MASK; s[d] = rotl(s[d] ^ s[a], 16)
    s[c] = (s[c] + s[d]) & MASK; s[b] = rotl(s[b] ^ s[c], 12)
    s[a] = (s[a] + s[b]) & MASK; s[d] = rotl(s[d] ^ s[a], 8)
    s[c] = (s[c] + s[d]) & MASK; s[b] = rotl(s[b] ^ s[c], 7)


def chacha8_words(key32: bytes):
    consts = [0x61707865, 0x3320646E, 0x79622D32, 0x6B206574]
    key = list(struct.unpack("<8I", key32))
    counter = 0
    while True:
        init = consts + key + [counter & MASK, counter >> 32, 0, 0]
        s = init[:]
        for _ in range(4):
            quarter(s, 0, 4, 8, 12); quarter(s, 1, 5, 9, 13)
            quarter(s, 2, 6, 10, 14); quarter(s, 3, 7, 11, 15)
            quarter(s, 0, 5, 10, 15); quarter(s, 1, 6, 11, 12)
            quarter(s, 2, 7, 8, 13); quarter(s, 3, 4, 9, 14)
        for w, i in zip(s, init):
            yield (w + i) & MASK
        counter += 1


def seeded_values(seed, n, scale):
    words = chacha8_words(struct.pack("<Q", seed) + bytes(24))
    out = []
    for _ in range(n):
        lo, hi = next(words), next(words)
        u = ((hi << 32 | lo) >> 11) * 2.0 ** -53
        out.append((2.0 * u - 1.0) * math.sqrt(3.0) * scale)
    return out


def round_bf16(x):
    if x == 0 or math.isinf(x):
        return x
    _, e = math.frexp(x)
    q = max(e - 8, -133)
    r = math.copysign(round(x / 2.0 ** q) * 2.0 ** q, x)
    return math.copysign(math.inf, x) if abs(r) >= 2.0 ** 128 else r


def round_f32(x):
    try:
        return struct.unpack("<f", struct.pack("<f", x))[0]
    except OverflowError:
        return math.copysign(math.inf, x)


def enc(x):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


cases = []
for seed, shape, scale in [(0, [2, 3], 1.0), (1, [4], 0.5), (42, [1, 2, 2, 2], 1.0), (2**64 - 1, [5], 2.0)]:
    n = math.prod(shape)
    cases.append({"seed": str(seed), "shape": shape, "scale": scale, "values": seeded_values(seed, n, scale)})

inputs = [1.0, 1.00390625, 1.005859375, 1.0029296875, -2.7182818284590455, 3.141592653589793,
          1e-40, -1e-45, 3.4e38, 3.3961775292304718e38, 6.0e-39, 0.1, 123456.789]
rounding = [{"x": x, "bf16": enc(round_bf16(x)), "f32": enc(round_f32(x))} for x in inputs]

with open("random_vectors.json", "w") as f:
    json.dump({"random_tensors": cases, "rounding": rounding}, f, indent=1)
    f.write("\n")
