import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acs_sim.pac import (DEFAULT_LAYOUT, PacKey, PointerLayout, aut, is_canonical, mac_token,
                         mix64, mix64_mac, pac_add, set_corrupt, token_of, xpac)

from conftest import CASES

M64 = (1 << 64) - 1


def ref_mix64(x):
    # independent big-int transcription of the SplitMix64 finalizer
    z = x % 2 ** 64
    z = ((z ^ (z >> 30)) * 13787848793156543929) % 2 ** 64
    z = ((z ^ (z >> 27)) * 10723151780598845931) % 2 ** 64
    return z ^ (z >> 31)


def np_mix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def test_mix64_splitmix_reference_stream():
    # SplitMix64 seeded with 0: published first outputs
    gamma = 0x9E3779B97F4A7C15
    outs = [mix64((gamma * (i + 1)) & M64) for i in range(3)]
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_mix64_matches_bigint_and_numpy_oracles(rng):
    xs = [rng.getrandbits(64) for _ in range(2000)] + [0, 1, M64]
    got = [mix64(x) for x in xs]
    assert got == [ref_mix64(x) for x in xs]
    assert got == [int(v) for v in np_mix64(xs)]


def test_mac_oracle(rng):
    key = PacKey.generate(rng)
    for _ in range(500):
        v, m, b = rng.getrandbits(39), rng.getrandbits(64), rng.randint(1, 24)
        want = ref_mix64(v ^ key.k1 ^ ref_mix64(m ^ key.k2)) & ((1 << b) - 1)
        assert mix64_mac(key, v, m, b) == want


def test_layout_masks():
    lay = DEFAULT_LAYOUT
    assert (lay.va_size, lay.pac_bits, lay.pac_lo) == (39, 16, 39)
    assert lay.token_field == 0xFFFF << 39
    assert lay.gadget_mask == 1 << 39
    assert lay.corrupt_mask == 1 << 62
    assert lay.with_bits(8).token_mask == 0xFF


@pytest.mark.parametrize("va,b", [(0, 4), (39, 0), (39, 24), (60, 8)])
def test_layout_rejects_bad_widths(va, b):
    with pytest.raises(ValueError):
        PointerLayout(va, b)


def test_key_repr_hides_material(rng):
    k = PacKey.generate(rng)
    assert str(k.k1) not in repr(k)
    assert PacKey.from_seed(3) == PacKey.from_seed(3) != PacKey.from_seed(4)


def test_sign_then_verify_example(rng):
    key = PacKey.generate(rng)
    lay = DEFAULT_LAYOUT
    w = pac_add(key, lay, 0x1234560, 77)
    assert xpac(lay, w) == 0x1234560
    assert token_of(lay, w) == mac_token(key, 0x1234560, 77, lay)
    assert aut(key, lay, w, 77) == 0x1234560
    assert not is_canonical(lay, aut(key, lay, w, 78)) or \
        mac_token(key, 0x1234560, 78, lay) == token_of(lay, w)


def test_failed_aut_sets_corrupt_bit(rng):
    key = PacKey.generate(rng)
    lay = DEFAULT_LAYOUT
    w = pac_add(key, lay, 0x40, 5) ^ (1 << 45)
    out = aut(key, lay, w, 5)
    assert out == set_corrupt(lay, 0x40)
    assert not is_canonical(lay, out)


def test_resign_of_corrupt_pointer_flips_gadget_bit(rng):
    key = PacKey.generate(rng)
    lay = DEFAULT_LAYOUT
    for _ in range(1000):
        ptr, mod = rng.getrandbits(39), rng.getrandbits(64)
        valid = pac_add(key, lay, ptr, mod)
        high = 1 << rng.randrange(39, 64)
        assert pac_add(key, lay, ptr | high, mod) ^ valid == lay.gadget_mask


def test_aut_rejects_stray_high_bits(rng):
    key = PacKey.generate(rng)
    lay = DEFAULT_LAYOUT
    w = pac_add(key, lay, 0x80, 1)
    assert aut(key, lay, w | (1 << 60), 1) == set_corrupt(lay, 0x80)


def test_tokens_uniform_histogram():
    rng = random.Random(7)
    lay = PointerLayout(39, 8)
    key = PacKey.generate(rng)
    n = 256 * 400
    counts = np.zeros(256)
    for _ in range(n):
        counts[token_of(lay, pac_add(key, lay, rng.getrandbits(39), rng.getrandbits(64)))] += 1
    exp = n / 256
    stat = float(((counts - exp) ** 2 / exp).sum())
    df = 255
    assert abs(stat - df) <= 5 * (2 * df) ** 0.5


@settings(max_examples=CASES)
@given(st.integers(0, 2 ** 39 - 1), st.integers(0, M64), st.integers(0, M64),
       st.integers(0, M64), st.integers(1, 23))
def test_roundtrip_property(ptr, mod, k1, k2, b):
    lay = PointerLayout(39, b)
    key = PacKey(k1, k2)
    assert aut(key, lay, pac_add(key, lay, ptr, mod), mod) == ptr


@settings(max_examples=CASES)
@given(st.integers(0, 2 ** 39 - 1), st.integers(0, M64), st.integers(0, M64),
       st.integers(0, M64), st.integers(1, 23), st.data())
def test_single_bit_tamper_property(ptr, mod, k1, k2, b, data):
    lay = PointerLayout(39, b)
    key = PacKey(k1, k2)
    bit = data.draw(st.integers(lay.pac_lo, lay.pac_lo + b - 1))
    w = pac_add(key, lay, ptr, mod) ^ (1 << bit)
    assert not is_canonical(lay, aut(key, lay, w, mod))
