"""
Software model of ARM-style pointer authentication.

A 64-bit pointer word is split into an address field (bits ``[0, va_size)``),
a ``b``-bit token field directly above it, and reserved high bits. Signing
(``pac_add``) writes a keyed tweakable MAC of the address into the token field;
``aut`` recomputes it and, on mismatch, returns the stripped address with a
well-known high bit set so any later translation of the pointer faults.

All functions here are pure and operate on plain ``int`` words.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

WORD_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class PointerLayout:
    va_size: int = 39
    pac_bits: int = 16
    corrupt_bit: int = 62
    gadget_bit: int = 0  # index inside the token field flipped by pac_add on corrupt input

    addr_mask: int = field(init=False, repr=False, compare=False)
    token_mask: int = field(init=False, repr=False, compare=False)
    token_field: int = field(init=False, repr=False, compare=False)
    corrupt_mask: int = field(init=False, repr=False, compare=False)
    gadget_mask: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        b = self.pac_bits
        if not 1 <= self.va_size <= 62:
            raise ValueError(f"va_size out of range: {self.va_size}")
        if not 1 <= b <= 63 - self.va_size:
            raise ValueError(f"pac_bits must be in [1, {63 - self.va_size}], got {b}")
        if not self.va_size + b <= self.corrupt_bit <= 63:
            raise ValueError("corrupt_bit must lie above the token field")
        if not 0 <= self.gadget_bit < b:
            raise ValueError("gadget_bit must index into the token field")
        object.__setattr__(self, "addr_mask", (1 << self.va_size) - 1)
        object.__setattr__(self, "token_mask", (1 << b) - 1)
        object.__setattr__(self, "token_field", ((1 << b) - 1) << self.va_size)
        object.__setattr__(self, "corrupt_mask", 1 << self.corrupt_bit)
        object.__setattr__(self, "gadget_mask", 1 << (self.va_size + self.gadget_bit))

    @property
    def pac_lo(self) -> int:
        return self.va_size

    @property
    def b(self) -> int:
        return self.pac_bits

    def with_bits(self, pac_bits: int) -> "PointerLayout":
        return PointerLayout(self.va_size, pac_bits, self.corrupt_bit,
                             min(self.gadget_bit, pac_bits - 1))


DEFAULT_LAYOUT = PointerLayout()


@dataclass(frozen=True)
class PacKey:
    """128-bit MAC key held by the simulated kernel."""
    k1: int
    k2: int

    def __repr__(self):
        # keys never show up in logs or reports
        return "PacKey(<secret>)"

    @classmethod
    def generate(cls, rng: random.Random) -> "PacKey":
        return cls(rng.getrandbits(64), rng.getrandbits(64))

    @classmethod
    def from_seed(cls, seed: int) -> "PacKey":
        # hash-based derivation; much cheaper than seeding a Mersenne Twister
        d = hashlib.blake2b(b"pac-key:%d" % seed, digest_size=16).digest()
        return cls(int.from_bytes(d[:8], "little"), int.from_bytes(d[8:], "little"))


def mix64(x: int) -> int:
    """64-bit finalizer (SplitMix64 output function)."""
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & WORD_MASK
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & WORD_MASK
    return x ^ (x >> 31)


def mix64_mac(key: PacKey, value: int, modifier: int, bits: int) -> int:
    return mix64((value ^ key.k1 ^ mix64((modifier ^ key.k2) & WORD_MASK)) & WORD_MASK) \
        & ((1 << bits) - 1)


MacFunction = Callable[[PacKey, int, int, int], int]
"""token(key, value, modifier, bits) -> int in [0, 2**bits)"""


def mac_token(key: PacKey, value: int, modifier: int,
              layout: PointerLayout = DEFAULT_LAYOUT,
              mac: Optional[MacFunction] = None) -> int:
    return (mac or mix64_mac)(key, value, modifier, layout.pac_bits)


def token_of(layout: PointerLayout, word: int) -> int:
    return (word >> layout.va_size) & layout.token_mask


def set_corrupt(layout: PointerLayout, word: int) -> int:
    return word | layout.corrupt_mask


def xpac(layout: PointerLayout, word: int) -> int:
    return word & layout.addr_mask


def is_canonical(layout: PointerLayout, word: int) -> bool:
    return (word >> layout.va_size) == 0


def pac_add(key: PacKey, layout: PointerLayout, ptr: int, modifier: int,
            mac: Optional[MacFunction] = None) -> int:
    """Sign ``ptr`` with ``modifier``.

    The token is computed over the address bits only, as though the high bits
    were correct. If any bit at or above ``va_size`` was set on input, the
    gadget bit of the resulting token is flipped.
    """
    addr = ptr & layout.addr_mask
    tok = (mac or mix64_mac)(key, addr, modifier, layout.pac_bits)
    out = addr | (tok << layout.va_size)
    if ptr >> layout.va_size:
        out ^= layout.gadget_mask
    return out


def aut(key: PacKey, layout: PointerLayout, word: int, modifier: int,
        mac: Optional[MacFunction] = None) -> int:
    """Verify and strip. Failure is encoded in the result, never raised."""
    addr = word & layout.addr_mask
    tok = (mac or mix64_mac)(key, addr, modifier, layout.pac_bits)
    if (word >> layout.va_size) == tok:
        return addr
    return addr | layout.corrupt_mask
