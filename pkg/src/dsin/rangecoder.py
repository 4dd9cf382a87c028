"""Static-model range coder (carry-propagating, byte oriented).

Probabilities are turned into integer frequencies summing to ``2**PRECISION``
with every symbol getting at least one count, so encoder and decoder derive
identical tables from the same float model.
"""
from __future__ import annotations

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = 0xFFFFFFFF
PROB_FLOOR = 1e-9


class CorruptStreamError(ValueError):
    """Payload ended early or does not decode under the given model."""


def quantize_probs(probs: np.ndarray) -> np.ndarray:
    """Float probabilities ``(..., L)`` -> cumulative frequency table ``(..., L+1)``."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < PROB_FLOOR):
        raise ValueError(f"probabilities must be finite and >= {PROB_FLOOR}")
    L = p.shape[-1]
    if L > TOTAL // 2:
        raise ValueError("alphabet too large for the frequency precision")
    p = p / p.sum(axis=-1, keepdims=True)
    freq = np.floor(p * (TOTAL - L)).astype(np.int64) + 1
    # leftover mass goes to the most likely symbol (first one on ties)
    short = TOTAL - freq.sum(axis=-1)
    top = np.argmax(p, axis=-1)
    np.add.at(freq.reshape(-1, L), (np.arange(freq.size // L), top.reshape(-1)), short.reshape(-1))
    cum = np.zeros(p.shape[:-1] + (L + 1,), dtype=np.int64)
    np.cumsum(freq, axis=-1, out=cum[..., 1:])
    return cum


def _tables(probs, n: int):
    cum = quantize_probs(probs)
    if cum.ndim == 1:
        return [cum.tolist()] * n
    if cum.shape[0] != n:
        raise ValueError(f"got {cum.shape[0]} distributions for {n} symbols")
    return cum.tolist()


def range_encode(symbols, probs) -> bytes:
    """Encode ``symbols`` under ``probs`` (shape ``(L,)`` or ``(n, L)``)."""
    symbols = [int(s) for s in np.asarray(symbols).ravel()]
    n = len(symbols)
    if n == 0:
        return b""
    tables = _tables(probs, n)
    L = len(tables[0]) - 1
    out = bytearray()
    low, rng = 0, MASK32
    cache, cache_size = 0, 1

    def shift_low():
        nonlocal low, cache, cache_size
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = cache
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                cache_size -= 1
                if cache_size == 0:
                    break
            cache = (low >> 24) & 0xFF
        cache_size += 1
        low = (low & 0x00FFFFFF) << 8

    for s, cum in zip(symbols, tables):
        if not 0 <= s < L:
            raise ValueError(f"symbol {s} outside [0, {L})")
        r = rng >> PRECISION
        low += r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        while rng < TOP:
            rng <<= 8
            shift_low()
    for _ in range(5):
        shift_low()
    # the first emitted byte is always the zero seed of ``cache``
    assert out[0] == 0
    return bytes(out[1:])


def range_decode(payload: bytes, n: int, probs) -> list[int]:
    if n == 0:
        return []
    tables = _tables(probs, n)
    L = len(tables[0]) - 1
    data = memoryview(bytes(payload))
    size = len(data)
    pos = 0

    def next_byte():
        nonlocal pos
        if pos >= size:
            raise CorruptStreamError("payload truncated")
        b = data[pos]
        pos += 1
        return b

    code = 0
    for _ in range(4):
        code = (code << 8) | next_byte()
    rng = MASK32
    out = []
    for cum in tables:
        r = rng >> PRECISION
        target = code // r
        if target >= TOTAL:
            raise CorruptStreamError("payload does not match the model")
        # linear scan; alphabets are small
        s = 0
        while cum[s + 1] <= target:
            s += 1
        code -= r * cum[s]
        rng = r * (cum[s + 1] - cum[s])
        while rng < TOP:
            code = ((code << 8) | next_byte()) & MASK32
            rng <<= 8
        out.append(s)
    return out


def cross_entropy_bits(symbols, probs) -> float:
    """Ideal code length of ``symbols`` under the float model."""
    s = np.asarray(symbols).ravel()
    p = np.asarray(probs, dtype=np.float64)
    p = p / p.sum(axis=-1, keepdims=True)
    if p.ndim == 1:
        return float(-np.log2(p[s]).sum())
    return float(-np.log2(p[np.arange(len(s)), s]).sum())
