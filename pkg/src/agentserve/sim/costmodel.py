"""Replica cost model: prefill with tiered cache hits, batched decode, staging transfers.

The rate constants are calibration knobs, not measurements of real hardware.
"""

from __future__ import annotations


def prefill_time(prompt_len, hits, rates) -> float:
    """Seconds to make ``prompt_len`` tokens of KV resident on the accelerator.

    ``hits`` holds cumulative per-tier prefix hits (``L1 <= L2 <= L3``) as
    returned by ``CacheHierarchy.lookup``. Tokens beyond the best hit are
    computed; tokens found only in L2 cross PCIe; tokens found only in L3
    are fetched from the shared store.
    """
    n = int(prompt_len)
    l1 = min(n, int(hits.get("L1", 0)))
    l2 = min(n, max(l1, int(hits.get("L2", 0))))
    l3 = min(n, max(l2, int(hits.get("L3", 0))))
    return ((n - l3) / rates.prefill_rate + (l2 - l1) / rates.pcie_rate
            + (l3 - l2) / rates.l3_rate)


def decode_dt(n, rates) -> float:
    """Seconds per decode iteration with ``n`` concurrent decoders."""
    if n < 1:
        raise ValueError("decode needs at least one request")
    return (1.0 + rates.batch_penalty * (n - 1)) / rates.decode_rate


def promote_time(tokens, rates) -> float:
    """L3 -> L2 copy time for staging."""
    return max(0, tokens) / rates.l3_rate
