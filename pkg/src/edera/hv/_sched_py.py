"""Pure-Python proportional-share kernel (fallback for the compiled one)."""

from __future__ import annotations

from typing import Sequence


def share_ticks(weights: Sequence[int], slots: int) -> list[int]:
    """Distribute ``slots`` scheduling quanta over domains by weight.

    Credit scheme: every slot each domain earns its weight in credit; the
    richest domain (lowest index on ties) runs and pays the total weight.
    Credits therefore always sum to zero and stay bounded, which keeps every
    domain within ``len(weights)`` quanta of its exact share.
    """
    n = len(weights)
    if n == 0 or slots <= 0:
        return [0] * n
    total = sum(weights)
    credit = [0] * n
    ticks = [0] * n
    rng = range(n)
    for _ in range(slots):
        best = 0
        best_credit = None
        for i in rng:
            c = credit[i] + weights[i]
            credit[i] = c
            if best_credit is None or c > best_credit:
                best_credit = c
                best = i
        credit[best] -= total
        ticks[best] += 1
    return ticks
