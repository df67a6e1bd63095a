"""Max-min fair rate allocation for fluid flows over capacitated resources."""

from __future__ import annotations

import math
from typing import Hashable, Mapping, Sequence

_REL = 1e-12


def max_min_rates(
    flows: Sequence[Sequence[Hashable]], capacity: Mapping[Hashable, float]
) -> list[float]:
    """Water-filling: repeatedly saturate the resource with the smallest fair share.

    ``flows[i]`` lists the resources flow i crosses. Flows crossing no
    capacitated resource get ``inf``.
    """
    rates = [math.inf] * len(flows)
    users: dict[Hashable, set[int]] = {}
    for i, res in enumerate(flows):
        for r in res:
            if math.isfinite(capacity[r]):
                users.setdefault(r, set()).add(i)
    left = {r: float(capacity[r]) for r in users}
    while users:
        share = {r: left[r] / len(us) for r, us in users.items()}
        level = min(share.values())
        tight = [r for r, v in share.items() if v <= level * (1 + _REL)]
        frozen = set()
        for r in tight:
            frozen |= users[r]
        for i in frozen:
            rates[i] = level
            for r in flows[i]:
                us = users.get(r)
                if us is None:
                    continue
                us.discard(i)
                left[r] = max(0.0, left[r] - level)
                if not us:
                    del users[r]
    return rates
