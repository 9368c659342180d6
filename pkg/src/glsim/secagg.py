"""Simulated secure aggregation by pairwise additive masking.

Every unordered pair (u, v) of round participants shares a seed; the lower id
adds the seed's pseudorandom expansion to its update and the higher id
subtracts it, so individual updates are concealed while the sum of all masked
updates equals the sum of plain updates (up to float64 summation error).
Rounds are synchronous: a missing participant aborts aggregation, there is no
dropout recovery. Masks are real-valued standard normals; no field arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ProtocolError
from .nn import (
    GradientUpdate,
    LayerGrad,
    flatten_update,
    unflatten_update,
)
from .rng import RngStream, generator_from_seed


@dataclass
class MaskSeedMatrix:
    """Symmetric table of pair seeds for one round's participants."""

    participants: tuple[int, ...]
    seeds: dict[tuple[int, int], int]

    def seed_for(self, u: int, v: int) -> int:
        if u == v:
            raise ProtocolError("no self-mask seed exists")
        return self.seeds[(min(u, v), max(u, v))]

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.seeds)


@dataclass
class MaskedUpdate:
    """A participant's update after pairwise masks were applied."""

    owner: int
    layers: list[LayerGrad]
    batch_size: int = 0


def setup_masks(participants: Sequence[int], rng: RngStream) -> MaskSeedMatrix:
    """Derive one shared seed per unordered pair from the round stream."""
    ids = sorted(set(int(p) for p in participants))
    if len(ids) < 2:
        raise ProtocolError(f"masking needs >= 2 participants, got {len(ids)}")
    if len(ids) != len(participants):
        raise ProtocolError("duplicate participant ids in roster")
    seeds = {}
    for i, u in enumerate(ids):
        for v in ids[i + 1 :]:
            seeds[(u, v)] = rng.derive_seed("pair", u, v)
    return MaskSeedMatrix(tuple(ids), seeds)


def expand_mask(seed: int, size: int) -> np.ndarray:
    """Expand a pair seed to `size` standard-normal mask entries.

    Entries are generated in float32 and widened to float64: both endpoints of
    a pair use bit-identical values, so cancellation in the sum is unaffected,
    and generation is about twice as fast.
    """
    gen = generator_from_seed(seed)
    return gen.standard_normal(size, dtype=np.float32).astype(np.float64)


def mask_update(update: GradientUpdate, owner: int, masks: MaskSeedMatrix) -> MaskedUpdate:
    """Apply the owner's pairwise masks: + toward higher ids, - toward lower."""
    if owner not in masks.participants:
        raise ProtocolError(f"user {owner} is not a round participant")
    vec = flatten_update(update)
    for other in masks.participants:
        if other == owner:
            continue
        mask = expand_mask(masks.seed_for(owner, other), vec.size)
        if owner < other:
            vec += mask
        else:
            vec -= mask
    masked = unflatten_update(vec, update, update.batch_size)
    return MaskedUpdate(owner, masked.layers, update.batch_size)


def aggregate(
    masked: Iterable[MaskedUpdate],
    participants: Sequence[int] | None = None,
) -> GradientUpdate:
    """Entrywise sum of masked updates; pair masks cancel in the total.

    When the expected roster is given, a missing or unknown participant aborts
    the round (no usable aggregate is produced).
    """
    masked = list(masked)
    if not masked:
        raise ProtocolError("nothing to aggregate")
    owners = [m.owner for m in masked]
    if len(set(owners)) != len(owners):
        raise ProtocolError("duplicate masked update owners")
    if participants is not None and set(owners) != set(int(p) for p in participants):
        missing = sorted(set(int(p) for p in participants) - set(owners))
        extra = sorted(set(owners) - set(int(p) for p in participants))
        raise ProtocolError(f"round aborted: missing={missing} unexpected={extra}")

    total = [
        LayerGrad(g.weights.copy(), g.bias.copy()) for g in masked[0].layers
    ]
    for m in masked[1:]:
        if len(m.layers) != len(total):
            raise ProtocolError("masked update shape mismatch")
        for t, g in zip(total, m.layers):
            if t.weights.shape != g.weights.shape or t.bias.shape != g.bias.shape:
                raise ProtocolError("masked update shape mismatch")
            t.weights += g.weights
            t.bias += g.bias
    return GradientUpdate(total, sum(m.batch_size for m in masked))


def mask_and_aggregate(
    updates: Mapping[int, GradientUpdate],
    masks: MaskSeedMatrix,
) -> GradientUpdate:
    """Round-level fast path: sweep each pair seed once instead of per user.

    Equivalent to masking every update with :func:`mask_update` and summing,
    but each pair's mask is expanded a single time (+ into the lower id's
    vector, - into the higher id's), which halves generation work for the
    O(M^2) masks of a full round.
    """
    if set(updates) != set(masks.participants):
        missing = sorted(set(masks.participants) - set(updates))
        raise ProtocolError(f"round aborted: missing={missing}")
    ids = list(masks.participants)
    flats = {u: flatten_update(updates[u]) for u in ids}
    size = flats[ids[0]].size
    for u in ids:
        if flats[u].size != size:
            raise ProtocolError("update shape mismatch in roster")
    for u, v in masks.pairs():
        mask = expand_mask(masks.seed_for(u, v), size)
        flats[u] += mask
        flats[v] -= mask
    total = np.zeros(size)
    for u in ids:
        total += flats[u]
    template = updates[ids[0]]
    return GradientUpdate(
        unflatten_update(total, template).layers,
        sum(updates[u].batch_size for u in ids),
    )
