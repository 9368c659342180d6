"""Round orchestration: provisioning, sampling, local updates, SA + DP, model step.

One gradient step per user per round (FedSGD). Honest users always pass their
gradients through apply_dp before anything leaves them; sybil users return a
server-known payload verbatim. The server records enough per round (roster,
config, derived seeds, batch indices, aggregate checksums) to replay any round
bit-exactly, and applies the mean update W <- W - eta * aggregate / M.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dp import DPConfig, apply_dp
from .errors import ConfigurationError, InputError, ProtocolError
from .nn import (
    GradientUpdate,
    MiniBatch,
    Model,
    backward,
    constant_update,
    forward,
    zeros_update,
)
from .rng import RngStream
from .secagg import mask_and_aggregate, setup_masks

HONEST = "honest"
SYBIL = "sybil"
PAYLOADS = ("zeros", "constant", "fixed")
SAMPLINGS = ("uniform", "targeted")


@dataclass
class SybilPayload:
    """Server-chosen update a sybil returns: zeros, a constant fill, or fixed arrays."""

    kind: str = "zeros"
    value: float = 0.0
    update: GradientUpdate | None = None

    def __post_init__(self) -> None:
        if self.kind not in PAYLOADS:
            raise ConfigurationError(f"payload kind must be one of {PAYLOADS}")
        if self.kind == "fixed" and self.update is None:
            raise ConfigurationError("fixed payload needs an update")

    def materialize(self, model: Model) -> GradientUpdate:
        if self.kind == "zeros":
            return zeros_update(model)
        if self.kind == "constant":
            return constant_update(model, self.value)
        return self.update.copy()  # type: ignore[union-attr]


@dataclass
class UserProfile:
    uid: int
    kind: str
    inputs: np.ndarray | None = None
    labels: np.ndarray | None = None
    batch_size: int = 0
    dp: DPConfig = field(default_factory=DPConfig)
    payload: SybilPayload | None = None

    def __post_init__(self) -> None:
        if self.kind not in (HONEST, SYBIL):
            raise ConfigurationError(f"user kind must be honest or sybil, got {self.kind!r}")
        if self.kind == SYBIL and self.payload is None:
            self.payload = SybilPayload()


@dataclass
class RoundConfig:
    index: int
    participants: int
    eta: float = 0.1
    sampling: str = "uniform"
    target: int | None = None
    bystanders: int = 0
    apply_update: bool = True

    def __post_init__(self) -> None:
        if self.sampling not in SAMPLINGS:
            raise ConfigurationError(f"sampling must be one of {SAMPLINGS}")
        if self.sampling == "targeted" and self.target is None:
            raise ConfigurationError("targeted sampling needs a target user")
        if self.participants < 1:
            raise ConfigurationError("round needs at least one participant")


@dataclass
class RoundRecord:
    index: int
    roster: list[int]
    target: int | None
    eta: float
    applied: bool
    batch_indices: dict[int, list[int]]
    layer_checksums: list[dict[str, str]]
    model_checksum: str

    def to_json(self) -> dict:
        return {
            "round": self.index,
            "roster": self.roster,
            "target": self.target,
            "eta": self.eta,
            "applied": self.applied,
            "batch_indices": {str(k): v for k, v in self.batch_indices.items()},
            "aggregate_layer_checksums": self.layer_checksums,
            "broadcast_model_checksum": self.model_checksum,
        }


@dataclass
class ServerState:
    model: Model
    master: RngStream
    users: dict[int, UserProfile] = field(default_factory=dict)
    rounds: list[RoundRecord] = field(default_factory=list)

    def honest_ids(self) -> list[int]:
        return sorted(u for u, p in self.users.items() if p.kind == HONEST)

    def sybil_ids(self) -> list[int]:
        return sorted(u for u, p in self.users.items() if p.kind == SYBIL)

    def round_stream(self, index: int) -> RngStream:
        return self.master.child("round", index)


def _sha(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def model_checksum(model: Model) -> str:
    return _sha(*(arr for l in model.layers for arr in (l.weights, l.bias)))


# ---------------------------------------------------------------------------
# Provisioning

def partition_iid(count: int, users: int, rng: RngStream) -> list[np.ndarray]:
    """Shuffle indices and deal them out evenly."""
    order = rng.generator().permutation(count)
    return [np.sort(part) for part in np.array_split(order, users)]


def partition_by_class(labels: np.ndarray, users: int) -> list[np.ndarray]:
    """Non-iid split: every user's slice comes from a single class."""
    classes = np.unique(labels)
    assigned: list[list[int]] = [[] for _ in classes]
    for u in range(users):
        assigned[u % len(classes)].append(u)
    parts: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * users
    for ci in range(len(classes)):
        if not assigned[ci]:
            continue
        idx = np.flatnonzero(labels == classes[ci])
        for u, chunk in zip(assigned[ci], np.array_split(idx, len(assigned[ci]))):
            parts[u] = chunk
    return parts


def provision_honest(
    state: ServerState,
    inputs: np.ndarray,
    labels: np.ndarray,
    count: int,
    batch_size: int,
    dp: DPConfig,
    non_iid: bool = False,
) -> list[int]:
    """Register honest users over an iid (default) or single-class data split."""
    if non_iid:
        parts = partition_by_class(labels, count)
    else:
        parts = partition_iid(len(labels), count, state.master.child("partition"))
    start = max(state.users, default=-1) + 1
    ids = []
    for i, part in enumerate(parts):
        uid = start + i
        state.users[uid] = UserProfile(
            uid, HONEST, inputs[part], labels[part], batch_size, dp
        )
        ids.append(uid)
    return ids


def provision_sybils(
    state: ServerState, count: int, payload: SybilPayload | None = None
) -> list[int]:
    """Register server-controlled users whose payloads the server knows."""
    start = max(state.users, default=-1) + 1
    ids = []
    for i in range(count):
        uid = start + i
        state.users[uid] = UserProfile(uid, SYBIL, payload=payload or SybilPayload())
        ids.append(uid)
    return ids


# ---------------------------------------------------------------------------
# Sampling and local updates

def sample_users(state: ServerState, cfg: RoundConfig, rng: RngStream) -> list[int]:
    """Pick the round roster (uniform over honest users, or target + sybils)."""
    if cfg.sampling == "uniform":
        honest = state.honest_ids()
        if cfg.participants > len(honest):
            raise ConfigurationError(
                f"round wants {cfg.participants} users, only {len(honest)} honest provisioned"
            )
        picked = rng.generator().choice(len(honest), size=cfg.participants, replace=False)
        return sorted(honest[i] for i in picked)

    if cfg.target not in state.users:
        raise ConfigurationError(f"unknown target user {cfg.target}")
    roster = [cfg.target]
    honest_pool = [u for u in state.honest_ids() if u != cfg.target]
    if cfg.bystanders > len(honest_pool):
        raise ConfigurationError("not enough honest users for requested bystanders")
    if cfg.bystanders:
        picked = rng.generator().choice(len(honest_pool), size=cfg.bystanders, replace=False)
        roster += [honest_pool[i] for i in picked]
    sybils = state.sybil_ids()
    need = cfg.participants - len(roster)
    if need < 0:
        raise ConfigurationError("bystanders exceed round size")
    roster += sybils[:need]
    if len(roster) < cfg.participants:
        # mixed-roster fallback: top up with unsampled honest users
        spare = [u for u in honest_pool if u not in roster]
        roster += spare[: cfg.participants - len(roster)]
    if len(roster) != cfg.participants:
        raise ConfigurationError("registry too small for the requested roster")
    return sorted(roster)


def local_update(
    user: UserProfile,
    model: Model,
    round_stream: RngStream,
) -> tuple[GradientUpdate, list[int]]:
    """One user's contribution: DP-processed gradients, or the sybil payload."""
    if user.kind == SYBIL:
        return user.payload.materialize(model), []  # type: ignore[union-attr]

    if user.inputs is None or len(user.inputs) == 0:
        raise InputError(f"honest user {user.uid} has no local data")
    n = len(user.inputs)
    if n < user.batch_size:
        raise InputError(
            f"honest user {user.uid} holds {n} examples < batch size {user.batch_size}"
        )
    if n == user.batch_size:
        idx = np.arange(n)
    else:
        gen = round_stream.child("batch", user.uid).generator()
        idx = np.sort(gen.choice(n, size=user.batch_size, replace=False))
    batch = MiniBatch(user.inputs[idx], user.labels[idx])
    update = backward(model, forward(model, batch), batch)
    update = apply_dp(update, user.dp, round_stream.child("dp", user.uid))
    return update, [int(i) for i in idx]


# ---------------------------------------------------------------------------
# Rounds

def run_round(
    state: ServerState,
    cfg: RoundConfig,
    roster: list[int],
    model: Model | None = None,
) -> tuple[GradientUpdate, RoundRecord]:
    """Broadcast, collect, mask, aggregate, and (by default) apply the mean step.

    `model` overrides the broadcast model (a manipulated copy in malicious
    rounds); the recorded aggregate is the plain sum over the roster.
    """
    if len(roster) != cfg.participants:
        raise ProtocolError(f"roster size {len(roster)} != configured {cfg.participants}")
    unknown = [u for u in roster if u not in state.users]
    if unknown:
        raise ProtocolError(f"roster contains unprovisioned users {unknown}")
    broadcast = model if model is not None else state.model
    rs = state.round_stream(cfg.index)

    updates: dict[int, GradientUpdate] = {}
    batch_indices: dict[int, list[int]] = {}
    for uid in roster:
        upd, idx = local_update(state.users[uid], broadcast, rs)
        updates[uid] = upd
        if idx:
            batch_indices[uid] = idx

    masks = setup_masks(roster, rs.child("sa"))
    agg = mask_and_aggregate(updates, masks)

    record = RoundRecord(
        index=cfg.index,
        roster=sorted(roster),
        target=cfg.target,
        eta=cfg.eta,
        applied=cfg.apply_update,
        batch_indices=batch_indices,
        layer_checksums=[
            {"weights": _sha(g.weights), "bias": _sha(g.bias)} for g in agg.layers
        ],
        model_checksum=model_checksum(broadcast),
    )
    if cfg.apply_update:
        apply_aggregate(state, agg, cfg.eta, cfg.participants)
    state.rounds.append(record)
    return agg, record


def apply_aggregate(state: ServerState, aggregate: GradientUpdate, eta: float, m: int) -> Model:
    """Gradient step on the shared model with the mean update."""
    if len(aggregate.layers) != len(state.model.layers):
        raise ConfigurationError("aggregate does not match model layout")
    step = eta / m
    for layer, grad in zip(state.model.layers, aggregate.layers):
        if layer.weights.shape != grad.weights.shape:
            raise ConfigurationError("aggregate layer shape mismatch")
        layer.weights -= step * grad.weights
        layer.bias -= step * grad.bias
    return state.model


def dataset_loss(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    return forward(model, MiniBatch(inputs, labels)).loss


def write_round_log(path: str | Path, state: ServerState, extra: dict | None = None) -> None:
    """Round log as JSON: per round index, roster, config, seeds, checksums."""
    payload = {
        "master_seed": state.master.seed,
        "stream": list(state.master.stream),
        "rounds": [r.to_json() for r in state.rounds],
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
