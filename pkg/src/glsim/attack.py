"""Malicious-server toolkit: trap weights, amplification head, round planning.

Trap-weight rows split each neuron's incoming weights into a positive and a
negative half with the negative side scaled up by (1 + skew), so on
non-negative data most neurons stay silent and the few that fire are driven by
one or very few batch examples. That sparsity is what makes weight-gradient
rows individually invertible downstream.

The amplification head appends one output class that never occurs in the data
and wires a chosen fraction of first-layer neurons to it with weight one:
those rows soak up the misclassification loss, keep a high gradient magnitude
relative to the rest of the layer, and therefore survive per-layer clipping
with less attenuation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import RoundConfig, ServerState, SybilPayload
from .errors import ConfigurationError, PlanningError, ProtocolError
from .nn import DenseLayer, GradientUpdate, LayerGrad, Model, subtract_updates
from .rng import RngStream


@dataclass(frozen=True)
class TrapWeightConfig:
    """First-layer manipulation parameters."""

    negative_fraction: float = 0.5
    scale: float = 1.0
    skew: float = 0.5  # extra magnitude on the negative half; larger = sparser firing

    def __post_init__(self) -> None:
        if not 0.0 < self.negative_fraction < 1.0:
            raise ConfigurationError("negative fraction must lie in (0, 1)")
        if not self.scale > 0:
            raise ConfigurationError("magnitude scale must be > 0")
        if self.skew < 0:
            raise ConfigurationError("skew must be >= 0")


@dataclass(frozen=True)
class AmplificationConfig:
    """Added-class head parameters."""

    enabled: bool = True
    hot_fraction: float = 0.1
    cold_value: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.hot_fraction <= 1.0:
            raise ConfigurationError("hot fraction must lie in (0, 1]")


@dataclass
class AttackPlan:
    """Everything needed to undo the sybils' contribution after the round."""

    target: int
    round_index: int
    sybil_ids: list[int]
    payloads: dict[int, SybilPayload]
    trap: TrapWeightConfig | None = None
    amplification: AmplificationConfig | None = None


_SKEW_ANCHORS = ((192, 0.8), (768, 0.5), (3072, 0.4))


def default_skew(dim: int) -> float:
    """Calibrated skew for the synthetic generator's data, by input dim.

    Log-dim interpolation between measured anchors where per-neuron firing is
    sparse (median activating examples <= 2 at batch 20) while most batch
    points stay individually extractable.
    """
    pts = _SKEW_ANCHORS
    if dim <= pts[0][0]:
        return pts[0][1]
    if dim >= pts[-1][0]:
        return pts[-1][1]
    for (d0, s0), (d1, s1) in zip(pts, pts[1:]):
        if d0 <= dim <= d1:
            t = (np.log(dim) - np.log(d0)) / (np.log(d1) - np.log(d0))
            return float(s0 + t * (s1 - s0))
    return pts[-1][1]


def init_trap_weights(layer: DenseLayer, cfg: TrapWeightConfig, rng: RngStream) -> DenseLayer:
    """Re-initialize a first dense layer so neurons fire for few inputs.

    Per row: a random `negative_fraction` of entries get negative sign with
    magnitude scaled by (1 + skew), the rest stay positive; bias is zero.
    """
    out_dim, in_dim = layer.weights.shape
    gen = rng.generator()
    magnitudes = np.abs(gen.standard_normal((out_dim, in_dim))) * cfg.scale
    n_neg = int(round(cfg.negative_fraction * in_dim))
    # rank per-row uniforms: the n_neg smallest mark the negative entries
    order = gen.random((out_dim, in_dim)).argsort(axis=1)
    negative = np.zeros((out_dim, in_dim), dtype=bool)
    np.put_along_axis(negative, order[:, :n_neg], True, axis=1)
    weights = np.where(negative, -magnitudes * (1.0 + cfg.skew), magnitudes)
    return DenseLayer(weights, np.zeros(out_dim), layer.activation)


def build_amplified_head(
    model: Model,
    cfg: AmplificationConfig,
    rng: RngStream,
    hot_indices: np.ndarray | None = None,
) -> Model:
    """Append one output class wired to a hot subset of the last hidden layer.

    The subset is sampled uniformly unless `hot_indices` pins it (paired
    studies pass nested prefixes of one permutation so comparisons across hot
    fractions differ only structurally).
    """
    if not cfg.enabled:
        return model
    out = model.copy()
    head = out.layers[-1]
    width = head.in_dim
    n_hot = int(np.ceil(cfg.hot_fraction * width))
    if n_hot < 1:
        raise ConfigurationError("hot fraction selects no neurons")
    if hot_indices is None:
        hot = rng.generator().choice(width, size=n_hot, replace=False)
    else:
        hot = np.asarray(hot_indices)[:n_hot]
        if hot.size != n_hot:
            raise ConfigurationError("hot_indices shorter than the requested hot subset")
    new_row = np.full(width, cfg.cold_value)
    new_row[hot] = 1.0
    out.layers[-1] = DenseLayer(
        np.vstack([head.weights, new_row]),
        np.concatenate([head.bias, [0.0]]),
        head.activation,
    )
    return out


def build_attack_model(
    model: Model,
    trap: TrapWeightConfig | None,
    amplification: AmplificationConfig | None,
    rng: RngStream,
    head_gain: float = 1.0,
) -> Model:
    """Manipulated broadcast copy: trap first layer, optional amplification head.

    `head_gain` scales the classification layer, inflating the loss attributed
    back to first-layer rows; it is the same lever the amplification head
    pulls, in plain multiplicative form, and keeps gradients of interest above
    the local noise floor in heavily noised studies.
    """
    out = model.copy()
    if trap is not None:
        out.layers[0] = init_trap_weights(out.layers[0], trap, rng.child("trap"))
    if amplification is not None and amplification.enabled:
        out = build_amplified_head(out, amplification, rng.child("amplify"))
    if head_gain != 1.0:
        last = out.layers[-1]
        out.layers[-1] = DenseLayer(last.weights * head_gain, last.bias * head_gain, last.activation)
    return out


def plan_malicious_round(
    state: ServerState,
    target: int,
    round_index: int,
    participants: int,
    eta: float,
    trap: TrapWeightConfig | None = None,
    amplification: AmplificationConfig | None = None,
    payload: SybilPayload | None = None,
    bystanders: int = 0,
    allow_mixed: bool = False,
) -> tuple[RoundConfig, AttackPlan]:
    """Targeted round configuration plus the plan recorded for subtraction.

    Pure mode requires participants - 1 sybils; with `allow_mixed` the roster
    is topped up with honest bystanders when fewer sybils exist.
    """
    if target not in state.users:
        raise ConfigurationError(f"unknown target user {target}")
    sybils = state.sybil_ids()
    wanted = participants - 1 - bystanders
    if wanted < 0:
        raise PlanningError("bystanders exceed the round size")
    if len(sybils) < wanted and not allow_mixed:
        raise PlanningError(
            f"need {wanted} sybils for a pure round, registry has {len(sybils)}"
        )
    chosen = sybils[: min(wanted, len(sybils))]
    cfg = RoundConfig(
        index=round_index,
        participants=participants,
        eta=eta,
        sampling="targeted",
        target=target,
        bystanders=bystanders,
    )
    fill = payload or SybilPayload()
    plan = AttackPlan(
        target=target,
        round_index=round_index,
        sybil_ids=list(chosen),
        payloads={uid: state.users[uid].payload or fill for uid in chosen},
        trap=trap,
        amplification=amplification,
    )
    return cfg, plan


def subtract_sybil_contributions(aggregate: GradientUpdate, plan: AttackPlan) -> GradientUpdate:
    """Remove the known sybil payloads from the (pre-mean) aggregate sum."""
    exposed = aggregate.copy()
    for uid in plan.sybil_ids:
        payload = plan.payloads[uid]
        if payload.kind == "zeros":
            continue
        contribution = _materialize_like(payload, aggregate)
        exposed = subtract_updates(exposed, contribution)
    return exposed


def _materialize_like(payload: SybilPayload, template: GradientUpdate) -> GradientUpdate:
    if payload.kind == "fixed":
        upd = payload.update.copy()  # type: ignore[union-attr]
        if len(upd.layers) != len(template.layers) or any(
            a.weights.shape != b.weights.shape for a, b in zip(upd.layers, template.layers)
        ):
            raise ProtocolError("plan payload shape does not match the round aggregate")
        return upd
    return GradientUpdate(
        [
            LayerGrad(
                np.full_like(g.weights, payload.value),
                np.full_like(g.bias, payload.value),
            )
            for g in template.layers
        ],
        0,
    )


def plan_to_json(plan: AttackPlan) -> dict:
    payloads = {}
    for uid, p in plan.payloads.items():
        entry: dict = {"kind": p.kind}
        if p.kind == "constant":
            entry["value"] = p.value
        if p.kind == "fixed":
            entry["layers"] = [
                {"weights": g.weights.tolist(), "bias": g.bias.tolist()}
                for g in p.update.layers  # type: ignore[union-attr]
            ]
        payloads[str(uid)] = entry
    return {
        "target": plan.target,
        "round": plan.round_index,
        "sybils": plan.sybil_ids,
        "payloads": payloads,
        "trap_weights": None
        if plan.trap is None
        else {
            "negative_fraction": plan.trap.negative_fraction,
            "scale": plan.trap.scale,
            "skew": plan.trap.skew,
        },
        "amplification": None
        if plan.amplification is None
        else {
            "enabled": plan.amplification.enabled,
            "hot_fraction": plan.amplification.hot_fraction,
            "cold_value": plan.amplification.cold_value,
        },
    }


def write_plan(path: str | Path, plan: AttackPlan) -> None:
    Path(path).write_text(json.dumps(plan_to_json(plan), indent=2, sort_keys=True) + "\n")
