"""Desk-scale measurement campaigns over the simulator.

Each study returns plain rows the CLI serializes to CSV. Studies that only
need one exposed update (norm-vs-SNR, amplification, text recovery, noise
averaging) apply the DP pipeline directly to the target's gradients: a
targeted round whose other participants are zero-payload sybils exposes
exactly that update (verified to 1e-9 by the protocol tests), so re-running
the O(M^2) masking per study point would only burn time. The sybil-fraction
sweep runs full rounds, since honest bystanders change the aggregate itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .attack import (
    AmplificationConfig,
    TrapWeightConfig,
    build_attack_model,
    default_skew,
    plan_malicious_round,
    subtract_sybil_contributions,
)
from .dataset import generate_synthetic
from .dp import DPConfig, apply_dp, noise_std
from .engine import (
    RoundConfig,
    ServerState,
    dataset_loss,
    provision_honest,
    provision_sybils,
    run_round,
    sample_users,
)
from .errors import ConfigurationError
from .nn import (
    EmbeddingLayer,
    GradientUpdate,
    MiniBatch,
    Model,
    backward,
    build_mlp,
    embed,
    forward,
)
from .reconstruct import (
    average_redundant,
    extract_inputs,
    score_candidates,
    token_lookup,
)
from .rng import RngStream


# ---------------------------------------------------------------------------
# Census

@dataclass
class CensusReport:
    """Activation marginals of the first layer over one batch."""

    per_point_activations: np.ndarray  # neurons activated by each point
    per_point_exclusive: np.ndarray  # rows where the point is the sole activator
    per_neuron_activations: np.ndarray  # points activating each neuron

    def __post_init__(self) -> None:
        total = int(self.per_point_activations.sum())
        if total != int(self.per_neuron_activations.sum()):
            raise ConfigurationError("census marginals disagree; activation matrix corrupt")

    @property
    def total_activations(self) -> int:
        return int(self.per_point_activations.sum())

    @property
    def individually_extractable(self) -> int:
        return int((self.per_point_exclusive > 0).sum())


def first_layer_activations(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Boolean (points x neurons) matrix of positive first-layer pre-activations."""
    if model.embedding is not None:
        x = embed(model.embedding, inputs)
    else:
        x = np.asarray(inputs, dtype=np.float64)
    layer = model.layers[0]
    return (x @ layer.weights.T + layer.bias) > 0.0


def extractability_census(model: Model, batch: MiniBatch) -> CensusReport:
    """Count activations per point and per neuron, plus exclusive activations."""
    active = first_layer_activations(model, batch.inputs)
    per_neuron = active.sum(axis=0)
    exclusive_cols = per_neuron == 1
    return CensusReport(
        per_point_activations=active.sum(axis=1),
        per_point_exclusive=active[:, exclusive_cols].sum(axis=1),
        per_neuron_activations=per_neuron,
    )


@dataclass
class CensusRow:
    seed: int
    init: str  # "trap" or "random"
    extractable: int
    median_per_neuron: float
    max_redundancy: int
    total_activations: int


def census_study(
    *,
    dim: int = 3072,
    classes: int = 10,
    hidden: int = 1000,
    batch: int = 100,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    skew: float | None = None,
    master_seed: int = 0,
) -> tuple[list[CensusRow], list[CensusReport]]:
    """Trap-weight vs random initialization activation census (per seed)."""
    rows: list[CensusRow] = []
    reports: list[CensusReport] = []
    for seed in seeds:
        stream = RngStream(master_seed).child("census", seed)
        ds = generate_synthetic(dim, classes, batch, stream.derive_seed("data"))
        batch_ = MiniBatch(ds.inputs, ds.labels)
        random_model = build_mlp(dim, [hidden], classes, stream.child("model"))
        trap_model = build_attack_model(
            random_model,
            TrapWeightConfig(skew=skew if skew is not None else default_skew(dim)),
            None,
            stream.child("attack"),
        )
        for name, model in (("trap", trap_model), ("random", random_model)):
            report = extractability_census(model, batch_)
            reports.append(report)
            rows.append(
                CensusRow(
                    seed=seed,
                    init=name,
                    extractable=report.individually_extractable,
                    median_per_neuron=float(np.median(report.per_neuron_activations)),
                    max_redundancy=int(report.per_point_exclusive.max()),
                    total_activations=report.total_activations,
                )
            )
    return rows, reports


# ---------------------------------------------------------------------------
# Direct exposure helper

def exposed_target_update(
    model: Model, batch: MiniBatch, dp: DPConfig, rng: RngStream
) -> GradientUpdate:
    """The update the attack exposes: the target's gradients after clip+noise."""
    update = backward(model, forward(model, batch), batch)
    return apply_dp(update, dp, rng)


# ---------------------------------------------------------------------------
# Sybil-fraction sweep

@dataclass
class SweepPoint:
    seed: int
    benign: int
    fraction: float
    mean_snr: float
    candidates: int


def sybil_fraction_sweep(
    *,
    dim: int = 192,
    classes: int = 10,
    participants: int = 50,
    batch: int = 20,
    hidden: int = 128,
    benign_counts: Sequence[int] = (1, 2, 3, 4, 5, 10, 15, 20, 30, 40, 50),
    sigma: float = 0.1,
    clip: float = 1.0,
    skew: float | None = None,
    seeds: Sequence[int] = (0,),
    master_seed: int = 0,
    eta: float = 0.1,
) -> list[SweepPoint]:
    """Targeted rounds with a varying share of honest bystanders.

    The benign count includes the target; the remaining participants are
    zero-payload sybils. Within a seed the trap model, target, and target
    batch stay fixed and bystander sets are nested, so adding benign users can
    only destroy exclusivity, never create it.
    """
    dp = DPConfig("ddp", clip=clip, sigma=sigma, participants=participants)
    trap = TrapWeightConfig(skew=skew if skew is not None else default_skew(dim))
    points: list[SweepPoint] = []
    for seed in seeds:
        stream = RngStream(master_seed).child("sweep", seed)
        ds = generate_synthetic(
            dim, classes, participants * batch, stream.derive_seed("data")
        )
        state = ServerState(
            model=build_mlp(dim, [hidden], classes, stream.child("model")),
            master=stream.child("state"),
        )
        honest = provision_honest(state, ds.inputs, ds.labels, participants, batch, dp)
        provision_sybils(state, participants - 1)
        target = honest[0]
        bystander_order = honest[1:]
        attack_model = build_attack_model(state.model, trap, None, stream.child("attack"))

        # ground-truth activations of every honest user's points on the trap layer
        user_points = {u: state.users[u].inputs for u in honest}
        target_inputs = user_points[target]
        active_by_user = {
            u: first_layer_activations(attack_model, user_points[u]) for u in honest
        }

        for i, benign in enumerate(benign_counts):
            if not 1 <= benign <= participants:
                raise ConfigurationError("benign counts must lie in [1, participants]")
            bystanders = bystander_order[: benign - 1]
            roster = sorted(
                [target] + bystanders + state.sybil_ids()[: participants - benign]
            )
            cfg = RoundConfig(
                index=i,
                participants=participants,
                eta=eta,
                sampling="targeted",
                target=target,
                bystanders=benign - 1,
                apply_update=False,
            )
            _, plan = plan_malicious_round(
                state,
                target,
                round_index=i,
                participants=participants,
                eta=eta,
                trap=trap,
                bystanders=benign - 1,
            )
            aggregate, _ = run_round(state, cfg, roster, model=attack_model)
            exposed = subtract_sybil_contributions(aggregate, plan)

            # extractability over the overlay of every honest batch in the round
            overlay = np.vstack(
                [active_by_user[target]] + [active_by_user[u] for u in bystanders]
            )
            exclusive_cols = overlay.sum(axis=0) == 1
            target_exclusive = overlay[: len(target_inputs), exclusive_cols].sum(axis=1)
            fraction = float((target_exclusive > 0).mean())

            floor = noise_std(dp) * np.sqrt(benign)
            candidates = extract_inputs(exposed, bias_floor=max(floor, 1e-12))
            score_candidates(candidates, target_inputs)
            mean_snr = float(np.mean([c.snr for c in candidates])) if candidates else 0.0
            points.append(SweepPoint(seed, benign, fraction, mean_snr, len(candidates)))
    return points


# ---------------------------------------------------------------------------
# Gradient-norm vs SNR

@dataclass
class NormSnrRow:
    neuron: int
    row_norm: float
    snr: float


def norm_vs_snr_study(
    *,
    dim: int = 3072,
    classes: int = 10,
    hidden: int = 1000,
    batch: int = 10,
    sigma: float = 0.1,
    clip: float = 1.0,
    participants: int = 100,
    skew: float = 0.55,
    head_gain: float = 10.0,
    floor_multiple: float = 3.0,
    master_seed: int = 0,
) -> tuple[list[NormSnrRow], float | None]:
    """Per-neuron (clipped+noised weight-row norm, extraction SNR) pairs.

    Per-layer clipping caps how many rows can stand above the noise floor
    (their squared norms share the clip budget), so the study runs a sparse
    trap (high skew), a gained head, and a stricter bias floor: the candidate
    list is then dominated by rows that carry signal at varying strength
    rather than by pure-noise rows, which carry no ordering.
    """
    dp = DPConfig("ddp", clip=clip, sigma=sigma, participants=participants)
    stream = RngStream(master_seed).child("norm-snr")
    ds = generate_synthetic(dim, classes, batch, stream.derive_seed("data"))
    model = build_mlp(dim, [hidden], classes, stream.child("model"))
    attack_model = build_attack_model(
        model,
        TrapWeightConfig(skew=skew),
        None,
        stream.child("attack"),
        head_gain=head_gain,
    )
    batch_ = MiniBatch(ds.inputs, ds.labels)
    exposed = exposed_target_update(attack_model, batch_, dp, stream.child("dp"))
    candidates = extract_inputs(
        exposed, bias_floor=max(floor_multiple * noise_std(dp), 1e-12)
    )
    score_candidates(candidates, ds.inputs)
    weight_rows = exposed.layers[0].weights
    rows = [
        NormSnrRow(c.neuron, float(np.linalg.norm(weight_rows[c.neuron])), float(c.snr))
        for c in candidates
    ]
    correlation = None
    if len(rows) >= 3 and noise_std(dp) > 0:
        correlation = float(
            stats.spearmanr([r.row_norm for r in rows], [r.snr for r in rows]).statistic
        )
    return rows, correlation


# ---------------------------------------------------------------------------
# Amplification

@dataclass
class AmplifyRow:
    seed: int
    head: str  # "baseline" or the hot fraction
    neuron: int
    snr: float


def amplification_study(
    *,
    hot_fractions: Sequence[float] = (0.1, 0.3, 0.5, 1.0),
    sigma: float = 0.001,
    clip: float = 1.0,
    dim: int = 3072,
    classes: int = 10,
    hidden: int = 1000,
    batch: int = 20,
    skew: float | None = None,
    seeds: Sequence[int] = (0,),
    master_seed: int = 0,
) -> list[AmplifyRow]:
    """Extraction SNR distributions per amplification-head hot fraction.

    Noise is the flat per-gradient scale from the construction's setup (LDP
    semantics: std = sigma * clip); the baseline head is the unmodified
    random classification layer.
    """
    dp = DPConfig("ldp", clip=clip, sigma=sigma)
    rows: list[AmplifyRow] = []
    for seed in seeds:
        stream = RngStream(master_seed).child("amplify", seed)
        ds = generate_synthetic(dim, classes, batch, stream.derive_seed("data"))
        batch_ = MiniBatch(ds.inputs, ds.labels)
        base = build_mlp(dim, [hidden], classes, stream.child("model"))
        trap_only = build_attack_model(
            base,
            TrapWeightConfig(skew=skew if skew is not None else default_skew(dim)),
            None,
            stream.child("attack"),
        )
        # one permutation per seed: hot subsets are nested across fractions, and
        # every head shares the first-layer noise draw, so differences across
        # fractions are structural rather than sampling luck
        hot_order = stream.child("hot").generator().permutation(hidden)
        heads: list[tuple[str, Model]] = [("baseline", trap_only)]
        for p in sorted(hot_fractions):
            amp = build_amplified_head(
                trap_only,
                AmplificationConfig(hot_fraction=p),
                stream.child("head"),
                hot_indices=hot_order,
            )
            heads.append((str(p), amp))
        for label, model in heads:
            exposed = exposed_target_update(model, batch_, dp, stream.child("dp"))
            candidates = extract_inputs(exposed, bias_floor=max(noise_std(dp), 1e-12))
            score_candidates(candidates, ds.inputs)
            rows.extend(AmplifyRow(seed, label, c.neuron, float(c.snr)) for c in candidates)
    return rows


# ---------------------------------------------------------------------------
# Averaging out noise

def averaging_study(
    *,
    dim: int = 3072,
    classes: int = 10,
    hidden: int = 1000,
    batch: int = 10,
    sigma: float = 0.1,
    clip: float = 1.0,
    participants: int = 100,
    skew: float = 0.3,
    head_gain: float = 4.0,
    floor_multiple: float = 0.5,
    master_seed: int = 0,
) -> tuple[int, list[float]]:
    """Running-mean SNR over redundant noisy reconstructions of one point.

    Picks the point with the most exclusive trap rows; candidates are fed
    noisiest-first (ascending |bias gradient|) so each added row has
    below-average variance and refines the running mean. A permissive bias
    floor keeps plenty of redundant rows available for averaging.
    """
    dp = DPConfig("ddp", clip=clip, sigma=sigma, participants=participants)
    stream = RngStream(master_seed).child("averaging")
    ds = generate_synthetic(dim, classes, batch, stream.derive_seed("data"))
    model = build_attack_model(
        build_mlp(dim, [hidden], classes, stream.child("model")),
        TrapWeightConfig(skew=skew),
        None,
        stream.child("attack"),
        head_gain=head_gain,
    )
    batch_ = MiniBatch(ds.inputs, ds.labels)
    active = first_layer_activations(model, ds.inputs)
    exclusive_cols = active.sum(axis=0) == 1
    per_point = active[:, exclusive_cols].sum(axis=1)
    point = int(per_point.argmax())
    neurons = np.flatnonzero(active[point] & exclusive_cols)

    exposed = exposed_target_update(model, batch_, dp, stream.child("dp"))
    bias = exposed.layers[0].bias[neurons]
    keep = np.abs(bias) > max(floor_multiple * noise_std(dp), 1e-12)
    neurons, bias = neurons[keep], bias[keep]
    if neurons.size == 0:
        raise ConfigurationError("no redundant rows survived the bias floor; lower sigma or skew")
    order = np.argsort(np.abs(bias))
    values = exposed.layers[0].weights[neurons[order]] / bias[order, None]
    _, curve = average_redundant(values, ds.inputs[point])
    return point, curve


# ---------------------------------------------------------------------------
# Text pipeline

@dataclass
class TextRow:
    repeat: int
    sigma: float
    extractable: int
    recovered: int

    @property
    def fraction(self) -> float:
        return self.recovered / self.extractable if self.extractable else 0.0


def text_recovery_study(
    *,
    vocab: int = 256,
    dim: int = 32,
    hidden: int = 256,
    batch: int = 32,
    sigmas: Sequence[float] = (0.0, 0.01, 0.1, 0.5),
    clip: float = 1.0,
    participants: int = 100,
    skew: float = 0.3,
    repeats: int = 3,
    classes: int = 2,
    master_seed: int = 0,
) -> list[TextRow]:
    """Extract pooled embeddings and invert them to tokens under rising noise.

    Examples are single-token rows over a uniform(0, 1) embedding table whose
    index 0 is the reserved zero pad. A row counts as recovered when the
    candidate from its strongest exclusive neuron looks up to the true token.
    The extractable set comes from the clean activation pattern, so the
    denominator is identical across noise scales.
    """
    rows: list[TextRow] = []
    for rep in range(repeats):
        stream = RngStream(master_seed).child("text", rep)
        gen = stream.child("table").generator()
        table = gen.uniform(0.0, 1.0, size=(vocab, dim))
        table[0] = 0.0
        embedding = EmbeddingLayer(table, pad_token=0)
        tokens = stream.child("tokens").generator().integers(1, vocab, size=(batch, 1))
        labels = stream.child("labels").generator().integers(0, classes, size=batch)
        model = build_attack_model(
            build_mlp(dim, [hidden], classes, stream.child("model"), embedding=embedding),
            TrapWeightConfig(skew=skew),
            None,
            stream.child("attack"),
        )
        batch_ = MiniBatch(tokens, labels)
        active = first_layer_activations(model, tokens)
        exclusive_cols = active.sum(axis=0) == 1
        update = backward(model, forward(model, batch_), batch_)

        for si, sigma in enumerate(sigmas):
            dp = DPConfig("ddp", clip=clip, sigma=sigma, participants=participants)
            exposed = apply_dp(update, dp, stream.child("dp", si))
            grads = exposed.layers[0]
            extractable = 0
            recovered = 0
            for b in range(batch):
                cols = np.flatnonzero(active[b] & exclusive_cols)
                if cols.size == 0:
                    continue
                extractable += 1
                best = cols[np.argmax(np.abs(grads.bias[cols]))]
                if abs(grads.bias[best]) <= 1e-300:
                    continue
                candidate = grads.weights[best] / grads.bias[best]
                if token_lookup(candidate, embedding) == int(tokens[b, 0]):
                    recovered += 1
            rows.append(TextRow(rep, float(sigma), extractable, recovered))
    return rows


# ---------------------------------------------------------------------------
# Benign training

def benign_training_run(
    *,
    dim: int = 192,
    classes: int = 10,
    hidden: int = 64,
    users: int = 10,
    batch: int = 20,
    rounds: int = 30,
    participants: int = 10,
    eta: float = 0.5,
    clip: float = 1e6,
    master_seed: int = 0,
) -> list[float]:
    """Honest FedSGD rounds; returns the training loss before and after each round."""
    stream = RngStream(master_seed).child("train")
    ds = generate_synthetic(dim, classes, users * batch, stream.derive_seed("data"))
    state = ServerState(
        model=build_mlp(dim, [hidden], classes, stream.child("model")),
        master=stream.child("state"),
    )
    dp = DPConfig("none", clip=clip)
    provision_honest(state, ds.inputs, ds.labels, users, batch, dp)
    losses = [dataset_loss(state.model, ds.inputs, ds.labels)]
    for t in range(rounds):
        cfg = RoundConfig(index=t, participants=participants, eta=eta, sampling="uniform")
        roster = sample_users(state, cfg, stream.child("sample", t))
        run_round(state, cfg, roster)
        losses.append(dataset_loss(state.model, ds.inputs, ds.labels))
    return losses
