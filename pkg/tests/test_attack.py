import numpy as np
import pytest

from glsim.attack import (
    AmplificationConfig,
    AttackPlan,
    TrapWeightConfig,
    build_amplified_head,
    build_attack_model,
    default_skew,
    init_trap_weights,
    plan_malicious_round,
    plan_to_json,
    subtract_sybil_contributions,
)
from glsim.dataset import generate_synthetic
from glsim.dp import DPConfig
from glsim.engine import (
    RoundConfig,
    ServerState,
    SybilPayload,
    local_update,
    provision_honest,
    provision_sybils,
    run_round,
    sample_users,
)
from glsim.errors import PlanningError
from glsim.nn import (
    DenseLayer,
    GradientUpdate,
    LayerGrad,
    MiniBatch,
    backward,
    build_mlp,
    flatten_update,
    forward,
)
from glsim.rng import RngStream


def trap_layer(dim=64, neurons=32, skew=0.5, seed=0):
    base = DenseLayer(np.zeros((neurons, dim)), np.zeros(neurons), "relu")
    return init_trap_weights(base, TrapWeightConfig(skew=skew), RngStream(seed))


class TestTrapWeights:
    def test_exact_negative_fraction_per_row(self):
        layer = trap_layer(dim=60, neurons=40)
        for row in layer.weights:
            assert (row < 0).sum() == 30

    def test_uneven_fraction_rounds(self):
        base = DenseLayer(np.zeros((8, 11)), np.zeros(8), "relu")
        layer = init_trap_weights(base, TrapWeightConfig(negative_fraction=0.3), RngStream(1))
        for row in layer.weights:
            assert (row < 0).sum() == round(0.3 * 11)

    def test_bias_is_zero(self):
        assert np.all(trap_layer().bias == 0.0)

    def test_huge_skew_silences_neurons_on_nonnegative_data(self):
        ds = generate_synthetic(dim=192, classes=5, count=50, seed=2)
        layer = trap_layer(dim=192, neurons=200, skew=10.0, seed=3)
        active = (ds.inputs @ layer.weights.T > 0).mean()
        assert active < 0.005

    def test_zero_skew_fires_about_half(self):
        ds = generate_synthetic(dim=192, classes=5, count=50, seed=2)
        layer = trap_layer(dim=192, neurons=400, skew=0.0, seed=4)
        active = (ds.inputs @ layer.weights.T > 0).mean()
        assert 0.35 < active < 0.65

    def test_tuned_skew_gives_redundant_extraction_rows(self):
        # several exclusive rows land on the same data point at batch 100
        ds = generate_synthetic(dim=3072, classes=10, count=100, seed=5)
        layer = trap_layer(dim=3072, neurons=1000, skew=default_skew(3072), seed=6)
        A = ds.inputs @ layer.weights.T > 0
        exclusive = A[:, A.sum(axis=0) == 1].sum(axis=1)
        assert exclusive.max() >= 10

    def test_median_activations_small_at_batch_20(self):
        ds = generate_synthetic(dim=768, classes=10, count=20, seed=7)
        layer = trap_layer(dim=768, neurons=500, skew=default_skew(768), seed=8)
        per_neuron = (ds.inputs @ layer.weights.T > 0).sum(axis=0)
        assert np.median(per_neuron) <= 2


class TestAmplifiedHead:
    def build(self, hot, seed=0, hidden=1000):
        model = build_mlp(32, [hidden], 10, RngStream(seed).child("m"))
        cfg = AmplificationConfig(hot_fraction=hot)
        return model, build_amplified_head(model, cfg, RngStream(seed).child("a"))

    def test_full_fraction_sets_all_ones(self):
        _, amp = self.build(1.0)
        assert amp.layers[-1].out_dim == 11
        assert np.all(amp.layers[-1].weights[-1] == 1.0)

    def test_tenth_fraction_sets_100_ones(self):
        _, amp = self.build(0.1)
        row = amp.layers[-1].weights[-1]
        assert (row == 1.0).sum() == 100 and (row == 0.0).sum() == 900

    def test_disabled_returns_model_unchanged(self):
        model = build_mlp(32, [16], 10, RngStream(3).child("m"))
        out = build_amplified_head(model, AmplificationConfig(enabled=False, hot_fraction=0.5), RngStream(0))
        assert out is model

    def test_existing_classes_untouched(self):
        model, amp = self.build(0.3)
        assert np.array_equal(amp.layers[-1].weights[:10], model.layers[-1].weights)
        assert np.array_equal(amp.layers[-1].bias[:10], model.layers[-1].bias)

    def test_hot_rows_have_larger_first_layer_gradients(self):
        ds = generate_synthetic(dim=768, classes=10, count=20, seed=9)
        model = build_mlp(768, [300], 10, RngStream(10).child("m"))
        attack_model = build_attack_model(
            model, TrapWeightConfig(skew=default_skew(768)), AmplificationConfig(hot_fraction=0.2), RngStream(11)
        )
        batch = MiniBatch(ds.inputs, ds.labels)
        upd = backward(attack_model, forward(attack_model, batch), batch)
        hot = attack_model.layers[-1].weights[-1] == 1.0
        norms = np.linalg.norm(upd.layers[0].weights, axis=1)
        assert norms[hot].mean() > norms[~hot].mean()


def targeted_state(seed=0, users=4, participants=8, payload=None, dp=None):
    dp = dp or DPConfig("ddp", clip=1.0, sigma=0.1, participants=8)
    master = RngStream(seed)
    model = build_mlp(48, [24], 4, master.child("model"))
    state = ServerState(model=model, master=master)
    ds = generate_synthetic(dim=48, classes=4, count=users * 5, seed=seed + 1)
    provision_honest(state, ds.inputs, ds.labels, users, 5, dp)
    provision_sybils(state, participants - 1, payload)
    return state


class TestPlanning:
    def test_pure_plan_with_enough_sybils(self):
        state = targeted_state()
        cfg, plan = plan_malicious_round(
            state, target=0, round_index=0, participants=8, eta=0.1,
            trap=TrapWeightConfig(),
        )
        assert cfg.sampling == "targeted" and len(plan.sybil_ids) == 7

    def test_pure_plan_without_sybils_fails(self):
        master = RngStream(0)
        state = ServerState(model=build_mlp(8, [4], 2, master.child("m")), master=master)
        ds = generate_synthetic(dim=8, classes=2, count=10, seed=1)
        provision_honest(state, ds.inputs, ds.labels, 2, 5, DPConfig())
        with pytest.raises(PlanningError):
            plan_malicious_round(state, target=0, round_index=0, participants=4, eta=0.1)

    def test_mixed_plan_counts(self):
        state = targeted_state(users=10, participants=8)
        cfg, plan = plan_malicious_round(
            state, target=2, round_index=1, participants=8, eta=0.1, bystanders=3,
        )
        assert cfg.bystanders == 3 and len(plan.sybil_ids) == 4

    def test_plan_json_roundtrips_through_serializer(self):
        state = targeted_state(payload=SybilPayload("constant", value=0.5))
        _, plan = plan_malicious_round(
            state, target=0, round_index=0, participants=8, eta=0.1,
            trap=TrapWeightConfig(), amplification=AmplificationConfig(hot_fraction=0.25),
        )
        doc = plan_to_json(plan)
        assert doc["payloads"][str(plan.sybil_ids[0])]["value"] == 0.5
        assert doc["trap_weights"]["skew"] == plan.trap.skew
        assert doc["amplification"]["hot_fraction"] == 0.25


class TestSubtraction:
    def run_targeted(self, payload, seed=3):
        state = targeted_state(seed=seed, payload=payload)
        cfg, plan = plan_malicious_round(
            state, target=0, round_index=0, participants=8, eta=0.1, payload=payload,
        )
        cfg = RoundConfig(**{**cfg.__dict__, "apply_update": False})
        roster = sample_users(state, cfg, state.master.child("s"))
        agg, _ = run_round(state, cfg, roster)
        target_update, _ = local_update(state.users[0], state.model, state.round_stream(0))
        return agg, plan, target_update

    def test_zero_payloads_are_identity(self):
        agg, plan, target = self.run_targeted(None)
        exposed = subtract_sybil_contributions(agg, plan)
        assert np.array_equal(flatten_update(exposed), flatten_update(agg))
        assert np.abs(flatten_update(exposed) - flatten_update(target)).max() < 1e-9

    def test_constant_payloads_subtract_k_times_value(self):
        agg, plan, target = self.run_targeted(SybilPayload("constant", value=0.125))
        exposed = subtract_sybil_contributions(agg, plan)
        assert np.allclose(flatten_update(agg) - flatten_update(exposed), 7 * 0.125, atol=1e-9)
        assert np.abs(flatten_update(exposed) - flatten_update(target)).max() < 1e-9

    def test_fixed_payloads_recover_target_exactly(self):
        gen = np.random.default_rng(12)
        master = RngStream(5)
        model = build_mlp(48, [24], 4, master.child("model"))
        fixed = GradientUpdate(
            [LayerGrad(gen.standard_normal(l.weights.shape), gen.standard_normal(l.bias.shape))
             for l in model.layers]
        )
        payload = SybilPayload("fixed", update=fixed)
        agg, plan, target = self.run_targeted(payload, seed=5)
        exposed = subtract_sybil_contributions(agg, plan)
        assert np.abs(flatten_update(exposed) - flatten_update(target)).max() < 1e-9
