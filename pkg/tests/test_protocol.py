import hashlib
import math

import numpy as np
import pytest

from modiad import protocol
from modiad.anomaly import anomaly_map, image_score
from modiad.errors import InvalidInputError, RoundError
from modiad.lora import Mode, layer_shapes, uploaded_param_count
from modiad.nn import ClassModel, MapperNet, model_params
from modiad.persist import jsonl_text, serialize_bank
from modiad.protocol import (RoundCost, StatusReport, build_environment, initial_state, run_experiment,
                             run_round)
from modiad.streamgen import FeatureSample

from conftest import small_config


def digest(state):
    h = hashlib.sha256(serialize_bank(state.bank))
    for p in state.pools:
        h.update(repr(sorted(p.remaining.items())).encode())
        h.update(repr(sorted(p.counts().items())).encode())
    h.update(repr((state.round, state.balance, state.ledger, state.q, state.modes.q_smooth)).encode())
    return h.hexdigest()


def full_count(env):
    return uploaded_param_count(layer_shapes(initial_state(env).bank.models[0]), Mode.FULL)


# --- anomaly maps -------------------------------------------------------------------


def rotation(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def linear_model(w2to3, w3to2):
    z = np.zeros(2)
    return ClassModel(0, MapperNet((w2to3,), (z,), "identity"), MapperNet((w3to2,), (z,), "identity"))


def test_perfect_predictions_give_zero_maps():
    s = FeatureSample(0, np.array([[1.0, 2.0]] * 4), np.array([[1.0, 2.0]] * 4))
    psi2, psi3, fused = anomaly_map(linear_model(np.eye(2), np.eye(2)), s)
    assert fused.shape == (2, 2)
    assert np.abs(psi2).max() < 1e-9 and np.abs(psi3).max() < 1e-9 and np.abs(fused).max() < 1e-12


def test_unit_chord_in_both_modalities_fuses_to_one():
    # unit vectors 60 degrees apart are at chord distance 2 sin(30) = 1
    s = FeatureSample(0, np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    psi2, psi3, fused = anomaly_map(linear_model(rotation(60), rotation(60)), s)
    assert abs(psi2[0, 0] - 1) < 1e-9 and abs(psi3[0, 0] - 1) < 1e-9 and abs(fused[0, 0] - 1) < 1e-9


def test_zero_discrepancy_in_one_modality_zeroes_fused_cell():
    s = FeatureSample(0, np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    _, psi3, fused = anomaly_map(linear_model(rotation(90), np.eye(2)), s)
    assert psi3[0, 0] > 1 and fused[0, 0] < 1e-9


def test_anomaly_map_input_checks():
    model = linear_model(np.eye(2), np.eye(2))
    with pytest.raises(InvalidInputError):
        anomaly_map(model, FeatureSample(0, np.zeros((4, 3)), np.zeros((4, 2))))
    with pytest.raises(InvalidInputError):
        anomaly_map(model, FeatureSample(0, np.zeros((3, 2)), np.zeros((3, 2))))
    with pytest.raises(InvalidInputError):
        image_score(np.zeros((2, 2)), "median")
    assert image_score(np.array([[0.0, 2.0], [1.0, 1.0]]), "mean") == 1.0


# --- rounds -------------------------------------------------------------------------


def test_status_reports_exclude_empty_classes():
    with pytest.raises(InvalidInputError):
        StatusReport(0, 1, {0: 0})


def test_zero_global_budget_round_is_a_no_op_apart_from_quality():
    env = build_environment(small_config(budgets={"global": 0}), 0)
    s0 = initial_state(env)
    s1, rec = run_round(env, s0)
    assert rec.selected == () and rec.cost == RoundCost(0, 0, 0)
    for c in s0.bank.models:
        for a, b in zip(model_params(s0.bank.models[c]), model_params(s1.bank.models[c])):
            assert np.array_equal(a, b)
    assert all(q is not None for q in s1.q)
    assert s1.balance == s0.balance


def test_single_uploader_becomes_the_global_model(monkeypatch):
    env = build_environment(small_config(topology={"clients": 1, "classes": 1, "per_client": 1, "share": 1},
                                         budgets={"per_client": 1, "global": 1}), 0)
    trained = []
    real = protocol.local_train

    def spy(*args, **kw):
        out = real(*args, **kw)
        trained.append(out[0])
        return out

    monkeypatch.setattr(protocol, "local_train", spy)
    s1, rec = run_round(env, initial_state(env))
    assert rec.selected == ((0, 0),)
    for a, b in zip(model_params(trained[0]), model_params(s1.bank.models[0])):
        assert np.array_equal(a, b)
    assert s1.bank.models[0].version == 1


def test_zero_iterations_keep_the_broadcast_model():
    env = build_environment(small_config(training={"tau_max": 0}), 0)
    s0 = initial_state(env)
    state = s0
    for _ in range(3):
        state, rec = run_round(env, state)
        assert rec.cost.train_param_steps == 0
    for c in s0.bank.models:
        for a, b in zip(model_params(s0.bank.models[c]), model_params(state.bank.models[c])):
            assert np.array_equal(a, b)


def test_unscheduled_classes_are_bit_identical():
    env = build_environment(small_config(budgets={"per_client": 1, "global": 1}), 3)
    state = initial_state(env)
    for _ in range(4):
        before = {c: [p.copy() for p in model_params(m)] for c, m in state.bank.models.items()}
        state, rec = run_round(env, state)
        touched = {c for _, c in rec.selected}
        for c, params in before.items():
            if c not in touched:
                assert all(np.array_equal(a, b) for a, b in zip(params, model_params(state.bank.models[c])))


def test_cost_exactness_with_low_rank_rounds():
    cfg = small_config(lora={"enabled": True, "t_warm": 1}, rounds=6)
    res = run_experiment(cfg, 1)
    env = build_environment(cfg, 1)
    shapes = layer_shapes(res.state.bank.models[0])
    full = uploaded_param_count(shapes, Mode.FULL)
    low = uploaded_param_count(shapes, Mode.LOW_RANK, 2)
    assert full == full_count(env)
    seen_low = False
    for rec in res.log:
        expected = sum(low if rec.modes[c] == "lowrank" else full for _, c in rec.selected)
        assert rec.cost.uplink == expected
        seen_low |= any(rec.modes[c] == "lowrank" for _, c in rec.selected)
    assert seen_low
    assert all(m == "full" for m in res.log[0].modes)


def test_low_rank_uplink_never_exceeds_full_on_identical_schedules():
    base = small_config(lora={"t_warm": 1}, rounds=6)
    off = run_experiment(base, 2, lora=False)
    on = run_experiment(base, 2, lora=True)
    assert [r.selected for r in off.log] == [r.selected for r in on.log]
    for a, b in zip(off.log, on.log):
        assert b.cumulative.uplink <= a.cumulative.uplink
    assert on.log[-1].cumulative.uplink < off.log[-1].cumulative.uplink


def test_downlink_counts_each_base_version_once_per_client():
    cfg = small_config(rounds=5)
    res = run_experiment(cfg, 0)
    full = full_count(build_environment(cfg, 0))
    cache = {}
    versions = {c: 0 for c in range(2)}
    for rec in res.log:
        expected = 0
        for k, c in rec.selected:
            if cache.get((k, c)) != versions[c]:
                expected += full
                cache[(k, c)] = versions[c]
        assert rec.cost.downlink == expected
        for c in {c for _, c in rec.selected}:
            versions[c] = rec.round


def test_balance_equals_recount_of_the_log():
    res = run_experiment(small_config(rounds=6), 4)
    counts = [0, 0]
    for rec in res.log:
        for _, c in rec.selected:
            counts[c] += 1
    assert list(res.state.balance.b_cum) == counts


def test_train_cost_is_params_times_steps_times_batch():
    cfg = small_config(training={"batch": 3, "tau_max": 2}, rounds=1)
    res = run_experiment(cfg, 0)
    full = full_count(build_environment(cfg, 0))
    rec = res.log[0]
    pools = res.state.pools
    expected = sum(full * 2 * min(3, len(pools[k].samples[c])) for k, c in rec.selected)
    assert rec.cost.train_param_steps == expected


def test_failed_round_leaves_state_untouched(monkeypatch):
    env = build_environment(small_config(), 0)
    state, _ = run_round(env, initial_state(env))
    before = digest(state)

    def boom(models):
        raise InvalidInputError("injected")

    monkeypatch.setattr(protocol, "mean_models", boom)
    with pytest.raises(RoundError) as err:
        run_round(env, state)
    assert err.value.round == 2 and err.value.class_id is not None
    assert digest(state) == before


def test_divergence_surfaces_with_round_client_and_class():
    env = build_environment(small_config(training={"eta": 1e200}), 0)
    state = initial_state(env)
    with pytest.raises(RoundError) as err:
        with np.errstate(all="ignore"):
            for _ in range(4):
                state, _ = run_round(env, state)
    assert err.value.round >= 1 and err.value.client is not None and err.value.class_id is not None


def test_changing_one_client_stream_leaves_other_packets_alone(monkeypatch):
    env = build_environment(small_config(), 0)
    ref, _ = run_round(env, initial_state(env))
    real = protocol.stream

    def skewed(master, *key):
        if key[:2] in (("packet", 1), ("features", 1)):
            return real(master + 99, *key)
        return real(master, *key)

    monkeypatch.setattr(protocol, "stream", skewed)
    alt, _ = run_round(env, initial_state(env))
    a, b = ref.pools[0], alt.pools[0]
    assert a.counts() == b.counts()
    for c in a.samples:
        for x, y in zip(a.samples[c], b.samples[c]):
            assert np.array_equal(x.e2d, y.e2d) and np.array_equal(x.e3d, y.e3d)


# --- experiments ----------------------------------------------------------------------


def test_zero_rounds_reports_the_untrained_bank():
    res = run_experiment(small_config(rounds=0), 0, test_rounds=(0,))
    assert res.log == [] and res.report == res.test_history[0]


def test_runs_are_bit_identical():
    cfg = small_config(lora={"enabled": True, "t_warm": 1})
    a = run_experiment(cfg, 7)
    b = run_experiment(cfg, 7)
    assert jsonl_text(a.log) == jsonl_text(b.log)
    assert serialize_bank(a.state.bank) == serialize_bank(b.state.bank)
    assert a.report == b.report


@pytest.mark.parametrize("policy", ["smg", "rs", "so", "bo", "brute"])
def test_every_policy_runs(policy):
    res = run_experiment(small_config(rounds=2), 0, policy=policy)
    assert len(res.log) == 2 and all(r.policy == policy for r in res.log)


def test_single_class_topology_runs():
    cfg = small_config(topology={"clients": 1, "classes": 1, "per_client": 1, "share": 1},
                       budgets={"per_client": 1, "global": 1}, lora={"enabled": True, "t_warm": 1})
    res = run_experiment(cfg, 0)
    assert len(res.log) == 4 and 0.0 <= res.report["mean"]["i_auroc"] <= 1.0


def test_exhausted_pools_leave_empty_packets():
    cfg = small_config(stream={"pool_per_pair": 1}, rounds=3)
    res = run_experiment(cfg, 0)
    assert all(n == 1 for p in res.state.pools for n in p.counts().values())
