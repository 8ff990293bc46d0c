from __future__ import annotations

import json

import pytest

from pirdeter.simulator import (
    DEVIANT,
    GRIM,
    PRESCRIBED,
    AgentPolicy,
    ConfigError,
    DeviantScript,
    ExitModel,
    SimConfig,
    best_response_probe,
    exit_scenario,
    load_within,
    rational_pair_agreement,
    run_simulation,
)


@pytest.fixture(scope="module")
def mixed_report():
    cfg = SimConfig(runs=1500, ell=200, k=2, seed=5, mix={PRESCRIBED: 0.5, DEVIANT: 0.5},
                    deviant=DeviantScript(collude=True, amicable=True, report=False))
    return run_simulation(cfg)


def test_prescribed_agents_never_collude_unreported():
    rep = run_simulation(SimConfig(runs=1500, seed=1))
    agg = rep.aggregate
    assert rep.feasibility["pass"]
    assert agg["collusion_attempts"] > 0
    assert agg["successful_collusions"] == 0
    assert agg["unreported_successful_collusions"] == 0
    assert agg["money_residual"] == 0


def test_lone_deceiver_reports_amicable_partner(mixed_report):
    agg = mixed_report.aggregate
    assert agg["confirmed_accusations"] > 0
    assert agg["money_residual"] == 0
    # a lone prescribed deceiver among amicable deviants learns and always reports;
    # deviant-only pairs learn together and stay quiet
    lone = [r for r in mixed_report.runs if len(r["learned"]) == 1]
    assert lone and all(r["confirmed"] == 1 for r in lone)


def test_reward_paid_once_per_confirmed_request(mixed_report):
    agg = mixed_report.aggregate
    assert agg["requests_with_multiple_rewards"] == 0
    assert agg["confirmed_requests_without_reward"] == 0
    assert agg["rewarded_requests"] > 0


def test_grim_cooperators_sustain_collusion_without_reward():
    rep = run_simulation(SimConfig(runs=1000, seed=2, r=0, mix={GRIM: 1.0}))
    agg = rep.aggregate
    assert agg["unreported_successful_collusions"] / agg["runs"] >= 0.99
    assert agg["reports"] == 0


def test_grim_memory_blocks_reporters():
    # prescribed agents report grim partners, who then refuse them for good
    rep = run_simulation(SimConfig(runs=3000, ell=20, k=2, seed=4, prescribed_collude=1.0, r=60000,
                                   mix={PRESCRIBED: 0.5, GRIM: 0.5}))
    assert rep.aggregate["confirmed_accusations"] > 0
    assert rep.aggregate["money_residual"] == 0
    reported = set()
    for run in rep.runs:
        pair = frozenset(run["servers"])
        if pair in reported:
            assert not run["attempt"]
        if run["confirmed"]:
            reported.add(pair)


def test_load_within_binomial_band():
    rep = run_simulation(SimConfig(runs=3000, ell=30, k=4, seed=9))
    assert load_within(rep, 4.0)
    assert sum(rep.load) == 3000 * 4


def test_malicious_fraction_matches_statistical_bound():
    cfg = SimConfig(runs=3000, ell=30, k=4, theta="0.3", seed=6, false_accusation_rate=0.2,
                    garbage_responses=True)
    rep = run_simulation(cfg)
    emp, pred, z = rational_pair_agreement(rep)
    assert abs(z) <= 3
    assert rep.aggregate["false_accusations"] > 0
    assert rep.aggregate["money_residual"] == 0


def test_deterministic_under_seed():
    cfg = SimConfig(runs=300, ell=12, k=2, seed=17, mix={PRESCRIBED: 0.5, DEVIANT: 0.5})
    a = json.dumps(run_simulation(cfg).to_json(), sort_keys=True)
    b = json.dumps(run_simulation(cfg).to_json(), sort_keys=True)
    assert a == b
    c = json.dumps(run_simulation(cfg.with_(seed=18)).to_json(), sort_keys=True)
    assert a != c


def test_config_roundtrip_and_strictness():
    cfg = SimConfig(runs=10, theta="0.1")
    assert SimConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    with pytest.raises(ConfigError):
        SimConfig.from_json({"runs": 10, "color": "red"})
    with pytest.raises(ConfigError):
        SimConfig.from_json({"deviant": {"collude": True, "mood": 1}})


@pytest.mark.parametrize("bad", [
    {"k": 1}, {"k": 3}, {"k": 4, "ell": 3}, {"runs": 0}, {"s": -1}, {"s": 1.5}, {"mix": {"robot": 1.0}},
    {"mix": {}}, {"discount": "1"}, {"theta": "1"}, {"channel_success": 2.0},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_digest_tracks_config():
    assert SimConfig().digest() == SimConfig().digest()
    assert SimConfig().digest() != SimConfig(seed=1).digest()


# ---------------------------------------------------------------------------
# Probe


def test_probe_reports_above_reward_bound():
    assert best_response_probe(SimConfig(), AgentPolicy(PRESCRIBED))


def test_probe_quiet_without_reward():
    assert not best_response_probe(SimConfig(r=0), AgentPolicy(PRESCRIBED))


def test_probe_quiet_when_partners_always_remet():
    # ell = k: every partner is met again, so cooperation outweighs any modest reward
    cfg = SimConfig(ell=2, k=2, r=4985, V=10000, discount="0.99")
    assert not best_response_probe(cfg, AgentPolicy(PRESCRIBED))


def test_probe_against_refusing_partner():
    assert best_response_probe(SimConfig(r=1), AgentPolicy(PRESCRIBED), partner_refuses=True)
    assert not best_response_probe(SimConfig(r=0), AgentPolicy(PRESCRIBED), partner_refuses=True)


def test_probe_malicious_never_reports():
    assert not best_response_probe(SimConfig(), AgentPolicy("malicious"))


# ---------------------------------------------------------------------------
# Exits

MODEL = ExitModel(k=2, ell=1000, Omega=5000, T=10000, r="0.0001", r2="0.0001", p=100, s=3)


def test_no_exits():
    rep = exit_scenario(MODEL, [])
    assert rep.inexecutable == 0 and rep.realized_ratio == 0


def test_single_exiter_matches_sigma():
    rep = exit_scenario(MODEL, [("S0", 0)])
    assert rep.predicted_ratio is not None
    assert abs(rep.realized_ratio - rep.predicted_ratio) <= 0.1 * rep.predicted_ratio


def test_two_exiters_stream_matches_multi_exit():
    rep = exit_scenario(MODEL, [("S0", 0), ("S1", 10)], mode="stream")
    assert abs(rep.realized_ratio - rep.predicted_ratio) <= 0.1 * rep.predicted_ratio


def test_exit_json_and_seeds():
    rep = exit_scenario(MODEL, [("S0", 0)], seeds=range(3))
    assert len(rep.per_seed) == 3
    assert rep.to_json()["mode"] == "batch"


@pytest.mark.parametrize("schedule,kw", [
    ([("S0", 0), ("S0", 1)], {}),
    ([("S0", 10**6)], {}),
    ([("S0", 0)], {"mode": "sideways"}),
])
def test_exit_validation(schedule, kw):
    with pytest.raises(ConfigError):
        exit_scenario(MODEL, schedule, **kw)


def test_exit_model_strict():
    with pytest.raises(ConfigError):
        ExitModel.from_json({"k": 2, "ell": 10, "Omega": 1, "T": 1, "extra": 0})
    with pytest.raises(ConfigError):
        ExitModel(k=2, ell=10, Omega=1, T=1, r="2")
