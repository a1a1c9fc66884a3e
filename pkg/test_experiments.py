"""
実験ドライバのテスト

インプロセスのゲートウェイ(仮想クロック)で行動監視・認可取り消し・TBM規模の実験を再生する
"""

import json
import os
import tempfile

import httpx
import pandas as pd
import pytest

from experiments import (
    ExperimentSpec,
    GatewayClient,
    VirtualPacer,
    check_envelope,
    generate_trace,
    in_process,
    load_experiment_spec,
    pad_tbm,
    run_deauthorization,
    run_scaling,
    run_supervision,
)
from policy import Tbm, TrustedBehaviorRule
from soa_model import load_model_file
from utils import ValidationError

HERE = os.path.dirname(os.path.abspath(__file__))
SAMPLES = os.path.join(HERE, "sample_policies")
RECORDS_MODEL = os.path.join(SAMPLES, "records.model")
SRM1 = os.path.join(SAMPLES, "srm1.srm")
SRM2 = os.path.join(SAMPLES, "srm2.srm")

SERVICES = ["S3", "S4", "S5", "S6", "S7", "S8"]  # 機密サービス
DISABLED = {"uar_max": None, "afr_max": None, "arr_max": None, "afr_window": 60}


def make_spec(scenario=SRM1, **overrides) -> ExperimentSpec:
    values = dict(scenario=scenario, model=RECORDS_MODEL, consumer="C2", key="CK2", target="records",
                  request_count=10_000, service_range=list(SERVICES), thresholds=dict(DISABLED),
                  seed=20140901, interval_ms=100)
    values.update(overrides)
    return ExperimentSpec(**values)


def supervise(spec):
    http, gateway, clock = in_process(spec)
    with http:
        return run_supervision(spec, http, VirtualPacer(clock)), gateway


def test_experiment_spec_file_is_validated():
    """相対パスは仕様ファイル基準で解決し、未知キーや範囲外の値は ValidationError"""
    spec = load_experiment_spec(os.path.join(SAMPLES, "exp_uar.json"))
    assert spec.scenario == SRM1 and spec.model == RECORDS_MODEL
    assert spec.build_thresholds().uar_max == 1000

    base = {"scenario": "srm1.srm", "model": "records.model", "consumer": "C2", "key": "CK2",
            "target": "records", "service_range": SERVICES}
    invalid = [
        {"request_cnt": 10},
        {"workers": 0},
        {"repetitions": 0},
        {"request_count": -1},
        {"interval_ms": -5},
        {"thresholds": {"uar_max": 0}},
        {"thresholds": {"uaf_max": 3}},
        {"thresholds": {"afr_window": 0.0004}},
        {"frequency_schedule": [[0, 0]]},
        {"tbm_scale": [10, 0]},
    ]
    with tempfile.TemporaryDirectory() as tmp:
        for extra in invalid:
            path = os.path.join(tmp, "exp.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump({**base, **extra}, f)
            with pytest.raises(ValidationError) as info:
                load_experiment_spec(path)
            assert path in str(info.value), extra
        with open(path, "w", encoding="utf-8") as f:
            json.dump(["not", "an", "object"], f)
        with pytest.raises(ValidationError):
            load_experiment_spec(path)


def test_trace_is_seeded_and_uniform():
    spec = make_spec(request_count=6000)
    trace = generate_trace(spec)
    assert trace == generate_trace(spec)
    assert trace != generate_trace(make_spec(request_count=6000, seed=1))
    counts = pd.Series(trace).value_counts()
    assert set(counts.index) == set(SERVICES)
    assert counts.min() > 800


def test_supervision_srm1():
    """S3 と S7 だけが応答し、その全リクエストが応答される"""
    spec = make_spec()
    report, gateway = supervise(spec)

    for sid, stat in report.services.items():
        assert stat.responded_times <= stat.access_times
        if sid in ("S3", "S7"):
            assert stat.responded_times == stat.access_times > 0
        else:
            assert stat.responded_times == 0
            assert stat.denied_times == stat.access_times
    assert report.responded_total + report.denied_total == spec.request_count
    assert report.triggers == []
    assert not report.partial

    # ゲートウェイ側のカウンタでも S3 の応答は全て成功
    s1 = gateway.metrics_endpoint()["services"]["S3"]
    assert s1["response_times"] == s1["access_times"] == report.services["S3"].access_times


def test_supervision_srm2():
    spec = make_spec(scenario=SRM2, request_count=3000)
    report, _ = supervise(spec)
    responding = {sid for sid, s in report.services.items() if s.responded_times > 0}
    assert responding == {"S3", "S5", "S6"}
    for sid in responding:
        assert report.services[sid].responded_times == report.services[sid].access_times
    assert report.responded_total + report.denied_total == spec.request_count


def test_supervision_is_reproducible():
    spec = make_spec(request_count=800)
    first, _ = supervise(spec)
    second, _ = supervise(spec)
    strip = lambda r: {sid: (s.access_times, s.responded_times, s.denied_times) for sid, s in r.services.items()}
    assert strip(first) == strip(second)
    assert first.triggers == second.triggers


def test_empty_request_count():
    report, _ = supervise(make_spec(request_count=0))
    assert report.responded_total == 0 and report.denied_total == 0
    assert report.services_frame()["access_times"].sum() == 0


def test_uar_deauthorization():
    """1001件目の不正アクセスでセッションが終了し、以後は応答なし。新しいセッションで復帰"""
    baseline, _ = supervise(make_spec())

    spec = make_spec(thresholds={**DISABLED, "uar_max": 1000})
    trace = generate_trace(spec)
    unreleased = [i for i, s in enumerate(trace) if s not in ("S3", "S7")]
    expected_index = unreleased[1000]

    http, gateway, clock = in_process(spec)
    with http:
        report = run_deauthorization(spec, http, "uar", VirtualPacer(clock))

        assert report.first_trigger["index"] == expected_index
        assert report.first_trigger["reason"] == "UarExceeded"
        assert report.first_trigger["decision"] == "terminated"
        assert len(report.triggers) == 1
        assert report.responded_total == sum(1 for s in trace[:expected_index] if s in ("S3", "S7"))
        assert report.services["S3"].responded_times < baseline.services["S3"].responded_times
        assert report.responded_total + report.denied_total == spec.request_count
        assert not gateway.monitor.blacklist_contains("C2")

        client = GatewayClient(http, load_model_file(RECORDS_MODEL), "C2", "CK2", "records")
        assert client.open() == 200
        assert client.access("S3").responded


def test_afr_deauthorization():
    """388回/分のグループ7で終了し、グループ1-6は全て応答、以後は応答なし"""
    spec = load_experiment_spec(os.path.join(SAMPLES, "exp_afr.json"))
    http, _, clock = in_process(spec)
    with http:
        report = run_deauthorization(spec, http, "afr", VirtualPacer(clock))

    groups = {g["group"]: g for g in report.groups}
    assert groups[7]["rate_per_min"] == 388
    for g in range(1, 7):
        assert groups[g]["responded"] == groups[g]["requests"]
    assert report.first_trigger["group"] == 7
    assert report.first_trigger["reason"] == "AfrExceeded"
    assert 0 < groups[7]["responded"] < groups[7]["requests"]
    for g in range(8, 11):
        assert groups[g]["responded"] == 0
    assert report.responded_total + report.denied_total == report.request_count


def test_afr_schedule_below_threshold():
    spec = make_spec(service_range=["S3"], thresholds={**DISABLED, "afr_max": 350},
                     frequency_schedule=[[1, 100], [2, 200], [3, 300]])
    http, _, clock = in_process(spec)
    with http:
        report = run_deauthorization(spec, http, "afr", VirtualPacer(clock))
    assert report.triggers == []
    assert [g["responded"] for g in report.groups] == [100, 200, 300]


def test_pad_tbm():
    base = Tbm("C2", frozenset({TrustedBehaviorRule("C2", "/a", "/a")}))
    padded = pad_tbm(base, 100)
    assert len(padded) == 100
    assert base.rules <= padded.rules
    assert pad_tbm(padded, 50) is padded


def test_scaling_envelope():
    spec = make_spec(service_range=["S3"], tbm_scale=list(range(100, 1001, 100)), repetitions=20)
    http, _, _ = in_process(spec)
    with http:
        report = run_scaling(spec, http)

    assert [row["rules"] for row in report.scaling] == spec.tbm_scale
    assert all(len(row["samples_us"]) == 20 for row in report.scaling)
    assert all(row["mean_latency_us"] > 0 for row in report.scaling)
    assert report.envelope["passed"]
    assert "slope_us_per_rule" in report.envelope
    assert report.services["S3"].responded_times == 10 * 20


def test_scaling_single_size():
    spec = make_spec(service_range=["S3"], tbm_scale=[100], repetitions=5)
    http, _, _ = in_process(spec)
    with http:
        report = run_scaling(spec, http)
    assert len(report.scaling) == 1
    assert report.envelope["passed"]


def test_check_envelope():
    assert check_envelope([100, 1000], [50.0, 400.0])["passed"]
    assert check_envelope([100, 1000], [50.0, 1049.0])["passed"]    # +1ms 以内
    assert not check_envelope([100, 1000], [200.0, 2100.0])["passed"]


def test_concurrent_workers_conserve_counts():
    spec = make_spec(request_count=600, workers=3, interval_ms=0)
    http, _, _ = in_process(spec)
    with http:
        report = run_supervision(spec, http)
    assert report.responded_total + report.denied_total == 600
    for sid, stat in report.services.items():
        if sid in ("S3", "S7"):
            assert stat.responded_times == stat.access_times
        else:
            assert stat.responded_times == 0


def test_connection_loss_marks_partial():
    spec = make_spec(request_count=300, interval_ms=0)
    _, gateway, _ = in_process(spec)
    calls = {"n": 0}

    def flaky(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        if calls["n"] > 50:
            raise httpx.ConnectError("gateway down", request=request)
        return gateway.dispatch(request)

    with httpx.Client(transport=httpx.MockTransport(flaky), base_url="http://soaguard.local") as http:
        report = run_supervision(spec, http)
    assert report.partial
    assert report.responded_total + report.denied_total < spec.request_count


def test_report_files():
    report, _ = supervise(make_spec(request_count=200))
    with tempfile.TemporaryDirectory() as tmp:
        written = report.write(tmp)
        names = sorted(os.path.basename(p) for p in written)
        assert names == ["report.json", "services.csv"]
        with open(os.path.join(tmp, "report.json"), encoding="utf-8") as f:
            data = json.load(f)
        assert data["seed"] == 20140901
        assert data["thresholds"]["uar_max"] is None
        frame = pd.read_csv(os.path.join(tmp, "services.csv"))
        assert list(frame["service"]) == SERVICES
        assert frame["access_times"].sum() == 200


if __name__ == "__main__":
    print("=" * 60)
    print("実験ドライバ テスト")
    print("=" * 60)
    test_experiment_spec_file_is_validated()
    test_trace_is_seeded_and_uniform()
    test_supervision_srm1()
    test_supervision_srm2()
    test_supervision_is_reproducible()
    test_empty_request_count()
    test_uar_deauthorization()
    test_afr_deauthorization()
    test_afr_schedule_below_threshold()
    test_pad_tbm()
    test_scaling_envelope()
    test_scaling_single_size()
    test_check_envelope()
    test_concurrent_workers_conserve_counts()
    test_connection_loss_marks_partial()
    test_report_files()
    print("✅ 全テスト成功")
