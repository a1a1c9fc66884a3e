"""
SoaGuard - 実験ドライバ

行動監視(supervise)・動的認可取り消し(deauth: UAR / AFR)・TBM規模性能(scale)の
3種類の実験をゲートウェイに対して実行し、レポートを作る。
ゲートウェイはHTTPで起動済みのものでも、httpx.MockTransport によるインプロセスでもよい。
"""

import json
import logging
import math
import os
import secrets
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import httpx
import numpy as np
import pandas as pd
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    field_validator,
)
from pydantic import ValidationError as SchemaError
from scipy import stats

from gateway import ADMIN_HEADER, Gateway
from monitor import Blacklist, Monitor
from policy import Tbm, TrustedBehaviorRule, append_rules, compile_tbm, format_tbm, load_srm_file
from risk import Thresholds
from soa_model import SoaModel, find_route, load_model_file, route_services
from utils import GuardError, ManualClock, NotReachable, ParseError, ValidationError, schema_errors

logger = logging.getLogger(__name__)

IN_PROCESS_URL = "http://soaguard.local"
PAD_PREFIX = "/__pad__/"


# =============================================================================
# 実験仕様
# =============================================================================


class ExperimentSpec(BaseModel):
    """実験仕様(JSONファイルから読み込む)"""

    model_config = ConfigDict(extra="forbid")

    scenario: str                      # SRMファイル
    model: str                         # モデルファイル
    consumer: str
    key: str
    target: str
    request_count: NonNegativeInt = 10000
    service_range: List[str] = Field(default_factory=list)
    thresholds: Dict[str, Optional[float]] = Field(default_factory=lambda: {
        "uar_max": None, "afr_max": None, "arr_max": None, "afr_window": 60})
    frequency_schedule: Optional[List[Tuple[int, PositiveFloat]]] = None  # (グループ番号, 回/分)
    tbm_scale: Optional[List[PositiveInt]] = None
    repetitions: PositiveInt = 5
    seed: int = 0
    workers: PositiveInt = 1
    interval_ms: NonNegativeFloat = 0.0  # supervise/uar のリクエスト間隔(0なら連続)
    group_duration: PositiveFloat = 60.0  # AFRの1グループの長さ(秒)
    admin_token: Optional[str] = None     # scale で起動済みゲートウェイの管理APIに送る

    @field_validator("thresholds")
    @classmethod
    def _check_thresholds(cls, value: Dict[str, Optional[float]]) -> Dict[str, Optional[float]]:
        try:
            Thresholds.from_dict(value)
        except ValidationError as e:
            raise ValueError(str(e)) from None
        return value

    def build_thresholds(self) -> Thresholds:
        return Thresholds.from_dict(self.thresholds)


def load_experiment_spec(json_path: str) -> ExperimentSpec:
    """実験仕様JSONを読み込む。相対パスはファイルの位置を基準にする"""
    try:
        with open(json_path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, json_path, e.lineno) from e
    if isinstance(raw, dict):
        base = os.path.dirname(os.path.abspath(json_path))
        for key in ("scenario", "model"):
            if isinstance(raw.get(key), str) and not os.path.isabs(raw[key]):
                raw[key] = os.path.join(base, raw[key])
    try:
        return ExperimentSpec.model_validate(raw)
    except SchemaError as e:
        raise ValidationError(f"{json_path}: {schema_errors(e)}") from None


def generate_trace(spec: ExperimentSpec) -> List[str]:
    """service_range 上の一様乱数でリクエスト列を作る(シード固定で再現可能)"""
    if spec.request_count == 0:
        return []
    if not spec.service_range:
        raise ValidationError("service_range が空です")
    rng = np.random.default_rng(spec.seed)
    picks = rng.integers(0, len(spec.service_range), size=spec.request_count)
    return [spec.service_range[i] for i in picks]


# =============================================================================
# レポート
# =============================================================================


@dataclass
class ServiceStat:
    access_times: int = 0
    responded_times: int = 0
    denied_times: int = 0
    latency_us_total: float = 0.0

    @property
    def avg_latency_us(self) -> float:
        return self.latency_us_total / self.responded_times if self.responded_times else 0.0


@dataclass
class ExperimentReport:
    mode: str
    seed: int
    request_count: int
    thresholds: Dict[str, Optional[float]]
    services: Dict[str, ServiceStat] = field(default_factory=dict)
    triggers: List[Dict] = field(default_factory=list)
    groups: List[Dict] = field(default_factory=list)
    scaling: List[Dict] = field(default_factory=list)
    envelope: Optional[Dict] = None
    http_requests: int = 0
    partial: bool = False

    @property
    def responded_total(self) -> int:
        return sum(s.responded_times for s in self.services.values())

    @property
    def denied_total(self) -> int:
        return sum(s.denied_times for s in self.services.values())

    @property
    def first_trigger(self) -> Optional[Dict]:
        return self.triggers[0] if self.triggers else None

    def services_frame(self) -> pd.DataFrame:
        rows = [{
            "service": sid,
            "access_times": s.access_times,
            "responded_times": s.responded_times,
            "denied_times": s.denied_times,
            "avg_latency_us": round(s.avg_latency_us, 3),
        } for sid, s in sorted(self.services.items())]
        return pd.DataFrame(rows, columns=["service", "access_times", "responded_times",
                                           "denied_times", "avg_latency_us"])

    def groups_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.groups, columns=["group", "rate_per_min", "requests",
                                                  "responded", "avg_latency_us"])

    def scaling_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{k: v for k, v in row.items() if k != "samples_us"} for row in self.scaling],
                            columns=["rules", "mean_latency_us"])

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "request_count": self.request_count,
            "thresholds": self.thresholds,
            "services": {sid: {**asdict(s), "avg_latency_us": s.avg_latency_us}
                         for sid, s in sorted(self.services.items())},
            "responded_total": self.responded_total,
            "denied_total": self.denied_total,
            "triggers": self.triggers,
            "groups": self.groups,
            "scaling": self.scaling,
            "envelope": self.envelope,
            "http_requests": self.http_requests,
            "partial": self.partial,
        }

    def write(self, out_dir: str) -> List[str]:
        """report.json と図ごとのCSVを書き出す"""
        os.makedirs(out_dir, exist_ok=True)
        written = []
        path = os.path.join(out_dir, "report.json")
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        written.append(path)
        for name, frame in (("services.csv", self.services_frame()),
                            ("groups.csv", self.groups_frame()),
                            ("scaling.csv", self.scaling_frame())):
            if not frame.empty:
                path = os.path.join(out_dir, name)
                frame.to_csv(path, index=False)
                written.append(path)
        return written


# =============================================================================
# クライアント
# =============================================================================


@dataclass
class AccessResult:
    status: int
    decision: Optional[str]
    reason: Optional[str]
    latency_us: float
    hops: int

    @property
    def responded(self) -> bool:
        return self.status == 200

    @property
    def tripped(self) -> bool:
        return self.decision in ("terminated", "blacklisted")


class GatewayClient:
    """1セッション分の消費者クライアント

    サーバ側の現在位置(直前に許可されたURI)をクライアント側でも追い、
    目的サービスへは入口からモデルのルートをたどってアクセスする。
    """

    def __init__(self, http: httpx.Client, model: SoaModel, consumer: str, key: str, target: str):
        self.http = http
        self.model = model
        self.consumer = consumer
        self.key = key
        self.target = target
        self.token: Optional[str] = None
        self.position = model.initial_uri
        self.http_requests = 0
        self._routes: Dict[str, List[str]] = {}

    def open(self) -> int:
        """セッションを開く。HTTPステータスを返す"""
        resp = self.http.post("/auth", json={"consumer": self.consumer, "key": self.key, "target": self.target})
        self.http_requests += 1
        if resp.status_code == 200:
            self.token = resp.json()["session"]
            self.position = self.model.initial_uri
        return resp.status_code

    def get(self, uri: str) -> Tuple[httpx.Response, float]:
        headers = {"X-Consumer": self.consumer, "X-Session": self.token or ""}
        started = time.perf_counter()
        resp = self.http.get(uri, headers=headers)
        latency_us = (time.perf_counter() - started) * 1_000_000
        self.http_requests += 1
        if resp.status_code == 200:
            self.position = uri
        return resp, latency_us

    def _route_uris(self, service: str) -> List[str]:
        if service not in self._routes:
            try:
                path = route_services(self.model, find_route(self.model, service))
                self._routes[service] = [self.model.labels[s] for s in path]
            except NotReachable:
                self._routes[service] = [self.model.labels[service]]
        return self._routes[service]

    def hops_to(self, service: str) -> List[str]:
        target_uri = self.model.labels[service]
        if self.position == target_uri:
            return [target_uri]
        uris = self._route_uris(service)
        if uris[0] != self.model.initial_uri:
            return uris
        if self.position == self.model.initial_uri:
            return uris[1:]
        return uris

    def access(self, service: str) -> AccessResult:
        """論理リクエスト1件。最初に拒否されたホップで打ち切る"""
        hops = self.hops_to(service)
        resp, latency_us = None, 0.0
        for n, uri in enumerate(hops, start=1):
            resp, latency_us = self.get(uri)
            if resp.status_code != 200:
                return AccessResult(resp.status_code, resp.headers.get("X-Decision"),
                                    resp.headers.get("X-Reason"), latency_us, n)
        return AccessResult(200, "allow", "Ok", latency_us, len(hops))


class RealPacer:
    """実時間でリクエスト時刻を合わせる"""

    def __init__(self):
        self.origin = time.monotonic()

    def wait_until(self, offset_ms: float) -> None:
        delay = self.origin + offset_ms / 1000.0 - time.monotonic()
        if delay > 0:
            time.sleep(delay)


class VirtualPacer:
    """インプロセスのゲートウェイの ManualClock を進める"""

    def __init__(self, clock: ManualClock):
        self.clock = clock
        self.origin = clock.now_ms()

    def wait_until(self, offset_ms: float) -> None:
        target = self.origin + int(round(offset_ms))
        if target > self.clock.now_ms():
            self.clock.set(target)


def in_process(spec: ExperimentSpec, blacklist_path: Optional[str] = None,
               clock: Optional[ManualClock] = None) -> Tuple[httpx.Client, Gateway, ManualClock]:
    """実験仕様のシナリオと閾値でインプロセスのゲートウェイを組み立てる"""
    model = load_model_file(spec.model)
    srm = load_srm_file(spec.scenario, model)
    clock = clock or ManualClock()
    monitor = Monitor(model, srm, spec.build_thresholds(), Blacklist(blacklist_path), clock=clock)
    admin_token = spec.admin_token or secrets.token_urlsafe(24)
    gateway = Gateway(model, monitor, admin_token=admin_token)
    http = httpx.Client(transport=gateway.transport(), base_url=IN_PROCESS_URL,
                        headers={ADMIN_HEADER: admin_token})
    return http, gateway, clock


def _new_client(spec: ExperimentSpec, http: httpx.Client, model: SoaModel) -> GatewayClient:
    client = GatewayClient(http, model, spec.consumer, spec.key, spec.target)
    status = client.open()
    if status != 200:
        raise GuardError(f"セッションを開けません: {spec.consumer} (HTTP {status})")
    return client


def _new_report(spec: ExperimentSpec, mode: str) -> ExperimentReport:
    report = ExperimentReport(mode, spec.seed, spec.request_count, dict(spec.thresholds))
    for sid in spec.service_range:
        report.services.setdefault(sid, ServiceStat())
    return report


# =============================================================================
# 行動監視 / UAR
# =============================================================================


def _replay(spec: ExperimentSpec, http: httpx.Client, report: ExperimentReport,
            pacer=None) -> None:
    model = load_model_file(spec.model)
    trace = generate_trace(spec)
    lock = threading.Lock()

    def record(index: int, service: str, result: AccessResult) -> None:
        with lock:
            stat = report.services.setdefault(service, ServiceStat())
            stat.access_times += 1
            if result.responded:
                stat.responded_times += 1
                stat.latency_us_total += result.latency_us
            else:
                stat.denied_times += 1
            if result.tripped:
                report.triggers.append({"index": index, "service": service,
                                        "decision": result.decision, "reason": result.reason})

    def worker(indices: List[int]) -> int:
        client = _new_client(spec, http, model)
        try:
            for i in indices:
                if pacer is not None and spec.interval_ms > 0:
                    pacer.wait_until(i * spec.interval_ms)
                record(i, trace[i], client.access(trace[i]))
        finally:
            with lock:
                report.http_requests += client.http_requests
        return len(indices)

    try:
        if spec.workers == 1:
            worker(list(range(len(trace))))
        else:
            shards = [list(range(w, len(trace), spec.workers)) for w in range(spec.workers)]
            with ThreadPoolExecutor(max_workers=spec.workers) as pool:
                list(pool.map(worker, shards))
    except httpx.TransportError as e:
        logger.error(f"gateway connection failed: {e}")
        report.partial = True
    report.triggers.sort(key=lambda t: t["index"])


def run_supervision(spec: ExperimentSpec, http: httpx.Client, pacer=None) -> ExperimentReport:
    """ランダムなリクエスト列を送り、サービスごとの応答数を集計する"""
    report = _new_report(spec, "supervise")
    _replay(spec, http, report, pacer)
    logger.info(f"supervise done requests={spec.request_count} responded={report.responded_total} "
                f"denied={report.denied_total}")
    return report


def run_deauthorization(spec: ExperimentSpec, http: httpx.Client, mode: str = "uar",
                        pacer=None) -> ExperimentReport:
    """UARモード: 行動監視と同じ列を閾値付きで再生する
    AFRモード: frequency_schedule のグループごとのレートで1つの解放サービスにアクセスする
    """
    if mode == "uar":
        report = _new_report(spec, "deauth-uar")
        _replay(spec, http, report, pacer)
    elif mode == "afr":
        report = _run_afr(spec, http, pacer or RealPacer())
    else:
        raise ValidationError(f"不明なモード {mode!r} (uar / afr)")
    trigger = report.first_trigger
    logger.info(f"deauth {mode} done trigger={trigger}")
    return report


def _run_afr(spec: ExperimentSpec, http: httpx.Client, pacer) -> ExperimentReport:
    if not spec.frequency_schedule:
        raise ValidationError("AFRモードには frequency_schedule が必要です")
    if not spec.service_range:
        raise ValidationError("service_range が空です")

    model = load_model_file(spec.model)
    service = spec.service_range[0]
    report = _new_report(spec, "deauth-afr")
    report.services = {service: ServiceStat()}
    client = _new_client(spec, http, model)
    group_ms = spec.group_duration * 1000.0
    index = 0

    try:
        for n, (group, rate) in enumerate(spec.frequency_schedule):
            count = int(round(rate * spec.group_duration / 60.0))
            start = n * group_ms
            responded, latency_total = 0, 0.0
            for i in range(count):
                pacer.wait_until(start + round(i * 60000.0 / rate))
                result = client.access(service)
                stat = report.services[service]
                stat.access_times += 1
                if result.responded:
                    responded += 1
                    latency_total += result.latency_us
                    stat.responded_times += 1
                    stat.latency_us_total += result.latency_us
                else:
                    stat.denied_times += 1
                if result.tripped:
                    report.triggers.append({"index": index, "group": group, "service": service,
                                            "decision": result.decision, "reason": result.reason})
                index += 1
            report.groups.append({
                "group": group,
                "rate_per_min": rate,
                "requests": count,
                "responded": responded,
                "avg_latency_us": latency_total / responded if responded else 0.0,
            })
    except httpx.TransportError as e:
        logger.error(f"gateway connection failed: {e}")
        report.partial = True

    report.request_count = index
    report.http_requests = client.http_requests
    return report


# =============================================================================
# TBM規模
# =============================================================================


def pad_tbm(tbm: Tbm, size: int) -> Tbm:
    """トラフィックに現れない合成URIのルールで size 件まで水増しする"""
    need = size - len(tbm)
    if need <= 0:
        return tbm
    filler = (TrustedBehaviorRule(tbm.consumer, f"{PAD_PREFIX}{k}", f"{PAD_PREFIX}{k + 1}")
              for k in range(need))
    return append_rules(tbm, filler)


def check_envelope(rules: List[int], means: List[float], slack_us: float = 1000.0) -> Dict:
    """最大規模のレイテンシが最小規模の線形外挿(+1ms)以内かを判定する"""
    lo, hi = int(np.argmin(rules)), int(np.argmax(rules))
    ratio = rules[hi] / rules[lo]
    bound = max(ratio * means[lo], means[lo] + slack_us)
    result = {"bound_us": bound, "largest_us": means[hi], "passed": bool(means[hi] <= bound)}
    if len(rules) >= 2 and len(set(rules)) >= 2:
        fit = stats.linregress(rules, means)
        result.update(slope_us_per_rule=float(fit.slope), intercept_us=float(fit.intercept),
                      rvalue=float(fit.rvalue))
    return result


def run_scaling(spec: ExperimentSpec, http: httpx.Client) -> ExperimentReport:
    """TBMの規模ごとに解放サービスへのアクセス時間を計測する"""
    if not spec.tbm_scale:
        raise ValidationError("scale には tbm_scale が必要です")
    if not spec.service_range:
        raise ValidationError("service_range が空です")

    model = load_model_file(spec.model)
    srm = load_srm_file(spec.scenario, model)
    rule = srm.rule_for(spec.consumer, spec.target)
    if rule is None:
        raise ValidationError(f"SRMに ({spec.consumer}, {spec.target}) のルールがありません")
    base = compile_tbm(rule, model)
    service = spec.service_range[0]
    report = _new_report(spec, "scale")
    report.services = {service: ServiceStat()}

    for size in spec.tbm_scale:
        padded = pad_tbm(base, size)
        if len(padded) > size:
            logger.warning(f"tbm_scale {size} は基本TBM {len(base)} 件より小さいため {len(padded)} 件で計測します")
        headers = {ADMIN_HEADER: spec.admin_token} if spec.admin_token else None
        resp = http.put(f"/admin/tbm/{spec.consumer}/{spec.target}", content=format_tbm(padded), headers=headers)
        if resp.status_code != 200:
            raise GuardError(f"TBMを差し替えられません (HTTP {resp.status_code} {resp.headers.get('X-Reason', '')})")

        client = _new_client(spec, http, model)
        client.access(service)  # 目的サービスまで移動
        samples = []
        for _ in range(spec.repetitions):
            result = client.access(service)
            stat = report.services[service]
            stat.access_times += 1
            if result.responded:
                stat.responded_times += 1
                stat.latency_us_total += result.latency_us
                samples.append(result.latency_us)
            else:
                stat.denied_times += 1
        report.http_requests += client.http_requests + 1
        mean = float(np.mean(samples)) if samples else math.nan
        report.scaling.append({"rules": len(padded), "mean_latency_us": mean, "samples_us": samples})
        logger.info(f"scale rules={len(padded)} mean_latency_us={mean:.1f}")

    rows = [r for r in report.scaling if not math.isnan(r["mean_latency_us"])]
    if rows:
        report.envelope = check_envelope([r["rules"] for r in rows], [r["mean_latency_us"] for r in rows])
    report.request_count = len(spec.tbm_scale) * spec.repetitions
    return report
