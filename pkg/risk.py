"""
SoaGuard - 行動リスク計測

UAR: TBM不一致のたびに +1
ARR: セッション経過時間の累積
AFR: アクセス頻度(回/分)。既定はスライディングウィンドウ、two-point は連続2リクエスト間の差分商
評価 E = 1 - θ/R、証拠 PF = 1 (E > 0) / 0 (E <= 0)
"""

import math
from bisect import bisect_right
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Tuple

from utils import ClockRegression, ValidationError

MS_PER_MINUTE = 60_000
MIN_EVALUATION = -math.inf


@dataclass(frozen=True)
class BehaviorElements:
    """チェックポイントが収集する行動要素"""

    id: str
    src: str
    dst: str
    timestamp: int  # 単調クロック(ms)
    access_count: int = 0


@dataclass(frozen=True)
class Thresholds:
    """リスク閾値。無効化された閾値は +inf"""

    uar_max: float = 1000
    afr_max: float = 350
    arr_max: float = 3600
    afr_window: float = 60

    def __post_init__(self):
        for name in ("uar_max", "afr_max", "arr_max", "afr_window"):
            value = getattr(self, name)
            if not value > 0:
                raise ValidationError(f"閾値 {name}={value} は正の値である必要があります")
        if math.isinf(self.afr_window):
            raise ValidationError("afr_window は有限である必要があります")
        if self.afr_window_ms < 1:
            raise ValidationError(f"afr_window={self.afr_window} は1ms以上である必要があります")

    @property
    def afr_window_ms(self) -> int:
        return int(round(self.afr_window * 1000))

    @classmethod
    def from_dict(cls, values: Dict[str, Optional[float]]) -> "Thresholds":
        unknown = set(values) - {"uar_max", "afr_max", "arr_max", "afr_window"}
        if unknown:
            raise ValidationError(f"不明な閾値キー: {', '.join(sorted(unknown))}")
        kwargs = {k: (math.inf if v is None else float(v)) for k, v in values.items()}
        return cls(**kwargs)

    @classmethod
    def disabled(cls, afr_window: float = 60) -> "Thresholds":
        return cls(math.inf, math.inf, math.inf, afr_window)


@dataclass(frozen=True)
class RiskState:
    """セッション単位のリスク累積値。更新関数は新しい状態を返す"""

    started_at: int = 0
    last_timestamp: int = 0
    uar: int = 0
    arr_ms: int = 0
    afr: float = 0.0
    request_log: Tuple[int, ...] = ()

    @classmethod
    def start(cls, now: int) -> "RiskState":
        return cls(started_at=now, last_timestamp=now)

    @property
    def arr_s(self) -> float:
        return self.arr_ms / 1000.0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['request_log'] = list(self.request_log)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "RiskState":
        data = dict(data)
        data['request_log'] = tuple(data.get('request_log', ()))
        return cls(**data)


@dataclass(frozen=True)
class Evidence:
    uar_pf: int = 0
    afr_pf: int = 0
    arr_pf: int = 0


def update_uar(state: RiskState, matched: bool) -> RiskState:
    """一致なら据え置き、不一致なら +1"""
    if matched:
        return state
    return replace(state, uar=state.uar + 1)


def update_arr(state: RiskState, now: int) -> RiskState:
    """経過時間を累積し last_timestamp を進める"""
    if now < state.last_timestamp:
        raise ClockRegression(f"now={now} < last_timestamp={state.last_timestamp}")
    return replace(state, arr_ms=state.arr_ms + (now - state.last_timestamp), last_timestamp=now)


def update_afr(state: RiskState, now: int, window_s: float = 60, mode: str = "window") -> RiskState:
    """アクセス頻度を更新する

    window: (now - window, now] に残るタイムスタンプ数を1分あたりに換算
    two-point: 直前のリクエストとの間隔から 60000 / gap を計算(初回は0)
    """
    if now < state.last_timestamp:
        raise ClockRegression(f"now={now} < last_timestamp={state.last_timestamp}")
    if state.request_log and now < state.request_log[-1]:
        raise ClockRegression(f"now={now} < {state.request_log[-1]}")

    if mode == "two-point":
        if not state.request_log:
            return replace(state, afr=0.0, request_log=(now,))
        gap = max(now - state.request_log[-1], 1)
        return replace(state, afr=MS_PER_MINUTE / gap, request_log=(now,))

    window_ms = int(round(window_s * 1000))
    if window_ms < 1:
        raise ValidationError(f"afr_window={window_s} は1ms以上である必要があります")
    cutoff = now - window_ms
    log = state.request_log
    start = bisect_right(log, cutoff)
    log = log[start:] + (now,)
    afr = len(log) * (MS_PER_MINUTE / window_ms)
    return replace(state, afr=afr, request_log=log)


def evaluate(risk: float, threshold: float) -> float:
    """E = 1 - θ/R。R=0 のときは最小値(-inf)"""
    if not threshold > 0:
        raise ValueError("threshold は正の値である必要があります")
    if risk <= 0:
        return MIN_EVALUATION
    return 1.0 - threshold / risk


def evidence(evaluation: float) -> int:
    return 1 if evaluation > 0 else 0


def compute_evidence(state: RiskState, thresholds: Thresholds) -> Evidence:
    return Evidence(
        uar_pf=evidence(evaluate(state.uar, thresholds.uar_max)),
        afr_pf=evidence(evaluate(state.afr, thresholds.afr_max)),
        arr_pf=evidence(evaluate(state.arr_s, thresholds.arr_max)),
    )


def format_risk_line(consumer: str, session_id: int, state: RiskState, ev: Evidence) -> str:
    """メトリクス収集向けの構造化ログ行"""
    return (f"risk consumer={consumer} session={session_id} uar={state.uar} "
            f"arr_s={state.arr_s:.3f} afr_per_min={state.afr:.1f} "
            f"pf_uar={ev.uar_pf} pf_afr={ev.afr_pf}")


def risk_snapshot(state: RiskState, ev: Evidence) -> Dict:
    return {
        "uar": state.uar,
        "arr_s": state.arr_s,
        "afr_per_min": state.afr,
        "pf_uar": ev.uar_pf,
        "pf_afr": ev.afr_pf,
        "pf_arr": ev.arr_pf,
    }
