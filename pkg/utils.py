"""
SoaGuard - 共通ユーティリティ
例外階層・設定ファイル読み込み・ロギング設定・クロック・行指向フォーマットの字句解析
"""

import json
import logging
import os
import threading
import time
from typing import Iterator, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt
from pydantic import ValidationError as SchemaError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


# =============================================================================
# 例外
# =============================================================================


class GuardError(Exception):
    """SoaGuard の全例外の基底クラス"""


class ParseError(GuardError):
    """行指向ファイルの構文エラー(ファイル名と行番号付き)"""

    def __init__(self, message: str, source: str = "<string>", lineno: int = 0):
        self.source = source
        self.lineno = lineno
        super().__init__(f"{source}:{lineno}: {message}")


class ValidationError(GuardError):
    """構文は正しいが意味的な制約に違反している"""


class UnknownService(GuardError):
    """モデルに宣言されていないサービス"""


class NotReachable(GuardError):
    """初期サービスから到達できない"""


class UnknownTransition(GuardError):
    """モデルに存在しない遷移"""


class UnreachableService(GuardError):
    """解放サービスへのルートが存在しない(SRMルールが充足不能)"""

    def __init__(self, service: str, consumer: str = "", origin: str = ""):
        self.service = service
        self.consumer = consumer
        self.origin = origin
        who = f" (consumer {consumer})" if consumer else ""
        where = f"{origin}: " if origin else ""
        super().__init__(f"{where}UnreachableService: {service}{who} は初期サービスから到達できません")


class ForeignConsumerRule(GuardError):
    """他の消費者IDを持つルールをTBMへ追加しようとした"""


class ClockRegression(GuardError):
    """時刻が巻き戻った(クロックソースの異常)"""


class ForeignSessionElements(GuardError):
    """行動要素のIDがセッションの消費者と一致しない"""


class StoreUnavailable(GuardError):
    """ブラックリストストアの読み書きに失敗した"""


class NotFound(GuardError):
    """削除対象が存在しない"""


# CLIで終了コード1(検証エラー)として扱う例外
VALIDATION_ERRORS = (ParseError, ValidationError, UnknownService, NotReachable,
                     UnknownTransition, UnreachableService, ForeignConsumerRule, NotFound)


# =============================================================================
# 行指向フォーマット
# =============================================================================


def iter_records(document: str, source: str = "<string>") -> Iterator[Tuple[int, List[str]]]:
    """`#` コメントと空行を除いた (行番号, トークン列) を返す"""
    for lineno, raw in enumerate(document.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        yield lineno, line.split()


def read_text(path: str) -> str:
    """UTF-8テキストファイルを読み込む"""
    with open(path, 'r', encoding='utf-8') as f:
        return f.read()


def write_text(path: str, text: str) -> None:
    """UTF-8テキストファイルを書き出す(一時ファイル経由で置き換え)"""
    tmp = f"{path}.tmp"
    with open(tmp, 'w', encoding='utf-8') as f:
        f.write(text)
    os.replace(tmp, path)


# =============================================================================
# クロック
# =============================================================================


class MonotonicClock:
    """プロセス内の単調増加クロック(ミリ秒)"""

    def now_ms(self) -> int:
        return time.monotonic_ns() // 1_000_000


class ManualClock:
    """手動で進めるクロック。実験のインプロセス実行とテスト用"""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> int:
        with self._lock:
            if ms < 0:
                raise ClockRegression(f"クロックを {ms}ms 戻すことはできません")
            self._now += ms
            return self._now

    def set(self, now_ms: int) -> None:
        with self._lock:
            if now_ms < self._now:
                raise ClockRegression(f"{now_ms} < {self._now}")
            self._now = now_ms


# =============================================================================
# 設定
# =============================================================================


def schema_errors(error: SchemaError) -> str:
    """pydantic の検証エラーを1行にまとめる"""
    return "; ".join(
        f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}"
        for err in error.errors()
    )


class ThresholdSettings(BaseModel):
    """thresholds セクション。null は閾値なし(+inf)"""

    model_config = ConfigDict(extra="forbid")

    uar_max: Optional[PositiveFloat] = 1000
    afr_max: Optional[PositiveFloat] = 350
    arr_max: Optional[PositiveFloat] = 3600
    afr_window: PositiveFloat = 60


class GuardConfig(BaseModel):
    """デプロイメント設定(config.json)"""

    model_config = ConfigDict(extra="forbid")

    listen: str = Field(default="127.0.0.1:8080", pattern=r"^[^:]+:\d+$")
    model_path: str = "sample_policies/clinic.model"
    srm_path: str = "sample_policies/clinic.srm"
    tbm_dir: Optional[str] = None
    blacklist_path: str = "blacklist.txt"
    thresholds: ThresholdSettings = Field(default_factory=ThresholdSettings)
    afr_mode: Literal["window", "two-point"] = "window"
    arr_enforce: bool = False
    routes: Literal["shortest", "all-shortest"] = "shortest"
    idle_timeout: PositiveFloat = 1800.0
    mock_latency_ms: NonNegativeFloat = 0.0
    log_level: str = "INFO"
    trace_size: PositiveInt = 100_000
    admin_token: Optional[str] = Field(default=None, min_length=16)  # 未設定なら管理APIは無効

    @property
    def host(self) -> str:
        return self.listen.rsplit(':', 1)[0]

    @property
    def port(self) -> int:
        return int(self.listen.rsplit(':', 1)[1])

    def build_thresholds(self):
        """thresholds から risk.Thresholds を組み立てる"""
        from risk import Thresholds
        return Thresholds.from_dict(self.thresholds.model_dump())


_PATH_KEYS = ("model_path", "srm_path", "tbm_dir", "blacklist_path")


def load_config(json_path: str = "config.json") -> GuardConfig:
    """設定JSONを読み込む。相対パスは設定ファイルの位置を基準に解決する"""
    try:
        with open(json_path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, json_path, e.lineno) from e

    try:
        config = GuardConfig.model_validate(raw)
    except SchemaError as e:
        raise ValidationError(f"{json_path}: {schema_errors(e)}") from None

    base = os.path.dirname(os.path.abspath(json_path))
    resolved = {}
    for key in _PATH_KEYS:
        value = getattr(config, key)
        if value and not os.path.isabs(value):
            resolved[key] = os.path.join(base, value)
    config = config.model_copy(update=resolved)

    # 閾値の組み合わせ(ウィンドウ幅など)はここで一度検証する
    try:
        config.build_thresholds()
    except ValidationError as e:
        raise ValidationError(f"{json_path}: {e}") from None
    return config


def setup_logging(level: str = "INFO") -> None:
    """ルートロガーを設定する"""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)
    for noisy in ('httpx', 'httpcore'):
        logging.getLogger(noisy).setLevel(logging.WARNING)
