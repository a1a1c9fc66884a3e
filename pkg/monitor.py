"""
SoaGuard - モニタ(行動認識アクセス制御アルゴリズム)

リクエストごとに TBM 照合とリスク更新を行い、
許可 / リクエスト拒否 / セッション終了 / ブラックリスト登録 を判定する。
"""

import logging
import os
import secrets
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from itertools import count
from typing import Dict, List, Optional, Tuple, Union

from policy import ConsumerKey, Srm, Tbm, authenticate, compile_srm, tbm_match
from risk import (
    BehaviorElements,
    Evidence,
    RiskState,
    Thresholds,
    compute_evidence,
    format_risk_line,
    risk_snapshot,
    update_afr,
    update_arr,
    update_uar,
)
from soa_model import SoaModel
from utils import ForeignConsumerRule, ForeignSessionElements, MonotonicClock, NotFound, StoreUnavailable

logger = logging.getLogger(__name__)


class Verdict(str, Enum):
    ALLOW = "Allow"
    DENY_REQUEST = "DenyRequest"
    TERMINATE_SESSION = "TerminateSession"
    BLACKLISTED = "Blacklisted"


class Reason(str, Enum):
    OK = "Ok"
    TBM_MISMATCH = "TbmMismatch"
    UAR_EXCEEDED = "UarExceeded"
    AFR_EXCEEDED = "AfrExceeded"
    ARR_EXCEEDED = "ArrExceeded"
    BOTH_EXCEEDED = "BothExceeded"
    SESSION_TERMINATED = "SessionTerminated"
    NOT_AUTHENTICATED = "NotAuthenticated"
    ON_BLACKLIST = "OnBlacklist"


class SessionStatus(str, Enum):
    ACTIVE = "Active"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: Reason
    nonce: Optional[str] = None  # 許可時のみ。モックサービスへの転送に添付する
    latency_us: int = 0

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW


@dataclass(frozen=True)
class Refused:
    reason: Reason


@dataclass(frozen=True)
class SessionSummary:
    consumer: str
    session_id: int
    requests: int
    allowed: int
    denied: int
    terminated_reason: Optional[str]
    risk: Dict


@dataclass
class Session:
    consumer: str
    target: str
    tbm: Tbm
    risk: RiskState
    session_id: int
    token: str
    started_at: int
    position: str  # 直前に許可されたURI(e_src)
    status: SessionStatus = SessionStatus.ACTIVE
    last_activity: int = 0
    requests: int = 0
    allowed: int = 0
    denied: int = 0
    terminated_reason: Optional[Reason] = None
    evidence: Evidence = field(default_factory=Evidence)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    @property
    def active(self) -> bool:
        return self.status is SessionStatus.ACTIVE


# =============================================================================
# ブラックリスト
# =============================================================================


@dataclass(frozen=True)
class BanEntry:
    consumer: str
    banned_at_ms: int
    reason: str


class Blacklist:
    """永続ブラックリスト。追記専用ファイル `ban <consumer> <unix-ms> <reason>`

    削除は管理操作のみで、残りのエントリでファイルを書き直す。
    別プロセス(CLI)による変更はファイルの (inode, mtime, size) の変化で検出し、読み直す。
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._entries: Dict[str, BanEntry] = {}
        self._stamp: Optional[Tuple[int, int, int]] = None
        self._lock = threading.RLock()
        self.load()

    def _file_stamp(self) -> Optional[Tuple[int, int, int]]:
        try:
            st = os.stat(self.path)
        except FileNotFoundError:
            return None
        except OSError as e:
            raise StoreUnavailable(f"ブラックリスト {self.path} を確認できません: {e}") from e
        return st.st_ino, st.st_mtime_ns, st.st_size

    def load(self) -> None:
        with self._lock:
            entries: Dict[str, BanEntry] = {}
            if not self.path:
                self._entries = entries
                return
            stamp = self._file_stamp()
            if stamp is not None:
                try:
                    with open(self.path, 'r', encoding='utf-8') as f:
                        lines = f.readlines()
                except OSError as e:
                    raise StoreUnavailable(f"ブラックリスト {self.path} を読み込めません: {e}") from e
                for lineno, raw in enumerate(lines, start=1):
                    tokens = raw.split(None, 3)
                    if len(tokens) < 3 or tokens[0] != "ban":
                        continue
                    try:
                        banned_at = int(tokens[2])
                    except ValueError:
                        raise StoreUnavailable(
                            f"{self.path}:{lineno}: 時刻 {tokens[2]!r} が整数ではありません") from None
                    reason = tokens[3].strip() if len(tokens) > 3 else ""
                    entries[tokens[1]] = BanEntry(tokens[1], banned_at, reason)
            self._entries, self._stamp = entries, stamp

    def _refresh(self) -> None:
        if self.path and self._file_stamp() != self._stamp:
            logger.info(f"blacklist changed on disk, reloading path={self.path}")
            self.load()

    def contains(self, consumer: str) -> bool:
        with self._lock:
            self._refresh()
            return consumer in self._entries

    def entries(self) -> List[BanEntry]:
        with self._lock:
            self._refresh()
            return self._sorted_entries()

    def _sorted_entries(self) -> List[BanEntry]:
        return sorted(self._entries.values(), key=lambda e: (e.banned_at_ms, e.consumer))

    def add(self, consumer: str, reason: str) -> BanEntry:
        entry = BanEntry(consumer, int(time.time() * 1000), reason)
        with self._lock:
            if self.path:
                self._refresh()
                try:
                    with open(self.path, 'a', encoding='utf-8') as f:
                        f.write(f"ban {entry.consumer} {entry.banned_at_ms} {entry.reason}\n")
                        f.flush()
                        os.fsync(f.fileno())
                except OSError as e:
                    raise StoreUnavailable(f"ブラックリスト {self.path} に書き込めません: {e}") from e
                self._stamp = self._file_stamp()
            self._entries[consumer] = entry
        logger.warning(f"ban consumer={consumer} reason={reason}")
        return entry

    def remove(self, consumer: str) -> BanEntry:
        with self._lock:
            self._refresh()
            if consumer not in self._entries:
                raise NotFound(f"{consumer} はブラックリストにありません")
            entry = self._entries.pop(consumer)
            if self.path:
                lines = [f"ban {e.consumer} {e.banned_at_ms} {e.reason}\n" for e in self._sorted_entries()]
                tmp = f"{self.path}.tmp"
                try:
                    with open(tmp, 'w', encoding='utf-8') as f:
                        f.writelines(lines)
                    os.replace(tmp, self.path)
                except OSError as e:
                    self._entries[consumer] = entry
                    raise StoreUnavailable(f"ブラックリスト {self.path} を更新できません: {e}") from e
                self._stamp = self._file_stamp()
        logger.info(f"unban consumer={consumer}")
        return entry


# =============================================================================
# モニタ
# =============================================================================


class Monitor:
    """行動認識アクセス制御のモニタ

    判定はセッション単位で直列化し、異なるセッションは並行に処理する。
    SRM / TBM は不変スナップショットで、差し替えは進行中の判定を止めない。
    """

    def __init__(self,
                 model: SoaModel,
                 srm: Srm,
                 thresholds: Thresholds,
                 blacklist: Optional[Blacklist] = None,
                 clock=None,
                 afr_mode: str = "window",
                 arr_enforce: bool = False,
                 routes: str = "shortest",
                 idle_timeout: float = 1800.0,
                 ended_capacity: int = 10_000):
        self.model = model
        self.thresholds = thresholds
        self.blacklist = blacklist if blacklist is not None else Blacklist()
        self.clock = clock or MonotonicClock()
        self.afr_mode = afr_mode
        self.arr_enforce = arr_enforce
        self.routes = routes
        self.idle_timeout_ms = int(idle_timeout * 1000)

        self._srm = srm
        self._tbms: Dict[Tuple[str, str], Tbm] = compile_srm(srm, model, routes)
        self._sessions: Dict[str, Session] = {}  # 有効なセッションのみ
        # 終了したセッション(直近 ended_capacity 件)
        self._ended: "OrderedDict[str, Session]" = OrderedDict()
        self.ended_capacity = ended_capacity
        self._latest: Dict[str, Session] = {}  # 消費者ごとに1件
        self._last_sweep = self.clock.now_ms()
        self._ids = count(1)
        self._lock = threading.Lock()

    # --- ポリシースナップショット ---

    def tbm_for(self, consumer: str, target: str) -> Optional[Tbm]:
        return self._tbms.get((consumer, target))

    @property
    def tbms(self) -> Dict[Tuple[str, str], Tbm]:
        return dict(self._tbms)

    def reload(self, srm: Srm) -> None:
        """SRMを再コンパイルしてスナップショットを差し替える"""
        tbms = compile_srm(srm, self.model, self.routes)
        with self._lock:
            self._srm, self._tbms = srm, tbms
        logger.info(f"policy reloaded rules={len(srm.rules)}")

    def install_tbm(self, consumer: str, target: str, tbm: Tbm) -> None:
        """(consumer, target) のTBMを差し替える。以後に開くセッションから有効"""
        if tbm.consumer != consumer:
            raise ForeignConsumerRule(f"TBM {tbm.consumer} を {consumer} に割り当てられません")
        with self._lock:
            tbms = dict(self._tbms)
            tbms[(consumer, target)] = tbm
            self._tbms = tbms
        logger.info(f"tbm installed consumer={consumer} target={target} rules={len(tbm)}")

    # --- セッション ---

    def now_ms(self) -> int:
        return self.clock.now_ms()

    def blacklist_contains(self, consumer: str) -> bool:
        return self.blacklist.contains(consumer)

    def open_session(self, consumer: str, key: ConsumerKey, target: str) -> Union[Session, Refused]:
        if self.blacklist_contains(consumer):
            logger.info(f"session refused consumer={consumer} reason={Reason.ON_BLACKLIST.value}")
            return Refused(Reason.ON_BLACKLIST)

        with self._lock:
            srm, tbms = self._srm, self._tbms
        rule = authenticate(srm, consumer, key, target)
        if rule is None:
            logger.info(f"session refused consumer={consumer} reason={Reason.NOT_AUTHENTICATED.value}")
            return Refused(Reason.NOT_AUTHENTICATED)

        now = self.now_ms()
        session = Session(
            consumer=consumer,
            target=target,
            tbm=tbms[(consumer, target)],
            risk=RiskState.start(now),
            session_id=next(self._ids),
            token=secrets.token_urlsafe(24),
            started_at=now,
            position=self.model.initial_uri,
            last_activity=now,
        )
        with self._lock:
            self._sessions[session.token] = session
            self._latest[consumer] = session
        logger.info(f"session opened consumer={consumer} session={session.session_id} "
                    f"target={target} rules={len(session.tbm)}")
        self.sweep_idle(now)
        return session

    def session_for_token(self, token: str) -> Optional[Session]:
        with self._lock:
            return self._sessions.get(token) or self._ended.get(token)

    def latest_sessions(self) -> Dict[str, Session]:
        with self._lock:
            return dict(self._latest)

    @property
    def active_count(self) -> int:
        with self._lock:
            return len(self._sessions)

    def _retire(self, session: Session) -> None:
        with self._lock:
            self._sessions.pop(session.token, None)
            self._ended[session.token] = session
            self._ended.move_to_end(session.token)
            while len(self._ended) > self.ended_capacity:
                self._ended.popitem(last=False)

    def sweep_idle(self, now: Optional[int] = None) -> int:
        """idle_timeout を過ぎた有効セッションを終了させる。間隔は idle_timeout ごとに1回まで"""
        now = self.now_ms() if now is None else now
        with self._lock:
            if now - self._last_sweep < self.idle_timeout_ms:
                return 0
            self._last_sweep = now
            candidates = list(self._sessions.values())
        expired = 0
        for session in candidates:
            with session.lock:
                if session.active and now - session.last_activity > self.idle_timeout_ms:
                    self._terminate(session, Reason.SESSION_TERMINATED)
                    expired += 1
        if expired:
            logger.info(f"idle sessions expired count={expired}")
        return expired

    def close_session(self, session: Session) -> SessionSummary:
        with session.lock:
            if session.active:
                session.status = SessionStatus.TERMINATED
                ev = session.evidence
                logger.info(format_risk_line(session.consumer, session.session_id, session.risk, ev))
                logger.info(f"session closed consumer={session.consumer} session={session.session_id}")
                self._retire(session)
            return self.summary(session)

    def summary(self, session: Session) -> SessionSummary:
        with session.lock:
            return SessionSummary(
                consumer=session.consumer,
                session_id=session.session_id,
                requests=session.requests,
                allowed=session.allowed,
                denied=session.denied,
                terminated_reason=session.terminated_reason.value if session.terminated_reason else None,
                risk=risk_snapshot(session.risk, session.evidence),
            )

    # --- 判定 ---

    def decide(self, session: Session, elements: BehaviorElements,
               thresholds: Optional[Thresholds] = None) -> Decision:
        """1リクエスト分の判定。セッションロック内で原子的に行う"""
        if elements.id != session.consumer:
            raise ForeignSessionElements(f"要素ID {elements.id} はセッション {session.session_id} の消費者ではありません")
        thresholds = thresholds or self.thresholds
        started = time.perf_counter()

        with session.lock:
            session.requests += 1
            verdict = None
            try:
                verdict, reason = self._decide_locked(session, elements, thresholds)
            finally:
                # 例外(ストア障害)も拒否として数える
                if verdict is Verdict.ALLOW:
                    session.allowed += 1
                else:
                    session.denied += 1

        latency_us = int((time.perf_counter() - started) * 1_000_000)
        nonce = uuid.uuid4().hex if verdict is Verdict.ALLOW else None
        logger.info(f"decision consumer={session.consumer} session={session.session_id} "
                    f"src={elements.src} dst={elements.dst} verdict={verdict.value} "
                    f"reason={reason.value} latency_us={latency_us}")
        return Decision(verdict, reason, nonce, latency_us)

    def _terminate(self, session: Session, reason: Reason) -> None:
        session.status = SessionStatus.TERMINATED
        session.terminated_reason = reason
        logger.info(format_risk_line(session.consumer, session.session_id, session.risk, session.evidence))
        self._retire(session)

    def _decide_locked(self, session: Session, elements: BehaviorElements,
                       thresholds: Thresholds) -> Tuple[Verdict, Reason]:
        # 1. 終了済みセッション
        if not session.active:
            return Verdict.DENY_REQUEST, Reason.SESSION_TERMINATED
        if elements.timestamp - session.last_activity > self.idle_timeout_ms:
            self._terminate(session, Reason.SESSION_TERMINATED)
            return Verdict.DENY_REQUEST, Reason.SESSION_TERMINATED
        # 別セッションでブラックリストに載った消費者は、開いている全セッションを失う
        if self.blacklist.contains(session.consumer):
            self._terminate(session, Reason.ON_BLACKLIST)
            return Verdict.BLACKLISTED, Reason.ON_BLACKLIST
        session.last_activity = elements.timestamp

        # 2. 照合とリスク更新(不一致でも更新する)
        matched = tbm_match(session.tbm, elements.id, elements.src, elements.dst)
        risk = update_afr(session.risk, elements.timestamp, thresholds.afr_window, self.afr_mode)
        risk = update_arr(risk, elements.timestamp)
        risk = update_uar(risk, matched)

        # 3. 証拠
        ev = compute_evidence(risk, thresholds)
        session.risk, session.evidence = risk, ev
        logger.debug(format_risk_line(session.consumer, session.session_id, risk, ev))

        # 4. 両方の証拠 -> ブラックリスト
        if ev.uar_pf and ev.afr_pf:
            self._terminate(session, Reason.BOTH_EXCEEDED)
            self.blacklist.add(session.consumer, Reason.BOTH_EXCEEDED.value)
            return Verdict.BLACKLISTED, Reason.BOTH_EXCEEDED

        # 5. 片方の証拠 -> セッション終了
        if ev.uar_pf or ev.afr_pf or (self.arr_enforce and ev.arr_pf):
            if ev.uar_pf:
                reason = Reason.UAR_EXCEEDED
            elif ev.afr_pf:
                reason = Reason.AFR_EXCEEDED
            else:
                reason = Reason.ARR_EXCEEDED
            self._terminate(session, reason)
            return Verdict.TERMINATE_SESSION, reason

        # 6. 不一致 -> このリクエストのみ拒否
        if not matched:
            return Verdict.DENY_REQUEST, Reason.TBM_MISMATCH

        # 7. 許可
        return Verdict.ALLOW, Reason.OK
