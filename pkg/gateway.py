"""
SoaGuard - ゲートウェイ(チェックポイント)

各リクエストから行動要素を取り出してモニタに問い合わせ、
許可されたときだけモックサービスへ転送する。
"""

import hmac
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Deque, Dict, List, Optional, Tuple

import httpx
from fastapi import FastAPI, Header, Request, Response
from fastapi.encoders import jsonable_encoder
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel
from pydantic import ValidationError as SchemaError

from monitor import Blacklist, Monitor, Reason, Refused, Verdict
from policy import ConsumerKey, append_rules, load_srm_file, load_tbm_file, parse_tbm, tbm_filename
from risk import BehaviorElements
from soa_model import SoaModel, load_model_file
from utils import (
    ForeignConsumerRule,
    ForeignSessionElements,
    GuardConfig,
    ParseError,
    StoreUnavailable,
    ValidationError,
)

logger = logging.getLogger(__name__)

ADMIN_HEADER = "X-Admin-Token"


@dataclass(frozen=True)
class CheckpointCapture:
    """チェックポイントが1リクエストから取り出す値"""

    consumer: Optional[str]
    session_token: Optional[str]
    path: str
    source_header: Optional[str] = None  # 信用しない。ログのみ
    received_at: float = field(default_factory=time.time)
    client_ip: Optional[str] = None
    user_agent: Optional[str] = None


@dataclass
class GatewayResponse:
    status: int
    headers: Dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def json(self):
        return json.loads(self.body.decode('utf-8'))


class MockService:
    """モックのバックエンドサービス。ゲートウェイからの転送にのみ応答する"""

    def __init__(self, service: str, uri: str, latency_ms: float = 0.0, payload: Optional[bytes] = None):
        self.service = service
        self.uri = uri
        self.latency_ms = latency_ms
        self.payload = payload if payload is not None else f"service {service} at {uri}\n".encode('utf-8')
        self.hits: List[str] = []
        self._lock = threading.Lock()

    def serve(self, nonce: str) -> bytes:
        if self.latency_ms > 0:
            time.sleep(self.latency_ms / 1000.0)
        with self._lock:
            self.hits.append(nonce)
        return self.payload


@dataclass
class ServiceCounters:
    access_times: int = 0
    response_times: int = 0
    denied_times: int = 0
    latency_us_total: int = 0

    @property
    def avg_latency_us(self) -> float:
        return self.latency_us_total / self.response_times if self.response_times else 0.0


class Gateway:
    """ゲートウェイ本体。HTTPフレームワークに依存しない部分"""

    def __init__(self, model: SoaModel, monitor: Monitor, mock_latency_ms: float = 0.0,
                 trace_size: int = 100_000, admin_token: Optional[str] = None):
        self.model = model
        self.monitor = monitor
        self.admin_token = admin_token
        self.mocks: Dict[str, MockService] = {
            uri: MockService(sid, uri, mock_latency_ms) for sid, uri in model.labels.items()
        }
        self.counters: Dict[str, ServiceCounters] = {sid: ServiceCounters() for sid in model.services}
        # (status, verdict, nonce) の監査用トレース
        self.trace: Deque[Tuple[int, Optional[str], Optional[str]]] = deque(maxlen=trace_size)
        self._lock = threading.Lock()

    # --- 認証 ---

    def session_endpoint(self, consumer: str, key: str, target: str) -> GatewayResponse:
        try:
            result = self.monitor.open_session(consumer, ConsumerKey(key), target)
        except StoreUnavailable as e:
            logger.error(f"blacklist store unavailable: {e}")
            return _reply(503, reason="StoreUnavailable")
        if isinstance(result, Refused):
            status = 403 if result.reason is Reason.ON_BLACKLIST else 401
            return _reply(status, reason=result.reason.value,
                          body={"error": result.reason.value})
        return _reply(200, body={"session": result.token, "session_id": result.session_id})

    # --- チェックポイント ---

    def handle_request(self, capture: CheckpointCapture) -> GatewayResponse:
        started = time.perf_counter()
        response = self._handle(capture)
        if response.status == 200:
            sid = self.model.service_at(capture.path)
            with self._lock:
                self.counters[sid].latency_us_total += int((time.perf_counter() - started) * 1_000_000)
        return response

    def _handle(self, capture: CheckpointCapture) -> GatewayResponse:
        if not capture.consumer or not capture.session_token:
            self._record(400, None, None)
            return _reply(400, reason="MissingIdentity")

        sid = self.model.service_at(capture.path)
        if sid is None:
            self._record(404, None, None)
            return _reply(404, reason="UnknownPath")

        session = self.monitor.session_for_token(capture.session_token)
        if session is None or session.consumer != capture.consumer:
            self._record(401, None, None)
            self._count(sid, allowed=False)
            return _reply(401, reason=Reason.NOT_AUTHENTICATED.value)

        logger.debug(f"checkpoint consumer={capture.consumer} session={session.session_id} "
                     f"path={capture.path} ip={capture.client_ip} ua={capture.user_agent} "
                     f"source_header={capture.source_header} "
                     f"at={datetime.fromtimestamp(capture.received_at, timezone.utc).isoformat()}")

        try:
            with session.lock:
                # 入口サービスへの再入は入口のリフレッシュとして照合する
                src = capture.path if capture.path == self.model.initial_uri else session.position
                elements = BehaviorElements(
                    id=capture.consumer,
                    src=src,
                    dst=capture.path,
                    timestamp=self.monitor.now_ms(),
                    access_count=session.requests + 1,
                )
                decision = self.monitor.decide(session, elements)
                if decision.allowed:
                    session.position = capture.path
        except StoreUnavailable as e:
            logger.error(f"blacklist store unavailable: {e}")
            self._record(503, None, None)
            self._count(sid, allowed=False)
            return _reply(503, reason="StoreUnavailable")
        except ForeignSessionElements:
            self._record(401, None, None)
            self._count(sid, allowed=False)
            return _reply(401, reason=Reason.NOT_AUTHENTICATED.value)

        if decision.allowed:
            body = self.mocks[capture.path].serve(decision.nonce)
            self._record(200, decision.verdict.value, decision.nonce)
            self._count(sid, allowed=True)
            return GatewayResponse(200, {"X-Decision": "allow", "X-Reason": decision.reason.value}, body)

        self._record(403, decision.verdict.value, None)
        self._count(sid, allowed=False)
        return _reply(403, decision=_DECISION_HEADER[decision.verdict], reason=decision.reason.value)

    def _record(self, status: int, verdict: Optional[str], nonce: Optional[str]) -> None:
        with self._lock:
            self.trace.append((status, verdict, nonce))

    def _count(self, sid: str, allowed: bool) -> None:
        with self._lock:
            counters = self.counters[sid]
            counters.access_times += 1
            if allowed:
                counters.response_times += 1
            else:
                counters.denied_times += 1

    # --- メトリクス ---

    def metrics_endpoint(self) -> Dict:
        with self._lock:
            services = {
                sid: {
                    "uri": self.model.labels[sid],
                    "access_times": c.access_times,
                    "response_times": c.response_times,
                    "denied_times": c.denied_times,
                    "avg_latency_us": round(c.avg_latency_us, 3),
                }
                for sid, c in sorted(self.counters.items())
            }
        consumers = {}
        for consumer, session in sorted(self.monitor.latest_sessions().items()):
            summary = self.monitor.summary(session)
            consumers[consumer] = {
                "session": summary.session_id,
                "status": session.status.value,
                "requests": summary.requests,
                "allowed": summary.allowed,
                "denied": summary.denied,
                **summary.risk,
            }
        return {
            "services": services,
            "consumers": consumers,
            "blacklist": [e.consumer for e in self.monitor.blacklist.entries()],
        }

    # --- 管理 ---

    def _admin_allowed(self, token: Optional[str]) -> bool:
        if self.admin_token is None or token is None:
            return False
        return hmac.compare_digest(token.encode('utf-8'), self.admin_token.encode('utf-8'))

    def install_tbm_text(self, consumer: str, target: str, body: bytes,
                         token: Optional[str] = None) -> GatewayResponse:
        """管理API。admin_token 未設定のゲートウェイでは常に拒否する"""
        if self.admin_token is None:
            logger.warning(f"admin refused consumer={consumer} target={target} reason=AdminDisabled")
            return _reply(403, reason="AdminDisabled")
        if not self._admin_allowed(token):
            logger.warning(f"admin refused consumer={consumer} target={target} reason=NotAuthorized")
            return _reply(401, reason="NotAuthorized")
        try:
            text = body.decode('utf-8')
            tbm = parse_tbm(text, source=f"PUT /admin/tbm/{consumer}/{target}")
            self.monitor.install_tbm(consumer, target, tbm)
        except (UnicodeDecodeError, ParseError, ValidationError, ForeignConsumerRule) as e:
            return _reply(400, reason="InvalidTbm", body={"error": str(e)})
        return _reply(200, body={"consumer": consumer, "target": target, "rules": len(tbm)})

    # --- インプロセス転送 ---

    def dispatch(self, request: httpx.Request) -> httpx.Response:
        """httpx.MockTransport 用のハンドラ。HTTPサーバを介さずに実験を回す"""
        path = request.url.path
        if request.method == "POST" and path == "/auth":
            try:
                body = AuthRequest.model_validate_json(request.content or b"")
            except SchemaError as e:
                detail = e.errors(include_url=False, include_context=False, include_input=False)
                resp = _reply(422, reason="InvalidBody", body={"detail": detail})
            else:
                resp = self.session_endpoint(body.consumer, body.key, body.target)
        elif request.method == "GET" and path == "/metrics":
            resp = _reply(200, body=self.metrics_endpoint())
        elif request.method == "GET" and path == "/healthz":
            resp = _reply(200, body={"status": "ok"})
        elif request.method == "PUT" and path.startswith("/admin/tbm/"):
            parts = path[len("/admin/tbm/"):].split("/")
            if len(parts) != 2:
                resp = _reply(404, reason="UnknownPath")
            else:
                resp = self.install_tbm_text(parts[0], parts[1], request.content,
                                             request.headers.get(ADMIN_HEADER))
        elif request.method == "GET":
            resp = self.handle_request(CheckpointCapture(
                consumer=request.headers.get("X-Consumer"),
                session_token=request.headers.get("X-Session"),
                path=path,
                source_header=request.headers.get("X-Source"),
                user_agent=request.headers.get("User-Agent"),
            ))
        else:
            resp = _reply(405, reason="MethodNotAllowed")
        return httpx.Response(resp.status, headers=resp.headers, content=resp.body)

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.dispatch)


_DECISION_HEADER = {
    Verdict.DENY_REQUEST: "deny",
    Verdict.TERMINATE_SESSION: "terminated",
    Verdict.BLACKLISTED: "blacklisted",
}


def _reply(status: int, decision: Optional[str] = None, reason: Optional[str] = None,
           body: Optional[Dict] = None) -> GatewayResponse:
    headers = {"Content-Type": "application/json"}
    if decision:
        headers["X-Decision"] = decision
    if reason:
        headers["X-Reason"] = reason
    payload = body if body is not None else {"status": status, "reason": reason}
    return GatewayResponse(status, headers, json.dumps(payload).encode('utf-8'))


# =============================================================================
# 組み立て
# =============================================================================


def build_gateway(config: GuardConfig, clock=None) -> Gateway:
    """設定ファイルからモデル・SRM・モニタ・ゲートウェイを組み立てる"""
    model = load_model_file(config.model_path)
    srm = load_srm_file(config.srm_path, model)
    monitor = Monitor(
        model,
        srm,
        config.build_thresholds(),
        blacklist=Blacklist(config.blacklist_path),
        clock=clock,
        afr_mode=config.afr_mode,
        arr_enforce=config.arr_enforce,
        routes=config.routes,
        idle_timeout=config.idle_timeout,
    )
    if config.tbm_dir:
        _apply_appended_tbms(monitor, config.tbm_dir)
    logger.info(f"gateway ready services={len(model.services)} srm_rules={len(srm.rules)}")
    return Gateway(model, monitor, config.mock_latency_ms, config.trace_size, config.admin_token)


def _apply_appended_tbms(monitor: Monitor, tbm_dir: str) -> None:
    for (consumer, target), tbm in monitor.tbms.items():
        path = os.path.join(tbm_dir, tbm_filename(consumer, target))
        if os.path.exists(path):
            extra = load_tbm_file(path)
            monitor.install_tbm(consumer, target, append_rules(tbm, extra.rules))


class AuthRequest(BaseModel):
    consumer: str
    key: str
    target: str


def _to_response(resp: GatewayResponse) -> Response:
    return Response(content=resp.body, status_code=resp.status, headers=resp.headers)


def create_app(gateway: Gateway) -> FastAPI:
    """FastAPIアプリケーションを作る"""
    app = FastAPI(title="SoaGuard gateway")
    app.state.gateway = gateway

    @app.exception_handler(RequestValidationError)
    async def invalid_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422, content={"detail": jsonable_encoder(exc.errors())},
                            headers={"X-Reason": "InvalidBody"})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/metrics")
    def metrics():
        return JSONResponse(gateway.metrics_endpoint())

    @app.post("/auth")
    def auth(body: AuthRequest):
        return _to_response(gateway.session_endpoint(body.consumer, body.key, body.target))

    @app.put("/admin/tbm/{consumer}/{target}")
    async def install_tbm(consumer: str, target: str, request: Request,
                          x_admin_token: Optional[str] = Header(default=None)):
        body = await request.body()
        return _to_response(gateway.install_tbm_text(consumer, target, body, x_admin_token))

    @app.get("/{path:path}")
    def checkpoint(path: str,
                   request: Request,
                   x_consumer: Optional[str] = Header(default=None),
                   x_session: Optional[str] = Header(default=None),
                   x_source: Optional[str] = Header(default=None),
                   user_agent: Optional[str] = Header(default=None)):
        capture = CheckpointCapture(
            consumer=x_consumer,
            session_token=x_session,
            path="/" + path,
            source_header=x_source,
            client_ip=request.client.host if request.client else None,
            user_agent=user_agent,
        )
        return _to_response(gateway.handle_request(capture))

    return app


def serve(config: GuardConfig) -> None:
    """uvicornでゲートウェイを起動する"""
    import uvicorn
    app = create_app(build_gateway(config))
    uvicorn.run(app, host=config.host, port=config.port, log_level=config.log_level.lower())
