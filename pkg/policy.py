"""
SoaGuard - サービス解放モデル(SRM)と信頼行動モデル(TBM)

SRMルール: (SC=C)&&(CK=CK)&&(Target=T) -> (Service=X0)||(Service=X1)...
TBM: 消費者ごとの <Id, Src, Dst> URI遷移ルール集合。SRMとモデルのルートから変換する。
"""

import hashlib
import hmac
import secrets
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

from soa_model import ServiceKind, SoaModel, Transition, find_all_routes, find_route, uri_of
from utils import (
    ForeignConsumerRule,
    NotReachable,
    ParseError,
    UnknownTransition,
    UnreachableService,
    ValidationError,
    iter_records,
    read_text,
)

SALT_BYTES = 16


# =============================================================================
# 消費者キー
# =============================================================================


class ConsumerKey:
    """消費者の秘密鍵(不透明なバイト列)。repr/str で平文を出さない"""

    __slots__ = ("_secret",)

    def __init__(self, secret):
        if isinstance(secret, str):
            secret = secret.encode('utf-8')
        self._secret = bytes(secret)

    @property
    def secret(self) -> bytes:
        return self._secret

    def __repr__(self) -> str:
        return "ConsumerKey(***)"

    __str__ = __repr__


@dataclass(frozen=True)
class KeyHash:
    """SRMファイルに保存するソルト付きハッシュ"""

    salt: bytes
    digest: bytes

    def matches(self, key: ConsumerKey) -> bool:
        candidate = hashlib.sha256(self.salt + key.secret).digest()
        return hmac.compare_digest(candidate, self.digest)

    def to_text(self) -> str:
        return f"{self.salt.hex()}:{self.digest.hex()}"

    @classmethod
    def from_text(cls, text: str) -> "KeyHash":
        salt_hex, sep, digest_hex = text.partition(':')
        if not sep:
            raise ValueError("<salt-hex>:<sha256-hex> の形式が必要です")
        salt, digest = bytes.fromhex(salt_hex), bytes.fromhex(digest_hex)
        if len(digest) != hashlib.sha256().digest_size:
            raise ValueError("SHA-256ダイジェストの長さが不正です")
        return cls(salt, digest)


def hash_key(key, salt: Optional[bytes] = None) -> KeyHash:
    """鍵からSRM用のソルト付きハッシュを作る"""
    if not isinstance(key, ConsumerKey):
        key = ConsumerKey(key)
    salt = secrets.token_bytes(SALT_BYTES) if salt is None else salt
    return KeyHash(salt, hashlib.sha256(salt + key.secret).digest())


# =============================================================================
# SRM
# =============================================================================


@dataclass(frozen=True)
class ReleasingRule:
    consumer: str
    key_hash: KeyHash = field(repr=False)
    target: str
    released: Tuple[str, ...]
    origin: str = field(default="", compare=False)  # <srm-file>:<line>


@dataclass(frozen=True)
class Srm:
    rules: Tuple[ReleasingRule, ...] = ()

    def rule_for(self, consumer: str, target: str) -> Optional[ReleasingRule]:
        for rule in self.rules:
            if rule.consumer == consumer and rule.target == target:
                return rule
        return None


def _check_rule(rule: ReleasingRule, model: Optional[SoaModel], where: str) -> None:
    if not rule.released:
        raise ValidationError(f"{where}: 解放サービスが空です")
    if len(set(rule.released)) != len(rule.released):
        raise ValidationError(f"{where}: 解放サービスが重複しています")
    if model is None:
        return
    for sid in rule.released:
        kind = model.services.get(sid)
        if kind is None:
            raise ValidationError(f"{where}: サービス {sid} はモデルに存在しません")
        if kind is not ServiceKind.SENSITIVE:
            raise ValidationError(f"{where}: {sid} は sensitive サービスではありません")


def parse_srm(document: str, model: Optional[SoaModel] = None, source: str = "<string>") -> Srm:
    """SRMファイルを解析する

    rule <consumer> <salt-hex>:<sha256-hex> <target> -> <service>[,<service>...]
    """
    rules: List[ReleasingRule] = []
    seen = set()
    for lineno, tokens in iter_records(document, source):
        if tokens[0] != "rule":
            raise ParseError(f"不明なキーワード {tokens[0]!r}", source, lineno)
        if len(tokens) < 6 or tokens[4] != "->":
            raise ParseError("rule <consumer> <key-hash> <target> -> <services> の形式が必要です", source, lineno)

        consumer, key_text, target = tokens[1], tokens[2], tokens[3]
        released_text = "".join(tokens[5:])
        released = tuple(s for s in released_text.split(',') if s)
        try:
            key_hash = KeyHash.from_text(key_text)
        except ValueError as e:
            raise ParseError(f"鍵ハッシュが不正です: {e}", source, lineno) from None

        rule = ReleasingRule(consumer, key_hash, target, released, origin=f"{source}:{lineno}")
        _check_rule(rule, model, f"{source}:{lineno}")
        if (consumer, target) in seen:
            raise ValidationError(f"{source}:{lineno}: ({consumer}, {target}) のルールが重複しています")
        seen.add((consumer, target))
        rules.append(rule)
    return Srm(tuple(rules))


def load_srm_file(path: str, model: Optional[SoaModel] = None) -> Srm:
    return parse_srm(read_text(path), model, source=path)


def format_srm(srm: Srm) -> str:
    """SRMを (consumer, target) 順で書き出す"""
    lines = []
    for rule in sorted(srm.rules, key=lambda r: (r.consumer, r.target)):
        lines.append(f"rule {rule.consumer} {rule.key_hash.to_text()} {rule.target} -> {','.join(rule.released)}")
    return "\n".join(lines) + ("\n" if lines else "")


def authenticate(srm: Srm, consumer: str, key: ConsumerKey, target: str) -> Optional[ReleasingRule]:
    """(SC, CK, Target) が全て一致するルールを返す。一致しなければNone"""
    if not isinstance(key, ConsumerKey):
        key = ConsumerKey(key)
    rule = srm.rule_for(consumer, target)
    if rule is None:
        # 不一致でも同じ計算量にそろえる
        hash_key(key, salt=b"\x00" * SALT_BYTES)
        return None
    return rule if rule.key_hash.matches(key) else None


# =============================================================================
# TBM
# =============================================================================


@dataclass(frozen=True, order=True)
class TrustedBehaviorRule:
    id: str
    src: str
    dst: str

    def __str__(self) -> str:
        return f"<{self.id}, {self.src}, {self.dst}>"


@dataclass(frozen=True)
class Tbm:
    """消費者1人分の信頼行動モデル。(src, dst) のハッシュ索引を持つ"""

    consumer: str
    rules: FrozenSet[TrustedBehaviorRule] = frozenset()
    index: FrozenSet[Tuple[str, str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rules = frozenset(self.rules)
        foreign = sorted(r.id for r in rules if r.id != self.consumer)
        if foreign:
            raise ForeignConsumerRule(f"TBM {self.consumer} に他の消費者のルールがあります: {', '.join(foreign)}")
        object.__setattr__(self, 'rules', rules)
        object.__setattr__(self, 'index', frozenset((r.src, r.dst) for r in rules))

    def __len__(self) -> int:
        return len(self.rules)

    def sorted_rules(self) -> List[TrustedBehaviorRule]:
        return sorted(self.rules, key=lambda r: (r.src, r.dst))


def convert_transition(consumer: str, t: Transition, model: SoaModel) -> FrozenSet[TrustedBehaviorRule]:
    """遷移1本を3つのルール(呼び出し + 両端のリフレッシュ)に変換する"""
    if model.transition(t.src, t.dst) is None:
        raise UnknownTransition(f"遷移 ({t.src},{t.dst}) はモデルに存在しません")
    p, q = uri_of(model, t.src), uri_of(model, t.dst)
    return frozenset({
        TrustedBehaviorRule(consumer, p, q),
        TrustedBehaviorRule(consumer, p, p),
        TrustedBehaviorRule(consumer, q, q),
    })


def compile_tbm(srm_rule: ReleasingRule, model: SoaModel, routes: str = "shortest") -> Tbm:
    """解放サービスごとのルートを変換し、和集合をTBMとする

    routes="all-shortest" なら同じ長さの最短ルート全てを含める。
    """
    consumer = srm_rule.consumer
    rules = set()
    for service in srm_rule.released:
        try:
            if routes == "all-shortest":
                candidates = find_all_routes(model, service)
            else:
                candidates = [find_route(model, service)]
        except NotReachable:
            raise UnreachableService(service, consumer, srm_rule.origin) from None

        for route in candidates:
            if not route:
                # 初期サービス自体の解放: リフレッシュのみ
                uri = uri_of(model, service)
                rules.add(TrustedBehaviorRule(consumer, uri, uri))
            for t in route:
                rules |= convert_transition(consumer, t, model)
    return Tbm(consumer, frozenset(rules))


def compile_srm(srm: Srm, model: SoaModel, routes: str = "shortest") -> Dict[Tuple[str, str], Tbm]:
    """SRM全体を (consumer, target) -> Tbm に変換する"""
    return {(r.consumer, r.target): compile_tbm(r, model, routes) for r in srm.rules}


def tbm_match(tbm: Tbm, id: str, src: str, dst: str) -> bool:
    """<id, src, dst> に完全一致するルールがあるか"""
    return id == tbm.consumer and (src, dst) in tbm.index


def append_rules(tbm: Tbm, extra: Iterable[TrustedBehaviorRule]) -> Tbm:
    """ルールを追加したTBMを返す(冪等)"""
    extra = frozenset(extra)
    foreign = sorted({r.id for r in extra if r.id != tbm.consumer})
    if foreign:
        raise ForeignConsumerRule(f"{', '.join(foreign)} のルールは TBM {tbm.consumer} に追加できません")
    return Tbm(tbm.consumer, tbm.rules | extra)


def format_tbm(tbm: Tbm) -> str:
    """TBMファイル形式。(src, dst) の辞書順"""
    lines = [f"tbm {tbm.consumer}"]
    lines += [f"rb {r.src} {r.dst}" for r in tbm.sorted_rules()]
    return "\n".join(lines) + "\n"


def parse_tbm(document: str, source: str = "<string>") -> Tbm:
    consumer: Optional[str] = None
    rules = set()
    for lineno, tokens in iter_records(document, source):
        keyword = tokens[0]
        if keyword == "tbm":
            if len(tokens) != 2:
                raise ParseError("tbm <consumer> の形式が必要です", source, lineno)
            if consumer is not None:
                raise ParseError("tbm ヘッダは1つだけです", source, lineno)
            consumer = tokens[1]
        elif keyword == "rb":
            if consumer is None:
                raise ParseError("rb 行より前に tbm ヘッダが必要です", source, lineno)
            if len(tokens) != 3:
                raise ParseError("rb <src-uri> <dst-uri> の形式が必要です", source, lineno)
            rules.add(TrustedBehaviorRule(consumer, tokens[1], tokens[2]))
        else:
            raise ParseError(f"不明なキーワード {keyword!r}", source, lineno)
    if consumer is None:
        raise ParseError("tbm ヘッダがありません", source, 0)
    return Tbm(consumer, frozenset(rules))


def load_tbm_file(path: str) -> Tbm:
    return parse_tbm(read_text(path), source=path)


def tbm_filename(consumer: str, target: str) -> str:
    return f"{consumer}.{target}.tbm"
