"""
SoaGuard - SOAシステムモデル
サービスをノード、遷移を有向辺とするラベル付き有向グラフ。
初期サービスから解放サービスへのルートを導出する。
"""

from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Tuple

import networkx as nx

from utils import (
    NotReachable,
    ParseError,
    UnknownService,
    ValidationError,
    iter_records,
    read_text,
)


class ServiceKind(str, Enum):
    SYSTEM = "system"
    SENSITIVE = "sensitive"


@dataclass(frozen=True, order=True)
class Transition:
    """有向遷移 (from, to)。id はトレース用の任意ラベル"""

    src: str
    dst: str
    id: str = field(default="", compare=False)

    def __str__(self) -> str:
        label = f"{self.id}:" if self.id else ""
        return f"{label}({self.src},{self.dst})"


Route = Tuple[Transition, ...]


@dataclass(frozen=True)
class SoaModel:
    """SOAシステムモデル。ロード後は不変"""

    services: Mapping[str, ServiceKind]
    transitions: Tuple[Transition, ...]
    initial: str
    labels: Mapping[str, str]
    graph: nx.DiGraph = field(init=False, repr=False, compare=False)
    by_uri: Mapping[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'services', MappingProxyType(dict(self.services)))
        object.__setattr__(self, 'labels', MappingProxyType(dict(self.labels)))
        object.__setattr__(self, 'transitions', tuple(self.transitions))
        _validate(self)

        graph = nx.DiGraph()
        graph.add_nodes_from(self.services)
        for t in self.transitions:
            graph.add_edge(t.src, t.dst, transition=t)
        object.__setattr__(self, 'graph', graph)
        object.__setattr__(self, 'by_uri', MappingProxyType(
            {uri: sid for sid, uri in self.labels.items()}))

    def sensitive_services(self) -> List[str]:
        return sorted(s for s, k in self.services.items() if k is ServiceKind.SENSITIVE)

    def transition(self, src: str, dst: str) -> Optional[Transition]:
        data = self.graph.get_edge_data(src, dst)
        return data['transition'] if data else None

    def service_at(self, uri: str) -> Optional[str]:
        """URIからサービスIDを逆引きする(なければNone)"""
        return self.by_uri.get(uri)

    @property
    def initial_uri(self) -> str:
        return self.labels[self.initial]


def _validate(model: SoaModel) -> None:
    if not model.services:
        raise ValidationError("サービスが1つも宣言されていません")
    if model.initial not in model.services:
        raise ValidationError(f"初期サービス {model.initial!r} が宣言されていません")

    missing = sorted(set(model.services) - set(model.labels))
    if missing:
        raise ValidationError(f"URIが未定義のサービス: {', '.join(missing)}")
    extra = sorted(set(model.labels) - set(model.services))
    if extra:
        raise ValidationError(f"未宣言サービスへのURI: {', '.join(extra)}")

    # Lは単射
    seen: Dict[str, str] = {}
    for sid in sorted(model.labels):
        uri = model.labels[sid]
        if not uri:
            raise ValidationError(f"{sid} のURIが空です")
        if uri in seen:
            raise ValidationError(f"URI {uri} が {seen[uri]} と {sid} で重複しています")
        seen[uri] = sid

    pairs = set()
    for t in model.transitions:
        for end in (t.src, t.dst):
            if end not in model.services:
                raise ValidationError(f"遷移 {t} の端点 {end} が宣言されていません")
        if (t.src, t.dst) in pairs:
            raise ValidationError(f"遷移 ({t.src},{t.dst}) が重複しています")
        pairs.add((t.src, t.dst))


def load_model(document: str, source: str = "<string>") -> SoaModel:
    """行指向のモデル記述からSoaModelを構築する

    service <id> <system|sensitive> <uri>
    transition [<id>] <from> <to>
    initial <id>
    """
    services: Dict[str, ServiceKind] = {}
    labels: Dict[str, str] = {}
    transitions: List[Transition] = []
    transition_ids = set()
    initial: Optional[str] = None

    for lineno, tokens in iter_records(document, source):
        keyword, args = tokens[0], tokens[1:]

        if keyword == "service":
            if len(args) != 3:
                raise ParseError("service <id> <system|sensitive> <uri> の形式が必要です", source, lineno)
            sid, kind, uri = args
            try:
                kind_value = ServiceKind(kind)
            except ValueError:
                raise ParseError(f"不明なサービス種別 {kind!r}", source, lineno) from None
            if sid in services:
                raise ValidationError(f"{source}:{lineno}: サービス {sid} が重複しています")
            services[sid] = kind_value
            labels[sid] = uri

        elif keyword == "transition":
            if len(args) == 3:
                tid, src, dst = args
            elif len(args) == 2:
                src, dst = args
                tid = f"t{len(transitions) + 1}"
            else:
                raise ParseError("transition [<id>] <from> <to> の形式が必要です", source, lineno)
            if tid in transition_ids:
                raise ValidationError(f"{source}:{lineno}: 遷移ID {tid} が重複しています")
            transition_ids.add(tid)
            transitions.append(Transition(src, dst, tid))

        elif keyword == "initial":
            if len(args) != 1:
                raise ParseError("initial <id> の形式が必要です", source, lineno)
            if initial is not None:
                raise ValidationError(f"{source}:{lineno}: 初期サービスは1つだけです")
            initial = args[0]

        else:
            raise ParseError(f"不明なキーワード {keyword!r}", source, lineno)

    if initial is None:
        raise ValidationError(f"{source}: initial 行がありません")

    return SoaModel(services=services, transitions=tuple(transitions), initial=initial, labels=labels)


def load_model_file(path: str) -> SoaModel:
    """モデルファイルを読み込む"""
    return load_model(read_text(path), source=path)


def format_model(model: SoaModel) -> str:
    """モデルを行指向フォーマットに書き出す"""
    lines = []
    for sid in sorted(model.services):
        lines.append(f"service {sid} {model.services[sid].value} {model.labels[sid]}")
    for t in model.transitions:
        lines.append(f"transition {t.id} {t.src} {t.dst}" if t.id else f"transition {t.src} {t.dst}")
    lines.append(f"initial {model.initial}")
    return "\n".join(lines) + "\n"


def uri_of(model: SoaModel, service: str) -> str:
    """サービスのURI L(s) を返す"""
    try:
        return model.labels[service]
    except KeyError:
        raise UnknownService(f"サービス {service!r} はモデルに存在しません") from None


def _path_to_route(model: SoaModel, path: List[str]) -> Route:
    return tuple(model.transition(a, b) for a, b in zip(path, path[1:]))


def find_all_routes(model: SoaModel, target: str) -> List[Route]:
    """初期サービスから target への最短ルートを全て返す(辞書順)"""
    if target not in model.services:
        raise UnknownService(f"サービス {target!r} はモデルに存在しません")
    if target == model.initial:
        return [()]
    try:
        # 最短路は常に単純路なので閉路があっても問題ない
        paths = sorted(nx.all_shortest_paths(model.graph, model.initial, target))
    except nx.NetworkXNoPath:
        raise NotReachable(f"{model.initial} から {target} への経路がありません") from None
    return [_path_to_route(model, p) for p in paths]


def find_route(model: SoaModel, target: str) -> Route:
    """初期サービスから target への最短ルート

    同じ長さのルートが複数あればサービスID列の辞書順で最小のものを選ぶ。
    target が初期サービスなら空ルート。
    """
    return find_all_routes(model, target)[0]


def route_services(model: SoaModel, route: Route) -> List[str]:
    """ルートが通過するサービス列(初期サービスを含む)"""
    return [model.initial] + [t.dst for t in route]
