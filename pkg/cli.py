"""
SoaGuard - コマンドライン

python cli.py model validate sample_policies/records.model
python cli.py --out tbm tbm create sample_policies/srm1.srm sample_policies/records.model
python cli.py srm hash-key CK0
python cli.py --config config.json serve
python cli.py --out results/uar exp deauth sample_policies/exp_uar.json --mode uar

終了コード: 0 成功 / 1 検証エラー / 2 その他の失敗
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

import httpx

from experiments import (
    RealPacer,
    VirtualPacer,
    in_process,
    load_experiment_spec,
    run_deauthorization,
    run_scaling,
    run_supervision,
)
from gateway import serve
from monitor import Blacklist
from policy import (
    TrustedBehaviorRule,
    append_rules,
    compile_srm,
    format_tbm,
    hash_key,
    load_srm_file,
    load_tbm_file,
    tbm_filename,
)
from soa_model import load_model_file
from utils import VALIDATION_ERRORS, GuardConfig, GuardError, load_config, setup_logging, write_text

logger = logging.getLogger("soaguard")


def cmd_model_validate(args) -> int:
    model = load_model_file(args.path)
    print(f"OK: {len(model.services)} services, {len(model.transitions)} transitions, "
          f"{len(model.sensitive_services())} sensitive, initial {model.initial}")
    return 0


def tbm_create(srm_path: str, model_path: str, out_dir: str, routes: str = "shortest") -> List[str]:
    """SRMの各ルールをTBMファイルに変換する。書き出したパスを返す"""
    model = load_model_file(model_path)
    srm = load_srm_file(srm_path, model)
    tbms = compile_srm(srm, model, routes)
    if not tbms:
        logger.warning(f"{srm_path} にルールがありません。TBMは作成されません")
        return []
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for (consumer, target), tbm in sorted(tbms.items()):
        path = os.path.join(out_dir, tbm_filename(consumer, target))
        write_text(path, format_tbm(tbm))
        written.append(path)
        logger.info(f"tbm written consumer={consumer} target={target} rules={len(tbm)} path={path}")
    return written


def cmd_tbm_create(args) -> int:
    for path in tbm_create(args.srm, args.model, args.out or ".", args.routes):
        print(path)
    return 0


def cmd_tbm_append(args) -> int:
    tbm = load_tbm_file(args.tbm)
    extra = [TrustedBehaviorRule(tbm.consumer, src, dst) for src, dst in (args.rule or [])]
    if args.from_file:
        extra += load_tbm_file(args.from_file).rules
    before = len(tbm)
    tbm = append_rules(tbm, extra)
    out = os.path.join(args.out, os.path.basename(args.tbm)) if args.out else args.tbm
    write_text(out, format_tbm(tbm))
    print(f"{out}: {before} -> {len(tbm)} rules")
    return 0


def cmd_tbm_show(args) -> int:
    tbm = load_tbm_file(args.tbm)
    print(f"consumer {tbm.consumer} ({len(tbm)} rules)")
    for rule in tbm.sorted_rules():
        print(f"  {rule}")
    return 0


def cmd_srm_hash_key(args) -> int:
    salt = bytes.fromhex(args.salt) if args.salt else None
    print(hash_key(args.secret, salt).to_text())
    return 0


def cmd_serve(args) -> int:
    serve(args.config_obj)
    return 0


def _experiment_client(args, spec):
    """--gateway があればHTTP、なければインプロセスのゲートウェイを使う"""
    if args.gateway:
        logger.info(f"experiment against gateway {args.gateway}")
        return httpx.Client(base_url=args.gateway, timeout=30.0), RealPacer()
    http, _, clock = in_process(spec)
    logger.info("experiment against in-process gateway (virtual clock)")
    return http, VirtualPacer(clock)


def cmd_exp(args) -> int:
    spec = load_experiment_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    http, pacer = _experiment_client(args, spec)
    with http:
        if args.exp_command == "supervise":
            report = run_supervision(spec, http, pacer)
        elif args.exp_command == "deauth":
            report = run_deauthorization(spec, http, args.mode, pacer)
        else:
            report = run_scaling(spec, http)

    for path in report.write(args.out or "results"):
        print(path)
    if report.first_trigger:
        print(f"first trigger: {report.first_trigger}")
    if report.envelope:
        print(f"envelope: {report.envelope}")
    if report.partial:
        logger.error("gateway connection lost; report is partial")
        return 2
    return 0


def cmd_blacklist_list(args) -> int:
    for entry in Blacklist(args.config_obj.blacklist_path).entries():
        print(f"{entry.consumer}\t{entry.banned_at_ms}\t{entry.reason}")
    return 0


def cmd_blacklist_remove(args) -> int:
    entry = Blacklist(args.config_obj.blacklist_path).remove(args.consumer)
    print(f"removed {entry.consumer}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="soaguard", description="行動認識アクセス制御ゲートウェイ")
    ap.add_argument("--config", default=None, help="設定JSON (既定: 組み込みの既定値)")
    ap.add_argument("--seed", type=int, default=None, help="実験の乱数シードを上書き")
    ap.add_argument("--out", default=None, help="出力ディレクトリ")
    sub = ap.add_subparsers(dest="command", required=True)

    model = sub.add_parser("model").add_subparsers(dest="model_command", required=True)
    p = model.add_parser("validate")
    p.add_argument("path")
    p.set_defaults(func=cmd_model_validate)

    tbm = sub.add_parser("tbm").add_subparsers(dest="tbm_command", required=True)
    p = tbm.add_parser("create")
    p.add_argument("srm")
    p.add_argument("model")
    p.add_argument("--routes", choices=("shortest", "all-shortest"), default="shortest")
    p.set_defaults(func=cmd_tbm_create)
    p = tbm.add_parser("append")
    p.add_argument("tbm")
    p.add_argument("--rule", nargs=2, action="append", metavar=("SRC", "DST"))
    p.add_argument("--from", dest="from_file", default=None, help="追加ルールを読むTBMファイル")
    p.set_defaults(func=cmd_tbm_append)
    p = tbm.add_parser("show")
    p.add_argument("tbm")
    p.set_defaults(func=cmd_tbm_show)

    srm = sub.add_parser("srm").add_subparsers(dest="srm_command", required=True)
    p = srm.add_parser("hash-key")
    p.add_argument("secret")
    p.add_argument("--salt", default=None, help="ソルト(16進)。省略時はランダム")
    p.set_defaults(func=cmd_srm_hash_key)

    p = sub.add_parser("serve")
    p.set_defaults(func=cmd_serve)

    exp = sub.add_parser("exp").add_subparsers(dest="exp_command", required=True)
    for name in ("supervise", "deauth", "scale"):
        p = exp.add_parser(name)
        p.add_argument("spec", help="実験仕様JSON")
        p.add_argument("--gateway", default=None, help="起動済みゲートウェイのURL")
        if name == "deauth":
            p.add_argument("--mode", choices=("uar", "afr"), default="uar")
        p.set_defaults(func=cmd_exp)

    bl = sub.add_parser("blacklist").add_subparsers(dest="blacklist_command", required=True)
    p = bl.add_parser("list")
    p.set_defaults(func=cmd_blacklist_list)
    p = bl.add_parser("remove")
    p.add_argument("consumer")
    p.set_defaults(func=cmd_blacklist_remove)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.config_obj = load_config(args.config) if args.config else GuardConfig()
        setup_logging(args.config_obj.log_level)
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (GuardError, httpx.HTTPError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
