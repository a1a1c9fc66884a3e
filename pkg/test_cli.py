"""
コマンドラインのテスト

TBM作成・鍵ハッシュ・ブラックリスト管理・実験実行の終了コードと出力を確認
"""

import json
import os
import shutil
import tempfile

from cli import main, tbm_create
from policy import ConsumerKey, KeyHash, load_tbm_file
from test_policy import FLU_RULES, CARDIO_RULES

HERE = os.path.dirname(os.path.abspath(__file__))
SAMPLES = os.path.join(HERE, "sample_policies")
CLINIC_MODEL = os.path.join(SAMPLES, "clinic.model")
CLINIC_SRM = os.path.join(SAMPLES, "clinic.srm")


def test_model_validate():
    assert main(["model", "validate", CLINIC_MODEL]) == 0
    with tempfile.TemporaryDirectory() as tmp:
        bad = os.path.join(tmp, "bad.model")
        with open(bad, "w", encoding="utf-8") as f:
            f.write("service A system /a\ntransition A B\ninitial A\n")
        assert main(["model", "validate", bad]) == 1
        assert main(["model", "validate", os.path.join(tmp, "missing.model")]) == 2


def test_tbm_create_tables():
    """診療SRM から C0 / C1 の2ファイル"""
    with tempfile.TemporaryDirectory() as tmp:
        assert main(["--out", tmp, "tbm", "create", CLINIC_SRM, CLINIC_MODEL]) == 0
        assert sorted(os.listdir(tmp)) == ["C0.cardiopathy.tbm", "C1.influenza.tbm"]
        cardio = load_tbm_file(os.path.join(tmp, "C0.cardiopathy.tbm"))
        flu = load_tbm_file(os.path.join(tmp, "C1.influenza.tbm"))
        assert {(r.src, r.dst) for r in cardio.rules} == CARDIO_RULES
        assert {(r.src, r.dst) for r in flu.rules} == FLU_RULES


def test_tbm_create_empty_and_unreachable():
    with tempfile.TemporaryDirectory() as tmp:
        empty = os.path.join(tmp, "empty.srm")
        with open(empty, "w", encoding="utf-8") as f:
            f.write("# no rules\n")
        out = os.path.join(tmp, "out")
        assert tbm_create(empty, CLINIC_MODEL, out) == []
        assert main(["--out", out, "tbm", "create", empty, CLINIC_MODEL]) == 0
        assert not os.path.exists(out)

        model = os.path.join(tmp, "island.model")
        with open(model, "w", encoding="utf-8") as f:
            f.write("service A system /a\nservice B sensitive /b\ninitial A\n")
        srm = os.path.join(tmp, "island.srm")
        with open(srm, "w", encoding="utf-8") as f:
            f.write(f"rule C0 {'00' * 16}:{'ab' * 32} T -> B\n")
        assert main(["--out", out, "tbm", "create", srm, model]) == 1


def test_tbm_append_and_show(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        assert main(["--out", tmp, "tbm", "create", CLINIC_SRM, CLINIC_MODEL]) == 0
        path = os.path.join(tmp, "C0.cardiopathy.tbm")
        assert main(["tbm", "append", path, "--rule", "/SBA/X1.jsp", "/SBA/X2.jsp"]) == 0
        assert len(load_tbm_file(path)) == 8
        assert main(["tbm", "append", path, "--rule", "/SBA/X1.jsp", "/SBA/X2.jsp"]) == 0
        assert len(load_tbm_file(path)) == 8

        foreign = os.path.join(tmp, "C1.influenza.tbm")
        assert main(["tbm", "append", path, "--from", foreign]) == 1

        capsys.readouterr()
        assert main(["tbm", "show", path]) == 0
        out = capsys.readouterr().out
        assert "consumer C0 (8 rules)" in out
        assert "<C0, /SBA/X1.jsp, /SBA/X2.jsp>" in out


def test_srm_hash_key(capsys):
    assert main(["srm", "hash-key", "CK0", "--salt", "00" * 16]) == 0
    text = capsys.readouterr().out.strip()
    assert KeyHash.from_text(text).matches(ConsumerKey("CK0"))
    assert text.startswith("00" * 16 + ":")


def test_blacklist_admin(capsys):
    with tempfile.TemporaryDirectory() as tmp:
        blacklist = os.path.join(tmp, "blacklist.txt")
        config = os.path.join(tmp, "config.json")
        with open(config, "w", encoding="utf-8") as f:
            json.dump({"model_path": CLINIC_MODEL, "srm_path": CLINIC_SRM, "blacklist_path": blacklist,
                       "log_level": "WARNING"}, f)

        assert main(["--config", config, "blacklist", "list"]) == 0
        assert capsys.readouterr().out == ""

        with open(blacklist, "w", encoding="utf-8") as f:
            f.write("ban C0 1700000000000 BothExceeded\n")
        assert main(["--config", config, "blacklist", "list"]) == 0
        assert capsys.readouterr().out.startswith("C0\t1700000000000\tBothExceeded")

        assert main(["--config", config, "blacklist", "remove", "C0"]) == 0
        assert main(["--config", config, "blacklist", "remove", "C0"]) == 1
        assert main(["--config", config, "blacklist", "remove", "C7"]) == 1


def test_bad_config_is_validation_error():
    with tempfile.TemporaryDirectory() as tmp:
        config = os.path.join(tmp, "config.json")
        with open(config, "w", encoding="utf-8") as f:
            json.dump({"model_path": CLINIC_MODEL, "colour": "red"}, f)
        assert main(["--config", config, "blacklist", "list"]) == 1
        with open(config, "w", encoding="utf-8") as f:
            f.write("{not json")
        assert main(["--config", config, "blacklist", "list"]) == 1


def test_exp_supervise_in_process():
    with tempfile.TemporaryDirectory() as tmp:
        for name in ("records.model", "srm1.srm"):
            shutil.copy(os.path.join(SAMPLES, name), tmp)
        spec_path = os.path.join(tmp, "spec.json")
        with open(spec_path, "w", encoding="utf-8") as f:
            json.dump({
                "scenario": "srm1.srm",
                "model": "records.model",
                "consumer": "C2",
                "key": "CK2",
                "target": "records",
                "request_count": 300,
                "service_range": ["S3", "S4", "S5", "S6", "S7", "S8"],
                "thresholds": {"uar_max": None, "afr_max": None, "arr_max": None, "afr_window": 60},
                "interval_ms": 100,
            }, f)
        out = os.path.join(tmp, "results")
        assert main(["--seed", "5", "--out", out, "exp", "supervise", spec_path]) == 0
        with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
            report = json.load(f)
        assert report["seed"] == 5
        assert report["responded_total"] + report["denied_total"] == 300
        assert report["services"]["S4"]["responded_times"] == 0

        # 必須キーが欠けた仕様は検証エラー
        with open(spec_path, "w", encoding="utf-8") as f:
            json.dump({"scenario": "srm1.srm"}, f)
        assert main(["--out", out, "exp", "supervise", spec_path]) == 1


if __name__ == "__main__":
    print("=" * 60)
    print("コマンドライン テスト")
    print("=" * 60)
    test_model_validate()
    test_tbm_create_tables()
    test_tbm_create_empty_and_unreachable()
    test_bad_config_is_validation_error()
    test_exp_supervise_in_process()
    print("(capsys を使うテストは pytest で実行してください)")
    print("✅ テスト完了")
