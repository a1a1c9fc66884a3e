"""
SoaGuard - 行動認識アクセス制御ダッシュボード
TBMの確認・実験の実行・稼働中ゲートウェイのメトリクス表示
"""

import glob
import os

import httpx
import pandas as pd
import streamlit as st

from experiments import (
    VirtualPacer,
    in_process,
    load_experiment_spec,
    run_deauthorization,
    run_scaling,
    run_supervision,
)
from policy import compile_srm, load_srm_file
from soa_model import load_model_file
from utils import GuardError

SAMPLES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "sample_policies")

# ページ設定
st.set_page_config(
    page_title="SoaGuard - 行動認識アクセス制御",
    page_icon="🛡️",
    layout="wide"
)

st.title("🛡️ SoaGuard")
st.subheader("信頼行動モデルとリスク証拠によるSOAサービスのアクセス制御")
st.markdown("---")


@st.cache_data
def load_policy(model_path: str, srm_path: str):
    """モデルとSRMを読み込み、TBMを表にする"""
    model = load_model_file(model_path)
    srm = load_srm_file(srm_path, model)
    rows = []
    for (consumer, target), tbm in sorted(compile_srm(srm, model).items()):
        for rule in tbm.sorted_rules():
            rows.append({"consumer": consumer, "target": target, "src": rule.src, "dst": rule.dst})
    services = pd.DataFrame([
        {"service": sid, "kind": kind.value, "uri": model.labels[sid]}
        for sid, kind in sorted(model.services.items())
    ])
    return services, pd.DataFrame(rows, columns=["consumer", "target", "src", "dst"])


if 'report' not in st.session_state:
    st.session_state.report = None

# サイドバー: 実験
st.sidebar.header("⚙️ 実験")
spec_files = sorted(glob.glob(os.path.join(SAMPLES_DIR, "exp_*.json")))
if not spec_files:
    st.sidebar.error("sample_policies/ に実験仕様がありません")
    st.stop()

spec_path = st.sidebar.selectbox("実験仕様", spec_files, format_func=os.path.basename)
try:
    spec = load_experiment_spec(spec_path)
except GuardError as e:
    st.sidebar.error(f"実験仕様を読み込めません: {e}")
    st.stop()

kind = st.sidebar.radio("種類", ["supervise", "deauth-uar", "deauth-afr", "scale"])
spec.seed = int(st.sidebar.number_input("乱数シード", value=int(spec.seed), step=1))
if kind in ("supervise", "deauth-uar"):
    counts = [500, 1000, 2000, 5000, 10000]
    spec.request_count = int(st.sidebar.select_slider(
        "リクエスト数", options=counts, value=min(counts, key=lambda c: abs(c - spec.request_count))))

run_button = st.sidebar.button("▶️ 実験を実行", type="primary", use_container_width=True)

st.sidebar.markdown("---")
st.sidebar.header("📡 ゲートウェイ")
gateway_url = st.sidebar.text_input("URL", "http://127.0.0.1:8080")
fetch_button = st.sidebar.button("メトリクス取得", use_container_width=True)

col1, col2 = st.columns([1, 1])

with col1:
    st.header("📋 ポリシー")
    try:
        services, tbm_rows = load_policy(spec.model, spec.scenario)
        st.markdown("**サービス**")
        st.dataframe(services, hide_index=True, use_container_width=True)
        st.markdown(f"**TBM ({len(tbm_rows)} ルール)**")
        st.dataframe(tbm_rows, hide_index=True, use_container_width=True)
    except GuardError as e:
        st.error(f"ポリシーの読み込みに失敗しました: {e}")

with col2:
    st.header("✨ 実験結果")

    if run_button:
        if kind in ("deauth-afr", "scale") and not (spec.frequency_schedule if kind == "deauth-afr" else spec.tbm_scale):
            st.error("この実験仕様には必要な設定がありません")
        else:
            with st.spinner("インプロセスのゲートウェイで実行中..."):
                try:
                    http, _, clock = in_process(spec)
                    with http:
                        if kind == "supervise":
                            report = run_supervision(spec, http, VirtualPacer(clock))
                        elif kind == "deauth-uar":
                            report = run_deauthorization(spec, http, "uar", VirtualPacer(clock))
                        elif kind == "deauth-afr":
                            report = run_deauthorization(spec, http, "afr", VirtualPacer(clock))
                        else:
                            report = run_scaling(spec, http)
                    st.session_state.report = report
                except GuardError as e:
                    st.error(f"実験エラー: {e}")

    report = st.session_state.report
    if report is not None:
        st.markdown(f"**{report.mode}** / seed {report.seed} / {report.request_count} requests")
        if report.first_trigger:
            st.warning(f"⚠️ 認可取り消し: {report.first_trigger}")
        else:
            st.success("✅ 認可取り消しは発生していません")

        frame = report.services_frame()
        if not frame.empty:
            st.markdown("### サービス別")
            st.dataframe(frame, hide_index=True, use_container_width=True)
            st.bar_chart(frame.set_index("service")[["responded_times", "denied_times"]])

        groups = report.groups_frame()
        if not groups.empty:
            st.markdown("### グループ別")
            st.dataframe(groups, hide_index=True, use_container_width=True)
            st.line_chart(groups.set_index("group")[["requests", "responded"]])

        scaling = report.scaling_frame()
        if not scaling.empty:
            st.markdown("### TBM規模とレイテンシ")
            st.line_chart(scaling.set_index("rules")["mean_latency_us"])
            if report.envelope:
                st.caption(f"上限 {report.envelope['bound_us']:.1f}µs / "
                           f"最大規模 {report.envelope['largest_us']:.1f}µs / "
                           f"{'OK' if report.envelope['passed'] else 'NG'}")
    else:
        st.info("「実験を実行」ボタンを押してください")

if fetch_button:
    st.markdown("---")
    st.header("📡 ゲートウェイのメトリクス")
    try:
        metrics = httpx.get(f"{gateway_url.rstrip('/')}/metrics", timeout=5.0).json()
        st.dataframe(pd.DataFrame(metrics["services"]).T, use_container_width=True)
        if metrics["consumers"]:
            st.dataframe(pd.DataFrame(metrics["consumers"]).T, use_container_width=True)
        st.markdown(f"**ブラックリスト:** {', '.join(metrics['blacklist']) or 'なし'}")
    except httpx.HTTPError as e:
        st.error(f"ゲートウェイに接続できません: {e}")

st.markdown("---")
with st.expander("📖 使い方"):
    st.markdown("""
    ### 実験の種類
    - **supervise**: ランダムなリクエスト列を送り、解放サービスだけが応答することを確認
    - **deauth-uar**: 不正アクセス数(UAR)が閾値を超えた時点でセッションを終了
    - **deauth-afr**: アクセス頻度(AFR)が閾値を超えたグループでセッションを終了
    - **scale**: TBMのルール数を増やしたときの応答時間

    実験はインプロセスのゲートウェイと仮想クロックで実行するため、
    AFRの10分間のスケジュールも数秒で終わります。
    """)
