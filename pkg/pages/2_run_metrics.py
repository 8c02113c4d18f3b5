"""
Run metrics: per-step table, refinement sessions and migrations from a
`simulate` run.
"""

from pathlib import Path

import streamlit as st

from melsim.metrics import METRICS_FILE, MIGRATIONS_FILE, SESSIONS_FILE, TIMING_FILE
from melsim.reports import find_runs, load_table, run_overview

_PROJECT_ROOT = Path(__file__).resolve().parent.parent
OUT_DIR = _PROJECT_ROOT / "out"

st.set_page_config(page_title="Run Metrics", page_icon="📈", layout="wide")
st.title("Run Metrics")
st.caption("Tables from `melsim simulate`; wall-clock timings are informational only.")

runs = find_runs(OUT_DIR, kind="simulate")
if not runs:
    st.info(
        "No simulation output found under out/. Run: "
        "`uv run python scripts/melsim_run.py simulate --config configs/demo_ring.json`"
    )
else:
    labels = [str(p.relative_to(_PROJECT_ROOT)) if p.is_relative_to(_PROJECT_ROOT) else str(p) for p in runs]
    choice = st.selectbox("Run", labels, index=0)
    run_dir = runs[labels.index(choice)]

    overview = run_overview(run_dir)
    c1, c2, c3, c4 = st.columns(4)
    c1.metric("Steps", overview["steps"])
    c2.metric("Sessions", overview["sessions"])
    c3.metric("Migrations", overview["migrations"])
    if "remote_ratio" in overview:
        c4.metric("Remote messages", f"{overview['remote_ratio']:.1%}")
    if overview.get("digest"):
        st.caption(f"Trace digest: `{overview['digest']}`")

    tab_metrics, tab_sessions, tab_migrations, tab_timing = st.tabs(
        ["Per step", "Sessions", "Migrations", "Timing"]
    )
    with tab_metrics:
        df = load_table(run_dir, METRICS_FILE)
        if df is None or df.empty:
            st.caption("No steps executed.")
        else:
            first, last = int(df["step"].min()), int(df["step"].max())
            lo, hi = st.slider("Steps", first, max(last, first + 1), (first, last)) if last > first else (first, last)
            st.dataframe(df[(df["step"] >= lo) & (df["step"] <= hi)], use_container_width=True, hide_index=True)
    with tab_sessions:
        df = load_table(run_dir, SESSIONS_FILE)
        if df is None or df.empty:
            st.caption("No refinement sessions closed in this run.")
        else:
            balanced = (df["vehicles_in"] == df["vehicles_out"]).all()
            st.caption("Vehicles conserved in every session." if balanced else "Vehicle counts differ in some session.")
            st.dataframe(df, use_container_width=True, hide_index=True)
    with tab_migrations:
        df = load_table(run_dir, MIGRATIONS_FILE)
        if df is None or df.empty:
            st.caption("No migrations.")
        else:
            st.dataframe(df, use_container_width=True, hide_index=True)
    with tab_timing:
        df = load_table(run_dir, TIMING_FILE)
        if df is None or df.empty:
            st.caption("No timings.")
        else:
            st.dataframe(df, use_container_width=True, hide_index=True)
