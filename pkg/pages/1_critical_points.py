"""
Critical points: the betweenness ranking from the latest `analyze` run.
"""

from pathlib import Path

import streamlit as st

from melsim.metrics import SCORES_FILE, SUMMARY_FILE, TOP_K_FILE
from melsim.reports import find_runs, load_table

_PROJECT_ROOT = Path(__file__).resolve().parent.parent
OUT_DIR = _PROJECT_ROOT / "out"

st.set_page_config(page_title="Critical Points", page_icon="📍", layout="wide")
st.title("Critical Points")
st.caption("Intersections ranked by directed, length-weighted betweenness (raw ordered-pair counts).")

runs = find_runs(OUT_DIR, kind="analyze")
if not runs:
    st.info(
        "No analysis found under out/. Run: "
        "`uv run python scripts/melsim_run.py analyze --config configs/demo_ring.json`"
    )
else:
    labels = [str(p.relative_to(_PROJECT_ROOT)) if p.is_relative_to(_PROJECT_ROOT) else str(p) for p in runs]
    choice = st.selectbox("Report", labels, index=0)
    run_dir = runs[labels.index(choice)]

    summary = load_table(run_dir, SUMMARY_FILE)
    if summary is not None and not summary.empty:
        cols = st.columns(len(summary))
        for col, (_, row) in zip(cols, summary.iterrows()):
            col.metric(str(row["metric"]), row["value"])

    top = load_table(run_dir, TOP_K_FILE)
    st.markdown("#### Top-k")
    if top is None or top.empty:
        st.caption("No top-k table (k = 0).")
    else:
        st.dataframe(top, use_container_width=True, hide_index=True)

    scores = load_table(run_dir, SCORES_FILE)
    with st.expander("Full ranking", expanded=False):
        if scores is None:
            st.caption("No scores file.")
        else:
            min_score = st.number_input("Minimum score", min_value=0.0, value=0.0)
            st.dataframe(scores[scores["score"] >= min_score], use_container_width=True, hide_index=True)
