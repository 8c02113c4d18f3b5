"""
Home page content for the melsim report viewer.
"""

import streamlit as st

st.title("🚦 melsim")
st.subheader("Multi-level parallel simulation of road traffic")

st.write(
    """
melsim runs a coarse per-link traffic model on several logical processes,
refines hot regions into a cellular car-following model with a continuous
emissions level on top, and checks every parallel run against a sequential
oracle. This viewer lists the CSV files the command line writes.
"""
)

st.markdown("### Pages")

st.page_link("pages/1_critical_points.py", label="Critical Points", icon="📍")
st.caption("Betweenness ranking of intersections written by `melsim analyze`.")

st.page_link("pages/2_run_metrics.py", label="Run Metrics", icon="📈")
st.caption("Per-step metrics, refinement sessions and migrations written by `melsim simulate`.")

st.markdown("### Producing reports")

st.code(
    "uv run python scripts/melsim_run.py analyze --config configs/demo_ring.json\n"
    "uv run python scripts/melsim_run.py simulate --config configs/demo_ring.json --progress",
    language="bash",
)
