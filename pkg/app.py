"""
melsim report viewer – entrypoint.

Uses st.navigation so the sidebar shows "Home" and the report pages with icons.
"""

import streamlit as st

st.set_page_config(
    page_title="melsim",
    page_icon="🚦",
    layout="wide",
    initial_sidebar_state="expanded",
)

pg = st.navigation([
    st.Page("pages/home.py", title="Home", icon="🏠", default=True),
    st.Page("pages/1_critical_points.py", title="Critical Points", icon="📍"),
    st.Page("pages/2_run_metrics.py", title="Run Metrics", icon="📈"),
])

with st.sidebar:
    st.caption("melsim v0.1.0")

pg.run()
