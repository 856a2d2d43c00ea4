import logging
import tempfile
from contextlib import contextmanager
from pathlib import Path

import altair as alt
import numpy as np
import pandas as pd
import streamlit as st
from pydantic import ValidationError

from latent_model.aggregate import AggregateSource
from latent_model.inference import (
    estimate_baseline_states,
    item_prediction_accuracy,
    latent_recovery_accuracy,
    policy_for_dataset,
    recommend,
    recommend_batch,
)
from latent_model.measurement import domain_scores
from latent_model.model_store import ModelStore
from latent_model.trainer import TrainingConfig, fit
from logging_setup import configure_logging
from policy_evaluation.baseline import fit_linear_q
from policy_evaluation.value import OutcomeSpec, empirical_value, optimal_accuracy, outcome_values
from settings import get_settings
from trial_data.dataset_io import dataset_frame, load_dataset
from trial_simulator.simulator import SimConfig, oracle_value, simulate

settings = get_settings()
configure_logging(settings)
logger = logging.getLogger(__name__)


@contextmanager
def error_handler(operation_name: str, show_error: bool = True):
    try:
        yield
    except Exception as e:
        logger.error(f"Error in {operation_name}: {str(e)}", exc_info=True)
        if show_error:
            st.error(f"❌ {operation_name} failed.")
            with st.expander("Technical Details", expanded=False):
                st.code(f"Error: {str(e)}")
        raise


st.set_page_config(page_title="🧠 Latent ITR Workbench", page_icon="🧠", layout="wide")

store = ModelStore(settings.model_dir)


def render_run_config():
    """Sidebar run configuration; returns (SimConfig, TrainingConfig, direction)."""
    st.sidebar.header("⚙️ Run Configuration")
    seed = st.sidebar.number_input("Seed", min_value=0, value=0, step=1)
    K = st.sidebar.number_input("Latent domains (K)", min_value=1, max_value=6, value=3, step=1)
    direction = st.sidebar.selectbox("Outcome direction", ["minimize", "maximize"], index=0)

    st.sidebar.subheader("🧪 Simulation")
    n = st.sidebar.number_input("Subjects", min_value=10, max_value=20000, value=200, step=50)
    propensity = st.sidebar.slider("Propensity of arm +1", 0.05, 0.95, 0.5, 0.05)
    effect_scale = st.sidebar.slider("Treatment effect scale", 0.0, 2.0, 1.0, 0.25)

    st.sidebar.subheader("🏋️ Training")
    hidden = st.sidebar.text_input("Hidden widths", value="20,10")
    epochs = st.sidebar.number_input("Adam epochs per iteration", min_value=1, value=6, step=1)
    iterations = st.sidebar.number_input("Outer iterations", min_value=0, value=6, step=1)
    learning_rate = st.sidebar.number_input("Learning rate", min_value=1e-4, value=0.1, format="%.4f")
    learning_rate_decay = st.sidebar.slider("Learning-rate decay per iteration", 0.1, 1.0, 0.7, 0.05)

    try:
        sim_config = SimConfig(
            n=int(n), seed=int(seed), K=int(K), propensity=float(propensity), effect_scale=float(effect_scale)
        )
        training_config = TrainingConfig(
            K=int(K),
            hidden=[int(w) for w in hidden.split(",") if w.strip()],
            epochs_per_iteration=int(epochs),
            outer_iterations=int(iterations),
            learning_rate=float(learning_rate),
            learning_rate_decay=float(learning_rate_decay),
            seed=int(seed),
        )
    except (ValidationError, ValueError) as e:
        st.sidebar.error(f"❌ Invalid configuration: {str(e)}")
        return None, None, direction
    return sim_config, training_config, direction


def render_data_tab(sim_config):
    st.header("🧪 Trial Data")
    source = st.radio("Source", ["Simulate", "Upload"], horizontal=True)
    if source == "Simulate":
        if st.button("Simulate trial", type="primary", disabled=sim_config is None):
            with error_handler("Simulation"):
                dataset, truth = simulate(sim_config)
                st.session_state.dataset = dataset
                st.session_state.truth = truth
                st.success(f"✅ Simulated {dataset.n} subjects")
    else:
        data_file = st.file_uploader("Trial CSV", type=["csv"])
        schema_file = st.file_uploader("Schema JSON", type=["json"])
        if data_file and schema_file and st.button("Load data", type="primary"):
            with error_handler("Data Load"):
                with tempfile.TemporaryDirectory() as tmp:
                    data_path, schema_path = Path(tmp) / "data.csv", Path(tmp) / "schema.json"
                    data_path.write_bytes(data_file.getvalue())
                    schema_path.write_bytes(schema_file.getvalue())
                    st.session_state.dataset = load_dataset(data_path, schema_path)
                st.session_state.truth = None
                st.success(f"✅ Loaded {st.session_state.dataset.n} subjects")

    dataset = st.session_state.get("dataset")
    if dataset is not None:
        counts = dataset.arm_counts()
        col1, col2, col3 = st.columns(3)
        col1.metric("Subjects", dataset.n)
        col2.metric("Arm +1", counts[1])
        col3.metric("Arm -1", counts[-1])
        st.dataframe(dataset_frame(dataset).head(50), use_container_width=True)


def render_train_tab(training_config):
    st.header("🏋️ Train")
    dataset = st.session_state.get("dataset")
    if dataset is None:
        st.info("Simulate or load a trial first.")
        return
    name = st.text_input("Model name", value="model")
    if st.button("Fit model", type="primary", disabled=training_config is None):
        with error_handler("Model Fit"):
            with st.spinner("Alternating Adam epochs and exact latent search..."):
                model = fit(dataset, training_config, threads=settings.threads)
            provenance = {"command": "dashboard", "config": training_config.model_dump(mode="json")}
            path = store.save_model(name, model, provenance)
            st.session_state.model = model
            st.success(f"✅ Model saved to {path}")

    model = st.session_state.get("model")
    if model is None:
        return
    trace = pd.DataFrame([record.model_dump() for record in model.objective_log])
    trace["step"] = np.arange(len(trace))
    chart = (
        alt.Chart(trace)
        .mark_line(point=True)
        .encode(
            x="step:Q",
            y=alt.Y("objective:Q", scale=alt.Scale(zero=False)),
            color="phase:N",
            tooltip=["phase", "iteration", "objective"],
        )
        .properties(title="Objective trace")
    )
    st.altair_chart(chart, use_container_width=True)

    if model.schema.discrete_indices:
        scores = domain_scores(model.measurement)
        st.subheader("📊 Domain scores")
        st.dataframe(pd.DataFrame({"domain": np.arange(1, model.K + 1), "score": scores}), use_container_width=True)
    st.subheader("🔍 Item fit")
    st.dataframe(item_prediction_accuracy(model, dataset, threads=settings.threads), use_container_width=True)


def render_model_picker():
    saved = store.list_models()
    if not saved:
        return st.session_state.get("model")
    choice = st.selectbox("Model", ["Current session"] + saved)
    if choice == "Current session":
        return st.session_state.get("model")
    with error_handler("Model Load"):
        return store.load_model(choice)


def render_recommend_tab(direction):
    st.header("🎯 Recommend")
    model = render_model_picker()
    if model is None:
        st.info("Fit or select a model first.")
        return
    aggregate_kind = st.selectbox("Aggregate", ["sum", "model_scores"], index=0)
    aggregate = AggregateSource(kind=aggregate_kind).resolve(model.measurement, direction)

    with st.form("single_subject"):
        st.subheader("Single subject")
        y0 = []
        for item in model.schema.items:
            if item.is_discrete:
                y0.append(st.number_input(item.name, min_value=0, max_value=item.width - 1, value=0, step=1))
            else:
                y0.append(st.number_input(item.name, value=0.0))
        x = [st.number_input(name, value=0.0) for name in model.covariate_names]
        if st.form_submit_button("Recommend"):
            with error_handler("Recommendation"):
                result = recommend(model, np.asarray(y0, dtype=np.float64), np.asarray(x, dtype=np.float64), aggregate)
                st.success(f"✅ Recommended arm: {result.chosen_arm:+d}")
                st.json(result.model_dump())

    dataset = st.session_state.get("dataset")
    if dataset is not None and dataset.schema == model.schema:
        frame = recommend_batch(model, dataset.y0, dataset.x, aggregate, threads=settings.threads)
        st.dataframe(frame.head(50), use_container_width=True)
        st.download_button(
            label="📥 Download recommendations",
            data=frame.to_csv(index=False),
            file_name="recommendations.csv",
            mime="text/csv",
        )


def render_evaluate_tab(direction):
    st.header("📈 Evaluate")
    dataset = st.session_state.get("dataset")
    model = st.session_state.get("model")
    if dataset is None or model is None:
        st.info("Fit a model on the current trial first.")
        return
    truth = st.session_state.get("truth")
    aggregate = AggregateSource().resolve(model.measurement, direction)
    with error_handler("Evaluation"):
        outcome = OutcomeSpec()
        R = outcome_values(outcome, dataset)
        policies = {
            "latent_itr": policy_for_dataset(model, dataset, aggregate, threads=settings.threads),
            "linear_q": fit_linear_q(dataset, R).recommend_dataset(dataset, direction),
            "all +1": np.ones(dataset.n, dtype=np.int64),
            "all -1": -np.ones(dataset.n, dtype=np.int64),
        }
        rows = []
        for name, arms in policies.items():
            value = empirical_value(arms, dataset, R, outcome.name)
            row = {
                "policy": name,
                "IPW value": value.empirical_value,
                "std. error": value.std_error,
                "matched": value.n_matched,
            }
            if truth is not None:
                row["oracle latent sum"] = oracle_value(truth, arms, "latent_sum")
                row["optimal accuracy"] = optimal_accuracy(arms, truth.optimal_arm)
            rows.append(row)
        st.caption("In-sample values; use the CLI crossval command for held-out estimates.")
        st.dataframe(pd.DataFrame(rows), use_container_width=True)
        if truth is not None:
            recovery = latent_recovery_accuracy(estimate_baseline_states(model, dataset.y0), truth.z0)
            st.metric("Baseline-state recovery", f"{recovery:.3f}")


def render_tab(operation_name: str, render, *args):
    try:
        render(*args)
    except Exception as e:
        # error_handler has already shown the failure
        logger.warning(f"{operation_name} tab stopped: {str(e)}")


if __name__ == "__main__":
    st.title("🧠 Latent ITR Workbench")
    st.markdown("Individualized treatment rules from latent disease states in randomized trials.")

    sim_config, training_config, direction = render_run_config()

    tab1, tab2, tab3, tab4 = st.tabs(["🧪 Simulate", "🏋️ Train", "🎯 Recommend", "📈 Evaluate"])
    with tab1:
        render_tab("Data", render_data_tab, sim_config)
    with tab2:
        render_tab("Train", render_train_tab, training_config)
    with tab3:
        render_tab("Recommend", render_recommend_tab, direction)
    with tab4:
        render_tab("Evaluate", render_evaluate_tab, direction)
