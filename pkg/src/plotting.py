"""
Plotting Engine

This module contains functions for creating the figures of the analysis
report: residue-type distributions (interactive Plotly and static
Matplotlib), the residue confusion matrix and the length profile.
"""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import plotly.graph_objects as go

PALETTE = ['#38bdf8', '#f87171', '#4ade80', '#facc15', '#c084fc', '#fb923c']


def plot_residue_bars(table: pd.DataFrame, value: str = "minmax") -> go.Figure:
    """
    Creates an interactive grouped bar chart of residue statistics.

    Args:
        table (pd.DataFrame): Long table with columns model, residue and `value`,
            residues in canonical order.
        value (str): Column plotted on the y axis.

    Returns:
        go.Figure: The Plotly figure object.
    """
    fig = go.Figure()
    for i, (model, part) in enumerate(table.groupby("model", sort=False)):
        fig.add_trace(go.Bar(
            x=part["residue"],
            y=part[value],
            name=model,
            marker_color=PALETTE[i % len(PALETTE)],
        ))

    fig.update_layout(
        title_text="Residue Type Distribution",
        xaxis_title_text="Residue",
        yaxis_title_text=value,
        barmode="group",
        template="plotly_dark",
        legend=dict(x=0.01, y=0.99, xanchor='left', yanchor='top'),
        margin=dict(l=40, r=40, t=60, b=40),
        paper_bgcolor="#1a202c", # gray-900
        plot_bgcolor="#2d3748", # gray-800
    )
    return fig


def plot_residue_bars_static(table: pd.DataFrame, value: str = "minmax") -> plt.Figure:
    """Matplotlib version of `plot_residue_bars`."""
    plt.style.use('dark_background')
    fig = plt.figure(figsize=(10, 4), facecolor="#1a202c")
    ax = fig.add_subplot(1, 1, 1)

    models = list(dict.fromkeys(table["model"]))
    residues = list(dict.fromkeys(table["residue"]))
    width = 0.8 / max(len(models), 1)
    x = np.arange(len(residues))
    for i, model in enumerate(models):
        part = table[table["model"] == model].set_index("residue").reindex(residues)
        ax.bar(x + i * width - 0.4 + width / 2, part[value].to_numpy(), width,
               label=model, color=PALETTE[i % len(PALETTE)])

    ax.set_xticks(x)
    ax.set_xticklabels(residues)
    ax.set_ylabel(value)
    ax.set_title("Residue Type Distribution", fontsize=14)
    ax.set_facecolor("#2d3748")
    ax.grid(True, axis='y', linestyle='--', linewidth=0.5, color='#4a5568')
    ax.legend()
    fig.tight_layout()
    return fig


def plot_confusion(matrix: np.ndarray, residues: str) -> plt.Figure:
    """
    Creates a heat map of the confusion matrix, native residues on rows.

    Args:
        matrix (np.ndarray): 20 x 20 counts.
        residues (str): Axis labels in canonical order.

    Returns:
        plt.Figure: The Matplotlib figure object.
    """
    plt.style.use('dark_background')
    fig = plt.figure(figsize=(7, 6), facecolor="#1a202c")
    ax = fig.add_subplot(1, 1, 1)

    # row-normalised so that rare residues stay visible
    totals = matrix.sum(axis=1, keepdims=True)
    shown = np.divide(matrix, totals, out=np.zeros_like(matrix, dtype=float), where=totals > 0)
    image = ax.imshow(shown, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(residues)))
    ax.set_xticklabels(list(residues))
    ax.set_yticks(range(len(residues)))
    ax.set_yticklabels(list(residues))
    ax.set_xlabel("Designed")
    ax.set_ylabel("Native")
    ax.set_title("Residue Confusion", fontsize=14)
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    return fig


def plot_length_profile(profile: pd.DataFrame) -> plt.Figure:
    """Recovery and perplexity per sequence-length bin."""
    plt.style.use('dark_background')
    fig = plt.figure(figsize=(8, 6), facecolor="#1a202c")

    ax1 = fig.add_subplot(2, 1, 1)
    ax1.bar(profile["bin"], profile["recovery"], color='#38bdf8')
    ax1.set_ylabel("Recovery (%)")
    ax1.grid(True, axis='y', linestyle='--', linewidth=0.5, color='#4a5568')
    ax1.set_facecolor("#2d3748")

    ax2 = fig.add_subplot(2, 1, 2, sharex=ax1)
    ax2.bar(profile["bin"], profile["perplexity"], color='#f87171')
    ax2.set_ylabel("Perplexity")
    ax2.set_xlabel("Sequence length")
    ax2.grid(True, axis='y', linestyle='--', linewidth=0.5, color='#4a5568')
    ax2.set_facecolor("#2d3748")

    plt.suptitle("Length Profile", fontsize=16)
    fig.tight_layout(rect=[0, 0, 1, 0.96])
    return fig
