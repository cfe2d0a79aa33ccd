"""Static SVG charts with the plotted numbers embedded as a JSON data block."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

DATA_ID = "periodic-mdp-data"
_DATA_RE = re.compile(rf'<metadata id="{DATA_ID}"><!\[CDATA\[(.*?)\]\]></metadata>', re.S)

plt.rcParams["svg.hashsalt"] = "periodic-mdp"


def _save_with_data(fig, path, data):
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    block = f'<metadata id="{DATA_ID}"><![CDATA[{json.dumps(data)}]]></metadata>\n'
    text = path.read_text()
    end = text.rindex("</svg>")
    path.write_text(text[:end] + block + text[end:])
    return path


def read_chart_data(path) -> dict:
    """Parse the JSON data block of a chart written by this module."""
    match = _DATA_RE.search(Path(path).read_text())
    if match is None:
        raise ValueError(f"{path} has no embedded data block")
    return json.loads(match.group(1))


def regret_chart(series, path, title="Cumulative periodic regret", logscale=False):
    """One line per ``(label, episodes, regret)`` entry of ``series``."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    payload = []
    for label, episodes, regret in series:
        episodes = [int(e) for e in episodes]
        regret = [float(r) for r in regret]
        ax.plot(episodes, regret, label=label, linewidth=1.5)
        payload.append({"label": label, "episode": episodes, "regret_cum": regret})
    ax.set_xlabel("episode")
    ax.set_ylabel("regret")
    ax.set_title(title)
    if logscale:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save_with_data(fig, path, {"kind": "regret", "series": payload})


def occupancy_heatmaps(grid, slices, path, steps=None, title="State distribution"):
    """Per-step state distributions of an occupancy measure laid out on ``grid``."""
    slices = np.asarray(slices)
    horizon = slices.shape[0] - 1
    if steps is None:
        steps = sorted(set(np.linspace(0, horizon, num=min(6, horizon + 1)).round().astype(int).tolist()))
    fig, axes = plt.subplots(1, len(steps), figsize=(2.2 * len(steps), 2.6), squeeze=False)
    payload = []
    for ax, n in zip(axes[0], steps):
        marginal = slices[n].sum(axis=-1)
        image = grid.to_grid(marginal)
        ax.imshow(np.ma.masked_invalid(image), cmap="viridis", vmin=0.0, vmax=max(marginal.max(), 1e-12))
        ax.set_title(f"n = {n}", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        payload.append({"step": int(n), "state_marginal": [float(v) for v in marginal]})
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save_with_data(fig, path, {"kind": "heatmap", "steps": payload})
