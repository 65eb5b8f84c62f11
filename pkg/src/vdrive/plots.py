"""SVG line charts for training logs and the eval reward histogram."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed salt and no date stamp: identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "vdrive"

LOSS_KEYS = {"cvqvae": "total", "oracle": "total", "policy": "total", "refine": "mse"}


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def loss_curve(values, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(len(values)), values, lw=1)
    ax.set_xlabel("step")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def reward_histogram(rewards, path: Path, bins: int = 20) -> None:
    counts, edges = np.histogram(np.asarray(rewards, dtype=np.float64), bins=bins)
    centers = 0.5 * (edges[1:] + edges[:-1])
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(centers, counts, drawstyle="steps-mid", lw=1)
    ax.set_xlabel("hybrid reward")
    ax.set_ylabel("count")
    fig.tight_layout()
    _save(fig, path)


def write_all(root: Path, out: Path, rewards) -> list[Path]:
    out = Path(out) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for stage, key in LOSS_KEYS.items():
        log_path = Path(root) / stage / "log.jsonl"
        if not log_path.exists():
            continue
        with open(log_path) as fh:
            values = [json.loads(line).get(key) for line in fh if line.strip()]
        values = [v for v in values if v is not None]
        if values:
            p = out / f"{stage}_loss.svg"
            loss_curve(values, f"{stage} {key}", p)
            written.append(p)
    p = out / "reward_hist.svg"
    reward_histogram(rewards, p)
    written.append(p)
    return written
