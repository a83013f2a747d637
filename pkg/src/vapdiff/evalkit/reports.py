from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence


def write_csv(rows: Sequence[dict], path: str | Path, append: bool = False) -> Path:
    """Write dict rows; when appending to an existing file the header is not repeated."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    exists = append and path.exists() and path.stat().st_size > 0
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        if not exists:
            w.writeheader()
        w.writerows(rows)
    return path


def plot_bars(rows: Sequence[dict], label_key: str, value_keys: Sequence[str], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(value_keys), figsize=(3.2 * len(value_keys), 3))
    axes = [axes] if len(value_keys) == 1 else axes
    labels = [str(r[label_key]) for r in rows]
    for ax, key in zip(axes, value_keys):
        ax.bar(labels, [float(r[key]) for r in rows], color="tab:blue")
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
