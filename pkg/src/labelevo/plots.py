"""Figures for run directories: IoU curves, label quality, loss_d traces, sweeps."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_montage(arrays, path, cols=5):
    """Tile a stack of [0,1] maps into one grayscale PNG."""
    arrays = np.asarray(arrays, dtype=float)
    n, h, w = arrays.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    canvas = np.ones((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i, a in enumerate(arrays):
        r, c = divmod(i, cols)
        canvas[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = a
    plt.imsave(path, np.clip(canvas, 0, 1), cmap="gray", vmin=0, vmax=1)


def _finish(fig, ax, path, xlabel, ylabel, title=None):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curves(curves, path, ylabel="IoU", title=None, marks=None):
    """Per-scene curves in light grey with the mean on top. ``curves`` is (epochs, scenes)."""
    c = np.asarray(curves, dtype=float)
    x = np.arange(1, len(c) + 1)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(x, c, color="0.75", lw=0.7)
    ax.plot(x, c.mean(1), color="C0", lw=2, label="mean")
    for m in marks or ():
        ax.axvline(m, color="C3", lw=0.6, alpha=0.4)
    ax.legend(loc="best")
    _finish(fig, ax, path, "epoch", ylabel, title)


def plot_label_quality(rows, path):
    """Mean label IoU and PA against update epoch, from label-metric rows."""
    if not rows:
        return False
    epochs = sorted({int(r["epoch"]) for r in rows})
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for key, color in (("iou", "C0"), ("pa", "C1")):
        ys = [np.mean([float(r[key]) for r in rows if int(r["epoch"]) == e]) for e in epochs]
        ax.plot(epochs, ys, marker=".", color=color, label=key.upper())
    ax.set_ylim(0, 1)
    ax.legend(loc="best")
    _finish(fig, ax, path, "epoch", "label vs GT")
    return True


def plot_loss_d(traces, path, labels=None):
    """loss_d per update; ``traces`` maps a name to a list of (epoch, value)."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for i, (name, pts) in enumerate(traces.items()):
        if not pts:
            continue
        e, v = zip(*pts)
        ax.plot(e, v, marker=".", lw=1, label=(labels or {}).get(name, name), color=f"C{i % 10}")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.legend(loc="best", fontsize="small")
    _finish(fig, ax, path, "epoch", "loss_d")


def plot_sweep(rows, key, path, axis=None):
    xs = [r["value"] for r in rows]
    ys = [float(r[key]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.4))
    pos = np.arange(len(xs))
    ax.plot(pos, ys, marker="o")
    ax.set_xticks(pos, [str(x) for x in xs])
    _finish(fig, ax, path, axis or str(rows[0].get("axis", "value")), key)
