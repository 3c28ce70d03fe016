"""Figures written next to the CSV reports."""

import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (4.5, 3.2),
    "savefig.dpi": 120,
}

# PNG metadata without timestamps keeps repeated runs byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)
    return path


def plot_benchmark(rows, out_dir):
    """One ``grid_<family>.png`` per corruption family: PSNR vs level, a line per checkpoint."""
    by_family = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_family[r["family"]][r["checkpoint"]].append((r["level_value"], r["psnr"]))
    paths = []
    with plt.rc_context(STYLE):
        for family, curves in sorted(by_family.items()):
            fig, ax = plt.subplots()
            for ckpt, pts in sorted(curves.items()):
                pts.sort()
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=ckpt)
            ax.set_xlabel(f"{family} level")
            ax.set_ylabel("PSNR (dB)")
            ax.legend(frameon=False)
            paths.append(_save(fig, out_dir / f"grid_{family}.png"))
    return paths


def plot_losses(csv_path, png_path):
    cols = defaultdict(list)
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                cols[k].append(float(v))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name in ("l_scene", "l_noise", "l_cross", "l_mix", "total"):
            if cols[name] and any(cols[name]):
                ax.plot(cols["step"], cols[name], lw=0.8, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, png_path)
