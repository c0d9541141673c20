import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

ALGO_COLORS = {
    "supervised": "#4d4d4d",
    "clstran": "#e08214",
    "simclr": "#2166ac",
    "cpc": "#1b7837",
    "tstcc": "#b2182b",
}


def new(width=4.5, height=3.0, **kw):
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height), **kw)


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
