import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)


class Visualizer(object):
    """Class that handles all figures written next to experiment outputs.

    Attributes:
        cell_size (float): Inches per image tile or matrix cell
        dpi (int): Resolution of the saved PNGs
        cmap (str): Colormap for metric heatmaps
    """

    def __init__(self, cell_size=1.5, dpi=100, cmap="viridis"):
        self.cell_size = cell_size
        self.dpi = dpi
        self.cmap = cmap

    def _save(self, fig, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(str(path), dpi=self.dpi, bbox_inches="tight")
        plt.close(fig)
        logger.debug("Wrote figure %s", path)
        return path

    def save_heatmap(self, matrix, labels, path, title="", fmt="{:.2f}"):
        """Source x target metric matrix; absent cells (NaN) are drawn blank and labelled "-".

        Args:
            matrix (ndarray): Square [n, n] values, rows are source contrasts
            labels (list): Contrast names for rows and columns
            path (str or Path): Output PNG
            title (str): Figure title
            fmt (str): Format for cell annotations
        """
        matrix = np.asarray(matrix, dtype=float)
        n = len(labels)
        fig, ax = plt.subplots(figsize=(self.cell_size * n + 1.5, self.cell_size * n + 1))
        masked = np.ma.masked_invalid(matrix)
        image = ax.imshow(masked, cmap=self.cmap)
        fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(labels)
        ax.set_yticklabels(labels)
        ax.set_xlabel("target contrast")
        ax.set_ylabel("source contrast")
        for i in range(n):
            for j in range(n):
                text = "-" if np.isnan(matrix[i, j]) else fmt.format(matrix[i, j])
                ax.text(j, i, text, ha="center", va="center", color="w")
        ax.set_title(title)
        return self._save(fig, path)

    def save_beta_grid(self, beta, path, columns=4):
        """One tile per anatomy-map channel, each with its own color scale."""
        beta = np.asarray(beta)
        channels = beta.shape[0]
        rows = int(np.ceil(channels / float(columns)))
        fig, axes = plt.subplots(rows, columns, figsize=(self.cell_size * columns, self.cell_size * rows),
                                 squeeze=False)
        for k, ax in enumerate(axes.flat):
            ax.axis("off")
            if k < channels:
                ax.imshow(beta[k], cmap="gray")
                ax.set_title("ch {}".format(k), fontsize=8)
        return self._save(fig, path)

    def save_comparison(self, images, path, titles=None):
        """Images side by side on a shared [0, 1] gray scale (e.g. source, target, harmonized)."""
        titles = titles or [""] * len(images)
        fig, axes = plt.subplots(1, len(images), figsize=(self.cell_size * 2 * len(images), self.cell_size * 2),
                                 squeeze=False)
        for ax, image, title in zip(axes[0], images, titles):
            ax.imshow(np.asarray(image), cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_title(title)
            ax.axis("off")
        return self._save(fig, path)

    def save_loss_curves(self, rows, path, names=("L_rec", "L_perc", "L_adv_g", "L_adv_d", "total")):
        """Per-step loss curves from the rows of a loss CSV."""
        fig, ax = plt.subplots(figsize=(8, 4))
        steps = [row["step"] for row in rows]
        for name in names:
            ax.plot(steps, [row[name] for row in rows], label=name)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend()
        return self._save(fig, path)
