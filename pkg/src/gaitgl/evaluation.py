"""Gallery/probe retrieval: distances, rank-k, cross-view accuracy table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .network import EmbeddingMatrix


@dataclass
class GalleryIndex:
    """Flattened embeddings with retrieval metadata, one row per sequence."""

    embeddings: np.ndarray  # [n, D] float64
    labels: list
    views: list
    conditions: list

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.embeddings)
        if not (len(self.labels) == len(self.views) == len(self.conditions) == n):
            raise InputError("metadata length does not match embedding count")

    def __len__(self):
        return len(self.embeddings)


def flatten(e: EmbeddingMatrix) -> np.ndarray:
    """Concatenate strips top-to-bottom into one vector of strips*channels."""
    return np.asarray(e.values, dtype=np.float64).reshape(-1)


def build_index(embeddings, labels, views=None, conditions=None) -> GalleryIndex:
    rows = [flatten(e) if isinstance(e, EmbeddingMatrix) else
            np.asarray(e, dtype=np.float64).reshape(-1) for e in embeddings]
    n = len(rows)
    return GalleryIndex(
        np.stack(rows) if rows else np.zeros((0, 0)),
        list(labels),
        list(views) if views is not None else [0] * n,
        list(conditions) if conditions is not None else ["SYNTH"] * n)


def distance_matrix(probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances in double precision: [n_p, n_g]."""
    probes = np.asarray(probes, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if probes.ndim != 2 or gallery.ndim != 2 or probes.shape[1] != gallery.shape[1]:
        raise InputError(
            f"embedding dimensionality mismatch: {probes.shape} vs {gallery.shape}")
    d2 = (probes ** 2).sum(1)[:, None] + (gallery ** 2).sum(1)[None, :] \
        - 2.0 * probes @ gallery.T
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def rank_k(dm: np.ndarray, probe_labels, gallery_labels, k: int) -> float:
    """Fraction of probes whose k nearest gallery rows include the true label.

    Ties are broken toward the lower gallery index.
    """
    dm = np.asarray(dm)
    if dm.shape[1] == 0:
        raise InputError("empty gallery")
    if k < 1 or k > dm.shape[1]:
        raise InputError(f"k must lie in [1, {dm.shape[1]}], got {k}")
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    order = np.argsort(dm, axis=1, kind="stable")[:, :k]
    hits = (gallery_labels[order] == probe_labels[:, None]).any(axis=1)
    return float(hits.mean())


@dataclass
class CrossViewTable:
    """Per-(condition, probe view) rank-1 accuracies plus condition means."""

    cells: dict = field(default_factory=dict)        # (cond, pview) -> float|None
    by_gallery_view: dict = field(default_factory=dict)  # (cond, pview, gview) -> float
    condition_means: dict = field(default_factory=dict)

    def conditions(self):
        return sorted({c for c, _ in self.cells})

    def probe_views(self):
        return sorted({v for _, v in self.cells})


def crossview_table(probe: GalleryIndex, gallery: GalleryIndex,
                    exclude_identical_view: bool = True) -> CrossViewTable:
    """Rank-1 per (condition, probe view), optionally excluding same-view
    gallery entries; cells with an empty restricted gallery are absent."""
    table = CrossViewTable()
    g_views = np.asarray(gallery.views)
    g_labels = np.asarray(gallery.labels)
    p_views = np.asarray(probe.views)
    p_conds = np.asarray(probe.conditions)
    p_labels = np.asarray(probe.labels)

    for cond in sorted(set(probe.conditions)):
        accs = []
        for view in sorted(set(probe.views)):
            rows = np.flatnonzero((p_conds == cond) & (p_views == view))
            if rows.size == 0:
                continue
            keep = np.ones(len(gallery), dtype=bool)
            if exclude_identical_view:
                keep = g_views != view
            if not keep.any():
                table.cells[(cond, view)] = None
                continue
            dm = distance_matrix(probe.embeddings[rows], gallery.embeddings[keep])
            acc = rank_k(dm, p_labels[rows], g_labels[keep], 1)
            table.cells[(cond, view)] = acc
            accs.append(acc)
            for gview in sorted(set(np.asarray(gallery.views)[keep].tolist())):
                gkeep = keep & (g_views == gview)
                dmg = distance_matrix(probe.embeddings[rows], gallery.embeddings[gkeep])
                table.by_gallery_view[(cond, view, gview)] = \
                    rank_k(dmg, p_labels[rows], g_labels[gkeep], 1)
        if accs:
            table.condition_means[cond] = float(np.mean(accs))
    return table


def format_table(table: CrossViewTable) -> str:
    """Aligned UTF-8 text rendering of the pooled cross-view grid."""
    views = table.probe_views()
    header = ["cond"] + [f"{v:>6}" for v in views] + ["  mean"]
    lines = ["  ".join(header)]
    for cond in table.conditions():
        row = [f"{cond:<4}"]
        for v in views:
            acc = table.cells.get((cond, v))
            row.append("     -" if acc is None else f"{acc:6.3f}")
        mean = table.condition_means.get(cond)
        row.append("     -" if mean is None else f"{mean:6.3f}")
        lines.append("  ".join(row))
    return "\n".join(lines) + "\n"


def write_table_csv(table: CrossViewTable, path) -> None:
    """Delimited rows: condition, probe_view, gallery_view, accuracy.

    Pooled cells use gallery_view 'all'; per-gallery-view breakdown rows
    follow.  Absent cells are skipped.
    """
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "probe_view", "gallery_view", "accuracy"])
        for (cond, view), acc in sorted(table.cells.items()):
            if acc is None:
                continue
            writer.writerow([cond, view, "all", f"{acc:.6f}"])
        for (cond, view, gview), acc in sorted(table.by_gallery_view.items()):
            writer.writerow([cond, view, gview, f"{acc:.6f}"])
