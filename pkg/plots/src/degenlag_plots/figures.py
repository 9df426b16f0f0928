"""Figure recipes over degenlag CSV outputs."""

from __future__ import annotations

import csv
import glob as globlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

KINDS = ("phase", "poloidal", "energy", "loss", "convergence")


class MissingColumnError(KeyError):
    """A required column is absent; the message names the offending file."""


@dataclass
class FigureRecipe:
    """One figure: kind, input file globs, styling, output path."""

    kind: str
    inputs: List[str]
    output: str
    title: Optional[str] = None
    r0: float = 1.0
    decimate: Union[int, str] = "auto"
    labels: Optional[List[str]] = None
    dpi: int = 130

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")

    @staticmethod
    def from_json(payload: dict) -> "FigureRecipe":
        return FigureRecipe(
            kind=payload["kind"],
            inputs=list(payload["inputs"]),
            output=payload["output"],
            title=payload.get("title"),
            r0=float(payload.get("r0", 1.0)),
            decimate=payload.get("decimate", "auto"),
            labels=payload.get("labels"),
            dpi=int(payload.get("dpi", 130)),
        )

    def resolve_inputs(self) -> List[Path]:
        paths: List[Path] = []
        for pattern in self.inputs:
            hits = sorted(globlib.glob(pattern))
            if hits:
                paths.extend(Path(h) for h in hits)
            elif Path(pattern).exists():
                paths.append(Path(pattern))
        if not paths:
            raise FileNotFoundError(f"no inputs matched {self.inputs}")
        return paths


def read_table(path: Path) -> Dict[str, np.ndarray]:
    """CSV as named float columns (non-numeric columns are skipped);
    empty data is an error."""
    with open(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty file: {path}") from None
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"no data rows in {path}")
    table: Dict[str, np.ndarray] = {}
    for i, name in enumerate(header):
        try:
            table[name] = np.array([float(row[i]) for row in rows])
        except ValueError:
            continue
    return table


def require(table: Dict[str, np.ndarray], path: Path, *names: str) -> List[np.ndarray]:
    out = []
    for name in names:
        if name not in table:
            raise MissingColumnError(f"column {name!r} missing from {path}")
        out.append(table[name])
    return out


def poloidal_coordinates(r: np.ndarray, theta: np.ndarray, r0: float = 1.0):
    """(R, Z) = (R0 + r cos(theta), r sin(theta))."""
    return r0 + r * np.cos(theta), r * np.sin(theta)


def _stride(n: int, decimate: Union[int, str]) -> int:
    if decimate == "auto":
        return max(1, n // 4000)
    return max(1, int(decimate))


def _label_for(recipe: FigureRecipe, i: int, path: Path) -> str:
    if recipe.labels and i < len(recipe.labels):
        return recipe.labels[i]
    return path.stem


def _plot_phase(recipe: FigureRecipe, paths: Sequence[Path], ax):
    for i, path in enumerate(paths):
        table = read_table(path)
        x, y = require(table, path, "x_1", "y_1")
        k = _stride(len(x), recipe.decimate)
        ax.plot(x[::k], y[::k], ".", ms=2.0, label=_label_for(recipe, i, path))
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(fontsize=8)


def _plot_energy(recipe: FigureRecipe, paths: Sequence[Path], ax):
    for i, path in enumerate(paths):
        table = read_table(path)
        t, h = require(table, path, "t", "H")
        h0 = h[0]
        rel = np.abs(h - h0) / max(abs(h0), 1e-300)
        k = _stride(len(t), recipe.decimate)
        ax.semilogy(t[1::k], np.maximum(rel[1::k], 1e-18), label=_label_for(recipe, i, path))
    ax.set_xlabel("t")
    ax.set_ylabel("|H - H0| / |H0|")
    ax.legend(fontsize=8)


def _plot_loss(recipe: FigureRecipe, paths: Sequence[Path], ax):
    for i, path in enumerate(paths):
        table = read_table(path)
        epoch, test_loss, reg = require(table, path, "epoch", "test_loss", "reg_term")
        label = _label_for(recipe, i, path)
        ax.semilogy(epoch, test_loss, label=f"{label}: loss")
        ax.semilogy(epoch, np.maximum(np.abs(reg), 1e-18), "--", label=f"{label}: reg term")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test loss")
    ax.legend(fontsize=8)


def _plot_convergence(recipe: FigureRecipe, paths: Sequence[Path], ax):
    for i, path in enumerate(paths):
        table = read_table(path)
        h, med, p5, p95 = require(table, path, "h", "median_error", "p5_error", "p95_error")
        schemes = None
        raw = read_raw_column(path, "scheme")
        if raw is not None:
            schemes = np.asarray(raw)
        groups = np.unique(schemes) if schemes is not None else [None]
        for scheme in groups:
            mask = schemes == scheme if scheme is not None else np.ones(len(h), bool)
            hh, mm = h[mask], med[mask]
            lo, hi = p5[mask], p95[mask]
            order = np.argsort(hh)
            name = _label_for(recipe, i, path) + (f" {scheme}" if scheme is not None else "")
            finite = np.isfinite(mm[order])
            ax.loglog(hh[order][finite], mm[order][finite], "o-", label=name)
            band_ok = np.isfinite(lo[order]) & np.isfinite(hi[order])
            ax.fill_between(
                hh[order][band_ok], lo[order][band_ok], hi[order][band_ok], alpha=0.25
            )
    ax.set_xlabel("h")
    ax.set_ylabel("error at t_end")
    ax.legend(fontsize=8)


def read_raw_column(path: Path, name: str) -> Optional[List[str]]:
    """A non-numeric CSV column (e.g. the scheme tag), or None if absent."""
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if name not in header:
            return None
        idx = header.index(name)
        return [row[idx] for row in reader if row]


def plot(recipe: FigureRecipe) -> Path:
    """Render one recipe to its output image; returns the written path."""
    paths = recipe.resolve_inputs()
    out = Path(recipe.output)
    out.parent.mkdir(parents=True, exist_ok=True)

    if recipe.kind == "poloidal":
        n = len(paths)
        ncol = min(n, 2)
        nrow = (n + ncol - 1) // ncol
        fig, axes = plt.subplots(nrow, ncol, figsize=(4.2 * ncol, 3.6 * nrow), squeeze=False)
        for i, path in enumerate(paths):
            ax = axes[i // ncol][i % ncol]
            table = read_table(path)
            theta, r = require(table, path, "x_1", "y_1")
            big_r, big_z = poloidal_coordinates(r, theta, recipe.r0)
            k = _stride(len(r), recipe.decimate)
            ax.plot(big_r[::k], big_z[::k], ".", ms=2.0)
            ax.set_title(_label_for(recipe, i, path), fontsize=9)
            ax.set_xlabel("R")
            ax.set_ylabel("Z")
            ax.set_aspect("equal", adjustable="datalim")
        for j in range(len(paths), nrow * ncol):
            axes[j // ncol][j % ncol].axis("off")
    else:
        fig, ax = plt.subplots(figsize=(6.0, 4.2))
        {
            "phase": _plot_phase,
            "energy": _plot_energy,
            "loss": _plot_loss,
            "convergence": _plot_convergence,
        }[recipe.kind](recipe, paths, ax)

    if recipe.title:
        fig.suptitle(recipe.title)
    fig.tight_layout()
    fig.savefig(out, dpi=recipe.dpi)
    plt.close(fig)
    return out
