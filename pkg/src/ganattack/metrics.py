"""Quality metrics, detection rate and attack-report assembly/rendering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .baselines import LABELS, SIZE_PRESERVING
from .kernels import DimensionError
from .oracle import score_images

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for [0, 1] images; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: {a.shape} vs {b.shape}", axis="image")
    d = (a - b).ravel()
    # exact summation: a plain mean drifts a few ulp and 0.1 offsets miss 20 dB
    mse = math.fsum(d * d) / d.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted sum over every full window of the last two axes
    x = sliding_window_view(x, len(g), axis=-1) @ g
    x = np.swapaxes(sliding_window_view(np.swapaxes(x, -1, -2), len(g), axis=-1) @ g, -1, -2)
    return x


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every full 11 x 11 Gaussian window, per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: {a.shape} vs {b.shape}", axis="image")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
                             axis="spatial")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of a ``C x H x W`` pair, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b) and min(a.shape[-2:]) >= SSIM_WINDOW:
        return 1.0
    m = ssim_map(a, b)
    return float(np.mean(m.reshape(m.shape[0], -1).mean(axis=1))) if m.ndim == 3 else float(m.mean())


def detection_rate(images, det, tau: float = 0.5) -> float:
    """Fraction of images whose P_GAN exceeds ``tau``."""
    if len(images) == 0:
        raise ValueError("detection_rate needs at least one image")
    scores = score_images(det, images)
    return float(np.mean(scores > tau))


@dataclass
class Cell:
    p_d: dict[str, float] = field(default_factory=dict)
    psnr: float | None = None
    ssim: float | None = None
    n: int = 0
    error: str | None = None


@dataclass
class AttackReport:
    attacks: list[str]
    groups: list[str]
    detectors: list[str]
    cells: dict[tuple[str, str], Cell]
    metadata: dict = field(default_factory=dict)

    def cell(self, attack: str, group: str) -> Cell:
        return self.cells[(attack, group)]

    def average(self, attack: str, metric: str, detector: str | None = None) -> float | None:
        vals = []
        for g in self.groups:
            c = self.cells[(attack, g)]
            v = c.p_d.get(detector) if metric == "p_d" else getattr(c, metric)
            if v is None:
                return None
            vals.append(v)
        return float(np.mean(vals)) if vals else None


Attack = Callable[[np.ndarray], np.ndarray]


def _apply_attack(fn: Attack, images: np.ndarray) -> np.ndarray:
    try:
        return np.asarray(fn(images))
    except (ValueError, TypeError):
        return np.stack([np.asarray(fn(img)) for img in images])


def evaluate(groups: dict[str, np.ndarray], attacks: Sequence[tuple[str, Attack]],
             detectors: Sequence[tuple[str, object]], tau: float = 0.5,
             metadata: dict | None = None) -> AttackReport:
    """Apply each attack to each image group and tabulate P_d, PSNR and SSIM.

    A "none" (without attack) row is always first.  Quality metrics are only
    computed for attacks that keep the image size.  A failure inside one cell
    is recorded on that cell and does not stop the run.
    """
    if not groups:
        raise ValueError("no image groups")
    if not detectors:
        raise ValueError("no detectors")
    rows = [("none", lambda x: x)] + [(n, f) for n, f in attacks if n != "none"]
    group_names = sorted(groups)
    cells = {}
    for name, fn in rows:
        for g in group_names:
            originals = np.asarray(groups[g])
            cell = Cell(n=len(originals))
            try:
                attacked = np.clip(_apply_attack(fn, originals), 0.0, 1.0)
                for det_name, det in detectors:
                    cell.p_d[det_name] = detection_rate(attacked, det, tau)
                if name in SIZE_PRESERVING or attacked.shape == originals.shape:
                    cell.psnr = float(np.mean([psnr(a, o) for a, o in zip(attacked, originals)]))
                    cell.ssim = float(np.mean([ssim(a, o) for a, o in zip(attacked, originals)]))
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                cell.error = f"{type(exc).__name__}: {exc}"
            cells[(name, g)] = cell
    meta = {"tau": tau, "psnr": "joint RGB MSE, peak 1.0",
            "ssim": "11x11 gaussian sigma 1.5, K1 0.01, K2 0.03, L 1.0"}
    meta.update(metadata or {})
    return AttackReport([n for n, _ in rows], group_names, [d for d, _ in detectors], cells, meta)


def _fmt_pd(v):
    return "" if v is None else f"{100 * v:.2f}"


def _fmt_psnr(v, cap_text=">100"):
    if v is None:
        return ""
    return cap_text if v > PSNR_CAP else f"{v:.1f}"


def _fmt_ssim(v):
    return "" if v is None else f"{v:.3f}"


def render_report(r: AttackReport, fmt: str = "markdown") -> str:
    if fmt == "csv":
        return _render_csv(r)
    if fmt == "markdown":
        return _render_markdown(r)
    raise ValueError(f"unknown format {fmt!r}")


def _render_csv(r: AttackReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attack", "group", "detector", "p_d", "psnr_db", "ssim", "n"])
    for a in r.attacks:
        for g in r.groups:
            c = r.cells[(a, g)]
            for d in r.detectors:
                pd_ = c.p_d.get(d)
                w.writerow([a, g, d,
                            "" if pd_ is None else f"{pd_:.6f}",
                            "" if c.psnr is None else ("inf" if math.isinf(c.psnr) else f"{c.psnr:.4f}"),
                            "" if c.ssim is None else f"{c.ssim:.6f}",
                            c.n])
    return buf.getvalue()


def _table(title: str, r: AttackReport, value: Callable[[str, str], str],
           average: Callable[[str], str], rows: list[str]) -> list[str]:
    lines = [f"### {title}", "", "| Attack methods | " + " | ".join(r.groups) + " | Average |",
             "|---" * (len(r.groups) + 2) + "|"]
    for a in rows:
        cells = [value(a, g) for g in r.groups]
        lines.append(f"| {LABELS.get(a, a)} | " + " | ".join(cells) + f" | {average(a)} |")
    lines.append("")
    return lines


def _render_markdown(r: AttackReport) -> str:
    lines = []
    for d in r.detectors:
        lines += _table(f"Detection rate P_d (%) of {d} detector", r,
                        lambda a, g, d=d: _fmt_pd(r.cells[(a, g)].p_d.get(d)),
                        lambda a, d=d: _fmt_pd(r.average(a, "p_d", d)), r.attacks)
    quality_rows = [a for a in r.attacks if a != "none"
                    and all(r.cells[(a, g)].psnr is not None for g in r.groups)]
    if quality_rows:
        lines += _table("PSNR (dB) between original and attacked images", r,
                        lambda a, g: _fmt_psnr(r.cells[(a, g)].psnr),
                        lambda a: _fmt_psnr(r.average(a, "psnr")), quality_rows)
        lines += _table("SSIM between original and attacked images", r,
                        lambda a, g: _fmt_ssim(r.cells[(a, g)].ssim),
                        lambda a: _fmt_ssim(r.average(a, "ssim")), quality_rows)
    errors = [(a, g, c.error) for (a, g), c in r.cells.items() if c.error]
    if errors:
        lines += ["### Failed cells", ""] + [f"- {a} / {g}: {e}" for a, g, e in errors] + [""]
    return "\n".join(lines)
