"""Latent-shift statistics and trajectory export.

Quantifies what a perturbation does to the encoder's latent Gaussian:
squared L2 shift of the mean, squared L2 shift of the standard
deviation, and the signed per-element mean of the log-variance gap
(perturbed minus clean, so variance inflation and deflation keep their
sign). Trajectories record these per optimization step together with
the loss and the current L-infinity radius of the perturbation.

CSV schema (stable contract):

    iter,loss,mu_shift,sigma_shift,logvar_gap,delta_linf

The SVG export is best-effort presentation: hand-written paths, one
polyline per statistic, log-scale magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from latentshield.encoder import EncoderParams, encode

__all__ = [
    "LatentShift",
    "TrajectoryPoint",
    "Trajectory",
    "latent_shift",
    "export_trajectory",
    "read_trajectory",
]

CSV_HEADER = "iter,loss,mu_shift,sigma_shift,logvar_gap,delta_linf"


@dataclass(frozen=True)
class LatentShift:
    mu_shift_l2sq: float
    sigma_shift_l2sq: float
    logvar_gap_mean: float


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    loss: float
    mu_shift: float
    sigma_shift: float
    logvar_gap: float
    delta_linf: float


@dataclass
class Trajectory:
    points: list[TrajectoryPoint] = field(default_factory=list)

    def append(self, point: TrajectoryPoint) -> None:
        if self.points and point.iteration <= self.points[-1].iteration:
            raise ValueError(f"iterations must strictly increase "
                             f"({self.points[-1].iteration} -> {point.iteration})")
        self.points.append(point)

    def __len__(self) -> int:
        return len(self.points)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.points])


def latent_shift(params: EncoderParams, x, x_pert) -> LatentShift:
    """Compare the latent statistics of two images (no gradients)."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_pert, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    da = encode(params, a)
    db = encode(params, b)
    mu_shift = float(np.sum((db.mu.data - da.mu.data) ** 2))
    sig_a = np.exp(0.5 * da.logvar.data)
    sig_b = np.exp(0.5 * db.logvar.data)
    sigma_shift = float(np.sum((sig_b - sig_a) ** 2))
    gap = float(np.mean(db.logvar.data - da.logvar.data))
    return LatentShift(mu_shift, sigma_shift, gap)


def _fmt(v: float) -> str:
    return repr(float(v))


def export_trajectory(traj: Trajectory, csv_path, svg_path=None) -> None:
    """Write the trajectory CSV (header-only when empty) and, when
    requested, an SVG line plot."""
    lines = [CSV_HEADER]
    for p in traj.points:
        lines.append(",".join([str(p.iteration), _fmt(p.loss), _fmt(p.mu_shift),
                               _fmt(p.sigma_shift), _fmt(p.logvar_gap),
                               _fmt(p.delta_linf)]))
    try:
        with open(csv_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write trajectory CSV {csv_path}: {exc}") from exc
    if svg_path is not None:
        try:
            with open(svg_path, "w") as fh:
                fh.write(_render_svg(traj))
        except OSError as exc:
            raise OSError(f"failed to write trajectory SVG {svg_path}: {exc}") from exc


def read_trajectory(csv_path) -> Trajectory:
    with open(csv_path) as fh:
        rows = [line.strip() for line in fh if line.strip()]
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{csv_path}: missing or unexpected header")
    traj = Trajectory()
    for row in rows[1:]:
        it, loss, mu, sig, gap, linf = row.split(",")
        traj.append(TrajectoryPoint(int(it), float(loss), float(mu), float(sig),
                                    float(gap), float(linf)))
    return traj


_SVG_SERIES = ("loss", "mu_shift", "sigma_shift", "logvar_gap", "delta_linf")
_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#7f7f7f")
_LOG_FLOOR = 1e-30


def _render_svg(traj: Trajectory, width: int = 640, height: int = 400) -> str:
    pad = 48
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if traj.points:
        its = traj.column("iteration")
        # magnitudes on a log10 scale; sign of logvar_gap is in the CSV
        logs = {name: np.log10(np.maximum(np.abs(traj.column(name)), _LOG_FLOOR))
                for name in _SVG_SERIES}
        lo = min(col.min() for col in logs.values())
        hi = max(col.max() for col in logs.values())
        span = (hi - lo) or 1.0
        it_span = (its.max() - its.min()) or 1.0

        def sx(i):
            return pad + (i - its.min()) / it_span * (width - 2 * pad)

        def sy(v):
            return height - pad - (v - lo) / span * (height - 2 * pad)

        for name, color in zip(_SVG_SERIES, _SVG_COLORS):
            pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in zip(its, logs[name]))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                         f'points="{pts}"/>')
        for k, (name, color) in enumerate(zip(_SVG_SERIES, _SVG_COLORS)):
            y = 16 + 14 * k
            parts.append(f'<text x="{width - pad - 100}" y="{y}" font-size="11" '
                         f'fill="{color}">log10|{name}|</text>')
    parts.append(f'<text x="{pad}" y="{height - 12}" font-size="11" '
                 f'fill="#333">iteration</text>')
    parts.append("</svg>")
    return "\n".join(parts)
