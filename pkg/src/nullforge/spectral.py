"""Singular-spectrum statistics: normalized distribution and effective rank."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import numerical_rank, svd


@dataclass(frozen=True)
class SpectralReport:
    label: str
    sigma: np.ndarray
    p: np.ndarray
    effective_rank: float
    exact_rank: int


def _check_sigma(sigma) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0 or not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError("singular values must be a non-empty vector of finite non-negative reals")
    if not np.any(s > 0):
        raise ValueError("singular distribution is undefined for an all-zero spectrum")
    return s


def singular_distribution(sigma) -> np.ndarray:
    """p_i = sigma_i / sum_j sigma_j."""
    s = _check_sigma(sigma)
    return s / np.sum(s)


def effective_rank(sigma) -> float:
    """exp of the Shannon entropy (natural log) of the singular distribution.

    Zero entries contribute nothing, so the result lies in ``[1, len(sigma)]``.
    """
    p = singular_distribution(sigma)
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def spectral_report(m, label: str) -> SpectralReport:
    sigma = svd(m).sigma
    return SpectralReport(
        label=label,
        sigma=sigma,
        p=singular_distribution(sigma),
        effective_rank=effective_rank(sigma),
        exact_rank=numerical_rank(sigma),
    )


def render_report_table(pairs: Sequence[tuple[SpectralReport, SpectralReport]]) -> str:
    """Fixed-width table with a W0 row and an X_pre row per label.

    Each element of ``pairs`` is ``(weight_report, activation_report)`` and
    both must carry the same label.
    """
    rows = []
    for weight, act in pairs:
        if weight.label != act.label:
            raise ValueError(f"paired reports have mismatched labels {weight.label!r} / {act.label!r}")
        rows.append((weight.label, "W0", weight.effective_rank))
        rows.append((act.label, "X_pre", act.effective_rank))
    width = max([len("label")] + [len(r[0]) for r in rows])
    lines = [f"{'label':<{width}}  {'matrix':<6}  {'eRank':>10}"]
    lines.append("-" * len(lines[0]))
    for label, kind, erank in rows:
        lines.append(f"{label:<{width}}  {kind:<6}  {erank:>10.2f}")
    return "\n".join(lines) + "\n"


def spectrum_csv(report: SpectralReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["idx", "sigma", "p"])
    for i, (s, p) in enumerate(zip(report.sigma, report.p)):
        writer.writerow([i, f"{s:.17g}", f"{p:.17g}"])
    return buf.getvalue()
