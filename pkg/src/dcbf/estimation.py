"""Signal acquisition, fine CFO estimation, and LS channel estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ComplexSignal

__all__ = [
    "AcquisitionError",
    "AcquisitionResult",
    "CfoEstimate",
    "ChannelEstimate",
    "acquire",
    "cfo_reference_table",
    "default_coarse_grid",
    "ml_cfo",
    "ml_cfo_table",
    "estimate_channel",
    "estimate_channels_joint",
    "remove_dc",
]


class AcquisitionError(RuntimeError):
    """No lag/CFO hypothesis cleared the detection threshold."""

    def __init__(self, best_stat: float, threshold: float):
        self.best_stat = best_stat
        self.threshold = threshold
        super().__init__(f"no detection: best stat {best_stat:.4f} < threshold {threshold}")


@dataclass(frozen=True)
class AcquisitionResult:
    lag: int
    coarse_cfo_hz: float
    detection_stat: float  # |normalized inner product|^2, in [0, 1]


@dataclass(frozen=True)
class CfoEstimate:
    f_hat_hz: float
    at_boundary: bool  # peak sat on the grid edge; range likely too small
    peak_metric: float


@dataclass(frozen=True)
class ChannelEstimate:
    taps: np.ndarray
    residual_power: float
    label: str = ""


def default_coarse_grid(span_hz: float = 2000.0, step_hz: float = 50.0) -> np.ndarray:
    return np.arange(-span_hz, span_hz + step_hz / 2, step_hz)


def cfo_reference_table(reference: ComplexSignal, cfo_grid_hz: np.ndarray) -> np.ndarray:
    """Precompute conj(ref[t] * exp(i*2*pi*f*t/fs)) for every grid frequency.

    Shape (len(ref), len(grid)); reusable across acquire() calls with the
    same reference and grid.
    """
    t = np.arange(len(reference.samples)) / reference.sample_rate_hz
    return np.conj(reference.samples)[:, None] * np.exp(-2j * np.pi * np.outer(t, cfo_grid_hz))


def acquire(
    z: ComplexSignal,
    reference: ComplexSignal,
    lag_range: tuple[int, int] | None = None,
    cfo_grid_hz: np.ndarray | None = None,
    threshold: float = 0.1,
    table: np.ndarray | None = None,
) -> AcquisitionResult:
    """Joint lag/CFO search with a normalized inner product detector.

    Maximizes |<z[lag:], ref * exp(i*2*pi*f*t/fs)>|^2 / (||z window||^2 *
    ||ref||^2) over lags in lag_range (half-open) and frequencies on the
    grid. The statistic is scale invariant in z and bounded by 1.

    Raises AcquisitionError when the best statistic falls below threshold.
    """
    zs = z.samples
    ref = reference.samples
    n, t_ref = len(zs), len(ref)
    if t_ref > n:
        raise ValueError(f"reference ({t_ref}) longer than signal ({n})")
    if cfo_grid_hz is None:
        cfo_grid_hz = default_coarse_grid()
    cfo_grid_hz = np.atleast_1d(np.asarray(cfo_grid_hz, dtype=float))
    lag_lo, lag_hi = lag_range if lag_range is not None else (0, n - t_ref + 1)
    lag_hi = min(lag_hi, n - t_ref + 1)
    if lag_lo < 0 or lag_lo >= lag_hi:
        raise ValueError(f"empty lag range [{lag_lo}, {lag_hi})")

    if table is None:
        table = cfo_reference_table(reference, cfo_grid_hz)
    elif table.shape != (t_ref, len(cfo_grid_hz)):
        raise ValueError(f"table shape {table.shape} does not match reference/grid")
    windows = sliding_window_view(zs, t_ref)[lag_lo:lag_hi]
    inner = windows @ table  # (n_lags, n_freqs)

    ref_energy = float(np.sum(np.abs(ref) ** 2))
    win_energy = np.sum(np.abs(windows) ** 2, axis=1)
    denom = np.maximum(win_energy * ref_energy, 1e-300)
    stats = np.abs(inner) ** 2 / denom[:, None]

    flat = int(np.argmax(stats))
    li, fi = np.unravel_index(flat, stats.shape)
    best = float(stats[li, fi])
    if best < threshold:
        raise AcquisitionError(best, threshold)
    return AcquisitionResult(lag=lag_lo + int(li), coarse_cfo_hz=float(cfo_grid_hz[fi]), detection_stat=best)


def ml_cfo_table(grid_hz: np.ndarray, n_samples: int, fs: float) -> np.ndarray:
    """Precompute exp(-i*2*pi*f*t/fs) rows for ml_cfo's metric; reusable
    whenever the grid and reference length repeat."""
    t = np.arange(n_samples) / fs
    return np.exp(-2j * np.pi * np.outer(np.asarray(grid_hz, dtype=float), t))


def ml_cfo(
    z: ComplexSignal,
    s_ref: ComplexSignal,
    tau_hat: int,
    grid_hz: np.ndarray,
    refine: bool = True,
    table: np.ndarray | None = None,
) -> CfoEstimate:
    """Maximum-likelihood CFO on a grid: argmax_f |sum_t z[tau+t] s*[t] e^{-i2pift/fs}|^2.

    After the grid argmax, the estimate is refined once by quadratic
    interpolation of the metric through the peak and its two neighbors
    (skipped, with at_boundary set, when the peak sits on the grid edge).
    """
    grid_hz = np.atleast_1d(np.asarray(grid_hz, dtype=float))
    t_ref = len(s_ref.samples)
    window = z.samples[tau_hat : tau_hat + t_ref]
    if len(window) != t_ref:
        raise ValueError("window [tau_hat, tau_hat+T) not inside signal")
    r = window * np.conj(s_ref.samples)
    if table is None:
        table = ml_cfo_table(grid_hz, t_ref, z.sample_rate_hz)
    elif table.shape != (len(grid_hz), t_ref):
        raise ValueError(f"table shape {table.shape} does not match grid/reference")
    metric = np.abs(table @ r) ** 2

    k = int(np.argmax(metric))
    f_hat = float(grid_hz[k])
    peak = float(metric[k])
    at_boundary = k == 0 or k == len(grid_hz) - 1
    if refine and not at_boundary and len(grid_hz) >= 3:
        m0, m1, m2 = metric[k - 1], metric[k], metric[k + 1]
        denom = m0 - 2 * m1 + m2
        if abs(denom) > 1e-300:
            step = grid_hz[k] - grid_hz[k - 1]
            f_hat += 0.5 * step * float((m0 - m2) / denom)
    return CfoEstimate(f_hat_hz=f_hat, at_boundary=at_boundary, peak_metric=peak)


def _conv_design_matrix(ref: np.ndarray, t_h: int) -> np.ndarray:
    """Full-convolution design matrix: column k is ref delayed by k samples."""
    rows = len(ref) + t_h - 1
    s = np.zeros((rows, t_h), dtype=np.complex128)
    for k in range(t_h):
        s[k : k + len(ref), k] = ref
    return s


def _ls_solve(design: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    a = design.conj().T @ design
    b = design.conj().T @ y
    if np.linalg.cond(a) > 1e12:
        raise ValueError("degenerate reference: normal matrix is numerically singular")
    h = np.linalg.solve(a, b)
    resid = y - design @ h
    return h, float(np.mean(np.abs(resid) ** 2))


def estimate_channel(
    z: ComplexSignal,
    s_ref: ComplexSignal,
    tau_hat: int,
    t_h: int,
    label: str = "",
) -> ChannelEstimate:
    """Least-squares tapped-delay-line fit of the window starting at tau_hat.

    Minimizes ||z_window - conv(s_ref, h)||^2 over h of length t_h via the
    normal equations. CFO must already be corrected on the window.
    """
    ref = s_ref.samples
    if len(ref) < 4 * t_h:
        raise ValueError(f"reference length {len(ref)} < 4*t_h = {4 * t_h}")
    rows = len(ref) + t_h - 1
    y = z.samples[tau_hat : tau_hat + rows]
    if len(y) != rows:
        raise ValueError("observation window not inside signal")
    design = _conv_design_matrix(ref, t_h)
    h, resid = _ls_solve(design, y)
    return ChannelEstimate(taps=h, residual_power=resid, label=label)


def estimate_channels_joint(
    z: ComplexSignal,
    refs: list[ComplexSignal],
    tau_hat: int,
    t_h: int,
    labels: list[str] | None = None,
) -> list[ChannelEstimate]:
    """Jointly fit one tapped delay line per reference to a composite reception.

    All references must share a length and be time-aligned at tau_hat (the
    concurrent CDMA preamble case); the joint solve separates overlapping
    transmissions exactly rather than treating cross-correlation as noise.
    """
    if not refs:
        raise ValueError("need at least one reference")
    lens = {len(r.samples) for r in refs}
    if len(lens) != 1:
        raise ValueError("references must share a length")
    (t_ref,) = lens
    if t_ref < 4 * t_h * len(refs):
        raise ValueError("reference too short for joint estimation")
    rows = t_ref + t_h - 1
    y = z.samples[tau_hat : tau_hat + rows]
    if len(y) != rows:
        raise ValueError("observation window not inside signal")
    design = np.hstack([_conv_design_matrix(r.samples, t_h) for r in refs])
    h_all, resid = _ls_solve(design, y)
    labels = labels or [""] * len(refs)
    return [
        ChannelEstimate(taps=h_all[i * t_h : (i + 1) * t_h], residual_power=resid, label=labels[i])
        for i in range(len(refs))
    ]


def remove_dc(x: ComplexSignal) -> ComplexSignal:
    """Mean subtraction over the whole signal."""
    return ComplexSignal(x.samples - np.mean(x.samples), x.sample_rate_hz)
