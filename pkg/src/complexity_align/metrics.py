"""Agreement between predicted and subjective complexity scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class MetricReport:
    srcc: float
    plcc: float
    rmse: float
    rmae: float
    n: int
    flags: tuple[str, ...] = field(default=())

    def as_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.as_row().items()]
        return "\n".join(lines)

    def as_row(self) -> dict[str, str]:
        return {
            "srcc": f"{self.srcc:.6f}",
            "plcc": f"{self.plcc:.6f}",
            "rmse": f"{self.rmse:.6f}",
            "rmae": f"{self.rmae:.6f}",
            "n": str(self.n),
            "flags": ",".join(self.flags) or "-",
        }


def _pair(pred, gt, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.size} vs {g.size}")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {p.size}")
    return p, g


def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.dot(dx, dx))
    sy = np.sqrt(np.dot(dy, dy))
    # constant inputs: report 0 and flag instead of NaN
    if sx == 0 or sy == 0 or sx < 1e-12 * max(1.0, np.abs(x).max()) or sy < 1e-12 * max(1.0, np.abs(y).max()):
        return 0.0, True
    r = float(np.dot(dx, dy) / (sx * sy))
    return min(1.0, max(-1.0, r)), False


def srcc_flagged(pred, gt) -> tuple[float, bool]:
    p, g = _pair(pred, gt, 2)
    return _pearson(rankdata(p, method="average"), rankdata(g, method="average"))


def plcc_flagged(pred, gt) -> tuple[float, bool]:
    p, g = _pair(pred, gt, 2)
    return _pearson(p, g)


def srcc(pred, gt) -> float:
    """Spearman rank correlation with average ranks for ties."""
    return srcc_flagged(pred, gt)[0]


def plcc(pred, gt) -> float:
    return plcc_flagged(pred, gt)[0]


def rmse(pred, gt) -> float:
    p, g = _pair(pred, gt, 1)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def rmae(pred, gt, root: bool = True) -> float:
    """Square root of the mean absolute error; ``root=False`` gives plain MAE."""
    p, g = _pair(pred, gt, 1)
    mae = float(np.mean(np.abs(p - g)))
    return float(np.sqrt(mae)) if root else mae


def evaluate(pred, gt, rmae_root: bool = True) -> MetricReport:
    s, s_flag = srcc_flagged(pred, gt)
    r, r_flag = plcc_flagged(pred, gt)
    flags = []
    if s_flag:
        flags.append("srcc_degenerate")
    if r_flag:
        flags.append("plcc_degenerate")
    return MetricReport(
        srcc=s, plcc=r, rmse=rmse(pred, gt), rmae=rmae(pred, gt, root=rmae_root),
        n=int(np.asarray(pred).size), flags=tuple(flags),
    )


def bootstrap(pred, gt, metric=srcc, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval of ``metric`` with a fixed seed."""
    p, g = _pair(pred, gt, 2)
    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    for i in range(n_boot):
        idx = rng.integers(0, p.size, p.size)
        stats[i] = metric(p[idx], g[idx])
    lo, hi = np.quantile(stats, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)
