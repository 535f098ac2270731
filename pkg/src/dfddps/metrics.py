"""Depth MAE, AIF PSNR and evaluation reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ParameterError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def _crop(arr, border: int):
    if border <= 0:
        return arr
    if 2 * border >= min(arr.shape[:2]):
        raise ParameterError("border band covers the whole image")
    return arr[border:-border, border:-border]


def depth_mae(pred, truth, border: int = 0) -> float:
    """Mean absolute depth error in meters, optionally ignoring a boundary band."""
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(_crop(pred, border) - _crop(truth, border))))


def psnr(pred, truth, border: int = 0) -> float:
    """PSNR in dB with peak 1, one MSE over all channels; ``inf`` for identical images."""
    pred, truth = _pair(pred, truth)
    mse = float(np.mean((_crop(pred, border) - _crop(truth, border)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalRow:
    scene: str
    method: str
    sigma: float
    seed: int
    depth_mae: float
    psnr: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        if row.depth_mae < 0:
            raise ParameterError("MAE must be >= 0")
        self.rows.append(row)

    def groups(self):
        keys = sorted({(r.method, r.sigma) for r in self.rows})
        return {k: [r for r in self.rows if (r.method, r.sigma) == k] for k in keys}

    def aggregate(self) -> dict:
        """Mean MAE and PSNR per (method, sigma).  Infinite PSNRs stay infinite."""
        out = {}
        for key, rows in self.groups().items():
            out[key] = {
                "n": len(rows),
                "depth_mae": float(np.mean([r.depth_mae for r in rows])),
                "psnr": float(np.mean([r.psnr for r in rows])),
            }
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene", "method", "sigma", "seed", "depth_mae", "psnr"])
            for r in self.rows:
                w.writerow([r.scene, r.method, repr(r.sigma), r.seed, repr(r.depth_mae), repr(r.psnr)])

    def summary(self) -> str:
        """Methods x sigma table of mean depth MAE (m) / PSNR (dB)."""
        agg = self.aggregate()
        methods = sorted({m for m, _ in agg})
        sigmas = sorted({s for _, s in agg}, reverse=True)
        head = f"{'method':16s}" + "".join(f"{'sigma=' + format(s, 'g'):>20s}" for s in sigmas)
        lines = [head]
        for m in methods:
            cells = []
            for s in sigmas:
                a = agg.get((m, s))
                cells.append(f"{a['depth_mae']:>10.4f}{a['psnr']:>10.2f}" if a else " " * 20)
            lines.append(f"{m:16s}" + "".join(cells))
        return "\n".join(lines) + "\n"

    def paired_wins(self, method_a: str, method_b: str) -> dict:
        """Per sigma, the fraction of shared scenes where ``method_a`` has lower depth MAE."""
        out = {}
        for sigma in sorted({r.sigma for r in self.rows}):
            a = {r.scene: r.depth_mae for r in self.rows if r.method == method_a and r.sigma == sigma}
            b = {r.scene: r.depth_mae for r in self.rows if r.method == method_b and r.sigma == sigma}
            shared = sorted(set(a) & set(b))
            if shared:
                out[sigma] = sum(a[s] < b[s] for s in shared) / len(shared)
        return out
