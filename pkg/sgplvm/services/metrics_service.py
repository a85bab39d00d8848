import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import stats

from sgplvm.core.exceptions import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    """
    Per-case RMSE and MNLP with aggregate mean and 5th/95th percentiles.

    Attributes:
        rows: One dict per case with keys case, rmse, mnlp
        aggregates: metric -> {"mean", "p5", "p95"}
    """

    rows: List[Dict[str, float]] = field(default_factory=list)
    aggregates: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_csv_rows(self) -> List[List[str]]:
        out = [["case", "rmse", "mnlp"]]
        for row in self.rows:
            out.append([str(int(row["case"])), repr(row["rmse"]), repr(row["mnlp"])])
        for stat in ("mean", "p5", "p95"):
            out.append([stat, repr(self.aggregates["rmse"][stat]), repr(self.aggregates["mnlp"][stat])])
        return out


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile; NaN for an empty input."""
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    if values.size == 0:
        return float("nan")
    return float(np.percentile(values, q, method="inverted_cdf"))


class MetricsService:
    """Imputation and prediction error metrics"""

    def rmse(self, y_true: np.ndarray, mean: np.ndarray) -> float:
        """Root mean square error; NaN when nothing is evaluated."""
        y_true, mean = self._check(y_true, mean)
        if y_true.size == 0:
            return float("nan")
        return float(np.sqrt(np.mean((y_true - mean) ** 2)))

    def mnlp(
        self,
        y_true: np.ndarray,
        mean: np.ndarray,
        variance: np.ndarray,
        noise_var: float = 0.0,
    ) -> float:
        """
        Median negative log density −log N(y | μ, σ² + noise_var) over all values.

        Raises:
            ShapeError: If the arrays disagree
        """
        y_true, mean = self._check(y_true, mean)
        _, variance = self._check(y_true, variance)
        if y_true.size == 0:
            return float("nan")
        scale = np.sqrt(np.maximum(variance + noise_var, 1e-300))
        return float(np.median(-stats.norm.logpdf(y_true, loc=mean, scale=scale)))

    def report(
        self,
        y_true: List[np.ndarray],
        mean: List[np.ndarray],
        variance: List[np.ndarray],
        noise_var: float = 0.0,
        y_scale: Optional[np.ndarray] = None,
        y_offset: Optional[np.ndarray] = None,
        raw_mnlp: bool = False,
    ) -> MetricsReport:
        """
        Metrics over the evaluated (held-out) values of every case.

        Inputs are in standardized units. RMSE is reported in raw units when
        y_scale is given; MNLP stays standardized unless raw_mnlp is set.

        Args:
            y_true: Per case, evaluated true values (n_i x d_y)
            mean: Per case, predictive means
            variance: Per case, predictive variances without observation noise
            noise_var: Observation noise variance β⁻¹ (standardized units)
            y_scale: Per-channel standardization scale
            y_offset: Per-channel standardization mean
            raw_mnlp: Evaluate MNLP in raw units
        """
        if not (len(y_true) == len(mean) == len(variance)):
            raise ShapeError("y_true, mean and variance must hold the same number of cases")
        scale = np.ones(1) if y_scale is None else np.asarray(y_scale, dtype=np.float64).reshape(1, -1)
        offset = np.zeros(1) if y_offset is None else np.asarray(y_offset, dtype=np.float64).reshape(1, -1)

        report = MetricsReport()
        for i, (yt, mu, var) in enumerate(zip(y_true, mean, variance)):
            yt_raw, mu_raw = yt * scale + offset, mu * scale + offset
            if raw_mnlp:
                mnlp = self.mnlp(yt_raw, mu_raw, (var + noise_var) * scale ** 2)
            else:
                mnlp = self.mnlp(yt, mu, var, noise_var)
            report.rows.append({"case": i, "rmse": self.rmse(yt_raw, mu_raw), "mnlp": mnlp})

        for key in ("rmse", "mnlp"):
            values = np.array([row[key] for row in report.rows], dtype=np.float64)
            finite = values[~np.isnan(values)]
            report.aggregates[key] = {
                "mean": float(finite.mean()) if finite.size else float("nan"),
                "p5": nearest_rank_percentile(values, 5),
                "p95": nearest_rank_percentile(values, 95),
            }
        logger.info("RMSE mean %.4f, MNLP mean %.4f",
                    report.aggregates["rmse"]["mean"], report.aggregates["mnlp"]["mean"])
        return report

    @staticmethod
    def _check(a: np.ndarray, b: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"metric inputs disagree: {a.shape} vs {b.shape}")
        return a, b


metrics_service = MetricsService()
