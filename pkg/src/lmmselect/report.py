"""Per-coefficient inference results and the report container.

Every inference method (naive, split, conditional Monte Carlo, lasso
regions, cAIC conditioning) emits the same report shape so the metrics
layer and the CLI can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import ClusteredDataset
from .errors import ValidationError

__all__ = ["CoefficientResult", "InferenceReport"]

PROJECTION = "projection"
POPULATION = "population"


@dataclass
class CoefficientResult:
    """One tested coefficient: estimate, raw p, CI, bookkeeping flags."""

    column: int
    name: str
    estimate: float
    p_value: float
    ci_lower: float
    ci_upper: float
    p_adjusted: float | None = None
    selected: bool = True
    failed: bool = False
    acceptance_rate: float | None = None

    def covers(self, truth: float) -> bool:
        return self.ci_lower <= truth <= self.ci_upper

    @property
    def ci_length(self) -> float:
        return self.ci_upper - self.ci_lower


@dataclass
class InferenceReport:
    """Inference output of one method on one dataset.

    Attributes:
        method: method tag ("naive", "split", ...).
        target: "projection" (selected columns only) or "population"
            (all columns of the design).
        alpha: nominal significance level the CIs were built at.
        records: per-coefficient results.
        diagnostics: free-form method diagnostics (acceptance rates,
            realized splits, warnings).
        eval_dataset: the dataset whose design defines the projection
            target of the reported CIs (the test half for splitting);
            in-memory only, never serialized.
    """

    method: str
    target: str
    alpha: float
    records: list[CoefficientResult] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    eval_dataset: ClusteredDataset | None = None

    def __post_init__(self):
        if self.target not in (PROJECTION, POPULATION):
            raise ValidationError(f"unknown target type {self.target!r}")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must be in (0, 1)")
        for r in self.records:
            if not (0.0 <= r.p_value <= 1.0 or r.failed):
                raise ValidationError(f"p-value out of [0,1] for column {r.column}")

    @property
    def selected_columns(self) -> tuple[int, ...]:
        return tuple(r.column for r in self.records if r.selected)

    def record_for(self, column: int) -> CoefficientResult | None:
        for r in self.records:
            if r.column == column:
                return r
        return None

    def raw_pvalues(self) -> list[float]:
        return [r.p_value for r in self.records if not r.failed]

    def set_adjusted(self, adjusted: list[float]) -> None:
        """Write adjusted p-values back onto the non-failed records, in order."""
        live = [r for r in self.records if not r.failed]
        if len(adjusted) != len(live):
            raise ValidationError("adjusted p-value count does not match records")
        for r, p in zip(live, adjusted):
            r.p_adjusted = float(p)
