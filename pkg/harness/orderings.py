# harness/orderings.py
"""
Ordering checks on a finished comparison report.

Two orderings are expected on the evaluation data, both judged on the
median over seeds:

* SDA beats the S-only baseline and the unadapted T-pretrained model by a
  fixed F1 margin.
* Every trained model scores a higher F1 on low buildings than on sky
  buildings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

from utils.logger import get_logger

from .report import EvalReport, ReportRow, median_rows

log = get_logger(__name__)

SDA_MARGIN = 0.01


class OrderingError(RuntimeError):
    """A comparison report violates an expected ordering."""


@dataclass(frozen=True)
class OrderingCheck:
    name: str
    network: str
    setting: str
    left: float
    right: float
    margin: float = 0.0
    strict: bool = False

    @property
    def passed(self) -> bool:
        if self.strict:
            return self.left > self.right + self.margin
        return self.left >= self.right + self.margin

    def describe(self) -> str:
        op = ">" if self.strict else ">="
        tail = f" + {self.margin:g}" if self.margin else ""
        status = "ok" if self.passed else "FAILED"
        return f"{self.name} [{self.network}, {self.setting}]: {self.left:.3f} {op} {self.right:.3f}{tail} {status}"


def _medians(report: EvalReport) -> List[ReportRow]:
    if report.kind != "compare":
        raise ValueError(f"ordering checks need a compare report, got kind '{report.kind}'")
    return median_rows(report.rows)


def sda_orderings(report: EvalReport, eval_role: str = "Ev", networks: Optional[Sequence[str]] = None,
                  margin: float = SDA_MARGIN) -> List[OrderingCheck]:
    """SDA on S-<eval> against the baseline on S-<eval> and the pretrained model on T-<eval>."""
    med = {(r.method, r.network, r.setting): r for r in _medians(report)}
    setting, pre_setting = f"S-{eval_role}", f"T-{eval_role}"
    checks = []
    for (method, network, s), sda in med.items():
        if method != "sda" or s != setting or (networks and network not in networks):
            continue
        base = med.get(("baseline", network, setting))
        pre = med.get(("pretrain", network, pre_setting))
        if base is not None:
            checks.append(OrderingCheck("sda_over_baseline", network, setting, sda.f1, base.f1, margin))
        if pre is not None:
            checks.append(OrderingCheck("sda_over_pretrain", network, setting, sda.f1, pre.f1, margin))
    return checks


def height_orderings(report: EvalReport, eval_role: str = "Ev", low: str = "low",
                     high: str = "sky") -> List[OrderingCheck]:
    """F1 on `low` buildings strictly above F1 on `high` buildings, per trained model."""
    checks = []
    for r in _medians(report):
        if not r.setting.endswith(f"-{eval_role}") or not r.strata_f1:
            continue
        if low in r.strata_f1 and high in r.strata_f1:
            checks.append(OrderingCheck(f"{low}_over_{high}", f"{r.network} ({r.method})", r.setting,
                                        r.strata_f1[low], r.strata_f1[high], strict=True))
    return checks


def check_orderings(report: EvalReport, eval_role: str = "Ev",
                    networks: Optional[Sequence[str]] = None) -> List[OrderingCheck]:
    """Run every ordering check; raise OrderingError listing the failures."""
    checks = sda_orderings(report, eval_role, networks) + height_orderings(report, eval_role)
    missing = [n for n in networks or () if not any(c.network == n for c in checks)]
    if missing:
        raise OrderingError(f"no SDA rows on S-{eval_role} for: {', '.join(missing)}")
    if not checks:
        raise OrderingError(f"nothing to check: the report has no {eval_role} rows")
    for c in checks:
        log.info(c.describe())
    failed = [c for c in checks if not c.passed]
    if failed:
        raise OrderingError("; ".join(c.describe() for c in failed))
    return checks
