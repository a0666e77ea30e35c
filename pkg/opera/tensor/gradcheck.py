#!/usr/bin/env python3
#
# This module compares the gradients of the autodiff kernel against central
# finite differences.

import csv
import dataclasses
import io
import numpy
import opera.errors
import opera.logging
import opera.tensor
import typing

logger = opera.logging.get_logger(__name__)


@dataclasses.dataclass(frozen=True)
class ParameterCheck:
    name: str
    max_rel_err: float
    coordinates: int
    passed: bool


@dataclasses.dataclass(frozen=True)
class GradientCheckReport:
    checks: typing.Tuple[ParameterCheck, ...]
    h: float
    rel_tol: float

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((check.max_rel_err for check in self.checks), default=0.0)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["param", "max_rel_err", "pass"])
        for check in self.checks:
            writer.writerow([check.name, f"{check.max_rel_err:.3e}", str(check.passed).lower()])
        return out.getvalue()


def relative_error(analytic: float, numeric: float, *, abs_floor: float = 1e-8) -> float:
    "Absolute differences at or below abs_floor count as exact agreement"
    difference = abs(analytic - numeric)
    if difference <= abs_floor:
        return 0.0
    return difference / max(abs(analytic), abs(numeric))


def gradcheck(
    f: typing.Callable[[], opera.tensor.Tensor],
    params: typing.Sequence[opera.tensor.Param],
    *,
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
    max_coordinates: int = 200,
    seed: int = 0,
) -> GradientCheckReport:
    """
    Check d f / d p for every param. f takes no arguments and must read the
    params' current values. Up to max_coordinates coordinates are sampled
    per param.
    """
    first, second = f().item(), f().item()
    if first != second:
        raise opera.errors.GradientCheckError(
            f"objective is not deterministic: {first!r} != {second!r}"
        )

    for p in params:
        p.zero_grad()
    with opera.tensor.Tape():
        loss = f()
    opera.tensor.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = numpy.random.default_rng(seed)
    checks = []
    for p in params:
        flat = p.data.flat
        count = min(max_coordinates, p.data.size)
        coordinates = numpy.sort(rng.choice(p.data.size, size=count, replace=False))
        worst = 0.0
        for i in coordinates:
            original = flat[i]
            flat[i] = original + h
            plus = f().item()
            flat[i] = original - h
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            worst = max(
                worst,
                relative_error(
                    float(analytic[p.name].reshape(-1)[i]), numeric, abs_floor=abs_floor
                ),
            )
        checks.append(
            ParameterCheck(
                name=p.name,
                max_rel_err=worst,
                coordinates=int(count),
                passed=worst <= rel_tol,
            )
        )
        if worst > rel_tol:
            logger.warning(f"Gradient of {p.name} is off: max relative error {worst:.3e}")

    report = GradientCheckReport(checks=tuple(checks), h=h, rel_tol=rel_tol)
    logger.info(
        f"Checked {len(checks)} params; max relative error {report.max_rel_err:.3e}"
    )
    return report
