"""Split-conformal prediction regions for multi-step trajectory predictions.

For every pair ``(t, tau)`` the region radius ``C[t, tau]`` is an order
statistic of the validation nonconformity scores, with an appended +inf so
that small calibration sets yield an unbounded region instead of an
invalid one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence, Union

import numpy as np

from .core import Dataset, Trajectory
from .predictors import PredictorSpec, forecast

MODES = ("joint-norm", "per-agent-max")
_MODE_ALIASES = {"joint": "joint-norm", "agentmax": "per-agent-max"}


class Unbounded:
    """The appended infinite score: compares above every real, supports no arithmetic."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNBOUNDED"

    def __reduce__(self):
        return (Unbounded, ())

    def __eq__(self, other):
        return other is self

    def __hash__(self):
        return hash("csmpc.Unbounded")

    def __lt__(self, other):
        return False

    def __le__(self, other):
        return other is self

    def __gt__(self, other):
        return other is not self

    def __ge__(self, other):
        return True


UNBOUNDED = Unbounded()
Region = Union[float, Unbounded]


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    return mode


def nonconformity_score(y, y_hat, mode: str = "joint-norm") -> float:
    """Distance between a realized and a predicted joint state, shapes (N, 2)."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"agent count mismatch: {y.shape} vs {y_hat.shape}")
    return float(batch_scores(y[None], y_hat[None], mode)[0])


def batch_scores(y: np.ndarray, y_hat: np.ndarray, mode: str) -> np.ndarray:
    """Scores over a leading batch axis: (B, N, 2) pairs -> (B,)."""
    mode = normalize_mode(mode)
    diff = y - y_hat
    if mode == "joint-norm":
        return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
    return np.max(np.sqrt(np.sum(diff * diff, axis=-1)), axis=-1)


def _exact(x) -> Fraction:
    # Decimal reading of the float, so 0.2 means 1/5 and ceil() hits integers exactly.
    if isinstance(x, Fraction):
        return x
    return Fraction(repr(float(x)))


def quantile_index(k: int, delta_bar) -> int:
    """1-based rank ``ceil((k + 1) * (1 - delta_bar))``; ``k + 1`` selects the +inf sentinel."""
    db = _exact(delta_bar)
    if not 0 < db < 1:
        raise ValueError(f"delta_bar must lie in (0, 1), got {delta_bar}")
    if k < 1:
        raise ValueError("need at least one score")
    return math.ceil((k + 1) * (1 - db))


def conformal_quantile(scores: Sequence[float], delta_bar) -> Region:
    """The ``p``-th smallest of ``scores`` plus an appended +inf."""
    p = quantile_index(len(scores), delta_bar)
    if p > len(scores):
        return UNBOUNDED
    return float(sorted(scores)[p - 1])


def covered(score: float, region: Region) -> bool:
    return region is UNBOUNDED or score <= region


@dataclass(frozen=True)
class CalibrationTable:
    delta: float
    T: int
    H: int
    p: int
    mode: str
    K_val: int
    regions: dict[tuple[int, int], Region]
    val_indices: tuple[int, ...] = field(default=())

    @property
    def delta_bar(self) -> Fraction:
        return _exact(self.delta) / self.T

    def region(self, t: int, tau: int) -> Region:
        try:
            return self.regions[(t, tau)]
        except KeyError:
            raise KeyError(f"calibration table has no entry for (t={t}, tau={tau})") from None

    def worst_case_by_lag(self) -> dict[int, Region]:
        """Largest ``C[t, t + lag]`` over all ``t``, per lag."""
        out: dict[int, Region] = {}
        for (t, tau), c in self.regions.items():
            lag = tau - t
            if lag not in out or c > out[lag]:
                out[lag] = c
        return out

    def to_dict(self) -> dict[str, Any]:
        regions = []
        for (t, tau), c in sorted(self.regions.items()):
            rec: dict[str, Any] = {"t": t, "tau": tau}
            if c is UNBOUNDED:
                rec["unbounded"] = True
            else:
                rec["C"] = c
            regions.append(rec)
        return {
            "delta": self.delta,
            "T": self.T,
            "H": self.H,
            "p": self.p,
            "mode": self.mode,
            "K_val": self.K_val,
            "val_indices": list(self.val_indices),
            "regions": regions,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CalibrationTable":
        regions: dict[tuple[int, int], Region] = {}
        for rec in d["regions"]:
            regions[(int(rec["t"]), int(rec["tau"]))] = (
                UNBOUNDED if rec.get("unbounded") else float(rec["C"])
            )
        return cls(
            float(d["delta"]),
            int(d["T"]),
            int(d["H"]),
            int(d["p"]),
            normalize_mode(d["mode"]),
            int(d["K_val"]),
            regions,
            tuple(d.get("val_indices", ())),
        )


def _split(data: Dataset | Sequence[Trajectory], split: str) -> tuple[list[Trajectory], tuple[int, ...]]:
    if isinstance(data, Dataset):
        idx = data.indices(split)
        return [data.trajectories[i] for i in idx], tuple(idx)
    trajs = list(data)
    return trajs, ()


def _stack(trajs: Sequence[Trajectory], T: int) -> tuple[np.ndarray, int]:
    if not trajs:
        raise ValueError("no trajectories to calibrate on")
    h = trajs[0].history_len
    for tr in trajs:
        if tr.history_len != h:
            raise ValueError("trajectories disagree on history length")
        if tr.T < T:
            raise ValueError(f"T={T} exceeds trajectory horizon {tr.T}")
    return np.stack([tr.positions[: h + T + 1] for tr in trajs]), h


def calibration_scores(
    trajs: Sequence[Trajectory],
    spec: PredictorSpec,
    T: int,
    H: int,
    mode: str,
    times: Sequence[int] | None = None,
) -> dict[tuple[int, int], np.ndarray]:
    """Nonconformity scores of every trajectory for each ``(t, tau)`` pair."""
    mode = normalize_mode(mode)
    if T < 1 or H < 1:
        raise ValueError("T and H must be >= 1")
    pos, h = _stack(trajs, T)
    out: dict[tuple[int, int], np.ndarray] = {}
    for t in range(T) if times is None else times:
        steps = min(t + H, T) - t
        now = h + t
        preds = forecast(spec, pos[:, : now + 1], steps, pos[:, now + 1 : now + 1 + steps])
        for k in range(steps):
            out[(t, t + 1 + k)] = batch_scores(pos[:, now + 1 + k], preds[:, k], mode)
    return out


def table_from_scores(
    scores: dict[tuple[int, int], np.ndarray],
    delta: float,
    T: int,
    H: int,
    mode: str,
    val_indices: tuple[int, ...] = (),
) -> CalibrationTable:
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    k = len(next(iter(scores.values())))
    delta_bar = _exact(delta) / T
    p = quantile_index(k, delta_bar)
    regions = {key: conformal_quantile(s.tolist(), delta_bar) for key, s in scores.items()}
    return CalibrationTable(delta, T, H, p, normalize_mode(mode), k, regions, val_indices)


def calibrate(
    val: Dataset | Sequence[Trajectory],
    spec: PredictorSpec,
    delta: float,
    T: int,
    H: int,
    mode: str = "joint-norm",
) -> CalibrationTable:
    """Build ``C[t, tau]`` for ``0 <= t < T``, ``t < tau <= min(t + H, T)`` at level ``delta / T``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    trajs, idx = _split(val, "val")
    scores = calibration_scores(trajs, spec, T, H, mode)
    return table_from_scores(scores, delta, T, H, mode, idx)


@dataclass
class CoverageReport:
    kind: str
    rate: float
    passes: list[bool]
    failures: list[int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "rate": self.rate,
            "passes": sum(self.passes),
            "n": len(self.passes),
            "failures": self.failures,
        }


def empirical_coverage(
    test: Dataset | Sequence[Trajectory],
    spec: PredictorSpec,
    table: CalibrationTable,
    kind: str = "joint-from-zero",
) -> CoverageReport:
    """Fraction of test trajectories whose realized states stay inside every required region.

    ``joint-from-zero`` checks all ``tau = 1..T`` from time zero; ``one-step``
    checks ``tau = t + 1`` for every ``t``.
    """
    kind = {"joint": "joint-from-zero", "onestep": "one-step"}.get(kind, kind)
    if kind == "joint-from-zero":
        pairs = [(0, tau) for tau in range(1, table.T + 1)]
        horizon = table.T
    elif kind == "one-step":
        pairs = [(t, t + 1) for t in range(table.T)]
        horizon = 1
    else:
        raise ValueError(f"unknown coverage kind {kind!r}")
    missing = [pr for pr in pairs if pr not in table.regions]
    if missing:
        raise KeyError(f"calibration table lacks entries {missing[:3]} needed for {kind}")
    trajs, idx = _split(test, "test")
    idx = idx or tuple(range(len(trajs)))
    times = [0] if kind == "joint-from-zero" else None
    scores = calibration_scores(trajs, spec, table.T, horizon, table.mode, times)
    ok = np.ones(len(trajs), dtype=bool)
    for pr in pairs:
        c = table.regions[pr]
        if c is not UNBOUNDED:
            ok &= scores[pr] <= c
    passes = ok.tolist()
    failures = [i for i, good in zip(idx, passes) if not good]
    return CoverageReport(kind, float(np.mean(ok)), passes, failures)


def histogram_rows(
    scores: dict[tuple[int, int], np.ndarray], table: CalibrationTable, bins: int = 20
) -> list[list[Any]]:
    """CSV rows (t, tau, bin_lo, bin_hi, count, C) for plotting score histograms."""
    rows: list[list[Any]] = []
    for (t, tau), s in sorted(scores.items()):
        counts, edges = np.histogram(s, bins=bins)
        c = table.regions.get((t, tau))
        c_str = "inf" if c is UNBOUNDED else repr(c)
        for n, lo, hi in zip(counts, edges[:-1], edges[1:]):
            rows.append([t, tau, repr(float(lo)), repr(float(hi)), int(n), c_str])
    return rows
