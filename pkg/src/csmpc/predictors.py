"""Multi-step trajectory predictors.

Every predictor here is a one-step displacement model applied recursively:
the predicted position at ``t+k`` is fed back as if observed to produce
``t+k+1``. Agents are predicted independently with shared coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import Dataset, Trajectory

KINDS = ("constant-velocity", "autoregressive", "noisy-oracle")


@dataclass(frozen=True)
class PredictorSpec:
    kind: str
    order: int = 1
    coefficients: tuple[float, ...] = ()
    # noisy-oracle only: additive error per lag, shape (K, 2) or (K, N, 2)
    oracle_errors: np.ndarray | None = field(default=None, compare=False)
    rank_deficient: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.kind == "autoregressive" and len(self.coefficients) != self.order:
            raise ValueError(
                f"autoregressive spec needs {self.order} coefficients, got {len(self.coefficients)}"
            )
        if self.kind == "noisy-oracle":
            if self.oracle_errors is None:
                raise ValueError("noisy-oracle spec needs oracle_errors")
            err = np.array(self.oracle_errors, dtype=float)
            if err.ndim not in (2, 3) or err.shape[-1] != 2:
                raise ValueError("oracle_errors must have shape (K, 2) or (K, N, 2)")
            err.setflags(write=False)
            object.__setattr__(self, "oracle_errors", err)
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    @classmethod
    def constant_velocity(cls) -> "PredictorSpec":
        return cls("constant-velocity", 1, (1.0,))

    @classmethod
    def noisy_oracle(cls, errors) -> "PredictorSpec":
        return cls("noisy-oracle", 1, (), np.asarray(errors, dtype=float))

    @property
    def lags(self) -> np.ndarray:
        if self.kind == "constant-velocity":
            return np.array([1.0])
        return np.array(self.coefficients)

    @property
    def min_history(self) -> int:
        if self.kind == "noisy-oracle":
            return 1
        return max(2, self.order + 1)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "kind": self.kind,
            "q": self.order,
            "coefficients": list(self.coefficients),
            "rank_deficient": self.rank_deficient,
        }
        if self.oracle_errors is not None:
            d["oracle_errors"] = self.oracle_errors.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PredictorSpec":
        err = d.get("oracle_errors")
        return cls(
            d["kind"],
            int(d.get("q", 1)),
            tuple(d.get("coefficients", ())),
            None if err is None else np.array(err, dtype=float),
            bool(d.get("rank_deficient", False)),
        )


@dataclass(frozen=True)
class PredictionSet:
    """Predicted joint states for ``tau = made_at + 1 .. made_at + len(values)``."""

    made_at: int
    values: np.ndarray

    @property
    def taus(self) -> range:
        return range(self.made_at + 1, self.made_at + 1 + len(self.values))

    def at(self, tau: int) -> np.ndarray:
        k = tau - self.made_at - 1
        if not 0 <= k < len(self.values):
            raise KeyError(f"no prediction for tau={tau}")
        return self.values[k]


def recursive_forecast(history: np.ndarray, lags: np.ndarray, steps: int) -> np.ndarray:
    """Roll a lag-displacement model forward.

    ``history`` has shape (L, ..., 2) with time first; returns (steps, ..., 2).
    The next displacement is ``sum_k lags[k] * disp[-1 - k]``.
    """
    q = len(lags)
    window = list(np.diff(history[-(q + 1) :], axis=0))  # oldest .. newest
    last = history[-1]
    out = np.empty((steps,) + history.shape[1:])
    for k in range(steps):
        step = np.zeros_like(last)
        for i, a in enumerate(lags):
            step = step + a * window[-1 - i]
        last = last + step
        out[k] = last
        window.append(step)
        window.pop(0)
    return out


def n_steps(t: int, horizon: int, T: int) -> int:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 0 <= t < T:
        raise ValueError(f"prediction time t={t} must satisfy 0 <= t < T={T}")
    return min(t + horizon, T) - t


def forecast(
    spec: PredictorSpec,
    histories: np.ndarray,
    steps: int,
    futures: np.ndarray | None = None,
) -> np.ndarray:
    """Batched prediction: histories (B, L, N, 2) -> (B, steps, N, 2)."""
    histories = np.asarray(histories, dtype=float)
    if histories.shape[1] < spec.min_history:
        raise ValueError(
            f"history too short: {spec.kind} needs at least {spec.min_history} states, "
            f"got {histories.shape[1]}"
        )
    if spec.kind == "noisy-oracle":
        if futures is None:
            raise ValueError("noisy-oracle prediction needs the ground-truth future")
        futures = np.asarray(futures, dtype=float)
        err = spec.oracle_errors
        if futures.shape[1] < steps or err.shape[0] < steps:
            raise ValueError(f"noisy-oracle needs {steps} future states and errors")
        e = err[:steps]
        if e.ndim == 2:
            e = e[:, None, :]
        return futures[:, :steps] + e[None]
    # time-major so the recursion vectorizes over trajectories and agents
    out = recursive_forecast(np.moveaxis(histories, 1, 0), spec.lags, steps)
    return np.moveaxis(out, 0, 1)


def predict(
    spec: PredictorSpec,
    history: np.ndarray,
    t: int,
    horizon: int,
    T: int,
    future: np.ndarray | None = None,
) -> PredictionSet:
    """Predict ``tau = t+1 .. min(t+horizon, T)`` from states observed through ``t``.

    ``future`` (true states after ``t``) is read only by the noisy-oracle kind.
    """
    steps = n_steps(t, horizon, T)
    history = np.asarray(history, dtype=float)
    fut = None if future is None or spec.kind != "noisy-oracle" else np.asarray(future)[None]
    values = forecast(spec, history[None], steps, fut)[0]
    values.setflags(write=False)
    return PredictionSet(t, values)


def predict_from(spec: PredictorSpec, traj: Trajectory, t: int, horizon: int, T: int | None = None) -> PredictionSet:
    """Predict on a recorded trajectory, revealing the future only to the oracle."""
    T = traj.T if T is None else T
    steps = n_steps(t, horizon, T)
    future = traj.future(t, steps) if spec.kind == "noisy-oracle" else None
    return predict(spec, traj.history(t), t, horizon, T, future)


def fit_autoregressive(train: Dataset | Sequence[Trajectory], order: int) -> PredictorSpec:
    """Least-squares lag coefficients pooled over agents, times and both axes."""
    trajs = train.subset("train") if isinstance(train, Dataset) else list(train)
    if not trajs:
        raise ValueError("fit_autoregressive needs at least one training trajectory")
    if order < 1:
        raise ValueError("order must be >= 1")
    rows, targets = [], []
    for tr in trajs:
        disp = np.diff(tr.positions, axis=0)  # (L-1, N, 2)
        if disp.shape[0] <= order:
            raise ValueError(f"trajectory too short for {order} lags")
        # regressor k holds the displacement k+1 steps back
        X = np.stack([disp[order - 1 - k : disp.shape[0] - 1 - k] for k in range(order)], axis=-1)
        y = disp[order:]
        rows.append(X.reshape(-1, order))
        targets.append(y.reshape(-1))
    X = np.concatenate(rows)
    y = np.concatenate(targets)
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    return PredictorSpec("autoregressive", order, tuple(coef), None, bool(rank < order))
