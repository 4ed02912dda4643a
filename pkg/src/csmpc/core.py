"""Shared data model: agent trajectories, datasets with splits, scenario config.

Agent states are 2-D positions in meters. A trajectory stores ``h`` warmup
samples followed by times ``0..T``, so ``positions[h + t]`` is the joint
agent state at time ``t``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

SPLITS = ("train", "val", "test")

# One agent position, shape (2,). A joint state is an (N, 2) array.
AgentState = np.ndarray
JointState = np.ndarray


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 3
    T: int = 20
    h: int = 20
    dt: float = 0.125
    # Agent start/goal sampling box: (xmin, xmax, ymin, ymax).
    workspace: tuple[float, float, float, float] = (2.0, 6.0, -2.5, 2.5)
    speed_range: tuple[float, float] = (0.4, 1.2)
    noise_scale: float = 0.01
    goal_center: tuple[float, float] = (8.0, 0.0)
    goal_radius: float = 0.25
    epsilon: float = 0.25
    # Robot initial state (x, y, theta, v) and its own state box.
    robot_start: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 3.0)
    robot_bounds: tuple[float, float, float, float] = (-1.0, 10.0, -5.0, 5.0)

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.h < 0:
            raise ValueError("h must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ValueError("speed_range must be nonnegative and ordered")
        if not self.noise_scale >= 0:
            raise ValueError("noise_scale must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class Trajectory:
    """Joint agent positions, shape (h + T + 1, N, 2)."""

    positions: np.ndarray
    history_len: int

    def __post_init__(self):
        arr = np.array(self.positions, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"positions must have shape (L, N, 2), got {arr.shape}")
        if self.history_len < 0 or arr.shape[0] < self.history_len + 2:
            raise ValueError(f"need at least h + 2 = {self.history_len + 2} rows, got {arr.shape[0]}")
        arr.setflags(write=False)
        object.__setattr__(self, "positions", arr)

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def T(self) -> int:
        return self.positions.shape[0] - self.history_len - 1

    def at(self, t: int) -> JointState:
        """Joint state at time ``t`` (``-h <= t <= T``)."""
        if not -self.history_len <= t <= self.T:
            raise IndexError(f"time {t} outside [-{self.history_len}, {self.T}]")
        return self.positions[self.history_len + t]

    def history(self, t: int) -> np.ndarray:
        """Everything observed through time ``t``, warmup included."""
        return self.positions[: self.history_len + t + 1]

    def future(self, t: int, steps: int) -> np.ndarray:
        start = self.history_len + t + 1
        return self.positions[start : start + steps]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.history_len == other.history_len and np.array_equal(
            self.positions, other.positions
        )

    __hash__ = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "agent", "x", "y"])
        for k, joint in enumerate(self.positions):
            for j, (x, y) in enumerate(joint):
                w.writerow([k - self.history_len, j, repr(float(x)), repr(float(y))])
        return buf.getvalue()


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    splits: tuple[str, ...]
    seed: int = 0
    scenario: ScenarioConfig | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "splits", tuple(self.splits))

    def __len__(self):
        return len(self.trajectories)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str) -> list[Trajectory]:
        return [self.trajectories[i] for i in self.indices(split)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "scenario": self.scenario.to_dict() if self.scenario else None,
            "trajectories": [
                {
                    "split": s,
                    "history_len": tr.history_len,
                    "states": tr.positions.tolist(),
                }
                for tr, s in zip(self.trajectories, self.splits)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Dataset":
        scen = ScenarioConfig.from_dict(d["scenario"]) if d.get("scenario") else None
        default_h = scen.h if scen else 0
        trajs, splits = [], []
        for rec in d["trajectories"]:
            trajs.append(Trajectory(np.array(rec["states"], dtype=float), rec.get("history_len", default_h)))
            splits.append(rec["split"])
        return cls(tuple(trajs), tuple(splits), int(d.get("seed", 0)), scen)

    def to_json(self) -> str:
        # float repr round-trips exactly, so coordinates survive bit-for-bit
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        write_atomic(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_json(Path(path).read_text())


def validate_dataset(d: Dataset) -> list[str]:
    """Return one message per violated dataset invariant; empty when valid."""
    problems: list[str] = []
    if len(d.trajectories) != len(d.splits):
        problems.append(
            f"split labels ({len(d.splits)}) do not match trajectory count ({len(d.trajectories)})"
        )
    if not d.trajectories:
        problems.append("dataset has no trajectories")
        return problems
    ref = d.trajectories[0]
    for i, tr in enumerate(d.trajectories):
        if tr.n_agents != ref.n_agents:
            problems.append(
                f"trajectory {i}: agent-count mismatch ({tr.n_agents} != {ref.n_agents})"
            )
        if tr.history_len != ref.history_len:
            problems.append(
                f"trajectory {i}: history-length mismatch ({tr.history_len} != {ref.history_len})"
            )
        if tr.positions.shape[0] != ref.positions.shape[0]:
            problems.append(
                f"trajectory {i}: length mismatch ({tr.positions.shape[0]} != {ref.positions.shape[0]})"
            )
        if tr.positions.shape[0] < tr.history_len + 2:
            problems.append(f"trajectory {i}: shorter than history_len + 2")
        if tr.n_agents < 1:
            problems.append(f"trajectory {i}: no agents")
        if not np.all(np.isfinite(tr.positions)):
            k, j, _ = np.argwhere(~np.isfinite(tr.positions))[0]
            problems.append(
                f"trajectory {i}: non-finite coordinate at time {k - tr.history_len}, agent {j}"
            )
    for i, s in enumerate(d.splits):
        if s not in SPLITS:
            problems.append(f"trajectory {i}: unknown split label {s!r}")
    for s in ("val", "test"):
        if d.splits.count(s) < 1:
            problems.append(f"split {s!r} is empty")
    if d.scenario is not None:
        sc = d.scenario
        if ref.n_agents != sc.n_agents or ref.history_len != sc.h or ref.T != sc.T:
            problems.append("trajectory shapes disagree with scenario (N, h, T)")
    return problems


def write_atomic(path: str | Path, text: str) -> None:
    """Write ``text`` to a temp file next to ``path`` then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)

