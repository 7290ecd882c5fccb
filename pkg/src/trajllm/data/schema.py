"""Vectorized scene schema shared by the data pipeline and the model."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

T_HIST = 4  # 2 s observed at 2 Hz
T_FUT = 12  # 6 s predicted at 2 Hz
DT = 0.5
N_MAX = 8  # neighbors
L_MAX = 64  # lane vectors

AGENT_TYPES = ("vehicle", "pedestrian", "cyclist", "other")
LANE_TYPES = ("through", "left_turn", "right_turn")

# start(2) + end(2) + type one-hot + timestamp
AGENT_ATTR_DIM = len(AGENT_TYPES) + 1
LANE_ATTR_DIM = len(LANE_TYPES)
AGENT_FEAT_DIM = 4 + AGENT_ATTR_DIM
# start(2) + end(2) + predecessor(2) + type one-hot
LANE_FEAT_DIM = 6 + LANE_ATTR_DIM


@dataclass(frozen=True)
class TrajectoryVector:
    start: tuple[float, float]
    end: tuple[float, float]
    attrs: tuple[float, ...]


@dataclass(frozen=True)
class LaneVector:
    start: tuple[float, float]
    end: tuple[float, float]
    predecessor: tuple[float, float]
    attrs: tuple[float, ...]


@dataclass
class SceneSample:
    """One prediction instance in the target-centered frame.

    Agent row 0 is the target. Arrays are padded to ``N_MAX + 1`` agents and
    ``L_MAX`` lanes; valid lanes always precede padding.
    """

    agent_start: np.ndarray  # (N_MAX+1, T_HIST-1, 2)
    agent_end: np.ndarray  # (N_MAX+1, T_HIST-1, 2)
    agent_attrs: np.ndarray  # (N_MAX+1, T_HIST-1, AGENT_ATTR_DIM)
    agent_mask: np.ndarray  # (N_MAX+1, T_HIST-1) bool
    lane_start: np.ndarray  # (L_MAX, 2)
    lane_end: np.ndarray  # (L_MAX, 2)
    lane_pred: np.ndarray  # (L_MAX, 2)
    lane_attrs: np.ndarray  # (L_MAX, LANE_ATTR_DIM)
    lane_mask: np.ndarray  # (L_MAX,) bool
    gt_future: np.ndarray  # (T_FUT, 2)
    lane_labels: np.ndarray  # (T_FUT, L_MAX) one-hot int
    scene_id: str = ""
    seed: int = 0

    @property
    def num_lanes(self) -> int:
        return int(self.lane_mask.sum())

    @property
    def num_agents(self) -> int:
        return int(self.agent_mask.any(axis=1).sum())

    def target_last_position(self) -> np.ndarray:
        return self.agent_end[0, -1]

    def agent_features(self) -> np.ndarray:
        """(N_MAX+1, T_HIST-1, AGENT_FEAT_DIM) float32; timestamp scaled to [-1, 0]."""
        attrs = self.agent_attrs.copy()
        attrs[..., -1] /= T_HIST - 1
        feats = np.concatenate([self.agent_start, self.agent_end, attrs], axis=-1)
        feats[~self.agent_mask] = 0.0
        return feats.astype(np.float32)

    def lane_features(self) -> np.ndarray:
        feats = np.concatenate(
            [self.lane_start, self.lane_end, self.lane_pred, self.lane_attrs], axis=-1
        )
        feats[~self.lane_mask] = 0.0
        return feats.astype(np.float32)

    def equals(self, other: "SceneSample") -> bool:
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


def empty_sample_arrays() -> dict[str, np.ndarray]:
    n, t = N_MAX + 1, T_HIST - 1
    return dict(
        agent_start=np.zeros((n, t, 2)),
        agent_end=np.zeros((n, t, 2)),
        agent_attrs=np.zeros((n, t, AGENT_ATTR_DIM)),
        agent_mask=np.zeros((n, t), dtype=bool),
        lane_start=np.zeros((L_MAX, 2)),
        lane_end=np.zeros((L_MAX, 2)),
        lane_pred=np.zeros((L_MAX, 2)),
        lane_attrs=np.zeros((L_MAX, LANE_ATTR_DIM)),
        lane_mask=np.zeros(L_MAX, dtype=bool),
        gt_future=np.zeros((T_FUT, 2)),
        lane_labels=np.zeros((T_FUT, L_MAX), dtype=np.int64),
    )
