"""Normalization, vectorization and closest-lane labeling of raw scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trajllm.data.schema import (
    AGENT_TYPES,
    L_MAX,
    LANE_TYPES,
    N_MAX,
    T_FUT,
    T_HIST,
    LaneVector,
    SceneSample,
    TrajectoryVector,
    empty_sample_arrays,
)

logger = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


@dataclass
class NormalizedScene:
    histories: list[np.ndarray]  # per agent (n_obs, 2), oldest first
    polylines: list[np.ndarray]
    future: np.ndarray | None
    origin: np.ndarray
    rotation: float  # radians applied after translation; 0 unless rotate=True
    target_index: int


def _rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def normalize_scene(
    raw_positions_per_agent: Sequence[np.ndarray],
    raw_lane_polylines: Sequence[np.ndarray],
    target_index: int = 0,
    future: np.ndarray | None = None,
    rotate: bool = False,
    t_hist: int = T_HIST,
) -> NormalizedScene:
    """Translate every coordinate so the target's latest observed position is the origin.

    With ``rotate=True`` the frame is additionally rotated so the target's last
    displacement points along +x. Off by default.
    """
    if not 0 <= target_index < len(raw_positions_per_agent):
        raise SceneError(f"target index {target_index} out of range")
    target = np.asarray(raw_positions_per_agent[target_index], dtype=np.float64)
    if target.ndim != 2 or target.shape[0] < t_hist:
        n = 0 if target.ndim != 2 else target.shape[0]
        raise SceneError(f"target history has {n} positions, need at least {t_hist}")
    if not np.isfinite(target[-t_hist:]).all():
        raise SceneError("target history contains non-finite positions")

    origin = target[-1].copy()
    rot = np.eye(2)
    theta = 0.0
    if rotate:
        heading = target[-1] - target[-2]
        if np.linalg.norm(heading) > 0:
            theta = -float(np.arctan2(heading[1], heading[0]))
            rot = _rotation_matrix(theta)

    def tf(pts):
        out = np.asarray(pts, dtype=np.float64) - origin
        return out @ rot.T if rotate else out

    histories = [tf(p) for p in raw_positions_per_agent]
    polylines = [tf(p) for p in raw_lane_polylines]
    fut = None if future is None else tf(future)
    return NormalizedScene(histories, polylines, fut, origin, theta, target_index)


def type_one_hot(name: str, vocab: Sequence[str]) -> np.ndarray:
    if name not in vocab:
        raise SceneError(f"unknown type {name!r}; expected one of {tuple(vocab)}")
    out = np.zeros(len(vocab))
    out[vocab.index(name)] = 1.0
    return out


def vectorize_trajectory(
    positions: np.ndarray, agent_type: str = "vehicle"
) -> list[TrajectoryVector]:
    """Turn n chronological positions into n-1 displacement vectors, oldest first.

    The attribute vector is the agent-type one-hot followed by the timestamp
    index of the vector's end point (0 for the newest vector).
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[0] < 2:
        raise SceneError("need at least 2 positions to vectorize a trajectory")
    onehot = type_one_hot(agent_type, AGENT_TYPES)
    n = positions.shape[0]
    out = []
    for j in range(n - 1):
        ts = float(j - (n - 2))
        out.append(
            TrajectoryVector(
                start=tuple(positions[j]),
                end=tuple(positions[j + 1]),
                attrs=tuple(onehot) + (ts,),
            )
        )
    return out


def segment_lanes(
    polylines: Sequence[np.ndarray],
    max_vectors: int = L_MAX,
    lane_types: Sequence[str] | None = None,
) -> list[LaneVector]:
    """Split centerline polylines into lane vectors.

    Zero-length segments are dropped. When more than ``max_vectors`` remain,
    the ones farthest from the origin (by nearest endpoint) are discarded and
    the survivors keep their original order.
    """
    if lane_types is None:
        lane_types = ["through"] * len(polylines)
    vectors: list[LaneVector] = []
    for i, (line, kind) in enumerate(zip(polylines, lane_types)):
        line = np.asarray(line, dtype=np.float64)
        if line.ndim != 2 or line.shape[0] < 2:
            raise SceneError(f"polyline {i} has fewer than 2 points")
        onehot = tuple(type_one_hot(kind, LANE_TYPES))
        prev_start = None
        for j in range(line.shape[0] - 1):
            a, b = line[j], line[j + 1]
            if np.array_equal(a, b):
                logger.warning("polyline %d: dropping zero-length segment %d", i, j)
                continue
            pred = a if prev_start is None else prev_start
            vectors.append(LaneVector(tuple(a), tuple(b), tuple(pred), onehot))
            prev_start = a

    if len(vectors) > max_vectors:
        dist = np.array(
            [min(np.hypot(*v.start), np.hypot(*v.end)) for v in vectors]
        )
        keep = np.sort(np.argsort(dist, kind="stable")[:max_vectors])
        vectors = [vectors[k] for k in keep]
    return vectors


def point_segment_distance(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point (P, 2) to each segment (S, 2) -> (P, S)."""
    d = end - start
    rel = points[:, None, :] - start[None, :, :]
    denom = np.einsum("sk,sk->s", d, d)
    safe = np.where(denom > 0, denom, 1.0)
    u = np.clip(np.einsum("psk,sk->ps", rel, d) / safe, 0.0, 1.0)
    u = np.where(denom > 0, u, 0.0)
    closest = start[None] + u[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def label_closest_lane(
    lane_start: np.ndarray,
    lane_end: np.ndarray,
    lane_mask: np.ndarray,
    gt_future: np.ndarray,
) -> np.ndarray:
    """One-hot rows (t_f, L): for each future point, the nearest valid lane segment.

    Ties go to the lowest lane index.
    """
    lane_mask = np.asarray(lane_mask, dtype=bool)
    if not lane_mask.any():
        raise SceneError("cannot label closest lane: no valid lanes")
    dist = point_segment_distance(
        np.asarray(gt_future, dtype=np.float64),
        np.asarray(lane_start, dtype=np.float64),
        np.asarray(lane_end, dtype=np.float64),
    )
    dist[:, ~lane_mask] = np.inf
    idx = np.argmin(dist, axis=1)
    labels = np.zeros((len(gt_future), len(lane_mask)), dtype=np.int64)
    labels[np.arange(len(gt_future)), idx] = 1
    return labels


def build_sample(
    scene: NormalizedScene,
    agent_types: Sequence[str] | None = None,
    lane_types: Sequence[str] | None = None,
    scene_id: str = "",
    seed: int = 0,
    t_hist: int = T_HIST,
) -> SceneSample:
    """Vectorize a normalized scene into the fixed-shape sample layout.

    The target moves to agent row 0; neighbors beyond ``N_MAX`` are dropped,
    nearest first kept.
    """
    if scene.future is None or len(scene.future) != T_FUT:
        raise SceneError(f"target future must have {T_FUT} positions")
    if not np.isfinite(scene.future).all():
        raise SceneError("gt_future contains non-finite values")
    n_agents = len(scene.histories)
    agent_types = list(agent_types or ["vehicle"] * n_agents)
    arrs = empty_sample_arrays()

    order = [scene.target_index]
    others = [i for i in range(n_agents) if i != scene.target_index]
    others.sort(key=lambda i: float(np.linalg.norm(scene.histories[i][-1])))
    order += others[:N_MAX]

    for row, i in enumerate(order):
        hist = np.asarray(scene.histories[i])[-t_hist:]
        if hist.shape[0] < 2:
            continue
        vecs = vectorize_trajectory(hist, agent_types[i])
        offset = (t_hist - 1) - len(vecs)  # short histories right-aligned
        for j, v in enumerate(vecs):
            if not (np.isfinite(v.start).all() and np.isfinite(v.end).all()):
                continue
            arrs["agent_start"][row, offset + j] = v.start
            arrs["agent_end"][row, offset + j] = v.end
            arrs["agent_attrs"][row, offset + j] = v.attrs
            arrs["agent_mask"][row, offset + j] = True

    lanes = segment_lanes(scene.polylines, L_MAX, lane_types)
    if not lanes:
        raise SceneError("scene has no lane vectors")
    for k, v in enumerate(lanes):
        arrs["lane_start"][k] = v.start
        arrs["lane_end"][k] = v.end
        arrs["lane_pred"][k] = v.predecessor
        arrs["lane_attrs"][k] = v.attrs
        arrs["lane_mask"][k] = True

    arrs["gt_future"] = np.array(scene.future, dtype=np.float64)
    arrs["lane_labels"] = label_closest_lane(
        arrs["lane_start"], arrs["lane_end"], arrs["lane_mask"], arrs["gt_future"]
    )
    return SceneSample(**arrs, scene_id=scene_id, seed=seed)
