"""Deterministic synthetic driving scenes on canonical road layouts.

Every template is built in a canonical frame where the target drives along
+x and reaches the origin at t=0, then rotated by a small random heading and
shifted by a random world offset before normalization, so the pipeline sees
realistic (non-centered) raw coordinates.
"""

from __future__ import annotations

import numpy as np

from trajllm.data.schema import DT, T_FUT, T_HIST, SceneSample
from trajllm.data.vectorize import SceneError, build_sample, normalize_scene

TEMPLATES = ("straight", "left_turn", "right_turn", "intersection")

LANE_WIDTH = 3.5
SPACING = 5.0
BACK = 20.0  # lane extent behind the target
AHEAD = 75.0  # lane extent past the branch point
MAX_NOISE = 0.45  # noise vectors are clipped to this norm


def _line(p0, p1, spacing=SPACING) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(1, int(np.ceil(np.linalg.norm(p1 - p0) / spacing)))
    u = np.linspace(0.0, 1.0, n + 1)[:, None]
    return p0 + u * (p1 - p0)


def _turn(x_entry: float, radius: float, sign: float) -> np.ndarray:
    """Quarter arc from (x_entry, 0) heading +x, then a straight exit; sign +1 turns left."""
    n_arc = max(3, int(np.ceil(0.5 * np.pi * radius / 4.0)))
    phi = np.linspace(0.0, 0.5 * np.pi, n_arc + 1)
    arc = np.stack([x_entry + radius * np.sin(phi), sign * radius * (1 - np.cos(phi))], axis=1)
    end = arc[-1]
    exit_ = _line(end, end + np.array([0.0, sign * AHEAD]))
    return np.concatenate([arc, exit_[1:]])


def _arc_lengths(path: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))])


def _interp_path(path: np.ndarray, s: np.ndarray) -> np.ndarray:
    cum = _arc_lengths(path)
    s = np.clip(s, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(path) - 2)
    seg = cum[idx + 1] - cum[idx]
    u = (s - cum[idx]) / seg
    return path[idx] + u[:, None] * (path[idx + 1] - path[idx])


def _noise(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    eps = rng.normal(0.0, 1.0, size=(n, 2)) * scale
    norm = np.linalg.norm(eps, axis=1, keepdims=True)
    factor = np.minimum(1.0, MAX_NOISE / np.maximum(norm, 1e-12))
    return eps * factor


def _layout(template: str, rng: np.random.Generator):
    """Return (lane polylines, lane types, index of the followed route, route polyline)."""
    if template == "straight":
        n_lanes = int(rng.integers(2, 4))
        own = int(rng.integers(0, n_lanes))
        ys = (np.arange(n_lanes) - own) * LANE_WIDTH
        lanes = [_line((-BACK, y), (AHEAD, y)) for y in ys]
        return lanes, ["through"] * n_lanes, own, lanes[own]

    x_entry = float(rng.uniform(4.0, 16.0))
    radius = float(rng.uniform(8.0, 15.0))
    approach = _line((-BACK, 0.0), (x_entry, 0.0))
    branches = {"through": _line((x_entry, 0.0), (x_entry + AHEAD, 0.0))}
    if template in ("left_turn", "intersection"):
        branches["left_turn"] = _turn(x_entry, radius, +1.0)
    if template in ("right_turn", "intersection"):
        branches["right_turn"] = _turn(x_entry, radius, -1.0)

    if template == "intersection":
        names = list(branches)
        choice = names[int(rng.integers(0, len(names)))]
    else:
        choice = template
    lanes = [approach] + list(branches.values())
    kinds = ["through"] + list(branches)
    route = np.concatenate([approach, branches[choice][1:]])
    return lanes, kinds, 1 + list(branches).index(choice), route


def generate_synthetic_scene(
    template: str,
    noise_scale: float = 0.0,
    seed: int = 0,
    return_route: bool = False,
):
    """Build one normalized :class:`SceneSample`.

    The target follows one lane of the layout at a seeded speed and mild
    acceleration; 0-4 neighbors drive along random lanes. Output depends only
    on ``(template, noise_scale, seed)``. With ``return_route`` the followed
    centerline (normalized frame) is returned alongside the sample.
    """
    if template not in TEMPLATES:
        raise SceneError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    if not noise_scale >= 0:
        raise SceneError("noise_scale must be >= 0")
    rng = np.random.default_rng([seed, TEMPLATES.index(template)])

    lanes, kinds, _, route = _layout(template, rng)
    speed = float(rng.uniform(4.0, 10.0))
    accel = float(rng.uniform(-0.5, 0.5))
    t_hist = -DT * np.arange(T_HIST - 1, -1, -1)
    t_fut = DT * np.arange(1, T_FUT + 1)
    s_of = lambda t: BACK + speed * t + 0.5 * accel * t * t  # noqa: E731

    target_hist = _interp_path(route, s_of(t_hist))
    target_fut = _interp_path(route, s_of(t_fut))
    target_hist = target_hist + _noise(rng, T_HIST, noise_scale)
    target_fut = target_fut + _noise(rng, T_FUT, noise_scale)

    histories = [target_hist]
    for _ in range(int(rng.integers(0, 5))):
        lane = lanes[int(rng.integers(0, len(lanes)))]
        v = float(rng.uniform(3.0, 10.0))
        length = _arc_lengths(lane)[-1]
        s_end = float(rng.uniform(min(v * 1.5, length), length))
        pts = _interp_path(lane, s_end + v * t_hist)
        histories.append(pts + _noise(rng, T_HIST, noise_scale))

    theta = float(rng.uniform(-0.3, 0.3))
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    offset = rng.uniform(-50.0, 50.0, size=2)
    world = lambda p: p @ rot.T + offset  # noqa: E731

    scene = normalize_scene(
        [world(h) for h in histories],
        [world(p) for p in lanes],
        target_index=0,
        future=world(target_fut),
    )
    sample = build_sample(
        scene,
        lane_types=kinds,
        scene_id=f"{template}-{seed:08d}",
        seed=seed,
    )
    if return_route:
        return sample, world(route) - scene.origin
    return sample


def generate_dataset(
    n: int, templates=TEMPLATES, noise_scale: float = 0.0, seed: int = 0
) -> list[SceneSample]:
    """``n`` scenes cycling through ``templates``; scene i uses seed ``seed + i``."""
    templates = [templates] if isinstance(templates, str) else list(templates)
    return [
        generate_synthetic_scene(templates[i % len(templates)], noise_scale, seed + i)
        for i in range(n)
    ]
