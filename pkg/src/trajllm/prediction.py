"""Prediction records (one JSON line per scene) and static SVG plots."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from trajllm.data.schema import SceneSample


@dataclass
class Prediction:
    scene_id: str
    pi: np.ndarray  # (K,)
    trajectories: np.ndarray  # (K, T, 2)
    scales: np.ndarray  # (K, T, 2)

    @property
    def k_modes(self) -> int:
        return len(self.pi)

    def to_record(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "k_modes": self.k_modes,
            "pi": self.pi.tolist(),
            "trajectories": self.trajectories.tolist(),
            "scales": self.scales.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Prediction":
        pred = cls(
            scene_id=rec["scene_id"],
            pi=np.asarray(rec["pi"], dtype=np.float64),
            trajectories=np.asarray(rec["trajectories"], dtype=np.float64),
            scales=np.asarray(rec["scales"], dtype=np.float64),
        )
        if pred.k_modes != rec["k_modes"] or len(pred.trajectories) != pred.k_modes:
            raise ValueError(f"prediction {rec['scene_id']}: k_modes does not match the arrays")
        return pred


def dumps_predictions(preds) -> str:
    return "".join(json.dumps(p.to_record()) + "\n" for p in preds)


def loads_predictions(text: str) -> list[Prediction]:
    return [Prediction.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


def render_svg(sample: SceneSample, pred: Prediction, size: int = 480, margin: float = 5.0) -> str:
    """Lanes gray, ground truth green, predicted modes red, legend with mode weights."""
    lanes = [(a, b) for a, b, ok in zip(sample.lane_start, sample.lane_end, sample.lane_mask) if ok]
    pts = [sample.gt_future, pred.trajectories.reshape(-1, 2), np.zeros((1, 2))]
    pts += [np.array(seg) for seg in lanes]
    allp = np.concatenate(pts)
    lo, hi = allp.min(0) - margin, allp.max(0) + margin
    scale = size / float(max(hi - lo))

    def xy(p):
        return f"{(p[0] - lo[0]) * scale:.2f},{(hi[1] - p[1]) * scale:.2f}"

    def polyline(points, color, width, extra=""):
        return (f'<polyline points="{" ".join(xy(p) for p in points)}" fill="none" '
                f'stroke="{color}" stroke-width="{width}"{extra}/>')

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f"<title>{escape(str(sample.scene_id))}</title>",
        f'<rect width="{size}" height="{size}" fill="white"/>',
        '<g id="lanes">',
    ]
    out += [polyline([a, b], "gray", 1.5) for a, b in lanes]
    out += ["</g>", '<g id="ground-truth">', polyline(sample.gt_future, "green", 2.5), "</g>",
            '<g id="predictions">']
    for k, traj in enumerate(pred.trajectories):
        opacity = 0.3 + 0.7 * float(pred.pi[k]) / float(pred.pi.max())
        out.append(polyline(traj, "red", 1.8, f' stroke-opacity="{opacity:.3f}" data-mode="{k}"'))
    out += ["</g>", '<g id="legend" font-family="sans-serif" font-size="11">',
            '<text x="8" y="16" fill="green">ground truth</text>']
    for k in range(pred.k_modes):
        out.append(f'<text x="8" y="{30 + 14 * k}" fill="red">mode {k}: pi={pred.pi[k]:.3f}</text>')
    out += ["</g>", "</svg>"]
    return "\n".join(out) + "\n"


def plot_paths(path, scene_ids) -> list[Path]:
    """One file for a single scene, otherwise ``stem_<scene_id>.svg`` siblings."""
    path = Path(path)
    if len(scene_ids) == 1:
        return [path]
    return [path.with_name(f"{path.stem}_{sid}{path.suffix or '.svg'}") for sid in scene_ids]
