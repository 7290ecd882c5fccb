"""Line-delimited JSON scene files: one sample per line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from trajllm.data.schema import SceneSample

SCHEMA_VERSION = "1.0"


class SceneFileError(ValueError):
    pass


def _pt(a) -> list[float]:
    return [float(a[0]), float(a[1])]


def sample_to_record(sample: SceneSample) -> dict:
    agents = [
        [
            {
                "start": _pt(sample.agent_start[i, j]),
                "end": _pt(sample.agent_end[i, j]),
                "attrs": [float(x) for x in sample.agent_attrs[i, j]],
            }
            for j in range(sample.agent_start.shape[1])
        ]
        for i in range(sample.agent_start.shape[0])
    ]
    lanes = [
        {
            "start": _pt(sample.lane_start[k]),
            "end": _pt(sample.lane_end[k]),
            "predecessor": _pt(sample.lane_pred[k]),
            "attrs": [float(x) for x in sample.lane_attrs[k]],
        }
        for k in range(sample.lane_start.shape[0])
    ]
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": sample.scene_id,
        "seed": int(sample.seed),
        "agents": agents,
        "agent_mask": sample.agent_mask.astype(bool).tolist(),
        "lanes": lanes,
        "lane_mask": sample.lane_mask.astype(bool).tolist(),
        "gt_future": sample.gt_future.tolist(),
        "lane_labels": sample.lane_labels.astype(int).tolist(),
    }


def record_to_sample(rec: dict) -> SceneSample:
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SceneFileError(f"schema_version {version!r} does not match {SCHEMA_VERSION!r}")
    agents = rec["agents"]
    lanes = rec["lanes"]
    f64 = lambda x: np.asarray(x, dtype=np.float64)  # noqa: E731
    return SceneSample(
        agent_start=f64([[v["start"] for v in row] for row in agents]),
        agent_end=f64([[v["end"] for v in row] for row in agents]),
        agent_attrs=f64([[v["attrs"] for v in row] for row in agents]),
        agent_mask=np.asarray(rec["agent_mask"], dtype=bool),
        lane_start=f64([v["start"] for v in lanes]),
        lane_end=f64([v["end"] for v in lanes]),
        lane_pred=f64([v["predecessor"] for v in lanes]),
        lane_attrs=f64([v["attrs"] for v in lanes]),
        lane_mask=np.asarray(rec["lane_mask"], dtype=bool),
        gt_future=f64(rec["gt_future"]),
        lane_labels=np.asarray(rec["lane_labels"], dtype=np.int64),
        scene_id=str(rec["scene_id"]),
        seed=int(rec["seed"]),
    )


def dumps_records(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records)


def save_scenes(samples: Iterable[SceneSample], path) -> Path:
    path = Path(path)
    path.write_text(dumps_records(sample_to_record(s) for s in samples))
    return path


def read_records(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SceneFileError(f"record {i}: malformed JSON ({exc.msg})") from exc
    return records


def load_scenes(path) -> list[SceneSample]:
    out = []
    for i, rec in enumerate(read_records(path)):
        try:
            out.append(record_to_sample(rec))
        except SceneFileError as exc:
            raise SceneFileError(f"record {i}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFileError(f"record {i}: malformed scene record ({exc!r})") from exc
    return out
