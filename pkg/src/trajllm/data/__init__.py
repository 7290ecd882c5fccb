from trajllm.data.io import (
    SCHEMA_VERSION,
    SceneFileError,
    load_scenes,
    record_to_sample,
    sample_to_record,
    save_scenes,
)
from trajllm.data.schema import (
    L_MAX,
    N_MAX,
    T_FUT,
    T_HIST,
    LaneVector,
    SceneSample,
    TrajectoryVector,
)
from trajllm.data.synthetic import TEMPLATES, generate_dataset, generate_synthetic_scene
from trajllm.data.vectorize import (
    NormalizedScene,
    SceneError,
    build_sample,
    label_closest_lane,
    normalize_scene,
    point_segment_distance,
    segment_lanes,
    vectorize_trajectory,
)

__all__ = [
    "L_MAX",
    "N_MAX",
    "SCHEMA_VERSION",
    "T_FUT",
    "T_HIST",
    "TEMPLATES",
    "LaneVector",
    "NormalizedScene",
    "SceneError",
    "SceneFileError",
    "SceneSample",
    "TrajectoryVector",
    "build_sample",
    "generate_dataset",
    "generate_synthetic_scene",
    "label_closest_lane",
    "load_scenes",
    "normalize_scene",
    "point_segment_distance",
    "record_to_sample",
    "sample_to_record",
    "save_scenes",
    "segment_lanes",
    "vectorize_trajectory",
]
