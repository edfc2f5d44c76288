"""Kinematic quadruped simulator producing ground truth and sensor streams."""

from .config import (
    AXES,
    GRAVITY,
    DegeneracySchedule,
    GaitConfig,
    MotionProfile,
    NoiseConfig,
    PayloadSchedule,
    ScenarioConfig,
    TerrainProfile,
    TerrainSegment,
)
from .gait import BASE_RATE, GaitTruth, generate_gait
from .io import read_stream, write_stream
from .sensors import LidarObservations, SimStream, lidar_observation, simulate, synthesize_sensors

__all__ = [
    "AXES",
    "BASE_RATE",
    "GRAVITY",
    "DegeneracySchedule",
    "GaitConfig",
    "GaitTruth",
    "LidarObservations",
    "MotionProfile",
    "NoiseConfig",
    "PayloadSchedule",
    "ScenarioConfig",
    "SimStream",
    "TerrainProfile",
    "TerrainSegment",
    "generate_gait",
    "lidar_observation",
    "read_stream",
    "simulate",
    "synthesize_sensors",
    "write_stream",
]
