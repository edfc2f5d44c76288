"""Preset scenarios: the desk training set, a nominal run and the challenge run."""

from __future__ import annotations

from ..dataset import build_sequence
from ..sim.config import (
    AXES,
    DegeneracySchedule,
    MotionProfile,
    PayloadSchedule,
    ScenarioConfig,
    TerrainProfile,
    TerrainSegment,
)
from ..sim.sensors import simulate

RIGID = TerrainProfile("rigid")
SOFT_SOIL = TerrainProfile("deformable", slip_gain=0.08, sinkage=0.01, force_scale=0.9, friction=0.3)
ICE_PATCHES = TerrainProfile("slippery-patch", slip_gain=0.15, force_scale=0.85, friction=0.4, patch_length=1.5)
# slipperier than anything seen in training
CHALLENGE_ICE = TerrainProfile("slippery-patch", slip_gain=0.25, force_scale=0.85, friction=0.4, patch_length=1.5)

TRAINING_TERRAINS = {"rigid": RIGID, "soft-soil": SOFT_SOIL, "ice-patches": ICE_PATCHES}
TRAINING_PAYLOADS = (0.0, 3.0)
NOMINAL_SEQUENCE = "rigid-0kg"

WALK = MotionProfile(kind="random", min_speed=0.4, max_speed=1.0, stop_probability=0.0, max_yaw_rate=0.35)
# a wider envelope than WALK so evaluation runs stay inside the training range
TRAINING_WALK = MotionProfile(kind="random", min_speed=0.3, max_speed=1.1, stop_probability=0.0, max_yaw_rate=0.45)


def sequence_name(terrain: str, payload: float) -> str:
    return f"{terrain}-{payload:g}kg"


def training_configs(seed: int = 0, duration: float = 120.0) -> list:
    """One config per terrain/payload pair, each with its own derived seed."""
    out = []
    for t_index, (label, profile) in enumerate(TRAINING_TERRAINS.items()):
        for p_index, mass in enumerate(TRAINING_PAYLOADS):
            out.append(
                ScenarioConfig(
                    duration=duration,
                    seed=1000 * seed + 10 * t_index + p_index,
                    label=sequence_name(label, mass),
                    motion=TRAINING_WALK,
                    terrain=(TerrainSegment(0.0, profile, label),),
                    payload=PayloadSchedule(((0.0, mass),) if mass else ()),
                )
            )
    return out


def nominal_scenario(seed: int = 0, duration: float = 60.0) -> ScenarioConfig:
    """Feature-rich, rigid ground, no payload change."""
    return ScenarioConfig(
        duration=duration,
        seed=seed,
        label="nominal",
        motion=WALK,
        terrain=(TerrainSegment(0.0, RIGID, "rigid"),),
    )


def challenge_scenario(seed: int = 0) -> ScenarioConfig:
    """Rigid to slippery at 40 s, 3 kg removed at 60 s, LiDAR blind 70-90 s."""
    return ScenarioConfig(
        duration=120.0,
        seed=seed,
        label="challenge",
        motion=WALK,
        terrain=(TerrainSegment(0.0, RIGID, "rigid"), TerrainSegment(40.0, CHALLENGE_ICE, "slippery")),
        payload=PayloadSchedule(((0.0, 3.0), (60.0, 0.0))),
        degeneracy=DegeneracySchedule(((70.0, 90.0, AXES),)),
    )


def training_sequences(seed: int = 0, duration: float = 120.0) -> list:
    """Simulate the training set and cut it into keyframe sequences."""
    out = []
    for cfg in training_configs(seed, duration):
        stream = simulate(cfg)
        out.append(build_sequence(stream, cfg.label, cfg.terrain[0].label, f"{cfg.payload.mass_at(0.0):g}"))
    return out
