"""Scenario configuration (JSON, schema ``tactile-lio/scenario/1``)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..kinematics import LegModel

SCHEMA = "tactile-lio/scenario/1"
GRAVITY = 9.81
# tangent-space order used everywhere: rotation first
AXES = ("Rx", "Ry", "Rz", "Tx", "Ty", "Tz")
TERRAIN_KINDS = ("rigid", "deformable", "slippery-patch")


@dataclass(frozen=True)
class TerrainProfile:
    kind: str = "rigid"
    slip_gain: float = 0.0  # stance-foot tangential drift per unit body speed
    sinkage: float = 0.0  # m of vertical penetration per stance
    force_scale: float = 1.0  # multiplier on nominal stance force
    friction: float = 0.0  # sliding-friction signature seen by the feet while slipping
    patch_length: float = 1.5  # m, mean patch / gap length for slippery-patch terrain

    def __post_init__(self):
        if self.kind not in TERRAIN_KINDS:
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        if not 0.0 <= self.slip_gain <= 0.5:
            raise ValueError("slip gain must lie in [0, 0.5]")
        if not 0.0 <= self.sinkage <= 0.05:
            raise ValueError("sinkage must lie in [0, 0.05] m")
        if self.kind == "rigid" and (self.slip_gain or self.sinkage):
            raise ValueError("rigid terrain cannot slip or sink")
        if self.force_scale <= 0 or self.patch_length <= 0:
            raise ValueError("force scale and patch length must be positive")


@dataclass(frozen=True)
class TerrainSegment:
    start: float
    profile: TerrainProfile
    label: str = ""


@dataclass(frozen=True)
class PayloadSchedule:
    steps: tuple = ()  # ((time s, added mass kg), ...)

    def __post_init__(self):
        times = [t for t, _ in self.steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("payload times must be strictly increasing")
        if any(not 0.0 <= m <= 5.0 for _, m in self.steps):
            raise ValueError("payload masses must lie in [0, 5] kg")

    def mass_at(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for start, mass in self.steps:
            out = np.where(t >= start - 1e-12, mass, out)
        return out


@dataclass(frozen=True)
class DegeneracySchedule:
    intervals: tuple = ()  # ((start s, end s, ("Tx", ...)), ...)

    def __post_init__(self):
        spans = sorted((a, b) for a, b, _ in self.intervals)
        for (a0, b0), (a1, _) in zip(spans, spans[1:]):
            if a1 < b0:
                raise ValueError("degeneracy intervals overlap")
        for a, b, axes in self.intervals:
            if b <= a:
                raise ValueError("degeneracy interval must have end > start")
            unknown = set(axes) - set(AXES)
            if unknown:
                raise ValueError(f"unknown axes {sorted(unknown)}")

    def observed_at(self, t) -> np.ndarray:
        """Boolean (..., 6) mask of LiDAR-observed tangent axes."""
        t = np.asarray(t, dtype=float)
        out = np.ones(t.shape + (6,), dtype=bool)
        for a, b, axes in self.intervals:
            inside = (t >= a - 1e-9) & (t < b - 1e-9)
            for ax in axes:
                out[..., AXES.index(ax)] &= ~inside
        return out


@dataclass(frozen=True)
class GaitConfig:
    period: float = 0.4
    duty: float = 0.5
    body_height: float = 0.30
    swing_height: float = 0.08


@dataclass(frozen=True)
class MotionProfile:
    """Piecewise-linear body commands; ``kind='random'`` draws knots from the seed."""

    kind: str = "random"
    speed: tuple = ()  # ((t, forward m/s), ...)
    lateral: tuple = ()
    yaw_rate: tuple = ()
    min_speed: float = 0.2
    max_speed: float = 1.2
    stop_probability: float = 0.12
    max_lateral: float = 0.15
    max_yaw_rate: float = 0.5
    knot_spacing: float = 3.0


@dataclass(frozen=True)
class NoiseConfig:
    accel: float = 0.02
    gyro: float = 0.002
    bias_rw: float = 1e-4  # per sqrt(s)
    accel_bias0: float = 0.01
    gyro_bias0: float = 0.001
    encoder: float = 1e-3
    encoder_velocity: float = 0.02
    force: float = 2.0
    grf: float = 1.0
    torque: float = 0.05
    lidar_trans: float = 0.01
    lidar_rot: float = 0.002

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(**{k: 0.0 for k in asdict(cls())})


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 60.0
    seed: int = 0
    label: str = "scenario"
    base_mass: float = 15.0
    gait: GaitConfig = field(default_factory=GaitConfig)
    motion: MotionProfile = field(default_factory=MotionProfile)
    terrain: tuple = (TerrainSegment(0.0, TerrainProfile(), "rigid"),)
    payload: PayloadSchedule = field(default_factory=PayloadSchedule)
    degeneracy: DegeneracySchedule = field(default_factory=DegeneracySchedule)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    leg_model: LegModel = field(default_factory=LegModel)
    lidar_rate: float = 10.0

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=int(seed))

    def terrain_index(self, t) -> np.ndarray:
        starts = np.array([s.start for s in self.terrain])
        return np.clip(np.searchsorted(starts, np.asarray(t) + 1e-9, side="right") - 1, 0, None)

    def terrain_label(self, t) -> np.ndarray:
        labels = np.array([s.label or s.profile.kind for s in self.terrain])
        return labels[self.terrain_index(t)]

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "duration": self.duration,
            "seed": self.seed,
            "label": self.label,
            "base_mass": self.base_mass,
            "lidar_rate": self.lidar_rate,
            "gait": asdict(self.gait),
            "motion": {k: [list(x) for x in v] if isinstance(v, tuple) else v for k, v in asdict(self.motion).items()},
            "terrain": [{"start": s.start, "label": s.label, **asdict(s.profile)} for s in self.terrain],
            "payload": [list(s) for s in self.payload.steps],
            "degeneracy": [[a, b, list(ax)] for a, b, ax in self.degeneracy.intervals],
            "noise": asdict(self.noise),
            "leg_model": self.leg_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        schema = d.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise ValueError(f"unsupported scenario schema {schema!r}")
        motion = dict(d.get("motion", {}))
        for key in ("speed", "lateral", "yaw_rate"):
            if key in motion:
                motion[key] = tuple(tuple(map(float, k)) for k in motion[key])
        terrain = []
        for seg in d.get("terrain", [{"start": 0.0, "kind": "rigid"}]):
            seg = dict(seg)
            start = float(seg.pop("start", 0.0))
            label = seg.pop("label", "")
            terrain.append(TerrainSegment(start, TerrainProfile(**seg), label))
        noise = d.get("noise", {})
        return cls(
            duration=float(d.get("duration", 60.0)),
            seed=int(d.get("seed", 0)),
            label=d.get("label", "scenario"),
            base_mass=float(d.get("base_mass", 15.0)),
            lidar_rate=float(d.get("lidar_rate", 10.0)),
            gait=GaitConfig(**d.get("gait", {})),
            motion=MotionProfile(**motion),
            terrain=tuple(sorted(terrain, key=lambda s: s.start)),
            payload=PayloadSchedule(tuple((float(t), float(m)) for t, m in d.get("payload", []))),
            degeneracy=DegeneracySchedule(
                tuple((float(a), float(b), tuple(ax)) for a, b, ax in d.get("degeneracy", []))
            ),
            noise=NoiseConfig.zero() if noise == "none" else NoiseConfig(**noise),
            leg_model=LegModel.from_dict(d.get("leg_model")),
        )

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
