"""Neural leg-kinematics model with a small online-adapted layer.

Dataflow for a standardized window ``I`` (102 = 3 stacked 34-channel frames)::

    alpha = tanh(W2 tanh(W1 I + b1) + b2)            20   shared features
    beta1 = tanh(Ws alpha + bs)                        16   static motion
    beta2 = tanh(Wa alpha + ba)                         8   adaptive motion (online)
    c     = sigmoid(Wc beta1 + bc)                      4   contact scores
    xi    = Wt [beta1, beta2] + bt                      6   twist [omega, v]

``m_on`` packs ``Wa`` (8x20, row-major) followed by ``ba``: 168 numbers.
Everything else lives in the flat ``m_off`` vector in the order of
``OFFLINE_LAYOUT``. All functions take a leading batch axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FRAME_DIM = 34
WINDOW = 3
INPUT_DIM = FRAME_DIM * WINDOW
HIDDEN, FEATURE, STATIC, ADAPTIVE, CONTACTS, TWIST = 64, 20, 16, 8, 4, 6
ONLINE_DIM = ADAPTIVE * FEATURE + ADAPTIVE
# channel slices inside one 34-vector frame
ACCEL, GYRO, ANGLES, TORQUES, FORCES = slice(0, 3), slice(3, 6), slice(6, 18), slice(18, 30), slice(30, 34)
TACTILE = np.r_[18:34]
STD_FLOOR = 1e-6
MODEL_SCHEMA = "tactile-lio/model/1"

OFFLINE_LAYOUT = (
    ("W1", (HIDDEN, INPUT_DIM)),
    ("b1", (HIDDEN,)),
    ("W2", (FEATURE, HIDDEN)),
    ("b2", (FEATURE,)),
    ("Ws", (STATIC, FEATURE)),
    ("bs", (STATIC,)),
    ("Wc", (CONTACTS, STATIC)),
    ("bc", (CONTACTS,)),
    ("Wt", (TWIST, STATIC + ADAPTIVE)),
    ("bt", (TWIST,)),
)
OFFLINE_DIM = sum(int(np.prod(s)) for _, s in OFFLINE_LAYOUT)
FAN_IN = {"W1": INPUT_DIM, "b1": INPUT_DIM, "W2": HIDDEN, "b2": HIDDEN, "Ws": FEATURE, "bs": FEATURE,
          "Wc": STATIC, "bc": STATIC, "Wt": STATIC + ADAPTIVE, "bt": STATIC + ADAPTIVE}


class ShapeMismatch(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


def unpack_offline(m_off: np.ndarray) -> dict:
    m_off = np.asarray(m_off, dtype=float)
    if m_off.shape != (OFFLINE_DIM,):
        raise ShapeMismatch(f"m_off must have {OFFLINE_DIM} entries, got {m_off.shape}")
    out, i = {}, 0
    for name, shape in OFFLINE_LAYOUT:
        n = int(np.prod(shape))
        out[name] = m_off[i : i + n].reshape(shape)
        i += n
    return out


def unpack_online(m_on: np.ndarray):
    m_on = np.asarray(m_on, dtype=float)
    if m_on.shape != (ONLINE_DIM,):
        raise ShapeMismatch(f"m_on must have {ONLINE_DIM} entries, got {m_on.shape}")
    return m_on[: ADAPTIVE * FEATURE].reshape(ADAPTIVE, FEATURE), m_on[ADAPTIVE * FEATURE :]


def init_params(seed: int):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 100]))
    parts = []
    for name, shape in OFFLINE_LAYOUT:
        bound = 1.0 / np.sqrt(FAN_IN[name])
        parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    bound = 1.0 / np.sqrt(FEATURE)
    return np.concatenate(parts), rng.uniform(-bound, bound, size=ONLINE_DIM)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray  # (34,)
    std: np.ndarray  # (34,)

    @classmethod
    def fit(cls, frames: np.ndarray, tactile: bool = True) -> "Standardizer":
        frames = np.asarray(frames, dtype=float)
        if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
            raise ShapeMismatch("standardizer needs (n, 34) frames")
        mean = frames.mean(axis=0)
        std = np.maximum(frames.std(axis=0), STD_FLOOR)
        if not tactile:
            mean[TACTILE] = 0.0
            std[TACTILE] = 1.0
        return cls(mean, std)

    def apply(self, frames):
        return (np.asarray(frames, dtype=float) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def build_window(frames, standardizer: Standardizer, timestamps=None) -> np.ndarray:
    """Stack the last three frames newest-first after standardization.

    ``frames`` is chronological, shape (n, 34) with n >= 3.
    """
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 2 or frames.shape[0] < WINDOW:
        raise InsufficientHistory(f"need {WINDOW} frames, got {frames.shape[0] if frames.ndim == 2 else 0}")
    if frames.shape[1] != FRAME_DIM:
        raise ShapeMismatch("frames must have 34 channels")
    if timestamps is not None and np.any(np.diff(np.asarray(timestamps, dtype=float)[-WINDOW:]) <= 0):
        raise ValueError("window timestamps must be strictly increasing")
    return standardizer.apply(frames[-WINDOW:][::-1]).reshape(INPUT_DIM)


def stack_windows(z: np.ndarray) -> np.ndarray:
    """All windows of a standardized chronological frame sequence; row i ends at frame i+2."""
    z = np.asarray(z, dtype=float)
    if z.shape[0] < WINDOW:
        raise InsufficientHistory("sequence shorter than one window")
    return np.concatenate([z[2:], z[1:-1], z[:-2]], axis=1)


@dataclass
class ForwardCache:
    window: np.ndarray
    h1: np.ndarray
    alpha: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    contact: np.ndarray
    twist: np.ndarray
    params: dict = field(repr=False)
    Wa: np.ndarray = field(repr=False)


def _as_batch(window):
    w = np.asarray(window, dtype=float)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    if w.shape[1] != INPUT_DIM:
        raise ShapeMismatch(f"window must have {INPUT_DIM} entries")
    return w, single


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def forward(window, m_off, m_on) -> ForwardCache:
    w, _ = _as_batch(window)
    p = unpack_offline(m_off)
    Wa, ba = unpack_online(m_on)
    h1 = np.tanh(w @ p["W1"].T + p["b1"])
    alpha = np.tanh(h1 @ p["W2"].T + p["b2"])
    beta1 = np.tanh(alpha @ p["Ws"].T + p["bs"])
    beta2 = np.tanh(alpha @ Wa.T + ba)
    contact = _sigmoid(beta1 @ p["Wc"].T + p["bc"])
    twist = np.concatenate([beta1, beta2], axis=1) @ p["Wt"].T + p["bt"]
    return ForwardCache(w, h1, alpha, beta1, beta2, contact, twist, p, Wa)


def forward_each(window, m_off, m_on_rows) -> ForwardCache:
    """Forward pass where every window carries its own online parameters.

    The cache feeds ``twist_jacobian_batch``; ``backward`` expects a single
    shared ``m_on`` and must not be used on it.
    """
    w, _ = _as_batch(window)
    m_on_rows = np.atleast_2d(np.asarray(m_on_rows, dtype=float))
    if m_on_rows.shape != (w.shape[0], ONLINE_DIM):
        raise ShapeMismatch(f"need one {ONLINE_DIM}-vector of online parameters per window")
    p = unpack_offline(m_off)
    Wa = m_on_rows[:, : ADAPTIVE * FEATURE].reshape(-1, ADAPTIVE, FEATURE)
    ba = m_on_rows[:, ADAPTIVE * FEATURE :]
    h1 = np.tanh(w @ p["W1"].T + p["b1"])
    alpha = np.tanh(h1 @ p["W2"].T + p["b2"])
    beta1 = np.tanh(alpha @ p["Ws"].T + p["bs"])
    beta2 = np.tanh(np.einsum("bkf,bf->bk", Wa, alpha) + ba)
    contact = _sigmoid(beta1 @ p["Wc"].T + p["bc"])
    twist = np.concatenate([beta1, beta2], axis=1) @ p["Wt"].T + p["bt"]
    return ForwardCache(w, h1, alpha, beta1, beta2, contact, twist, p, Wa)


def predict(window, m_off, m_on):
    """Twist (6,) or (B,6) and contact scores for one window or a batch."""
    _, single = _as_batch(window)
    c = forward(window, m_off, m_on)
    if single:
        return c.twist[0], c.contact[0]
    return c.twist, c.contact


@dataclass
class Gradients:
    m_off: np.ndarray
    m_on: np.ndarray
    window: np.ndarray | None = None


def backward(cache: ForwardCache, g_twist, g_contact=None, g_beta2=None, want_window=False) -> Gradients:
    """Reverse-mode gradients summed over the batch.

    ``g_twist`` (B,6) and ``g_contact`` (B,4) are dL/dxi and dL/dc;
    ``g_beta2`` (B,8) lets losses act on the adaptive features directly.
    """
    p = cache.params
    B = cache.alpha.shape[0]
    g_twist = np.asarray(g_twist, dtype=float).reshape(B, TWIST)
    g_contact = np.zeros((B, CONTACTS)) if g_contact is None else np.asarray(g_contact, dtype=float).reshape(B, CONTACTS)
    g = {}
    cat = np.concatenate([cache.beta1, cache.beta2], axis=1)
    g["Wt"] = g_twist.T @ cat
    g["bt"] = g_twist.sum(axis=0)
    g_cat = g_twist @ p["Wt"]
    g_b1 = g_cat[:, :STATIC]
    g_b2 = g_cat[:, STATIC:]
    if g_beta2 is not None:
        g_b2 = g_b2 + np.asarray(g_beta2, dtype=float).reshape(B, ADAPTIVE)
    g_zc = g_contact * cache.contact * (1.0 - cache.contact)
    g["Wc"] = g_zc.T @ cache.beta1
    g["bc"] = g_zc.sum(axis=0)
    g_b1 = g_b1 + g_zc @ p["Wc"]
    g_zs = g_b1 * (1.0 - cache.beta1**2)
    g["Ws"] = g_zs.T @ cache.alpha
    g["bs"] = g_zs.sum(axis=0)
    g_za = g_b2 * (1.0 - cache.beta2**2)
    g_Wa = g_za.T @ cache.alpha
    g_ba = g_za.sum(axis=0)
    g_alpha = g_zs @ p["Ws"] + g_za @ cache.Wa
    g_z2 = g_alpha * (1.0 - cache.alpha**2)
    g["W2"] = g_z2.T @ cache.h1
    g["b2"] = g_z2.sum(axis=0)
    g_z1 = (g_z2 @ p["W2"]) * (1.0 - cache.h1**2)
    g["W1"] = g_z1.T @ cache.window
    g["b1"] = g_z1.sum(axis=0)
    g_off = np.concatenate([g[name].ravel() for name, _ in OFFLINE_LAYOUT])
    g_on = np.concatenate([g_Wa.ravel(), g_ba])
    g_win = g_z1 @ p["W1"] if want_window else None
    return Gradients(g_off, g_on, g_win)


def twist_jacobian_batch(cache: ForwardCache) -> np.ndarray:
    """d xi / d m_on for every window in the cache, shape (B, 6, 168).

    Row k repeats exactly the arithmetic of ``backward`` with upstream e_k.
    """
    Wt_a = cache.params["Wt"][:, STATIC:]  # (6, 8)
    g_za = Wt_a[None, :, :] * (1.0 - cache.beta2**2)[:, None, :]  # (B, 6, 8)
    g_Wa = g_za[..., :, None] * cache.alpha[:, None, None, :]  # (B, 6, 8, 20)
    B = cache.alpha.shape[0]
    return np.concatenate([g_Wa.reshape(B, TWIST, ADAPTIVE * FEATURE), g_za], axis=2)


def twist_jacobian(window, m_off, m_on) -> np.ndarray:
    return twist_jacobian_batch(forward(np.asarray(window).reshape(1, INPUT_DIM), m_off, m_on))[0]


@dataclass
class NeuralModel:
    """Serializable bundle: architecture, standardizer, parameters, labels."""

    m_off: np.ndarray
    m_on: dict  # sequence id -> (168,)
    standardizer: Standardizer
    tactile: bool = True
    nominal: str = ""
    labels: dict = field(default_factory=dict)  # sequence id -> {"terrain": .., "payload": ..}
    report: dict = field(default_factory=dict)

    def initial_online(self, sequence: str | None = None) -> np.ndarray:
        key = sequence or self.nominal or next(iter(self.m_on))
        return np.array(self.m_on[key], dtype=float)

    def to_dict(self) -> dict:
        return {
            "schema": MODEL_SCHEMA,
            "architecture": {
                "activation": "tanh",
                "frame_dim": FRAME_DIM,
                "window": WINDOW,
                "offline_layout": [[n, list(s)] for n, s in OFFLINE_LAYOUT],
                "online": [[ADAPTIVE, FEATURE], [ADAPTIVE]],
            },
            "tactile": self.tactile,
            "nominal": self.nominal,
            "standardizer": self.standardizer.to_dict(),
            "m_off": [float(x) for x in self.m_off],
            "m_on": {k: [float(x) for x in v] for k, v in self.m_on.items()},
            "labels": self.labels,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeuralModel":
        if d.get("schema") != MODEL_SCHEMA:
            raise ValueError(f"unsupported model schema {d.get('schema')!r}")
        layout = [(n, tuple(s)) for n, s in d["architecture"]["offline_layout"]]
        if layout != list(OFFLINE_LAYOUT):
            raise ShapeMismatch("model blob architecture differs from this build")
        m_off = np.asarray(d["m_off"], dtype=float)
        unpack_offline(m_off)
        m_on = {k: np.asarray(v, dtype=float) for k, v in d["m_on"].items()}
        for v in m_on.values():
            unpack_online(v)
        return cls(m_off, m_on, Standardizer.from_dict(d["standardizer"]), bool(d["tactile"]),
                   d.get("nominal", ""), d.get("labels", {}), d.get("report", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "NeuralModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
