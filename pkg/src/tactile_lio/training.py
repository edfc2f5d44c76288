"""Offline multi-sequence training with shared offline and per-sequence online parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import TrainingSequence
from .evaluation.metrics import TooShort, Trajectory, relative_errors
from .lie import se3_exp
from .network import NeuralModel, Standardizer, backward, forward, init_params
from .sim.gait import BASE_RATE

log = logging.getLogger(__name__)
BCE_CLIP = 1e-7


class Divergence(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    contact: float = 5.0  # w1
    regularization: float = 1e-3  # w2
    rotation: float = 200.0  # w3

    def __post_init__(self):
        if min(self.contact, self.regularization, self.rotation) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2500
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 50
    holdout: float = 0.1
    seed: int = 0
    tactile: bool = True
    nominal: str = ""
    weights: LossWeights = field(default_factory=LossWeights)


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class LossParts:
    total: float
    twist: float
    contact: float
    regularization: float


def sequence_loss(windows, twists, contacts, m_off, m_on, weights: LossWeights = LossWeights()):
    """Composite loss of one mini-batch and its exact gradients.

    Twist error is ``|dv|^2 + w3 |domega|^2`` per sample (twist order is
    [omega, v]); contact error is clipped binary cross-entropy averaged over
    samples and feet; the regularizer is the mean squared norm of the
    adaptive features.
    """
    windows = np.atleast_2d(windows)
    n = windows.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    cache = forward(windows, m_off, m_on)
    d = cache.twist - np.atleast_2d(twists)
    e_twist = np.sum(d[:, 3:] ** 2) / n + weights.rotation * np.sum(d[:, :3] ** 2) / n
    y = np.atleast_2d(contacts)
    c = cache.contact
    cc = np.clip(c, BCE_CLIP, 1 - BCE_CLIP)
    e_contact = -np.sum(y * np.log(cc) + (1 - y) * np.log(1 - cc)) / (4 * n)
    e_reg = np.sum(cache.beta2**2) / n
    total = e_twist + weights.contact * e_contact + weights.regularization * e_reg

    g_twist = 2.0 * d / n
    g_twist[:, :3] *= weights.rotation
    inside = (c > BCE_CLIP) & (c < 1 - BCE_CLIP)
    g_contact = weights.contact * inside * (-(y / cc) + (1 - y) / (1 - cc)) / (4 * n)
    g_beta2 = weights.regularization * 2.0 * cache.beta2 / n
    grads = backward(cache, g_twist, g_contact, g_beta2)
    return LossParts(float(total), float(e_twist), float(e_contact), float(e_reg)), grads


def integrate_twists(twists: np.ndarray, dt: np.ndarray):
    """Chain exp(xi dt) from the identity; returns (N+1) rotations and positions."""
    R = np.eye(3)
    p = np.zeros(3)
    Rs, ps = [R], [p]
    dR, dp = se3_exp(twists * dt[:, None])
    for k in range(twists.shape[0]):
        p = p + R @ dp[k]
        R = R @ dR[k]
        Rs.append(R)
        ps.append(p)
    return np.array(Rs), np.array(ps)


def model_view(model: NeuralModel, seq: TrainingSequence) -> TrainingSequence:
    """The sequence as the model is allowed to see it."""
    return seq if model.tactile else seq.without_tactile()


def _network_trajectories(model: NeuralModel, seq: TrainingSequence, idx: np.ndarray, m_on=None):
    """Predicted and reference trajectories over a contiguous window range."""
    seq = model_view(model, seq)
    m_on = model.initial_online(seq.name) if m_on is None else m_on
    windows = seq.windows(model.standardizer)[idx]
    pred = forward(windows, model.m_off, m_on).twist
    ticks = seq.ticks[idx + 2]
    dt = (ticks - seq.ticks[idx + 1]) / BASE_RATE
    times = np.concatenate([[seq.ticks[idx[0] + 1]], ticks]) / BASE_RATE
    Re, pe = integrate_twists(pred, dt)
    Rr, pr = integrate_twists(seq.twists[idx], dt)
    return Trajectory(times, Re, pe), Trajectory(times, Rr, pr)


def evaluate_network_rte(model: NeuralModel, sequences, split: str = "validation", holdout: float = 0.1, segment: float = 1.0):
    """Translational (m) and rotational (deg) RTE per segment of network-only dead reckoning.

    Segment errors are pooled over all sequences that are long enough.
    """
    trans, rot = [], []
    for seq in sequences:
        train, val = seq.split(holdout)
        idx = val if split == "validation" else train
        est, ref = _network_trajectories(model, seq, idx)
        try:
            te, re = relative_errors(est, ref, segment)
        except TooShort:
            continue
        trans.append(te)
        rot.append(re)
    if not trans:
        raise ValueError("no sequence long enough for one RTE segment")
    trans, rot = np.concatenate(trans), np.concatenate(rot)
    return {"t_rte": {"mean": float(trans.mean()), "std": float(trans.std())},
            "r_rte": {"mean": float(rot.mean()), "std": float(rot.std())}}


def contact_accuracy(model: NeuralModel, sequences, holdout: float = 0.1) -> float:
    hits, total = 0, 0
    for seq in sequences:
        _, val = seq.split(holdout)
        windows = model_view(model, seq).windows(model.standardizer)[val]
        c = forward(windows, model.m_off, model.initial_online(seq.name)).contact
        hits += int(np.sum((c > 0.5) == (seq.contacts[val] > 0.5)))
        total += c.size
    return hits / total


def _batches(rng, n, size):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def train_offline(sequences, config: TrainConfig = TrainConfig(), progress=None) -> NeuralModel:
    """Round-robin Adam over sequences; every batch holds windows of one sequence."""
    if len(sequences) < 2:
        raise ValueError("offline training needs at least two sequences")
    labels = {(s.terrain, s.payload) for s in sequences}
    if len(labels) < 2:
        raise ValueError("sequences must differ in terrain or payload")
    names = [s.name for s in sequences]
    if len(set(names)) != len(names):
        raise ValueError("sequence names must be unique")
    if not config.tactile:
        sequences = [s.without_tactile() for s in sequences]

    splits = [s.split(config.holdout) for s in sequences]
    fit_frames = np.concatenate([s.frames[: tr[-1] + 3] for s, (tr, _) in zip(sequences, splits)])
    standardizer = Standardizer.fit(fit_frames, tactile=config.tactile)
    windows = [s.windows(standardizer) for s in sequences]

    m_off, m_on0 = init_params(config.seed)
    m_on = [m_on0.copy() for _ in sequences]
    opt_off = Adam(m_off.size, config.lr, config.beta1, config.beta2, config.eps)
    opt_on = [Adam(m_on0.size, config.lr, config.beta1, config.beta2, config.eps) for _ in sequences]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 200]))

    epoch_loss = []
    for epoch in range(config.epochs):
        plan = [_batches(rng, tr.size, config.batch) for tr, _ in splits]
        total, count = 0.0, 0
        for b in range(max(len(p) for p in plan)):
            for n, seq in enumerate(sequences):
                if b >= len(plan[n]):
                    continue
                idx = splits[n][0][plan[n][b]]
                parts, grads = sequence_loss(windows[n][idx], seq.twists[idx], seq.contacts[idx], m_off, m_on[n], config.weights)
                if not np.isfinite(parts.total):
                    raise Divergence(f"non-finite loss at epoch {epoch + 1}")
                m_off = opt_off.step(m_off, grads.m_off)
                m_on[n] = opt_on[n].step(m_on[n], grads.m_on)
                total += parts.total
                count += 1
        epoch_loss.append(total / count)
        if progress is not None:
            progress(epoch, epoch_loss[-1])
        if (epoch + 1) % 250 == 0:
            log.info("epoch %d loss %.5f", epoch + 1, epoch_loss[-1])

    nominal = config.nominal or names[0]
    model = NeuralModel(
        m_off=m_off,
        m_on={s.name: m for s, m in zip(sequences, m_on)},
        standardizer=standardizer,
        tactile=config.tactile,
        nominal=nominal,
        labels={s.name: {"terrain": s.terrain, "payload": s.payload} for s in sequences},
    )
    model.report = {"epoch_loss": epoch_loss, "seed": config.seed, "epochs": config.epochs}
    return model


def smoothed(values, window: int = 100) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    window = max(1, min(window, values.size))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")
