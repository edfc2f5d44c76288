"""Fixed-lag Levenberg-Marquardt smoother over [pose, velocity, bias, m_on] states.

The normal equations are never formed densely. Each keyframe state has 15
robot dimensions and, when online learning is on, 168 network parameters.
The Hessian is split as

    H = H_robot (+) (A kron I_168) + U U^T

where ``H_robot`` collects every factor that touches only robot variables,
``A`` is the scalar chain matrix of the transition and fixation factors
(identical for every parameter coordinate), and the columns of ``U`` are the
whitened Jacobian rows of the factors that couple robot and network
variables (leg factors and the marginalization prior). The step is solved
with the Woodbury identity, which needs only a 15N Cholesky factor, an N x N
chain inverse and a dense system the size of ``U``'s column count.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, cholesky_banded

from ..lie import se3_exp, se3_log, se3_right_jacobian_inv, compose, inverse
from ..network import ONLINE_DIM
from .covariance import LegResidualWindow
from .factors import body_velocity_residual, leg_factor_residual, pose_observation_residual
from .preintegration import PreintegratedImu, imu_residual, stack

log = logging.getLogger(__name__)
ROBOT = 15  # [phi, rho, v, b_a, b_g]
SMOOTHER_SCHEMA = "tactile-lio/smoother/1"


class SolverFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SmootherConfig:
    lag: float = 6.0
    sigma_walk: float = 0.05
    sigma_fix: float = 1.0
    fix_tighten: float = 10.0
    fixation_anchor: str = "offline"  # or "marginalized": follow the newest marginalized m_on
    window: int = 15
    variance_floor: float = 1e-8
    leg_sigma0: tuple = (0.01, 0.01, 0.01, 0.02, 0.02, 0.02)  # per keyframe step, rad then m
    accel_noise: float = 0.02
    gyro_noise: float = 0.002
    bias_walk: float = 1e-4
    lidar_rot: float = 0.002
    lidar_trans: float = 0.01
    prior_rot: float = 0.002
    prior_trans: float = 0.01
    prior_vel: float = 0.05
    prior_accel_bias: float = 0.02
    prior_gyro_bias: float = 0.002
    velocity_sigma: float = 0.05
    max_iterations: int = 20
    rel_tol: float = 1e-6
    abs_tol: float = 1e-12  # stop once the model predicts less decrease than this
    lambda0: float = 1e-8
    lambda_max: float = 1e10

    def to_dict(self):
        out = asdict(self)
        out["leg_sigma0"] = list(self.leg_sigma0)
        out["schema"] = SMOOTHER_SCHEMA
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", SMOOTHER_SCHEMA)
        if schema != SMOOTHER_SCHEMA:
            raise ValueError(f"unsupported smoother schema {schema!r}")
        if "leg_sigma0" in d:
            d["leg_sigma0"] = tuple(d["leg_sigma0"])
        return cls(**d)


@dataclass
class Node:
    t: float
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    b: np.ndarray
    m: np.ndarray | None
    pim: PreintegratedImu | None = None  # interval ending here
    obs: tuple | None = None  # (R, p, mask)
    leg_row: int | None = None
    leg_dt: float = 0.0
    leg_sigma: np.ndarray | None = None
    velocity: np.ndarray | None = None  # body-frame leg velocity
    fix_sigma: float = 1.0
    prior: tuple | None = None  # (R, p, v, b) of the initial prior
    imu_whitener: np.ndarray | None = None

    def copy(self):
        out = Node(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.R, out.p, out.v, out.b = self.R.copy(), self.p.copy(), self.v.copy(), self.b.copy()
        out.m = None if self.m is None else self.m.copy()
        return out


@dataclass
class Factor:
    label: str
    r: np.ndarray
    robot: list = field(default_factory=list)  # [(node, J rows x 15)]
    m: tuple | None = None  # (node, J rows x 168)
    chain: tuple | None = None  # ("walk", i, j, w) or ("fix", i, w)


@dataclass
class MarginalPrior:
    M: np.ndarray  # (k, D)
    c: np.ndarray  # (k,)
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    b: np.ndarray
    m: np.ndarray | None


class FixedLagSmoother:
    """Keyframe-by-keyframe smoother.

    ``twist`` maps (window rows, per-row m_on) to twists and d xi / d m_on;
    without it there is no leg factor. ``learn`` makes m_on a variable;
    otherwise every leg factor uses the fixed ``m0``. ``velocity_factor``
    turns on the conventional body-velocity factor.
    """

    def __init__(self, config: SmootherConfig = SmootherConfig(), twist=None, m0=None, learn: bool = True):
        self.cfg = config
        self.twist = twist
        self.learn = bool(learn and twist is not None)
        self.m0 = None if m0 is None else np.asarray(m0, dtype=float).copy()
        if twist is not None and self.m0 is None:
            raise ValueError("a twist model needs initial online parameters")
        if config.fixation_anchor not in ("offline", "marginalized"):
            raise ValueError(f"unknown fixation anchor {config.fixation_anchor!r}")
        self.anchor = None if self.m0 is None else self.m0.copy()
        self.nodes: list[Node] = []
        self.marginal: MarginalPrior | None = None
        self.window = LegResidualWindow(config.window, config.variance_floor)
        self.leg_var = np.asarray(config.leg_sigma0, dtype=float) ** 2
        self.last_iterations = 0
        self.last_leg_residual = np.zeros(6)
        self._report = None

    @property
    def dm(self):
        return ONLINE_DIM if self.learn else 0

    # ------------------------------------------------------------ public API

    def add_keyframe(self, t, pim=None, obs=None, leg_row=None, leg_dt=0.0, velocity=None):
        """Insert the keyframe at time ``t``, optimize and marginalize."""
        cfg = self.cfg
        masked = obs is None or not np.any(obs[2])
        fix_sigma = cfg.sigma_fix / (cfg.fix_tighten if masked else 1.0)
        if not self.nodes:
            if obs is None:
                R0, p0 = np.eye(3), np.zeros(3)
            else:
                R0, p0 = obs[0].copy(), obs[1].copy()
            node = Node(t, R0, p0, np.zeros(3), np.zeros(6), None if not self.learn else self.m0.copy(),
                        obs=obs, fix_sigma=fix_sigma, prior=(R0.copy(), p0.copy(), np.zeros(3), np.zeros(6)))
        else:
            if pim is None:
                raise ValueError("every keyframe after the first needs its IMU interval")
            prev = self.nodes[-1]
            R, p, v = pim.predict(prev.R, prev.p, prev.v, prev.b)
            node = Node(t, R, p, v, prev.b.copy(), None if prev.m is None else prev.m.copy(), pim=pim, obs=obs,
                        fix_sigma=fix_sigma, velocity=velocity, imu_whitener=_whitener(pim.cov))
            if self.twist is not None and leg_row is not None:
                node.leg_row, node.leg_dt, node.leg_sigma = int(leg_row), float(leg_dt), np.sqrt(self.leg_var)
        self.nodes.append(node)
        self.optimize()
        if node.leg_row is not None:
            r = self.prediction_residual()
            self.last_leg_residual = r
            # until the window spans the full lag the LiDAR cannot yet contradict the
            # leg chain, residuals come out near zero and the variance would lock at the floor
            full = self.nodes[-1].t - self.nodes[0].t >= cfg.lag - 1e-9
            reliable = np.zeros(6, bool) if obs is None or not full else np.asarray(obs[2], bool)
            self.window.push(r, reliable)
            self.leg_var = self.window.variances(self.leg_var)
        while len(self.nodes) > 2 and self.nodes[-1].t - self.nodes[0].t > cfg.lag + 1e-9:
            self._marginalize_oldest()
        return self.nodes[-1]

    def online_parameters(self, node: Node):
        return node.m if self.learn else self.m0

    def leg_residuals(self, nodes):
        """Unwhitened leg residuals, one row per node that has a leg factor."""
        idx = [k for k, n in enumerate(nodes) if n.leg_row is not None and k > 0]
        if not idx:
            return np.zeros((0, 6))
        xi, _ = self._twists(nodes, idx)
        prev = [nodes[k - 1] for k in idx]
        cur = [nodes[k] for k in idx]
        r, *_ = leg_factor_residual(
            np.array([n.R for n in prev]), np.array([n.p for n in prev]),
            np.array([n.R for n in cur]), np.array([n.p for n in cur]),
            xi, np.array([n.leg_dt for n in cur]),
        )
        return r

    def prediction_residual(self):
        """Newest leg residual at the optimized poses, with m_on carried over from the previous keyframe.

        With online learning the newest m_on can absorb most of its own
        factor's error, so the optimized residual would drive the variance
        estimate towards the floor. The carried-over parameters give the
        network's one-step prediction error instead.
        """
        nodes = self.nodes
        if len(nodes) < 2 or nodes[-1].leg_row is None:
            raise ValueError("the newest keyframe has no leg factor")
        m = self.online_parameters(nodes[-2])
        xi, _ = self.twist(np.array([nodes[-1].leg_row]), m[None])
        a, b = nodes[-2], nodes[-1]
        r, *_ = leg_factor_residual(a.R, a.p, b.R, b.p, xi[0], b.leg_dt)
        return r

    def factor_report(self):
        """Cost and largest whitened residual entry per factor type.

        Describes the window as it stood at the end of the last optimization,
        before any marginalization that followed it.
        """
        if self._report is None:
            self._report = _summary(self._factors(self.nodes, jac=False))
        return self._report

    # ------------------------------------------------------------ factors

    def _twists(self, nodes, idx):
        rows = np.array([nodes[k].leg_row for k in idx])
        m = np.array([self.online_parameters(nodes[k]) for k in idx])
        return self.twist(rows, m)

    def _factors(self, nodes, jac=True, touching=None):
        """Whitened factors; ``touching`` restricts to those involving that node index."""
        cfg = self.cfg
        use = (lambda *ks: True) if touching is None else (lambda *ks: touching in ks)
        out = []
        if nodes[0].prior is not None and use(0):
            out.append(self._initial_prior(nodes[0], jac))
        if self.marginal is not None and use(0):
            out.append(self._marginal_factor(nodes[0], jac))

        idx = [k for k, nd in enumerate(nodes) if nd.obs is not None and np.any(nd.obs[2]) and use(k)]
        if idx:
            sigma = np.repeat([cfg.lidar_rot, cfg.lidar_trans], 3)
            r, J = pose_observation_residual(
                np.array([nodes[k].obs[0] for k in idx]), np.array([nodes[k].obs[1] for k in idx]),
                np.array([nodes[k].R for k in idx]), np.array([nodes[k].p for k in idx]),
                sigma, np.array([nodes[k].obs[2] for k in idx]),
            )
            J = _pad(J)
            for i, k in enumerate(idx):
                out.append(Factor("pose", r[i], [(k, J[i])] if jac else []))

        idx = [k for k, nd in enumerate(nodes) if nd.velocity is not None and use(k)]
        if idx:
            r, Jphi, Jv = body_velocity_residual(
                np.array([nodes[k].R for k in idx]), np.array([nodes[k].v for k in idx]),
                np.array([nodes[k].velocity for k in idx]), cfg.velocity_sigma,
            )
            for i, k in enumerate(idx):
                blocks = []
                if jac:
                    J = np.zeros((3, ROBOT))
                    J[:, 0:3] = Jphi[i]
                    J[:, 6:9] = Jv[i]
                    blocks = [(k, J)]
                out.append(Factor("velocity", r[i], blocks))

        if self.learn:
            for k, node in enumerate(nodes):
                if use(k):
                    w = 1.0 / node.fix_sigma
                    out.append(Factor("fixation", (node.m - self.anchor) * w, chain=("fix", k, w)))
                if k and use(k - 1, k):
                    w = 1.0 / cfg.sigma_walk
                    out.append(Factor("transition", (node.m - nodes[k - 1].m) * w, chain=("walk", k - 1, k, w)))

        idx = [k for k, nd in enumerate(nodes) if k and nd.pim is not None and use(k - 1, k)]
        if idx:
            prev = [nodes[k - 1] for k in idx]
            cur = [nodes[k] for k in idx]
            r, J = imu_residual(
                stack([n.pim for n in cur]),
                np.array([n.R for n in prev]), np.array([n.p for n in prev]), np.array([n.v for n in prev]),
                np.array([n.b for n in prev]),
                np.array([n.R for n in cur]), np.array([n.p for n in cur]), np.array([n.v for n in cur]),
            )
            W = np.array([n.imu_whitener for n in cur])
            r = np.einsum("nij,nj->ni", W, r)
            if jac:
                Ja = W @ np.concatenate([J["pose_i"], J["v_i"], J["b_i"]], axis=-1)
                Jb = W @ np.concatenate([J["pose_j"], J["v_j"], np.zeros(J["b_i"].shape)], axis=-1)
            s = cfg.bias_walk * np.sqrt([n.pim.dt for n in cur])
            rb = (np.array([n.b for n in cur]) - np.array([n.b for n in prev])) / s[:, None]
            Jw = np.zeros((len(idx), 6, ROBOT))
            Jw[:, np.arange(6), 9 + np.arange(6)] = -1.0 / s[:, None]
            for i, k in enumerate(idx):
                out.append(Factor("imu", r[i], [(k - 1, Ja[i]), (k, Jb[i])] if jac else []))
                out.append(Factor("bias", rb[i], [(k - 1, Jw[i]), (k, -Jw[i])] if jac else []))

        leg_idx = [k for k, nd in enumerate(nodes) if k > 0 and nd.leg_row is not None and use(k - 1, k)]
        if leg_idx:
            xi, dxi = self._twists(nodes, leg_idx)
            prev = [nodes[k - 1] for k in leg_idx]
            cur = [nodes[k] for k in leg_idx]
            r, J0, J1, Jx = leg_factor_residual(
                np.array([a.R for a in prev]), np.array([a.p for a in prev]),
                np.array([a.R for a in cur]), np.array([a.p for a in cur]),
                xi, np.array([a.leg_dt for a in cur]),
            )
            w = 1.0 / np.array([a.leg_sigma for a in cur])
            r = w * r
            if jac:
                J0, J1 = _pad(w[..., None] * J0), _pad(w[..., None] * J1)
                if self.learn:
                    Jm = w[..., None] * (Jx @ dxi)
            for i, k in enumerate(leg_idx):
                f = Factor("leg", r[i])
                if jac:
                    f.robot = [(k - 1, J0[i]), (k, J1[i])]
                    if self.learn:
                        f.m = (k, Jm[i])
                out.append(f)
        return out

    def _initial_prior(self, node, jac):
        cfg = self.cfg
        R0, p0, v0, b0 = node.prior
        xi = se3_log(*compose(*inverse(R0, p0), node.R, node.p))
        sig = np.concatenate([np.repeat([cfg.prior_rot, cfg.prior_trans, cfg.prior_vel], 3),
                              np.repeat([cfg.prior_accel_bias, cfg.prior_gyro_bias], 3)])
        r = np.concatenate([xi, node.v - v0, node.b - b0]) / sig
        blocks = []
        if jac:
            J = np.eye(ROBOT)
            J[:6, :6] = se3_right_jacobian_inv(xi)
            blocks = [(0, J / sig[:, None])]
        return Factor("prior", r, blocks)

    def _local(self, node, mp: MarginalPrior):
        xi = se3_log(*compose(*inverse(mp.R, mp.p), node.R, node.p))
        parts = [xi, node.v - mp.v, node.b - mp.b]
        if self.learn:
            parts.append(node.m - mp.m)
        return np.concatenate(parts), xi

    def _marginal_factor(self, node, jac):
        mp = self.marginal
        d, xi = self._local(node, mp)
        r = mp.M @ d + mp.c
        f = Factor("marginal", r)
        if jac:
            J = mp.M.copy()
            J[:, :6] = mp.M[:, :6] @ se3_right_jacobian_inv(xi)
            f.robot = [(0, J[:, :ROBOT])]
            if self.learn:
                f.m = (0, J[:, ROBOT:])
        return f

    # ------------------------------------------------------------ linear algebra

    def _assemble(self, factors, n):
        dm = self.dm
        A = np.zeros((n, n))
        gm = np.zeros((n, dm))
        Hr = _RobotHessian(n)
        gr = np.zeros(ROBOT * n)
        coupling = _Coupling(n)
        walk, fix, robot, coupled = [], [], {}, {}
        for f in factors:
            if f.chain is not None:
                (walk if f.chain[0] == "walk" else fix).append(f)
            elif f.m is not None:
                coupled.setdefault((f.r.size, len(f.robot)), []).append(f)
            else:
                robot.setdefault((f.r.size, len(f.robot)), []).append(f)

        if walk:
            i, j, w = (np.array([f.chain[c] for f in walk]) for c in (1, 2, 3))
            wr = w[:, None] * np.array([f.r for f in walk])
            np.add.at(A, (i, i), w * w)
            np.add.at(A, (j, j), w * w)
            np.add.at(A, (i, j), -w * w)
            np.add.at(A, (j, i), -w * w)
            np.add.at(gm, j, wr)
            np.add.at(gm, i, -wr)
        if fix:
            i, w = (np.array([f.chain[c] for f in fix]) for c in (1, 2))
            np.add.at(A, (i, i), w * w)
            np.add.at(gm, i, w[:, None] * np.array([f.r for f in fix]))

        for group in robot.values():
            first, J, r = _stack(group)
            Jt = J.transpose(0, 2, 1)
            Hr.add(first, Jt @ J)
            np.add.at(gr, _span(first, J.shape[2]), (Jt @ r[..., None])[..., 0])

        Um, s, r_u = [], [], []
        for group in coupled.values():
            first, J, r = _stack(group)
            coupling.add(first, J)
            node = np.array([f.m[0] for f in group])
            Jm = np.array([f.m[1] for f in group])
            np.add.at(gm, node, (Jm.transpose(0, 2, 1) @ r[..., None])[..., 0])
            Um.append(Jm.reshape(-1, dm).T)
            s.append(np.repeat(node, J.shape[1]))
            r_u.append(r.ravel())
        if r_u:
            gr += coupling.matvec(np.concatenate(r_u))
        Um = np.hstack(Um) if Um else np.zeros((dm, 0))
        s = np.concatenate(s) if s else np.zeros(0, dtype=int)
        return _System(_cost(factors), Hr, gr, A, gm, coupling, Um, s, factors)

    def _solve(self, sys: "_System", lam: float):
        n = sys.A.shape[0]
        U = sys.coupling
        k = U.k
        learn = self.learn
        c = sys.cache
        if not c:
            # pieces that depend only on the linearization point, shared by retries
            c["diag_r"] = sys.Hr.diagonal() + U.squared_rows()
            if learn:
                c["select"] = sparse.csr_matrix((np.ones(k), (np.arange(k), sys.s)), shape=(k, n))
                c["curv"] = np.diag(sys.A) + np.bincount(sys.s, np.sum(sys.Um * sys.Um, axis=0), minlength=n) / self.dm
                if k:
                    c["gram"] = sys.Um.T @ sys.Um
        diag_r = c["diag_r"]
        Hr = sys.Hr.damped(lam * diag_r + 1e-12 * (1.0 + diag_r))
        hr_factor = Hr.factor()
        hr_solve = hr_factor.solve

        if learn:
            # per-node scalar keeps the chain block a Kronecker product; it includes
            # the leg curvature so the damping tracks how stiff m_on really is
            curv = c["curv"]
            Ad = sys.A + np.diag(lam * curv)
            Ainv = np.linalg.inv(Ad)

        def h0inv(yr, ym):
            return hr_solve(yr), (Ainv @ ym if learn else ym)

        def ut(xr, xm):
            out = U.rmatvec(xr)
            if learn and k:
                out = out + np.einsum("ak,ka->k", sys.Um, xm[sys.s])
            return out

        def u(y):
            yr = U.matvec(y)
            ym = np.asarray(c["select"].T @ (sys.Um * y).T) if learn and k else np.zeros((n, self.dm))
            return yr, ym

        def hmul(xr, xm):
            yr = Hr.matvec(xr)
            ym = Ad @ xm if learn else xm
            if k:
                a, b = u(ut(xr, xm))
                yr, ym = yr + a, ym + b
            return yr, ym

        if k:
            K = np.eye(k) + U.inverse_gram(hr_factor)
            if learn:
                K += Ainv[np.ix_(sys.s, sys.s)] * c["gram"]
            Kc = cho_factor(K, check_finite=False)  # reads one triangle only

        def solve(br, bm):
            zr, zm = h0inv(br, bm)
            if not k:
                return zr, zm
            y = cho_solve(Kc, ut(zr, zm), check_finite=False)
            cr, cm = h0inv(*u(y))
            return zr - cr, zm - cm

        br, bm = -sys.gr, -sys.gm
        xr, xm = solve(br, bm)
        # one round of iterative refinement against the exact operator
        hr, hm = hmul(xr, xm)
        dr, dmm = solve(br - hr, bm - hm)
        xr, xm = xr + dr, xm + dmm
        # reduction predicted by the undamped quadratic model
        damp = lam * (diag_r @ (xr * xr) + (float(curv @ np.sum(xm * xm, axis=1)) if learn else 0.0))
        pred = 0.5 * (damp - float(sys.gr @ xr) - (float(np.sum(sys.gm * xm)) if learn else 0.0))
        return xr, xm, pred

    def _retract(self, nodes, xr, xm):
        d = xr.reshape(len(nodes), ROBOT)
        dR, dp = se3_exp(d[:, :6])
        out = []
        for k, node in enumerate(nodes):
            nn = copy.copy(node)
            nn.R, nn.p = compose(node.R, node.p, dR[k], dp[k])
            nn.v = node.v + d[k, 6:9]
            nn.b = node.b + d[k, 9:15]
            if self.learn:
                nn.m = node.m + xm[k]
            out.append(nn)
        return out

    def optimize(self):
        cfg = self.cfg
        nodes = self.nodes
        sys = self._assemble(self._factors(nodes), len(nodes))
        if not np.isfinite(sys.cost):
            raise SolverFailure("non-finite cost")
        lam, nu = cfg.lambda0, 2.0
        cost, factors = sys.cost, sys.factors
        it = 0
        while it < cfg.max_iterations:
            it += 1
            xr, xm, pred = self._solve(sys, lam)
            if pred < cfg.abs_tol:
                break  # at the rounding floor; relative tests cannot fire here
            if nu == 2.0 and it > 1 and pred < cfg.rel_tol * cost:
                break  # lightly damped model after an accepted step: nothing left to gain
            trial = self._retract(nodes, xr, xm)
            # Jacobians come along with the trial cost: most steps are accepted
            trial_factors = self._factors(trial)
            trial_cost = _cost(trial_factors)
            if not np.isfinite(trial_cost):
                raise SolverFailure("non-finite cost in a trial step")
            if trial_cost < cost:
                rel = (cost - trial_cost) / max(cost, 1e-300)
                rho = (cost - trial_cost) / pred if pred > 0 else 1.0
                nodes, cost, factors = trial, trial_cost, trial_factors
                if rel < cfg.rel_tol or cost < cfg.abs_tol:
                    break
                sys = self._assemble(factors, len(nodes))
                # Nielsen's update: shrink the damping smoothly when the model predicts well
                lam = max(lam * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-12)
                nu = 2.0
            else:
                if trial_cost - cost <= cfg.rel_tol * cost + cfg.abs_tol:
                    break  # no further decrease available
                lam *= nu
                nu *= 2.0
                if lam > cfg.lambda_max:
                    raise SolverFailure("Levenberg-Marquardt stalled at maximum damping")
        self.nodes = nodes
        self.last_iterations = it
        self._report = _summary(factors)

    # ------------------------------------------------------------ marginalization

    def _marginalize_oldest(self):
        nodes = self.nodes
        D = ROBOT + self.dm
        H = np.zeros((2 * D, 2 * D))
        g = np.zeros(2 * D)
        for f in self._factors(nodes[:2], touching=0):
            J = np.zeros((f.r.size, 2 * D))
            for k, Jk in f.robot:
                J[:, D * k : D * k + ROBOT] += Jk
            if f.m is not None:
                k, Jm = f.m
                J[:, D * k + ROBOT : D * k + D] += Jm
            if f.chain is not None:
                eye = np.eye(self.dm)
                if f.chain[0] == "walk":
                    _, i, j, w = f.chain
                    J[:, D * i + ROBOT : D * i + D] -= w * eye
                    J[:, D * j + ROBOT : D * j + D] += w * eye
                else:
                    _, i, w = f.chain
                    J[:, D * i + ROBOT : D * i + D] += w * eye
            H += J.T @ J
            g += J.T @ f.r
        H00, H01, H11 = H[:D, :D], H[:D, D:], H[D:, D:]
        jitter = 1e-12 * (1.0 + np.max(np.abs(np.diag(H00))))
        c00 = cho_factor(H00 + jitter * np.eye(D))
        Hp = H11 - H01.T @ cho_solve(c00, H01)
        gp = g[D:] - H01.T @ cho_solve(c00, g[:D])
        e, V = np.linalg.eigh(0.5 * (Hp + Hp.T))
        keep = e > 1e-12 * max(e.max(), 1e-300)
        e, V = e[keep], V[:, keep]
        M = np.sqrt(e)[:, None] * V.T
        c = (V.T @ gp) / np.sqrt(e)
        nxt = nodes[1]
        self.marginal = MarginalPrior(M, c, nxt.R.copy(), nxt.p.copy(), nxt.v.copy(), nxt.b.copy(),
                                      None if nxt.m is None else nxt.m.copy())
        if self.learn and self.cfg.fixation_anchor == "marginalized":
            self.anchor = nodes[0].m.copy()
        nxt.pim = None
        nxt.leg_row = None
        nxt.prior = None
        self.nodes = nodes[1:]


@dataclass
class _System:
    cost: float
    Hr: "_RobotHessian"
    gr: np.ndarray
    A: np.ndarray
    gm: np.ndarray
    coupling: "_Coupling"
    Um: np.ndarray
    s: np.ndarray
    factors: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)


def _cost(factors):
    return sum(0.5 * float(f.r @ f.r) for f in factors)


def _summary(factors):
    out = {}
    for f in factors:
        entry = out.setdefault(f.label, {"cost": 0.0, "max_abs": 0.0})
        entry["cost"] += 0.5 * float(f.r @ f.r)
        if f.r.size:
            entry["max_abs"] = max(entry["max_abs"], float(np.max(np.abs(f.r))))
    return out


def _stack(group):
    """First robot block, (g, rows, nb * ROBOT) Jacobians and (g, rows) residuals of same-shape factors."""
    first = np.array([f.robot[0][0] for f in group])
    nb = len(group[0].robot)
    if nb > 2:
        raise ValueError("a factor may touch at most two keyframes")
    if nb == 2 and any(f.robot[1][0] != f.robot[0][0] + 1 for f in group):
        raise ValueError("two-block factors must join consecutive keyframes")
    J = np.concatenate([np.array([f.robot[b][1] for f in group]) for b in range(nb)], axis=2)
    return first, J, np.array([f.r for f in group])


def _span(first, width):
    """Row indices of ``width`` robot coordinates starting at each block in ``first``."""
    return (ROBOT * first)[:, None] + np.arange(width)


class _RobotHessian:
    """Block-tridiagonal robot Hessian: diagonal blocks and the blocks right of them."""

    def __init__(self, n):
        self.n = n
        self.diag = np.zeros((n, ROBOT, ROBOT))
        self.upper = np.zeros((max(n - 1, 0), ROBOT, ROBOT))

    def add(self, first, H):
        np.add.at(self.diag, first, H[:, :ROBOT, :ROBOT])
        if H.shape[1] > ROBOT:
            np.add.at(self.diag, first + 1, H[:, ROBOT:, ROBOT:])
            np.add.at(self.upper, first, H[:, :ROBOT, ROBOT:])

    def diagonal(self):
        return np.einsum("kii->ki", self.diag).ravel()

    def damped(self, extra):
        out = _RobotHessian.__new__(_RobotHessian)
        out.n, out.upper = self.n, self.upper
        out.diag = self.diag.copy()
        i = np.arange(ROBOT)
        out.diag[:, i, i] += extra.reshape(self.n, ROBOT)
        return out

    def matvec(self, x):
        X = x.reshape(self.n, ROBOT)
        y = np.einsum("kij,kj->ki", self.diag, X)
        y[:-1] += np.einsum("kij,kj->ki", self.upper, X[1:])
        y[1:] += np.einsum("kji,kj->ki", self.upper, X[:-1])
        return y.ravel()

    def factor(self):
        return _BlockTridiagonal(self.diag, self.upper)


class _Coupling:
    """Robot rows of the low-rank columns, kept per factor shape.

    Each group holds g factors with the same row count; factor j owns ``rows``
    consecutive columns and touches the robot blocks starting at ``first[j]``.
    """

    def __init__(self, n):
        self.n = n
        self.k = 0
        self.groups = []  # (column offset, first block (g,), J (g, rows, width))
        self._rhs = None

    def add(self, first, J):
        self.groups.append((self.k, first, J))
        self.k += J.shape[0] * J.shape[1]

    def matvec(self, y):
        out = np.zeros(ROBOT * self.n)
        for off, first, J in self.groups:
            g, rows, width = J.shape
            yg = y[off : off + g * rows].reshape(g, rows, 1)
            np.add.at(out, _span(first, width), (J.transpose(0, 2, 1) @ yg)[..., 0])
        return out

    def rmatvec(self, x):
        parts = [(J @ x[_span(first, J.shape[2])][..., None]).ravel() for _, first, J in self.groups]
        return np.concatenate(parts) if parts else np.zeros(0)

    def rmatmat(self, X):
        p = X.shape[1]
        parts = [(J @ X[_span(first, J.shape[2])]).reshape(-1, p) for _, first, J in self.groups]
        return np.concatenate(parts) if parts else np.zeros((0, p))

    def squared_rows(self):
        out = np.zeros(ROBOT * self.n)
        for _, first, J in self.groups:
            np.add.at(out, _span(first, J.shape[2]), np.sum(J * J, axis=1))
        return out

    def _right_hand_sides(self):
        """Columns to push through H^-1, with the first robot block each one touches.

        Factors with more rows than robot coordinates are cheaper through the
        unit columns of their blocks.
        """
        widths = [J.shape[0] * min(J.shape[1], J.shape[2]) for _, _, J in self.groups]
        B = np.zeros((ROBOT * self.n, sum(widths)))
        start = np.empty(sum(widths), dtype=int)
        col = 0
        for (_, first, J), w in zip(self.groups, widths):
            g, rows, width = J.shape
            span = _span(first, width)
            per = w // g
            cols = col + np.arange(w).reshape(g, per)
            if rows <= width:
                B[span[:, :, None], cols[:, None, :]] = J.transpose(0, 2, 1)
            else:
                B[span, cols] = 1.0
            start[cols] = first[:, None]
            col += w
        return B, start

    def inverse_gram(self, factor):
        """Ur^T H^-1 Ur for a factored robot Hessian."""
        if self._rhs is None:
            self._rhs = self._right_hand_sides()
        B, start = self._rhs
        P = self.rmatmat(factor.solve(B, start))
        out = np.empty((self.k, self.k))
        col = 0
        for off, first, J in self.groups:
            g, rows, width = J.shape
            if rows <= width:
                out[:, off : off + g * rows] = P[:, col : col + g * rows]
                col += g * rows
            else:
                Pg = P[:, col : col + g * width].reshape(self.k, g, width)
                out[:, off : off + g * rows] = np.einsum("kgw,grw->kgr", Pg, J).reshape(self.k, -1)
                col += g * width
        return out


class _BlockTridiagonal:
    """Cholesky solves for a block-tridiagonal SPD matrix with ROBOT-sized blocks.

    The factor comes from LAPACK's banded Cholesky; substitution then runs
    block by block so every step is a small dense product over all
    right-hand sides at once.
    """

    U = 2 * ROBOT - 1  # upper bandwidth
    _r, _c = np.triu_indices(ROBOT)
    _R, _C = (a.ravel() for a in np.indices((ROBOT, ROBOT)))

    def __init__(self, diag, upper):
        n = diag.shape[0]
        u = self.U
        k = np.arange(n)[:, None]
        # band storage: ab[u - d, j] = H[j - d, j]
        di = (u - (self._c - self._r), ROBOT * k + self._c)
        ui = (u - (ROBOT + self._C - self._R), ROBOT * k[1:] + self._C)
        ab = np.zeros((u + 1, ROBOT * n))
        ab[di] = diag[:, self._r, self._c]
        ab[ui] = upper.reshape(-1, ROBOT * ROBOT)
        band = cholesky_banded(ab, check_finite=False)
        D = np.zeros((n, ROBOT, ROBOT))
        D[:, self._r, self._c] = band[di]
        self.n = n
        self.Dinv = np.linalg.inv(D)  # upper-triangular diagonal blocks
        self.E = band[ui].reshape(-1, ROBOT, ROBOT)

    def solve(self, b, start=None):
        """H^-1 b.

        ``start`` holds, per column of b, the first block where that column is
        nonzero. When it is sorted the forward sweep skips columns that are
        still zero.
        """
        n = self.n
        b = np.asarray(b, dtype=float)
        shape = b.shape
        B = b.reshape(n, ROBOT, -1)
        if start is None or np.any(np.diff(start) < 0):
            live = [None] * n
        else:
            live = np.searchsorted(start, np.arange(n), side="right")
        Y = np.zeros_like(B)
        Y[0, :, : live[0]] = self.Dinv[0].T @ B[0, :, : live[0]]
        for k in range(1, n):
            a = live[k]
            Y[k, :, :a] = self.Dinv[k].T @ (B[k, :, :a] - self.E[k - 1].T @ Y[k - 1, :, :a])
        Z = np.empty_like(B)
        Z[n - 1] = self.Dinv[n - 1] @ Y[n - 1]
        for k in range(n - 2, -1, -1):
            Z[k] = self.Dinv[k] @ (Y[k] - self.E[k] @ Z[k + 1])
        return Z.reshape(shape)


def _pad(J6):
    """Widen (..., rows, 6) pose Jacobians to the full robot state."""
    out = np.zeros(J6.shape[:-1] + (ROBOT,))
    out[..., : J6.shape[-1]] = J6
    return out


def _whitener(cov):
    L = np.linalg.cholesky(cov + 1e-18 * np.eye(cov.shape[0]))
    return np.linalg.inv(L)
