"""Decentralized gain synthesis for one DGU via an LMI program.

Each DGU gets a state-feedback row k = [k1, k2, k3] acting on its augmented
state [V, I_t, v].  Feasibility of the per-DGU LMI yields, besides the gain,
a structured Lyapunov matrix P whose (1,1) entry is pinned to
eta = sigma_bar * C_t; the network-wide constant sigma_bar is what lets the
local certificates compose into a global one (see certify).

The synthesis consumes only the DGU's own matrices, never the lines it
happens to be attached to, which is what makes plug-in decisions local.
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .lmi import (
    INFEASIBLE,
    NSD,
    NUMERICAL_FAILURE,
    PSD,
    LmiBlock,
    LmiProgram,
    LmiSolution,
    SolverOptions,
    solve,
    sym_eig,
)
from .model import AugmentedDgu, DguParams, MicrogridTopology, augmented_dgu

DEFAULT_ALPHAS = (1e-4, 1e-4, 1e-4, 1e-2, 1e-2)

NOT_APPLICABLE = "NotApplicable"

# variable layout of the assembled program
_VAR_NAMES = ("y22", "y23", "y33", "g1", "g2", "g3",
              "gamma1", "gamma2", "gamma3", "beta", "zeta")


class NumericalFailure(RuntimeError):
    """Solver breakdown or an extracted controller failing its invariants.

    Deliberately distinct from Denied: callers may retry or report, but
    must not treat it as a plug-in refusal.
    """


@dataclass(frozen=True)
class SynthesisConfig:
    sigma_bar: float
    alphas: Tuple[float, float, float, float, float] = DEFAULT_ALPHAS
    solver_options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not (np.isfinite(self.sigma_bar) and self.sigma_bar > 0):
            raise ValueError("sigma_bar must be positive")
        alphas = tuple(float(a) for a in self.alphas)
        if len(alphas) != 5 or any(a <= 0 or not np.isfinite(a) for a in alphas):
            raise ValueError("alphas must be five positive weights")
        object.__setattr__(self, "alphas", alphas)


@dataclass(frozen=True)
class Denied:
    """Synthesis refusal: the LMI is infeasible or the k3 gate failed."""

    reason: str


@dataclass(frozen=True)
class LocalController:
    """Synthesized gain with its local stability certificate.

    p is structured: p[0,0] = eta, p[0,1] = p[0,2] = 0, trailing 2x2 block
    positive definite.  q_local = F'P + PF for the closed loop
    F = A_hat + B_hat k is negative semidefinite with zero first row and
    column; its trailing block annihilates [1, delta].
    """

    k: np.ndarray
    p: np.ndarray
    eta: float
    raw: Mapping[str, object]
    delta: float
    q_local: np.ndarray

    def __post_init__(self):
        for name in ("k", "p", "q_local"):
            a = np.asarray(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def norm_bound(self) -> float:
        """Lemma-style cap sqrt(beta)*zeta on the gain norm."""
        return float(np.sqrt(self.raw["beta"]) * self.raw["zeta"])


def _y_matrix(eta: float, y22: float, y23: float, y33: float) -> np.ndarray:
    return np.array([[1.0 / eta, 0.0, 0.0],
                     [0.0, y22, y23],
                     [0.0, y23, y33]])


def assemble_problem(dgu: AugmentedDgu, params: DguParams,
                     cfg: SynthesisConfig) -> LmiProgram:
    """Build the 11-variable local feasibility/weighting program.

    Variables: the three free entries of Y's trailing block, the three
    entries of G, the three Gamma weights, beta, zeta.  Y(1,1) is pinned to
    1/eta and Y(1,2) = Y(1,3) = 0, so those never appear as unknowns.

    Blocks: the 6x6 dissipation block (NSD), the 4x4 gain-size block
    (strict NSD), the 6x6 conditioning block (strict PSD), plus scalar
    bounds gamma >= 0 (each), beta > 0, zeta > 0.
    """
    eta = cfg.sigma_bar * params.c_t
    a_hat = dgu.a_hat_ii
    b_hat = dgu.b_hat

    def dissipation(v):
        y = _y_matrix(eta, v[0], v[1], v[2])
        g = np.array([[v[3], v[4], v[5]]])
        tl = a_hat @ y + y @ a_hat.T + b_hat @ g + g.T @ b_hat.T
        out = np.zeros((6, 6))
        out[:3, :3] = tl
        out[:3, 3:] = y
        out[3:, :3] = y
        out[3:, 3:] = -np.diag(v[6:9])
        return out

    def gain_size(v):
        out = np.zeros((4, 4))
        out[:3, :3] = -v[9] * np.eye(3)
        out[3, :3] = [v[3], v[4], v[5]]
        out[:3, 3] = [v[3], v[4], v[5]]
        out[3, 3] = -1.0
        return out

    def conditioning(v):
        out = np.zeros((6, 6))
        out[:3, :3] = _y_matrix(eta, v[0], v[1], v[2])
        out[:3, 3:] = np.eye(3)
        out[3:, :3] = np.eye(3)
        out[3:, 3:] = v[10] * np.eye(3)
        return out

    def affine_block(builder, sense, strict):
        zero = np.zeros(11)
        const = builder(zero)
        coeffs = []
        for i in range(11):
            unit = np.zeros(11)
            unit[i] = 1.0
            coeffs.append(builder(unit) - const)
        return LmiBlock(const, tuple(coeffs), sense=sense, strict=strict)

    def scalar_bound(i, strict):
        coeffs = [np.zeros((1, 1)) for _ in range(11)]
        coeffs[i] = np.eye(1)
        return LmiBlock(np.zeros((1, 1)), tuple(coeffs), sense=PSD, strict=strict)

    blocks = (
        affine_block(dissipation, NSD, False),
        affine_block(gain_size, NSD, True),
        affine_block(conditioning, PSD, True),
        scalar_bound(6, False),
        scalar_bound(7, False),
        scalar_bound(8, False),
        scalar_bound(9, True),
        scalar_bound(10, True),
    )
    objective = np.zeros(11)
    objective[6:] = cfg.alphas
    return LmiProgram(11, objective, blocks)


def _extract(sol: LmiSolution, params: DguParams,
             cfg: SynthesisConfig) -> Tuple[np.ndarray, np.ndarray, dict]:
    """(k, p, raw) from a feasible solver point.

    k comes from g Y^-1, inverted blockwise so the pinned zeros of Y are
    honored exactly.  p is rebuilt from the gain via the closed-form
    structure equations, which zeroes the cross terms of q_local to
    machine precision; if the gain's sign pattern leaves that route (it
    never has in practice), fall back to inverting Y directly.
    """
    eta = cfg.sigma_bar * params.c_t
    y22, y23, y33, g1, g2, g3 = sol.x[:6]
    gammas = sol.x[6:9].copy()
    beta, zeta = float(sol.x[9]), float(sol.x[10])
    y_tail = np.array([[y22, y23], [y23, y33]])
    k_tail = np.linalg.solve(y_tail.T, np.array([g2, g3]))
    k = np.array([g1 * eta, k_tail[0], k_tail[1]])

    lt = params.l_t
    b = (k[0] - 1.0) / lt
    c = (k[1] - params.r_t) / lt
    d = k[2] / lt
    if c < 0.0 and d > 0.0 and (d - b * c) < 0.0:
        p23 = cfg.sigma_bar * d / (d - b * c)
        p22 = cfg.sigma_bar * c / (d - b * c)
        p33 = b * p23
    else:
        p_tail = np.linalg.inv(y_tail)
        p22, p23, p33 = p_tail[0, 0], p_tail[0, 1], p_tail[1, 1]
    p = np.array([[eta, 0.0, 0.0],
                  [0.0, p22, p23],
                  [0.0, p23, p33]])
    raw = {
        "y": _y_matrix(eta, y22, y23, y33),
        "g": np.array([g1, g2, g3]),
        "gamma": gammas,
        "beta": beta,
        "zeta": zeta,
        "margins": sol.margins.copy(),
    }
    return k, p, raw


def _verify_invariants(k, p, q, delta, raw, eta) -> Optional[str]:
    """Eigenvalue-level recheck of everything LocalController promises."""
    norm_p = np.linalg.norm(p)
    if abs(p[0, 0] - eta) > 1e-10 * norm_p:
        return "p[0,0] != eta"
    if max(abs(p[0, 1]), abs(p[0, 2])) > 1e-10 * norm_p:
        return "p cross terms not zero"
    w_p, _ = sym_eig(p)
    if w_p[0] <= 0.0:
        return "p not positive definite"
    norm_q = np.linalg.norm(q)
    w_q, _ = sym_eig(q)
    if w_q[-1] > 1e-8 * (1.0 + norm_q):
        return "q_local not negative semidefinite"
    if np.max(np.abs(q[0, :])) > 1e-8 * norm_q:
        return "q_local first row not zero"
    q_tail = q[1:, 1:]
    resid = q_tail @ np.array([1.0, delta])
    if np.linalg.norm(resid) > 1e-6 * np.linalg.norm(q_tail):
        return "q_tail does not annihilate [1, delta]"
    f22_scale = abs(p[1, 1])
    if abs(p[1, 1] + delta * p[1, 2]) > 1e-6 * f22_scale:
        return "p22 = -delta*p23 violated"
    if np.linalg.norm(k) >= np.sqrt(raw["beta"]) * raw["zeta"]:
        return "gain norm bound violated"
    return None


def synthesize(dgu: AugmentedDgu, params: DguParams,
               cfg: SynthesisConfig) -> Union[LocalController, Denied]:
    """Solve the local program and extract a verified controller.

    Returns Denied when the program is infeasible or the resulting k3 is
    numerically zero (relative to the gain); raises NumericalFailure when
    the solver breaks down or the extracted controller fails any invariant
    recheck.
    """
    program = assemble_problem(dgu, params, cfg)
    sol = solve(program, cfg.solver_options)
    if sol.status == INFEASIBLE:
        return Denied("local LMI infeasible")
    if sol.status == NUMERICAL_FAILURE:
        raise NumericalFailure("LMI solver did not converge")
    k, p, raw = _extract(sol, params, cfg)
    if abs(k[2]) <= 1e-9 * np.linalg.norm(k):
        return Denied("k3 is numerically zero; re-weight the objective "
                      "and synthesize again")
    delta = -(k[1] - params.r_t) / k[2]
    f = dgu.a_hat_ii + np.outer(dgu.b_hat[:, 0], k)
    q = f.T @ p + p @ f
    eta = cfg.sigma_bar * params.c_t
    problem = _verify_invariants(k, p, q, delta, raw, eta)
    if problem is not None:
        raise NumericalFailure(f"extracted controller invalid: {problem}")
    return LocalController(k, p, eta, raw, float(delta), q)


def synthesize_all(topology: MicrogridTopology, cfg: SynthesisConfig,
                   ) -> Dict[int, Union[LocalController, Denied]]:
    """Per-DGU synthesis over a topology; parallel when the grid is large.

    Synthesis only reads each DGU's own parameters, so the map is pure and
    order-independent.
    """
    ids = topology.ids

    def one(dgu_id):
        hat = augmented_dgu(topology.dgus[dgu_id])
        return synthesize(hat, topology.dgus[dgu_id], cfg)

    if len(ids) > 4:
        workers = _thread_cap(len(ids))
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, ids))
        return dict(zip(ids, results))
    return {dgu_id: one(dgu_id) for dgu_id in ids}


def _thread_cap(jobs: int) -> int:
    env = os.environ.get("GRIDFORGE_THREADS")
    if env is not None:
        return max(1, min(jobs, int(env)))
    return max(1, min(jobs, os.cpu_count() or 1))


def verify_k1_identity(ctrl: LocalController, params: DguParams,
                       cfg: SynthesisConfig) -> Union[float, str]:
    """Residual of the closed-form k1 relation implied by q_local's zeros.

    Returns NOT_APPLICABLE when delta = 0 (k2 = R_t exactly), where the
    relation degenerates.
    """
    if ctrl.delta == 0.0:
        return NOT_APPLICABLE
    lt = params.l_t
    predicted = 1.0 - lt / ctrl.delta - cfg.sigma_bar * lt / ctrl.p[1, 1]
    return float(abs(ctrl.k[0] - predicted))


def controller_to_json(dgu_id: int, ctrl: LocalController,
                       cfg: SynthesisConfig) -> dict:
    return {
        "dgu_id": dgu_id,
        "K": ctrl.k.tolist(),
        "P": ctrl.p.tolist(),
        "eta": ctrl.eta,
        "sigma_bar": cfg.sigma_bar,
        "delta": ctrl.delta,
        "diagnostics": {
            "gamma": np.asarray(ctrl.raw["gamma"]).tolist(),
            "beta": ctrl.raw["beta"],
            "zeta": ctrl.raw["zeta"],
            "gain_norm": float(np.linalg.norm(ctrl.k)),
            "gain_norm_bound": ctrl.norm_bound(),
        },
    }
