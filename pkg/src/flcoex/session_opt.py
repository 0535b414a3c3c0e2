"""Session-based joint schedule optimizer.

One communication round is carved into S downlink sessions (session i ends
when UE i, in descending-channel order, finishes receiving the model), an
idle gap, and S uplink sessions (session l starts when the l-th UE in the
chosen ordering becomes ready to transmit). Decision variables are the
session durations, the idle time, per-session RB shares for FL and HB
traffic, and per-session uplink powers. Compute speeds are implicit: a UE
ready at rank r trains exactly during the window

    win_r = sum of uplink sessions before r + downlink sessions after its
            own completion + the idle gap,

so the window length determines its CPU speed and training energy.

The products rate*duration in the completion and HB-average constraints
make the problem nonconvex. Each product ``X(x)*t`` (``X`` concave) is
replaced by the surrogate ``2*y*sqrt(X(x)) - y^2/t``, which lower-bounds
the product for every ``y > 0`` and equals it at ``y = sqrt(X)*t``; the
minimized energy product ``p*t`` is replaced by the convex upper bound
``p^2/(2*y_E) + y_E*t^2/2``, tight at ``y_E = p/t``. Alternating the
auxiliary updates with a convex solve descends to a stationary point.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import ratemodel
from .convexcore import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    ConvexProgram,
    SolveOptions,
    solve,
)
from .scenario import Scenario

__all__ = [
    "Ordering",
    "SessionSchedule",
    "AuxVars",
    "RoundOutcome",
    "SessionOptError",
    "InfeasibleScenarioError",
    "SessionOptions",
    "surrogate_product",
    "bilinear_upper_bound",
    "implied_compute_time",
    "init_feasible",
    "update_aux",
    "build_subproblem",
    "evaluate",
    "run_algorithm1",
    "enumerate_orderings",
    "schedule_to_dict",
    "schedule_from_dict",
    "outcome_to_dict",
    "trace_to_csv",
]

DURATION_FLOOR = 1e-6     # solver-side lower bound on session durations, s
SNAP_TOL = 1e-5           # durations below this are snapped to 0 on output
AUX_POWER_FLOOR = 1e-4    # fraction of Pmax used as floor in y_E updates
AUX_RB_FLOOR = 1e-12      # floor under sqrt() in rate-like aux updates


class SessionOptError(RuntimeError):
    """Optimizer failure (solver infeasible or stalled at some iteration)."""


class InfeasibleScenarioError(SessionOptError):
    """No feasible schedule exists (HB demand exceeds what the band carries)."""


@dataclass(frozen=True)
class Ordering:
    """Uplink start order: ``sigma[r]`` is the UE index transmitting r-th."""

    sigma: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.sigma) != list(range(len(self.sigma))):
            raise ValueError(f"sigma must be a permutation of 0..S-1, got {self.sigma}")

    @staticmethod
    def identity(s: int) -> "Ordering":
        return Ordering(tuple(range(s)))

    def __len__(self) -> int:
        return len(self.sigma)


@dataclass
class SessionSchedule:
    """All decision variables of one session-based round.

    Square arrays are indexed [rank, session]; entries with session < rank
    are structurally zero (the UE has not started transmitting yet).
    """

    t_dl: np.ndarray            # (S,) downlink session durations, s
    t_ul: np.ndarray            # (S,) uplink session durations, s
    t_idle: float               # gap between last download and first upload, s
    k_dl: np.ndarray            # (S,) broadcast RB share per downlink session
    k_hb_dl: np.ndarray         # (E, S) HB RB shares during downlink sessions
    k_ul: np.ndarray            # (S, S) uplink RB share [rank, session]
    p_ul: np.ndarray            # (S, S) uplink power [rank, session], W
    k_hb_ul: np.ndarray         # (E, S) HB RB shares during uplink sessions
    ordering: Ordering

    @property
    def num_fl(self) -> int:
        return len(self.t_dl)

    @property
    def num_hb(self) -> int:
        return self.k_hb_dl.shape[0]

    def copy(self) -> "SessionSchedule":
        return SessionSchedule(
            t_dl=self.t_dl.copy(), t_ul=self.t_ul.copy(), t_idle=self.t_idle,
            k_dl=self.k_dl.copy(), k_hb_dl=self.k_hb_dl.copy(),
            k_ul=self.k_ul.copy(), p_ul=self.p_ul.copy(),
            k_hb_ul=self.k_hb_ul.copy(), ordering=self.ordering,
        )

    def total_latency(self) -> float:
        return float(self.t_dl.sum() + self.t_idle + self.t_ul.sum())


@dataclass
class AuxVars:
    """Surrogate expansion point, one entry per transformed product term.

    Rate-like entries store ``sqrt(expr)*t`` where ``expr`` is the RB count
    for linear rates (the per-RB constant is absorbed by the constraint) and
    the full uplink rate for the power-limited links; ``y_e`` stores ``p/t``.
    """

    y_fl_dl: np.ndarray         # (S,)
    y_hb_dl: np.ndarray         # (E, S)
    y_fl_ul: np.ndarray         # (S, S) [rank, session], valid for session >= rank
    y_hb_ul: np.ndarray         # (E, S)
    y_e: np.ndarray             # (S, S) [rank, session]


@dataclass
class RoundOutcome:
    """Untransformed evaluation of a schedule: the common output format."""

    latency: float              # s
    e_cp: np.ndarray            # (S,) training energy per UE (UE index order), J
    e_cm: np.ndarray            # (S,) uplink energy per UE, J
    hb_avg_rates: np.ndarray    # (E,) average HB rate over the round, bit/s
    objective: float            # latency + sum of weighted energies
    residuals: dict[str, np.ndarray]   # positive entries are violations
    iterations: int = 0

    @property
    def e_tot(self) -> np.ndarray:
        return self.e_cp + self.e_cm

    def total_energy(self) -> float:
        return float(self.e_tot.sum())

    def worst_relative_violation(self) -> float:
        """Largest residual after dividing each family by its natural scale."""
        worst = -math.inf
        for fam, scale in self._scales.items():
            vals = self.residuals.get(fam)
            if vals is None or np.size(vals) == 0:
                continue
            worst = max(worst, float(np.max(vals)) / scale)
        return worst

    def is_feasible(self, rel_tol: float = 1e-6) -> bool:
        return self.worst_relative_violation() <= rel_tol

    _scales: dict[str, float] = field(default_factory=dict, repr=False)


def surrogate_product(expr_val, t, y):
    """Concave lower bound of ``expr_val * t``: ``2*y*sqrt(expr_val) - y^2/t``.

    Valid for any ``y``; equals the product at ``y = sqrt(expr_val)*t``.
    """
    return 2.0 * y * np.sqrt(expr_val) - y * y / t


def bilinear_upper_bound(p, t, y_e):
    """Convex upper bound of ``p*t`` for ``y_e > 0``, tight at ``y_e = p/t``."""
    return p * p / (2.0 * y_e) + y_e * t * t / 2.0


# ---------------------------------------------------------------------------
# model coefficients shared by builder / evaluator / initializer


class _Model:
    """Scenario-derived constants in array form."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        radio = sc.radio
        self.s = sc.num_fl
        self.e = sc.num_hb
        self.k_total = float(radio.num_rbs)
        self.p_max = radio.ue_max_power
        self.c_fl = np.array([ratemodel.dl_rate_per_rb(ue.gain_sq, radio) for ue in sc.fl_ues])
        self.c_hb = np.array([ratemodel.dl_rate_per_rb(ue.gain_sq, radio) for ue in sc.hb_ues])
        self.a_ul = np.array([ratemodel.ul_snr_coeff(ue.gain_sq, radio) for ue in sc.fl_ues])
        self.beta = radio.subcarrier_bw / math.log(2.0)
        self.d_bits = np.array([ue.workload.model_bits for ue in sc.fl_ues])
        if np.ptp(self.d_bits) > 0:
            raise SessionOptError("all FL UEs must share the same model size")
        self.d = float(self.d_bits[0])
        self.theta = sc.hb_threshold
        self.tau_min = np.array([ratemodel.min_compute_time(ue.workload) for ue in sc.fl_ues])
        self.lam = np.array([ue.workload.energy_weight for ue in sc.fl_ues])
        self.cp_coef = np.array([
            ue.workload.kappa
            * (ue.workload.epochs * ue.workload.cycles_per_sample) ** 3
            * ue.workload.local_samples**3
            for ue in sc.fl_ues
        ])
        # characteristic round length used to scale the HB constraint
        self.t_ref = self.d / (radio.subcarrier_bw * self.k_total) + float(self.tau_min.max())

    def ul_rate_grid(self, k: np.ndarray, p: np.ndarray, ranks: np.ndarray,
                     ordering: Ordering) -> np.ndarray:
        """Vectorized uplink rate for triangle entries at given ranks."""
        ue = np.array(ordering.sigma)[ranks]
        a = self.a_ul[ue]
        k_safe = np.maximum(k, 1e-300)
        u = a * p / k_safe
        return self.beta * k_safe * np.log1p(u)


def _windows(model: _Model, sched: SessionSchedule) -> np.ndarray:
    """Training window per rank: uplink sessions before it + trailing
    downlink sessions after its own completion + the idle gap."""
    s = model.s
    sigma = sched.ordering.sigma
    t_dl_tail = np.concatenate([np.cumsum(sched.t_dl[::-1])[::-1][1:], [0.0]])
    ul_prefix = np.concatenate([[0.0], np.cumsum(sched.t_ul)[:-1]])
    return np.array([
        ul_prefix[r] + t_dl_tail[sigma[r]] + sched.t_idle for r in range(s)
    ])


def implied_compute_time(sched: SessionSchedule, rank: int) -> float:
    """Training window of the UE that transmits ``rank``-th (0-based)."""
    s = sched.num_fl
    if not 0 <= rank < s:
        raise ValueError(f"rank must be in [0, {s}), got {rank}")
    u = sched.ordering.sigma[rank]
    return float(
        sched.t_ul[:rank].sum() + sched.t_dl[u + 1:].sum() + sched.t_idle
    )


# ---------------------------------------------------------------------------
# evaluation (untransformed, the single source of truth for feasibility)


def evaluate(sched: SessionSchedule, sc: Scenario) -> RoundOutcome:
    """Exact objective and residuals with no surrogate approximations.

    Residual conventions (positive = violated): completion families are in
    bits undelivered, budgets in RBs over the cap, compute windows in
    seconds short, HB rates in bits short of ``theta * T``.
    """
    model = _Model(sc)
    s, e = model.s, model.e
    sigma = np.array(sched.ordering.sigma)

    latency = sched.total_latency()
    # downlink completion per UE: it listens from the start through its own session
    weighted = np.cumsum(sched.k_dl * sched.t_dl)          # sum_i<=L K_i t_i
    res_dl = model.d - model.c_fl * weighted

    # uplink completion per rank
    ranks, sessions = np.triu_indices(s)
    rates = model.ul_rate_grid(sched.k_ul[ranks, sessions], sched.p_ul[ranks, sessions],
                               ranks, sched.ordering)
    delivered = np.zeros(s)
    np.add.at(delivered, ranks, rates * sched.t_ul[sessions])
    res_ul = model.d - delivered

    res_dl_budget = sched.k_dl + sched.k_hb_dl.sum(axis=0) - model.k_total
    tri_mask = np.triu(np.ones((s, s), dtype=bool))
    res_ul_budget = (sched.k_ul * tri_mask).sum(axis=0) + sched.k_hb_ul.sum(axis=0) - model.k_total

    windows = _windows(model, sched)
    res_window = model.tau_min[sigma] - windows

    t_active = sched.t_dl.sum() + sched.t_ul.sum()
    hb_credit = (
        model.c_hb * (sched.k_hb_dl @ sched.t_dl)
        + model.c_hb * (sched.k_hb_ul @ sched.t_ul)
        + model.c_hb * model.k_total * sched.t_idle
    ) if e else np.zeros(0)
    res_hb = model.theta * latency - hb_credit if e else np.zeros(0)

    res_power = sched.p_ul[ranks, sessions].max() - model.p_max if len(ranks) else -model.p_max

    e_cm_rank = np.zeros(s)
    np.add.at(e_cm_rank, ranks, sched.p_ul[ranks, sessions] * sched.t_ul[sessions])
    with np.errstate(divide="ignore"):
        e_cp_rank = np.where(windows > 0, model.cp_coef[sigma] / np.maximum(windows, 1e-300) ** 2,
                             np.inf)
    e_cp = np.zeros(s)
    e_cm = np.zeros(s)
    e_cp[sigma] = e_cp_rank
    e_cm[sigma] = e_cm_rank

    objective = latency + float(np.sum(model.lam * (e_cp + e_cm)))
    hb_avg = hb_credit / latency if (e and latency > 0) else np.full(e, np.inf)

    out = RoundOutcome(
        latency=latency,
        e_cp=e_cp,
        e_cm=e_cm,
        hb_avg_rates=hb_avg,
        objective=objective,
        residuals={
            "dl_completion": res_dl,
            "ul_completion": res_ul,
            "dl_budget": res_dl_budget,
            "ul_budget": res_ul_budget,
            "compute_window": res_window,
            "hb_rate": res_hb,
            "power": np.array([res_power]),
        },
    )
    out._scales = {
        "dl_completion": model.d,
        "ul_completion": model.d,
        "dl_budget": model.k_total,
        "ul_budget": model.k_total,
        "compute_window": float(model.tau_min.max()),
        "hb_rate": max(model.theta * model.t_ref, 1.0),
        "power": model.p_max,
    }
    return out


# ---------------------------------------------------------------------------
# feasible initialization


def init_feasible(sc: Scenario, ordering: Ordering, margin: float = 1e-6) -> SessionSchedule:
    """Strictly feasible schedule for the given uplink ordering.

    HB UEs are reserved ``theta / c_e`` RBs in every session. When those
    reservations exceed (almost) the whole band they are scaled down and the
    shortfall is funded by stretching the idle gap, during which each HB UE
    is credited the full band. Raises :class:`InfeasibleScenarioError` when
    even the full band cannot carry ``theta`` for some HB UE.
    """
    model = _Model(sc)
    s, e, k = model.s, model.e, model.k_total
    if len(ordering) != s:
        raise ValueError("ordering size does not match the scenario")
    sigma = list(ordering.sigma)

    if e and np.any(model.k_total * model.c_hb <= model.theta * (1 + 1e-9)):
        raise InfeasibleScenarioError(
            "an HB UE cannot reach the rate floor even with the full band"
        )
    k_e = model.theta / model.c_hb if e else np.zeros(0)
    sum_ke = float(k_e.sum())
    cap = 0.95 * k
    beta_hb = 1.0 if sum_ke <= cap else cap / sum_ke
    k_hb = np.maximum(beta_hb * k_e, 1e-9)
    k_fl = (k - float(k_hb.sum())) * (1.0 - 1e-6)
    if k_fl <= 0:
        raise InfeasibleScenarioError("HB reservations leave no spectrum for FL")

    # downlink sessions: constant broadcast share, each UE done with margin
    cum = model.d * (1 + margin) / (model.c_fl * k_fl)
    cum = np.maximum.accumulate(cum)
    t_dl = np.diff(np.concatenate([[0.0], cum]))
    t_dl = np.maximum(t_dl, DURATION_FLOOR)
    cum = np.cumsum(t_dl)
    dl_end = float(cum[-1])

    ready = cum + model.tau_min  # per UE index, at full compute speed

    t_idle = max(ready[sigma[0]] - dl_end, 0.0) + margin * (1.0 + model.tau_min[sigma[0]])
    start = np.zeros(s)
    start[0] = dl_end + t_idle
    for r in range(1, s):
        need = cum[sigma[r]] + model.tau_min[sigma[r]] * (1 + margin)
        start[r] = max(start[r - 1] + DURATION_FLOOR, need)
    t_ul = np.zeros(s)
    t_ul[: s - 1] = np.diff(start)

    # equal shares of the residual band among the ranks active in a session
    k_fl_ul = (k - float(k_hb.sum())) * (1.0 - 1e-6)
    shares = k_fl_ul / (np.arange(s) + 1.0)
    k_ul = np.zeros((s, s))
    p_ul = np.zeros((s, s))
    for r in range(s):
        k_ul[r, r:] = shares[r:]
        p_ul[r, r:] = model.p_max / 2.0
    ranks, sessions = np.triu_indices(s)
    rates = model.ul_rate_grid(k_ul[ranks, sessions], p_ul[ranks, sessions], ranks, ordering)
    rate_grid = np.zeros((s, s))
    rate_grid[ranks, sessions] = rates

    # last session long enough for every UE to finish with margin
    need = model.d * (1 + margin) - (rate_grid[:, : s - 1] * t_ul[: s - 1]).sum(axis=1)
    t_last = float(np.max(need / rate_grid[:, s - 1]))
    t_ul[s - 1] = max(t_last, DURATION_FLOOR)

    sched = SessionSchedule(
        t_dl=t_dl, t_ul=t_ul, t_idle=t_idle, k_dl=np.full(s, k_fl),
        k_hb_dl=np.tile(k_hb[:, None], (1, s)), k_ul=k_ul, p_ul=p_ul,
        k_hb_ul=np.tile(k_hb[:, None], (1, s)), ordering=ordering,
    )

    if e:
        # top up the idle gap until every HB UE clears theta with margin;
        # idle adds K*c_e credit per second against theta per second of round
        out = evaluate(sched, sc)
        deficit = out.residuals["hb_rate"]
        slopes = model.k_total * model.c_hb - model.theta
        extra = float(np.max(deficit / slopes))
        if extra > 0:
            sched.t_idle += extra * (1 + margin) + 1e-9

    return sched


# ---------------------------------------------------------------------------
# auxiliary updates


def update_aux(sched: SessionSchedule, sc: Scenario) -> AuxVars:
    """Expansion point for all surrogates, taken at the current schedule.

    Rate-like updates use ``sqrt(expr)*t``; the energy update uses ``p/t``.
    Small floors keep every entry strictly positive so the next subproblem
    stays well conditioned (the bounds remain valid for any positive value).
    """
    if np.any(sched.t_dl <= 0) or np.any(sched.t_ul <= 0) or sched.t_idle < 0:
        raise ValueError("update_aux requires strictly positive session durations")
    model = _Model(sc)
    s = model.s
    y_fl_dl = np.sqrt(np.maximum(sched.k_dl, AUX_RB_FLOOR)) * sched.t_dl
    y_hb_dl = np.sqrt(np.maximum(sched.k_hb_dl, AUX_RB_FLOOR)) * sched.t_dl[None, :]
    y_hb_ul = np.sqrt(np.maximum(sched.k_hb_ul, AUX_RB_FLOOR)) * sched.t_ul[None, :]

    ranks, sessions = np.triu_indices(s)
    rates = model.ul_rate_grid(sched.k_ul[ranks, sessions], sched.p_ul[ranks, sessions],
                               ranks, sched.ordering)
    y_fl_ul = np.zeros((s, s))
    y_fl_ul[ranks, sessions] = np.sqrt(np.maximum(rates, AUX_RB_FLOOR)) * sched.t_ul[sessions]

    y_e = np.zeros((s, s))
    p_eff = np.maximum(sched.p_ul[ranks, sessions], AUX_POWER_FLOOR * model.p_max)
    y_e[ranks, sessions] = p_eff / sched.t_ul[sessions]
    return AuxVars(y_fl_dl=y_fl_dl, y_hb_dl=y_hb_dl, y_fl_ul=y_fl_ul,
                   y_hb_ul=y_hb_ul, y_e=y_e)


# ---------------------------------------------------------------------------
# packing


class _Layout:
    """Index map between a SessionSchedule and the flat solver vector."""

    def __init__(self, s: int, e: int):
        self.s, self.e = s, e
        self.n_tri = s * (s + 1) // 2
        self.t_dl = np.arange(0, s)
        self.t_ul = np.arange(s, 2 * s)
        self.t_idle = 2 * s
        self.k_dl = np.arange(2 * s + 1, 3 * s + 1)
        base = 3 * s + 1
        self.k_hb_dl = base + np.arange(e * s).reshape(e, s)
        base += e * s
        self.tri_r, self.tri_l = np.triu_indices(s)
        self.k_ul = base + np.arange(self.n_tri)
        base += self.n_tri
        self.p_ul = base + np.arange(self.n_tri)
        base += self.n_tri
        self.k_hb_ul = base + np.arange(e * s).reshape(e, s)
        self.n = base + e * s

    def pack(self, sched: SessionSchedule) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.t_dl] = sched.t_dl
        x[self.t_ul] = sched.t_ul
        x[self.t_idle] = sched.t_idle
        x[self.k_dl] = sched.k_dl
        if self.e:
            x[self.k_hb_dl.ravel()] = sched.k_hb_dl.ravel()
            x[self.k_hb_ul.ravel()] = sched.k_hb_ul.ravel()
        x[self.k_ul] = sched.k_ul[self.tri_r, self.tri_l]
        x[self.p_ul] = sched.p_ul[self.tri_r, self.tri_l]
        return x

    def unpack(self, x: np.ndarray, ordering: Ordering) -> SessionSchedule:
        s, e = self.s, self.e
        k_ul = np.zeros((s, s))
        p_ul = np.zeros((s, s))
        k_ul[self.tri_r, self.tri_l] = x[self.k_ul]
        p_ul[self.tri_r, self.tri_l] = x[self.p_ul]
        return SessionSchedule(
            t_dl=x[self.t_dl].copy(), t_ul=x[self.t_ul].copy(),
            t_idle=float(x[self.t_idle]), k_dl=x[self.k_dl].copy(),
            k_hb_dl=x[self.k_hb_dl.ravel()].reshape(e, s).copy() if e else np.zeros((0, s)),
            k_ul=k_ul, p_ul=p_ul,
            k_hb_ul=x[self.k_hb_ul.ravel()].reshape(e, s).copy() if e else np.zeros((0, s)),
            ordering=ordering,
        )


# ---------------------------------------------------------------------------
# subproblem assembly


def build_subproblem(sc: Scenario, ordering: Ordering, aux: AuxVars) -> ConvexProgram:
    """Convex subproblem for fixed surrogate expansion points.

    All completion/HB constraints are scaled to O(1): completion by the
    model size, budgets by the band size, windows by the per-UE minimum
    compute time, HB by ``theta`` times a characteristic round length.
    """
    model = _Model(sc)
    lay = _Layout(model.s, model.e)
    _validate_aux(aux, lay)
    return _builder_program(model, lay, ordering, aux)


def _validate_aux(aux: AuxVars, lay: _Layout) -> None:
    tri = (lay.tri_r, lay.tri_l)
    checks = [
        ("y_fl_dl", aux.y_fl_dl),
        ("y_hb_dl", aux.y_hb_dl),
        ("y_hb_ul", aux.y_hb_ul),
        ("y_fl_ul", aux.y_fl_ul[tri]),
        ("y_e", aux.y_e[tri]),
    ]
    for name, arr in checks:
        if np.size(arr) and not np.all(np.asarray(arr) > 0):
            raise ValueError(f"auxiliary variables {name} must be strictly positive")


def _builder_program(model: _Model, lay: _Layout, ordering: Ordering, aux: AuxVars) -> ConvexProgram:
    s, e = lay.s, lay.e
    sigma = np.array(ordering.sigma)
    d, k_total, theta = model.d, model.k_total, model.theta
    tri_r, tri_l = lay.tri_r, lay.tri_l
    y_ul_tri = aux.y_fl_ul[tri_r, tri_l]
    y_e_tri = aux.y_e[tri_r, tri_l]
    lam_rank = model.lam[sigma]
    cp_rank = model.cp_coef[sigma]
    tau_min_rank = model.tau_min[sigma]
    lam_tri = lam_rank[tri_r]
    a_tri = model.a_ul[sigma[tri_r]]
    beta = model.beta
    hb_scale = max(theta * model.t_ref, 1.0)

    # window membership: rank r covers t_ul[<r], t_dl[>sigma(r)], t_idle
    w_cols = []
    for r in range(s):
        cols = np.concatenate([
            lay.t_ul[:r], lay.t_dl[sigma[r] + 1:], [lay.t_idle],
        ]).astype(int)
        w_cols.append(cols)
    w_mat = np.zeros((s, lay.n))
    for r, cols in enumerate(w_cols):
        w_mat[r, cols] = 1.0
    w_small = w_mat[:, : 2 * s + 1]  # windows only touch durations and idle

    def win_values(x: np.ndarray) -> np.ndarray:
        return w_mat @ x

    # ---- objective -------------------------------------------------------
    block_rows, block_cols = np.meshgrid(np.arange(2 * s + 1), np.arange(2 * s + 1),
                                         indexing="ij")
    block_rows = block_rows.ravel()
    block_cols = block_cols.ravel()

    def objective(x: np.ndarray):
        t_ul = x[lay.t_ul]
        p = x[lay.p_ul]
        win = win_values(x)
        t_tri = t_ul[tri_l]

        val = float(x[lay.t_dl].sum() + x[lay.t_idle] + t_ul.sum())
        val += float(np.sum(lam_tri * (p * p / (2.0 * y_e_tri) + y_e_tri * t_tri**2 / 2.0)))
        val += float(np.sum(lam_rank * cp_rank / win**2))

        grad = np.zeros(lay.n)
        grad[lay.t_dl] = 1.0
        grad[lay.t_ul] = 1.0
        grad[lay.t_idle] = 1.0
        grad[lay.p_ul] = lam_tri * p / y_e_tri
        np.add.at(grad, lay.t_ul[tri_l], lam_tri * y_e_tri * t_tri)
        win_g = -2.0 * lam_rank * cp_rank / win**3
        grad[: 2 * s + 1] += w_small.T @ win_g

        diag_p = lam_tri / y_e_tri
        diag_tul = np.bincount(tri_l, weights=lam_tri * y_e_tri, minlength=s)
        cw = 6.0 * lam_rank * cp_rank / win**4
        block = (w_small * cw[:, None]).T @ w_small
        rows = np.concatenate([lay.p_ul, lay.t_ul, block_rows])
        cols = np.concatenate([lay.p_ul, lay.t_ul, block_cols])
        vals = np.concatenate([diag_p, diag_tul, block.ravel()])
        return val, grad, (rows, cols, vals)

    # ---- constraint families --------------------------------------------
    constraints = []

    def dl_completion(ue: int):
        idx = np.arange(ue + 1)
        coef = model.c_fl[ue] / d
        y = aux.y_fl_dl[idx]
        k_idx, t_idx = lay.k_dl[idx], lay.t_dl[idx]

        def g(x: np.ndarray):
            kk, tt = x[k_idx], x[t_idx]
            sk = np.sqrt(kk)
            val = 1.0 - coef * float(np.sum(2.0 * y * sk - y * y / tt))
            grad = np.zeros(lay.n)
            grad[k_idx] = -coef * y / sk
            grad[t_idx] = -coef * y * y / tt**2
            hrows = np.concatenate([k_idx, t_idx])
            hvals = np.concatenate([coef * y / (2.0 * kk * sk), 2.0 * coef * y * y / tt**3])
            return val, grad, (hrows, hrows, hvals)
        return g

    def ul_rate_parts(kk, tt_unused, pp, a):
        """rate, partials, and curvature of the perspective uplink rate."""
        u = a * pp / kk
        opu = 1.0 + u
        r = beta * kk * np.log1p(u)
        r_k = beta * (np.log1p(u) - u / opu)
        r_p = beta * a / opu
        r_kk = -beta * u * u / (kk * opu * opu)
        r_pp = -beta * a * a / (kk * opu * opu)
        r_kp = beta * a * u / (kk * opu * opu)
        return r, r_k, r_p, r_kk, r_pp, r_kp

    def ul_completion(rank: int):
        lo = int(np.searchsorted(tri_r, rank))
        hi = int(np.searchsorted(tri_r, rank, side="right"))
        sel = np.arange(lo, hi)
        y = y_ul_tri[sel]
        a = model.a_ul[sigma[rank]]
        k_idx = lay.k_ul[sel]
        p_idx = lay.p_ul[sel]
        t_idx = lay.t_ul[tri_l[sel]]

        def g(x: np.ndarray):
            kk, pp, tt = x[k_idx], x[p_idx], x[t_idx]
            r, r_k, r_p, r_kk, r_pp, r_kp = ul_rate_parts(kk, tt, pp, a)
            sr = np.sqrt(r)
            val = 1.0 - float(np.sum(2.0 * y * sr - y * y / tt)) / d
            grad = np.zeros(lay.n)
            grad[k_idx] = -(y / d) * r_k / sr
            grad[p_idx] = -(y / d) * r_p / sr
            np.add.at(grad, t_idx, -(y * y / d) / tt**2)
            # hessian of -2y*sqrt(r)/d on the (K,p) block
            c1 = -(y / d) / sr          # multiplies H(r)
            c2 = (y / d) / (2.0 * r * sr)  # multiplies grad r outer product
            hkk = c1 * r_kk + c2 * r_k * r_k
            hpp = c1 * r_pp + c2 * r_p * r_p
            hkp = c1 * r_kp + c2 * r_k * r_p
            htt = 2.0 * (y * y / d) / tt**3
            rows = np.concatenate([k_idx, p_idx, k_idx, p_idx, t_idx])
            cols = np.concatenate([k_idx, p_idx, p_idx, k_idx, t_idx])
            vals = np.concatenate([hkk, hpp, hkp, hkp, htt])
            return val, grad, (rows, cols, vals)
        return g

    def hb_rate(eu: int):
        ce = model.c_hb[eu]
        y_dl = aux.y_hb_dl[eu]
        y_ul = aux.y_hb_ul[eu]
        kd_idx = lay.k_hb_dl[eu]
        ku_idx = lay.k_hb_ul[eu]

        def g(x: np.ndarray):
            t_dl, t_ul, t_idle = x[lay.t_dl], x[lay.t_ul], x[lay.t_idle]
            kd, ku = x[kd_idx], x[ku_idx]
            skd, sku = np.sqrt(kd), np.sqrt(ku)
            credit = ce * (
                float(np.sum(2.0 * y_dl * skd - y_dl**2 / t_dl))
                + float(np.sum(2.0 * y_ul * sku - y_ul**2 / t_ul))
                + k_total * t_idle
            )
            total = float(t_dl.sum() + t_idle + t_ul.sum())
            val = (theta * total - credit) / hb_scale
            grad = np.zeros(lay.n)
            grad[lay.t_dl] = (theta - ce * y_dl**2 / t_dl**2) / hb_scale
            grad[lay.t_ul] = (theta - ce * y_ul**2 / t_ul**2) / hb_scale
            grad[lay.t_idle] = (theta - ce * k_total) / hb_scale
            grad[kd_idx] = -ce * y_dl / skd / hb_scale
            grad[ku_idx] = -ce * y_ul / sku / hb_scale
            rows = np.concatenate([kd_idx, ku_idx, lay.t_dl, lay.t_ul])
            vals = np.concatenate([
                ce * y_dl / (2.0 * kd * skd),
                ce * y_ul / (2.0 * ku * sku),
                2.0 * ce * y_dl**2 / t_dl**3,
                2.0 * ce * y_ul**2 / t_ul**3,
            ]) / hb_scale
            return val, grad, (rows, rows, vals)
        return g

    def linear_constraint(idx: np.ndarray, coefs: np.ndarray, offset: float, scale: float):
        grad = np.zeros(lay.n)
        grad[idx] = coefs / scale

        def g(x: np.ndarray):
            return float(x[idx] @ coefs + offset) / scale, grad.copy(), None
        return g

    for ue in range(s):
        constraints.append(dl_completion(ue))
    for rank in range(s):
        constraints.append(ul_completion(rank))
    for eu in range(e):
        constraints.append(hb_rate(eu))

    lb = np.zeros(lay.n)
    ub = np.full(lay.n, np.inf)
    lb[lay.t_dl] = DURATION_FLOOR
    lb[lay.t_ul] = DURATION_FLOOR
    ub[lay.p_ul] = model.p_max

    n_dl_budget = n_ul_budget = 0
    if e:
        for l in range(s):
            idx = np.concatenate([[lay.k_dl[l]], lay.k_hb_dl[:, l]])
            constraints.append(linear_constraint(idx, np.ones(len(idx)), -k_total, k_total))
            n_dl_budget += 1
    else:
        ub[lay.k_dl] = k_total
    for l in range(s):
        sel = lay.k_ul[tri_l == l]
        idx = np.concatenate([sel, lay.k_hb_ul[:, l]]) if e else sel
        if len(idx) == 1:
            ub[idx[0]] = min(ub[idx[0]], k_total)
        else:
            constraints.append(linear_constraint(idx, np.ones(len(idx)), -k_total, k_total))
            n_ul_budget += 1

    for r in range(s):
        scale = tau_min_rank[r]
        idx = w_cols[r]
        constraints.append(linear_constraint(idx, -np.ones(len(idx)), scale, scale))

    # ---- fused value-only path (line search, finite differences) ---------
    def fast_values(x: np.ndarray) -> tuple[float, np.ndarray]:
        with np.errstate(invalid="ignore", divide="ignore"):
            t_dl, t_ul, t_idle = x[lay.t_dl], x[lay.t_ul], x[lay.t_idle]
            k_dl = x[lay.k_dl]
            p = x[lay.p_ul]
            k_ul = x[lay.k_ul]
            win = win_values(x)
            t_tri = t_ul[tri_l]

            f = float(t_dl.sum() + t_idle + t_ul.sum())
            f += float(np.sum(lam_tri * (p * p / (2.0 * y_e_tri) + y_e_tri * t_tri**2 / 2.0)))
            f += float(np.sum(lam_rank * cp_rank / win**2))

            g_parts = []
            # downlink completion
            terms = 2.0 * aux.y_fl_dl * np.sqrt(k_dl) - aux.y_fl_dl**2 / t_dl
            csum = np.cumsum(terms)
            g_parts.append(1.0 - model.c_fl * csum / d)
            # uplink completion
            u = a_tri * p / k_ul
            r_tri = beta * k_ul * np.log1p(u)
            term_tri = 2.0 * y_ul_tri * np.sqrt(r_tri) - y_ul_tri**2 / t_tri
            per_rank = np.bincount(tri_r, weights=term_tri, minlength=s)
            g_parts.append(1.0 - per_rank / d)
            # HB
            if e:
                kd = x[lay.k_hb_dl.ravel()].reshape(e, s)
                ku = x[lay.k_hb_ul.ravel()].reshape(e, s)
                total = float(t_dl.sum() + t_idle + t_ul.sum())
                credit = model.c_hb * (
                    np.sum(2.0 * aux.y_hb_dl * np.sqrt(kd) - aux.y_hb_dl**2 / t_dl[None, :], axis=1)
                    + np.sum(2.0 * aux.y_hb_ul * np.sqrt(ku) - aux.y_hb_ul**2 / t_ul[None, :], axis=1)
                    + k_total * t_idle
                )
                g_parts.append((theta * total - credit) / hb_scale)
            # budgets
            if e:
                kd = x[lay.k_hb_dl.ravel()].reshape(e, s)
                g_parts.append((k_dl + kd.sum(axis=0) - k_total) / k_total)
            ul_sums = np.bincount(tri_l, weights=k_ul, minlength=s)
            if e:
                ku = x[lay.k_hb_ul.ravel()].reshape(e, s)
                ul_tot = ul_sums + ku.sum(axis=0)
                g_parts.append((ul_tot - k_total) / k_total)
            else:
                keep = np.array([np.sum(tri_l == l) > 1 for l in range(s)])
                if keep.any():
                    g_parts.append((ul_sums[keep] - k_total) / k_total)
            # windows
            g_parts.append((tau_min_rank - win) / tau_min_rank)
            return f, np.concatenate([np.atleast_1d(p_) for p_ in g_parts])

    return ConvexProgram(
        n_vars=lay.n,
        objective=objective,
        constraints=constraints,
        lb=lb,
        ub=ub,
        fast_values=fast_values,
    )


# ---------------------------------------------------------------------------
# main loop


@dataclass
class SessionOptions:
    eps: float = 1e-4             # relative objective change to stop
    n_max: int = 50               # surrogate update iterations
    solver: SolveOptions = field(default_factory=lambda: SolveOptions(max_newton=400))


def _nudge_interior(sched: SessionSchedule, model: _Model) -> SessionSchedule:
    """Restore strict margins so the previous solution can warm-start the
    next barrier solve (constraints that were tight stay tight under pure
    duration scaling, so idle time gets an absolute bump for the HB family)."""
    out = sched.copy()
    out.t_dl = np.maximum(out.t_dl, DURATION_FLOOR) * (1 + 1e-9)
    out.t_ul = np.maximum(out.t_ul, DURATION_FLOOR) * (1 + 1e-9)
    out.t_idle = max(out.t_idle, 0.0) * (1 + 1e-9) + 1e-9 * (1.0 + out.total_latency())
    eps_k = 1e-12
    out.k_dl = np.maximum(out.k_dl, eps_k)
    out.k_hb_dl = np.maximum(out.k_hb_dl, eps_k)
    out.k_hb_ul = np.maximum(out.k_hb_ul, eps_k)
    tri = np.triu_indices(model.s)
    out.k_ul[tri] = np.maximum(out.k_ul[tri], eps_k)
    out.p_ul[tri] = np.clip(out.p_ul[tri], eps_k * model.p_max, model.p_max * (1 - 1e-12))
    # rescale any session whose RB total crept to the cap
    k = model.k_total
    dl_tot = out.k_dl + out.k_hb_dl.sum(axis=0)
    scale = np.minimum(1.0, k * (1 - 1e-10) / dl_tot)
    out.k_dl *= scale
    out.k_hb_dl *= scale[None, :]
    tri_mask = np.triu(np.ones((model.s, model.s), dtype=bool))
    ul_tot = (out.k_ul * tri_mask).sum(axis=0) + out.k_hb_ul.sum(axis=0)
    scale = np.minimum(1.0, k * (1 - 1e-10) / np.maximum(ul_tot, 1e-300))
    out.k_ul *= scale[None, :]
    out.k_hb_ul *= scale[None, :]
    return out


def run_algorithm1(
    sc: Scenario,
    ordering: Ordering | None = None,
    opts: SessionOptions | None = None,
) -> tuple[SessionSchedule, RoundOutcome, list[dict[str, Any]]]:
    """Alternate surrogate updates and convex solves until the evaluated
    objective stalls (relative change below ``opts.eps``) or ``n_max`` hits.

    The returned schedule is feasible for the untransformed constraints
    (surrogates under-estimate the delivered bits, so subproblem feasibility
    implies true feasibility); the trace records one row per iteration.
    Raises :class:`SessionOptError` when a subproblem comes back infeasible
    or fails to produce a usable point.
    """
    opts = opts or SessionOptions()
    if ordering is None:
        ordering = Ordering.identity(sc.num_fl)
    model = _Model(sc)
    lay = _Layout(model.s, model.e)

    sched = init_feasible(sc, ordering)
    out = evaluate(sched, sc)
    if not out.is_feasible(1e-6):
        raise SessionOptError("initialization is not feasible")
    trace: list[dict[str, Any]] = [{
        "iteration": 0, "objective": out.objective, "latency": out.latency,
        "energy": out.total_energy(), "subproblem_objective": math.nan,
        "solver_status": "", "newton_steps": 0, "reverted": False,
    }]

    prev_obj = out.objective
    t0_hint: float | None = None
    for n in range(1, opts.n_max + 1):
        aux = update_aux(sched, sc)
        prog = _builder_program(model, lay, ordering, aux)
        x0 = lay.pack(_nudge_interior(sched, model))
        solver_opts = dataclasses.replace(opts.solver, t0=t0_hint)
        report = solve(prog, x0, solver_opts)
        if report.status == INFEASIBLE:
            raise SessionOptError(f"subproblem infeasible at iteration {n}")
        if math.isfinite(report.final_t):
            # successive subproblems barely move; restarting the barrier near
            # its previous weight saves most of the re-centering work
            t0_hint = max(report.final_t / 1e4, 1.0)
        cand = lay.unpack(report.x_opt, ordering)
        cand_out = evaluate(cand, sc)
        usable = cand_out.is_feasible(1e-6) and cand_out.objective <= prev_obj
        if report.status == MAX_ITER and not usable:
            raise SessionOptError(
                f"solver hit its step budget without descent at iteration {n}"
            )
        reverted = not usable
        if usable:
            sched, out = cand, cand_out
        trace.append({
            "iteration": n, "objective": out.objective, "latency": out.latency,
            "energy": out.total_energy(), "subproblem_objective": report.objective_value,
            "solver_status": report.status, "newton_steps": report.newton_steps,
            "reverted": reverted,
        })
        if reverted:
            break
        rel_change = abs(out.objective - prev_obj) / max(abs(out.objective), 1e-300)
        prev_obj = out.objective
        if rel_change <= opts.eps:
            break

    final = sched.copy()
    final.t_dl = np.where(final.t_dl < SNAP_TOL, 0.0, final.t_dl)
    final.t_ul = np.where(final.t_ul < SNAP_TOL, 0.0, final.t_ul)
    if final.t_idle < SNAP_TOL:
        final.t_idle = 0.0
    final_out = evaluate(final, sc)
    final_out.iterations = len(trace) - 1
    return final, final_out, trace


def _enumeration_worker(args) -> tuple[tuple[int, ...], float]:
    sc, sigma, opts = args
    _, out, _ = run_algorithm1(sc, Ordering(sigma), opts)
    return sigma, out.objective


def enumerate_orderings(
    sc: Scenario,
    s_cap: int = 7,
    opts: SessionOptions | None = None,
    n_jobs: int = 1,
) -> list[tuple[Ordering, float]]:
    """Run the optimizer for every uplink ordering (S! of them, so S is
    capped at ``s_cap``). Returns (ordering, objective) pairs, best first."""
    s = sc.num_fl
    if s > s_cap:
        raise ValueError(f"enumeration limited to S <= {s_cap}, got S={s}")
    opts = opts or SessionOptions(
        eps=1e-3, n_max=12, solver=SolveOptions(tol=1e-7, max_newton=300)
    )
    perms = list(itertools.permutations(range(s)))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_enumeration_worker,
                                    [(sc, p, opts) for p in perms], chunksize=4))
    else:
        results = [_enumeration_worker((sc, p, opts)) for p in perms]
    ranked = sorted(results, key=lambda kv: kv[1])
    return [(Ordering(p), obj) for p, obj in ranked]


# ---------------------------------------------------------------------------
# serialization

def schedule_to_dict(sched: SessionSchedule) -> dict[str, Any]:
    return {
        "t_dl": sched.t_dl.tolist(),
        "t_ul": sched.t_ul.tolist(),
        "t_idle": sched.t_idle,
        "k_dl": sched.k_dl.tolist(),
        "k_hb_dl": sched.k_hb_dl.tolist(),
        "k_ul": sched.k_ul.tolist(),
        "p_ul": sched.p_ul.tolist(),
        "k_hb_ul": sched.k_hb_ul.tolist(),
        "ordering": list(sched.ordering.sigma),
    }


def schedule_from_dict(doc: Mapping[str, Any]) -> SessionSchedule:
    s = len(doc["t_dl"])
    k_hb_dl = np.array(doc["k_hb_dl"], dtype=float).reshape(-1, s) if doc["k_hb_dl"] else np.zeros((0, s))
    k_hb_ul = np.array(doc["k_hb_ul"], dtype=float).reshape(-1, s) if doc["k_hb_ul"] else np.zeros((0, s))
    return SessionSchedule(
        t_dl=np.array(doc["t_dl"], dtype=float),
        t_ul=np.array(doc["t_ul"], dtype=float),
        t_idle=float(doc["t_idle"]),
        k_dl=np.array(doc["k_dl"], dtype=float),
        k_hb_dl=k_hb_dl,
        k_ul=np.array(doc["k_ul"], dtype=float),
        p_ul=np.array(doc["p_ul"], dtype=float),
        k_hb_ul=k_hb_ul,
        ordering=Ordering(tuple(int(v) for v in doc["ordering"])),
    )


def outcome_to_dict(out: RoundOutcome) -> dict[str, Any]:
    return {
        "latency": out.latency,
        "e_cp": out.e_cp.tolist(),
        "e_cm": out.e_cm.tolist(),
        "hb_avg_rates": out.hb_avg_rates.tolist(),
        "objective": out.objective,
        "iterations": out.iterations,
        "residuals": {k: np.asarray(v).tolist() for k, v in out.residuals.items()},
    }


def save_schedule(sched: SessionSchedule, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schedule_to_dict(sched), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schedule(path) -> SessionSchedule:
    with open(path, "r", encoding="utf-8") as fh:
        return schedule_from_dict(json.load(fh))


def trace_to_csv(trace: Iterable[Mapping[str, Any]], path) -> None:
    rows = list(trace)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "latency", "energy"])
        for row in rows:
            writer.writerow([
                row["iteration"],
                f"{row['objective']:.9g}",
                f"{row['latency']:.9g}",
                f"{row['energy']:.9g}",
            ])
