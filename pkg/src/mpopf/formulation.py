"""The stacked N-step dispatch NLP under a primal-dual log barrier.

Variables per step: bus angles and voltage magnitudes, generator P/Q, storage
charge/discharge power and end-of-step energy.  Equalities: active/reactive
power balance per bus, storage dynamics per device, slack-angle and
voltage-setpoint pins.  Every inequality (voltage, generator P, storage power
and energy boxes, from-end squared line current limits) carries a slack
variable s > 0 with barrier term -mu*log(s), so the first-order conditions
form one smooth square system whose Newton matrix is the sparse symmetric
Hessian of the barrier Lagrangian.

All evaluation functions are pure in (problem, y) apart from the barrier
parameter stored on the problem; they allocate per-call scratch and are safe
for concurrent read-only use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import PowerSystem, TimeSeries, build_admittance

BARRIER_SIGMA = 0.2
BARRIER_MU_MIN = 1e-9
BARRIER_MU0 = 0.01
FTB_TAU = 0.995  # fraction-to-boundary


class LayoutError(ValueError):
    """Horizon/series mismatch or infeasible starting energy."""


# ---------------------------------------------------------------------------
# variable layout


class VariableLayout:
    """Index maps for one stacked horizon problem.

    Primal variables come first (interleaved per step), then inequality
    slacks, then equality multipliers, then inequality multipliers; the whole
    range is contiguous and 0-based.  ``bus_of[i]`` gives the owning bus
    (position into ``bus_ids``) of every index, which defines the per-bus
    variable sets used by the affinity metric and the region splitting.
    """

    def __init__(self, system: PowerSystem, horizon: int):
        B = system.n_buses
        G = len(system.generators)
        S = len(system.storages)
        N = horizon
        idx = system.bus_index
        gen_bus = np.array([idx[g.bus] for g in system.generators], dtype=np.int64)
        st_bus = np.array([idx[d.bus] for d in system.storages], dtype=np.int64)
        lim = [n for n, br in enumerate(system.branches) if br.i_max is not None]
        lim_from = np.array([idx[system.branches[n].from_bus] for n in lim], dtype=np.int64)
        nL = len(lim)
        slack_bus = np.array([idx[j] for j in system.slack_buses], dtype=np.int64)
        pin_bus = np.array([idx[j] for j in system.pinned_buses], dtype=np.int64)
        nSl, nP = len(slack_bus), len(pin_bus)

        self.horizon = N
        self.bus_ids = system.bus_ids
        self.gen_bus = gen_bus
        self.storage_bus = st_bus
        self.limited_branches = tuple(lim)
        self.lim_from = lim_from
        self.slack_bus = slack_bus
        self.pinned_bus = pin_bus

        owners: list[np.ndarray] = []
        pos = 0

        def block(shape, owner):
            nonlocal pos
            n = int(np.prod(shape))
            out = np.arange(pos, pos + n, dtype=np.int64).reshape(shape)
            pos += n
            owners.append(np.tile(owner, N) if n else np.empty(0, dtype=np.int64))
            return out

        all_buses = np.arange(B, dtype=np.int64)
        # primal block, interleaved per step
        self.th = block((N, B), all_buses)
        self.v = block((N, B), all_buses)
        self.pg = block((N, G), gen_bus)
        self.qg = block((N, G), gen_bus)
        self.pin = block((N, S), st_bus)
        self.pout = block((N, S), st_bus)
        self.e = block((N, S), st_bus)
        self.n_x = pos

        # inequality slacks, one family block per bound kind
        self.s_v_lo = block((N, B), all_buses)
        self.s_v_hi = block((N, B), all_buses)
        self.s_pg_lo = block((N, G), gen_bus)
        self.s_pg_hi = block((N, G), gen_bus)
        self.s_pin_lo = block((N, S), st_bus)
        self.s_pin_hi = block((N, S), st_bus)
        self.s_pout_lo = block((N, S), st_bus)
        self.s_pout_hi = block((N, S), st_bus)
        self.s_e_lo = block((N, S), st_bus)
        self.s_e_hi = block((N, S), st_bus)
        self.s_line = block((N, nL), lim_from)
        self.n_s = pos - self.n_x

        # equality multipliers
        self.lam_p = block((N, B), all_buses)
        self.lam_q = block((N, B), all_buses)
        self.lam_sdyn = block((N, S), st_bus)
        self.lam_slack = block((N, nSl), slack_bus)
        self.lam_vset = block((N, nP), pin_bus)
        self.n_eq = pos - self.n_x - self.n_s

        # inequality multipliers, mirroring the slack order
        self.m_v_lo = block((N, B), all_buses)
        self.m_v_hi = block((N, B), all_buses)
        self.m_pg_lo = block((N, G), gen_bus)
        self.m_pg_hi = block((N, G), gen_bus)
        self.m_pin_lo = block((N, S), st_bus)
        self.m_pin_hi = block((N, S), st_bus)
        self.m_pout_lo = block((N, S), st_bus)
        self.m_pout_hi = block((N, S), st_bus)
        self.m_e_lo = block((N, S), st_bus)
        self.m_e_hi = block((N, S), st_bus)
        self.m_line = block((N, nL), lim_from)

        self.size = pos
        self.bus_of = np.concatenate(owners) if owners else np.empty(0, dtype=np.int64)
        assert self.bus_of.shape == (self.size,)

        self.x_all = np.arange(0, self.n_x, dtype=np.int64)
        self.s_all = np.arange(self.n_x, self.n_x + self.n_s, dtype=np.int64)
        eq0 = self.n_x + self.n_s
        self.eq_all = np.arange(eq0, eq0 + self.n_eq, dtype=np.int64)
        self.ineq_all = np.arange(eq0 + self.n_eq, self.size, dtype=np.int64)
        self.n_ineq = self.size - eq0 - self.n_eq
        assert self.n_ineq == self.n_s
        # rows of the "mismatch between the constraints": equalities + slack rows
        self.constraint_rows = np.concatenate([self.eq_all, self.ineq_all])
        # the (1,1) saddle block, where diagonal regularization is applied
        self.primal_rows = np.concatenate([self.x_all, self.s_all])

        self.counts = {
            "theta": B, "v": B, "pg": G, "qg": G,
            "pin": S, "pout": S, "e": S,
            "balance_eq": 2 * B, "storage_eq": S,
            "slack_pins": nSl, "vset_pins": nP,
            "ineq": self.n_s // N if N else 0,
        }

    def step_local_primal(self) -> int:
        """Primal variables per step excluding storage energy."""
        c = self.counts
        return 2 * c["theta"] + 2 * c["pg"] + 2 * c["pin"]


# ---------------------------------------------------------------------------
# the horizon problem


@dataclass
class KktSystem:
    """Hessian of the barrier Lagrangian + KKT residual at one iterate."""

    hessian: sp.csr_matrix
    residual: np.ndarray
    iterate: np.ndarray


class HorizonProblem:
    """The N-step stacked NLP starting at series interval ``start_step``.

    Holds the static system, the layout, the horizon's wind/load slices, the
    starting storage energy, and the current barrier parameter ``barrier_mu``
    (owned and advanced by whichever solver runs the problem).
    """

    def __init__(self, system: PowerSystem, series: TimeSeries, start_step: int,
                 horizon: int, e_start: np.ndarray):
        self.system = system
        self.series = series
        self.start_step = start_step
        self.horizon = horizon
        self.e_start = e_start
        self.barrier_mu = BARRIER_MU0
        self.layout = VariableLayout(system, horizon)
        L = self.layout
        B = system.n_buses
        N = horizon
        idx = system.bus_index

        Y = build_admittance(system)
        self.Y = Y
        self.Gd = Y.real.diagonal().copy()
        self.Bd = Y.imag.diagonal().copy()
        pj, pk = np.nonzero((Y != 0) & ~np.eye(B, dtype=bool))
        self.pair_j = pj
        self.pair_k = pk
        self.pair_G = Y.real[pj, pk]
        self.pair_B = Y.imag[pj, pk]

        self.p_base = np.array([b.p_load_base for b in system.buses])
        self.q_base = np.array([b.q_load_base for b in system.buses])
        self.scale = series.load_scale[start_step:start_step + N].copy()
        wind = np.zeros((N, B))
        for bus, w in series.wind_power.items():
            wind[:, idx[bus]] = w[start_step:start_step + N]
        self.wind = wind

        g = system.generators
        self.gen_a = np.array([u.a for u in g])
        self.gen_b = np.array([u.b for u in g])
        self.gen_c = np.array([u.c for u in g])
        self.pg_min = np.array([u.p_min for u in g])
        self.pg_max = np.array([u.p_max for u in g])

        st = system.storages
        self.eta_c = np.array([d.eta_c for d in st])
        self.eta_d_inv = np.array([1.0 / d.eta_d for d in st])
        self.eps_sbl = np.array([d.eps_sbl for d in st])
        self.e_min = np.array([d.e_min for d in st])
        self.e_max = np.array([d.e_max for d in st])
        self.pin_max = np.array([d.p_in_max for d in st])
        self.pout_max = np.array([d.p_out_max for d in st])

        self.v_min = np.array([b.v_min for b in system.buses])
        self.v_max = np.array([b.v_max for b in system.buses])
        self.v_set = np.array(
            [system.buses[i].v_set for i in L.pinned_bus], dtype=float
        ) if len(L.pinned_bus) else np.empty(0)

        # pi-model constants of the limited branches (from-end current)
        lf, lt, a2, c2, al, be, im2 = [], [], [], [], [], [], []
        for n in L.limited_branches:
            br = system.branches[n]
            y = br.y_series
            g_, b_ = y.real, y.imag
            h = 0.5 * br.b_sh
            lf.append(idx[br.from_bus])
            lt.append(idx[br.to_bus])
            a2.append(g_ * g_ + (b_ + h) ** 2)
            c2.append(g_ * g_ + b_ * b_)
            al.append(g_ * g_ + b_ * b_ + b_ * h)
            be.append(g_ * h)
            im2.append(br.i_max ** 2)
        self.lim_from = np.array(lf, dtype=np.int64)
        self.lim_to = np.array(lt, dtype=np.int64)
        self.lim_a2 = np.array(a2)
        self.lim_c2 = np.array(c2)
        self.lim_alpha = np.array(al)
        self.lim_beta = np.array(be)
        self.lim_imax2 = np.array(im2)

        self._build_static_structure()

    # -- static sparsity -----------------------------------------------------

    def _build_static_structure(self) -> None:
        """Precompute triplet (row, col) patterns; data is filled per iterate.

        Everything is emitted with row >= col; the assembled lower matrix Hl
        yields the exact symmetric Hessian as Hl + Hl.T - diag(Hl).
        """
        L = self.layout
        N = L.horizon
        steps = np.arange(N)
        pj, pk = self.pair_j, self.pair_k

        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        self._hess_fill: list[tuple[str, np.ndarray] | tuple[str, None]] = []

        def seg(r, c, tag=None, static=None):
            r = np.asarray(r, dtype=np.int64).ravel()
            c = np.asarray(c, dtype=np.int64).ravel()
            rows.append(np.maximum(r, c))
            cols.append(np.minimum(r, c))
            if static is not None:
                self._hess_fill.append(("", np.asarray(static, dtype=float).ravel()))
            else:
                self._hess_fill.append((tag, None))

        # objective curvature: d2f/dPg2 = 2a
        seg(L.pg, L.pg, static=np.tile(2.0 * self.gen_a, N))
        # power-flow curvature per directed pair (j, k)
        seg(L.v[:, pj], L.v[:, pk], "pf_vjvk")
        seg(L.v[:, pj], L.th[:, pj], "pf_vjtj")
        seg(L.v[:, pj], L.th[:, pk], "pf_vjtk")
        seg(L.v[:, pk], L.th[:, pj], "pf_vktj")
        seg(L.v[:, pk], L.th[:, pk], "pf_vktk")
        seg(L.th[:, pj], L.th[:, pj], "pf_tjtj")
        seg(L.th[:, pj], L.th[:, pk], "pf_tjtk")
        seg(L.th[:, pk], L.th[:, pk], "pf_tktk")
        # self-admittance curvature (vj, vj)
        seg(L.v, L.v, "pf_self")
        # line-limit curvature
        lf, lt = self.lim_from, self.lim_to
        seg(L.v[:, lf], L.v[:, lf], "ln_vfvf")
        seg(L.v[:, lt], L.v[:, lt], "ln_vtvt")
        seg(L.v[:, lf], L.v[:, lt], "ln_vfvt")
        seg(L.v[:, lf], L.th[:, lf], "ln_vftf")
        seg(L.v[:, lf], L.th[:, lt], "ln_vftt")
        seg(L.v[:, lt], L.th[:, lf], "ln_vttf")
        seg(L.v[:, lt], L.th[:, lt], "ln_vttt")
        seg(L.th[:, lf], L.th[:, lf], "ln_tftf")
        seg(L.th[:, lt], L.th[:, lt], "ln_tttt")
        seg(L.th[:, lf], L.th[:, lt], "ln_tftt")
        # barrier block d2/ds2 = mu/s^2
        seg(L.s_all, L.s_all, "barrier")
        # slack-multiplier identity
        seg(L.ineq_all, L.s_all, static=np.ones(L.n_s))

        # Jacobian triplets (constraint row, x col); shared by residual and H
        jrows: list[np.ndarray] = []
        jcols: list[np.ndarray] = []
        self._jac_fill: list[tuple[str, np.ndarray] | tuple[str, None]] = []

        def jseg(r, c, tag=None, static=None):
            r = np.asarray(r, dtype=np.int64).ravel()
            c = np.asarray(c, dtype=np.int64).ravel()
            jrows.append(r)
            jcols.append(c)
            if static is not None:
                self._jac_fill.append(("", np.asarray(static, dtype=float).ravel()))
            else:
                self._jac_fill.append((tag, None))

        S = len(self.system.storages)
        # active balance rows
        jseg(L.lam_p[:, L.gen_bus], L.pg, static=np.ones(L.pg.size))
        jseg(L.lam_p[:, L.storage_bus], L.pin, static=-np.ones(L.pin.size))
        jseg(L.lam_p[:, L.storage_bus], L.pout, static=np.ones(L.pout.size))
        jseg(L.lam_p[:, pj], L.v[:, pj], "jp_vj")
        jseg(L.lam_p[:, pj], L.v[:, pk], "jp_vk")
        jseg(L.lam_p[:, pj], L.th[:, pj], "jp_tj")
        jseg(L.lam_p[:, pj], L.th[:, pk], "jp_tk")
        jseg(L.lam_p, L.v, "jp_self")
        # reactive balance rows
        jseg(L.lam_q[:, L.gen_bus], L.qg, static=np.ones(L.qg.size))
        jseg(L.lam_q[:, pj], L.v[:, pj], "jq_vj")
        jseg(L.lam_q[:, pj], L.v[:, pk], "jq_vk")
        jseg(L.lam_q[:, pj], L.th[:, pj], "jq_tj")
        jseg(L.lam_q[:, pj], L.th[:, pk], "jq_tk")
        jseg(L.lam_q, L.v, "jq_self")
        # storage dynamics rows: E(t) - E(t-1) - eta_c*Pin + Pout/eta_d
        jseg(L.lam_sdyn, L.e, static=np.ones(L.e.size))
        if N > 1 and S:
            jseg(L.lam_sdyn[1:], L.e[:-1], static=-np.ones((N - 1) * S))
        jseg(L.lam_sdyn, L.pin, static=np.tile(-self.eta_c, N))
        jseg(L.lam_sdyn, L.pout, static=np.tile(self.eta_d_inv, N))
        # pins
        jseg(L.lam_slack, L.th[:, L.slack_bus], static=np.ones(L.lam_slack.size))
        jseg(L.lam_vset, L.v[:, L.pinned_bus], static=np.ones(L.lam_vset.size))
        # box inequalities
        for mrow, var, sign in (
            (L.m_v_lo, L.v, -1.0), (L.m_v_hi, L.v, 1.0),
            (L.m_pg_lo, L.pg, -1.0), (L.m_pg_hi, L.pg, 1.0),
            (L.m_pin_lo, L.pin, -1.0), (L.m_pin_hi, L.pin, 1.0),
            (L.m_pout_lo, L.pout, -1.0), (L.m_pout_hi, L.pout, 1.0),
            (L.m_e_lo, L.e, -1.0), (L.m_e_hi, L.e, 1.0),
        ):
            jseg(mrow, var, static=np.full(mrow.size, sign))
        # line-limit gradient rows
        jseg(L.m_line, L.v[:, lf], "jl_vf")
        jseg(L.m_line, L.v[:, lt], "jl_vt")
        jseg(L.m_line, L.th[:, lf], "jl_tf")
        jseg(L.m_line, L.th[:, lt], "jl_tt")

        self._h_rows = np.concatenate(rows + jrows)
        self._h_cols = np.concatenate(cols + jcols)
        self._j_rows = np.concatenate(jrows)
        self._j_cols = np.concatenate(jcols)
        # Jacobian rows always index multiplier blocks, which sit above x cols
        assert np.all(self._j_rows > self._j_cols)

    # -- per-iterate quantities ----------------------------------------------

    def _trig(self, y: np.ndarray) -> dict:
        L = self.layout
        TH = y[L.th]
        V = y[L.v]
        dth = TH[:, self.pair_j] - TH[:, self.pair_k]
        c, s = np.cos(dth), np.sin(dth)
        A = self.pair_G * c + self.pair_B * s
        At = self.pair_G * s - self.pair_B * c
        Vj = V[:, self.pair_j]
        Vk = V[:, self.pair_k]
        lth = TH[:, self.lim_from] - TH[:, self.lim_to]
        w = self.lim_alpha * np.cos(lth) - self.lim_beta * np.sin(lth)
        wp = -self.lim_alpha * np.sin(lth) - self.lim_beta * np.cos(lth)
        return {
            "TH": TH, "V": V, "A": A, "At": At, "Vj": Vj, "Vk": Vk,
            "T": Vj * Vk * A, "U": Vj * Vk * At,
            "Vlf": V[:, self.lim_from], "Vlt": V[:, self.lim_to],
            "w": w, "wp": wp,
        }

    def _balance_mismatch(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """LHS - RHS of the active/reactive balances, (N, B) each."""
        L = self.layout
        V = y[L.v]
        U = V * np.exp(1j * y[L.th])
        Scalc = U * np.conj(U @ self.Y.T)
        N, B = V.shape
        inj_p = self.wind - self.p_base * self.scale[:, None]
        inj_q = np.zeros((N, B)) - self.q_base * self.scale[:, None]
        np.add.at(inj_p, (np.arange(N)[:, None], L.gen_bus[None, :]), y[L.pg])
        np.add.at(inj_q, (np.arange(N)[:, None], L.gen_bus[None, :]), y[L.qg])
        if len(L.storage_bus):
            np.add.at(inj_p, (np.arange(N)[:, None], L.storage_bus[None, :]),
                      y[L.pout] - y[L.pin])
        return inj_p - Scalc.real, inj_q - Scalc.imag

    def _storage_residual(self, y: np.ndarray) -> np.ndarray:
        L = self.layout
        E = y[L.e]
        prev = np.vstack([self.e_start[None, :], E[:-1]])
        return E - prev - self.eta_c * y[L.pin] + self.eta_d_inv * y[L.pout] \
            + self.eps_sbl

    def _line_current_sq(self, tr: dict) -> np.ndarray:
        Vj, Vk = tr["Vlf"], tr["Vlt"]
        return self.lim_a2 * Vj ** 2 + self.lim_c2 * Vk ** 2 - 2.0 * Vj * Vk * tr["w"]

    def _equality_values(self, y: np.ndarray) -> np.ndarray:
        """Equality residuals aligned with the lam_* index blocks."""
        L = self.layout
        dP, dQ = self._balance_mismatch(y)
        sd = self._storage_residual(y)
        th_sl = y[L.th][:, L.slack_bus]
        v_pin = y[L.v][:, L.pinned_bus] - self.v_set
        return np.concatenate(
            [dP.ravel(), dQ.ravel(), sd.ravel(), th_sl.ravel(), v_pin.ravel()]
        )

    def _inequality_values(self, y: np.ndarray, tr: dict) -> np.ndarray:
        """Inequality values c_I(x) aligned with the s_*/m_* index blocks."""
        L = self.layout
        V, PG = y[L.v], y[L.pg]
        PIN, POUT, E = y[L.pin], y[L.pout], y[L.e]
        F = self._line_current_sq(tr)
        return np.concatenate([
            (self.v_min - V).ravel(), (V - self.v_max).ravel(),
            (self.pg_min - PG).ravel(), (PG - self.pg_max).ravel(),
            (-PIN).ravel(), (PIN - self.pin_max).ravel(),
            (-POUT).ravel(), (POUT - self.pout_max).ravel(),
            (self.e_min - E).ravel(), (E - self.e_max).ravel(),
            (F - self.lim_imax2).ravel(),
        ])

    def _jacobian_data(self, tr: dict) -> np.ndarray:
        """Constraint-Jacobian values in static segment order."""
        A, At, Vj, Vk = tr["A"], tr["At"], tr["Vj"], tr["Vk"]
        T, U, V = tr["T"], tr["U"], tr["V"]
        Vlf, Vlt, w, wp = tr["Vlf"], tr["Vlt"], tr["w"], tr["wp"]
        vals = {
            "jp_vj": -Vk * A, "jp_vk": -Vj * A, "jp_tj": U, "jp_tk": -U,
            "jp_self": -2.0 * V * self.Gd,
            "jq_vj": -Vk * At, "jq_vk": -Vj * At, "jq_tj": -T, "jq_tk": T,
            "jq_self": 2.0 * V * self.Bd,
            "jl_vf": 2.0 * self.lim_a2 * Vlf - 2.0 * Vlt * w,
            "jl_vt": 2.0 * self.lim_c2 * Vlt - 2.0 * Vlf * w,
            "jl_tf": -2.0 * Vlf * Vlt * wp,
            "jl_tt": 2.0 * Vlf * Vlt * wp,
        }
        return np.concatenate(
            [static if static is not None else vals[tag].ravel()
             for tag, static in self._jac_fill]
        )

    def _hessian_data(self, y: np.ndarray, tr: dict, jac_data: np.ndarray) -> np.ndarray:
        L = self.layout
        lamP = y[L.lam_p]
        lamQ = y[L.lam_q]
        wP = -lamP[:, self.pair_j]
        wQ = -lamQ[:, self.pair_j]
        A, At, Vj, Vk, T, U = tr["A"], tr["At"], tr["Vj"], tr["Vk"], tr["T"], tr["U"]
        D = -At  # dA/dth_j
        lam_l = y[L.m_line]
        Vlf, Vlt, w, wp = tr["Vlf"], tr["Vlt"], tr["w"], tr["wp"]
        s = y[L.s_all]
        mixed_vt = wP * T + wQ * U
        vals = {
            "pf_vjvk": wP * A + wQ * At,
            "pf_vjtj": wP * Vk * D + wQ * Vk * A,
            "pf_vjtk": -(wP * Vk * D + wQ * Vk * A),
            "pf_vktj": wP * Vj * D + wQ * Vj * A,
            "pf_vktk": -(wP * Vj * D + wQ * Vj * A),
            "pf_tjtj": -mixed_vt,
            "pf_tjtk": mixed_vt,
            "pf_tktk": -mixed_vt,
            "pf_self": -2.0 * lamP * self.Gd + 2.0 * lamQ * self.Bd,
            "ln_vfvf": lam_l * (2.0 * self.lim_a2),
            "ln_vtvt": lam_l * (2.0 * self.lim_c2),
            "ln_vfvt": lam_l * (-2.0 * w),
            "ln_vftf": lam_l * (-2.0 * Vlt * wp),
            "ln_vftt": lam_l * (2.0 * Vlt * wp),
            "ln_vttf": lam_l * (-2.0 * Vlf * wp),
            "ln_vttt": lam_l * (2.0 * Vlf * wp),
            "ln_tftf": lam_l * (2.0 * Vlf * Vlt * w),
            "ln_tttt": lam_l * (2.0 * Vlf * Vlt * w),
            "ln_tftt": lam_l * (-2.0 * Vlf * Vlt * w),
            "barrier": self.barrier_mu / s ** 2,
        }
        parts = [static if static is not None else vals[tag].ravel()
                 for tag, static in self._hess_fill]
        return np.concatenate(parts + [jac_data])

    def _evaluate(self, y: np.ndarray, need_hessian: bool):
        L = self.layout
        n = L.size
        tr = self._trig(y)
        jac = self._jacobian_data(tr)
        J = sp.csr_matrix(
            (jac, (self._j_rows, self._j_cols)), shape=(n, n)
        )
        R = np.zeros(n)
        R[L.pg] = 2.0 * self.gen_a * y[L.pg] + self.gen_b
        lam = np.zeros(n)
        lam[L.eq_all] = y[L.eq_all]
        lam[L.ineq_all] = y[L.ineq_all]
        R += J.T @ lam
        s = y[L.s_all]
        R[L.s_all] = -self.barrier_mu / s + y[L.ineq_all]
        R[L.eq_all] = self._equality_values(y)
        R[L.ineq_all] = self._inequality_values(y, tr) + s
        if not need_hessian:
            return R, None
        data = self._hessian_data(y, tr, jac)
        Hl = sp.csr_matrix((data, (self._h_rows, self._h_cols)), shape=(n, n))
        H = (Hl + Hl.T - sp.diags(Hl.diagonal())).tocsr()
        return R, H


# ---------------------------------------------------------------------------
# public operations


def build_horizon_problem(system: PowerSystem, series: TimeSeries, start_step: int,
                          horizon: int, e_start=None) -> HorizonProblem:
    """Stack the dispatch NLP over ``horizon`` steps starting at ``start_step``.

    ``e_start`` gives the storage energy entering the horizon (defaults to
    each device's e_init).
    """
    if horizon < 1:
        raise LayoutError("horizon must be >= 1")
    if start_step < 0 or start_step + horizon > len(series):
        raise LayoutError(
            f"horizon [{start_step}, {start_step + horizon}) overruns the "
            f"{len(series)}-interval series"
        )
    if e_start is None:
        e_start = np.array([d.e_init for d in system.storages])
    else:
        e_start = np.asarray(e_start, dtype=float)
    for s, d in enumerate(system.storages):
        # 1e-5 headroom: applied-schedule energies drift from the bounds by
        # at most the solver's inequality-feasibility tolerance
        if not (d.e_min - 1e-5 <= e_start[s] <= d.e_max + 1e-5):
            raise LayoutError(f"e_start[{s}] outside [{d.e_min}, {d.e_max}]")
    return HorizonProblem(system, series, start_step, horizon, e_start)


def eval_objective(problem: HorizonProblem, y: np.ndarray) -> float:
    """Total generation cost ($) over the horizon: sum of a*P^2 + b*P + c."""
    PG = y[problem.layout.pg]
    per_gen = problem.gen_a * PG ** 2 + problem.gen_b * PG + problem.gen_c
    return float(per_gen.sum())


def eval_power_balance(problem: HorizonProblem, y: np.ndarray, j: int, t: int):
    """Active/reactive balance mismatch (LHS - RHS) at bus id ``j``, step ``t``."""
    dP, dQ = problem._balance_mismatch(y)
    b = problem.system.bus_index[j]
    return float(dP[t, b]), float(dQ[t, b])


def eval_storage_dynamics(problem: HorizonProblem, y: np.ndarray, device: int,
                          t: int) -> float:
    """Residual of the energy-update equation for one device at step ``t``."""
    return float(problem._storage_residual(y)[t, device])


def eval_line_current_sq(problem: HorizonProblem, y: np.ndarray, branch: int,
                         t: int) -> float:
    """Squared from-end current magnitude of ``system.branches[branch]`` at step t."""
    br = problem.system.branches[branch]
    idx = problem.system.bus_index
    L = problem.layout
    ys = br.y_series
    g, b = ys.real, ys.imag
    h = 0.5 * br.b_sh
    a2 = g * g + (b + h) ** 2
    c2 = g * g + b * b
    alpha = g * g + b * b + b * h
    beta = g * h
    jf, kt = idx[br.from_bus], idx[br.to_bus]
    Vj = y[L.v[t, jf]]
    Vk = y[L.v[t, kt]]
    th = y[L.th[t, jf]] - y[L.th[t, kt]]
    w = alpha * np.cos(th) - beta * np.sin(th)
    return float(a2 * Vj ** 2 + c2 * Vk ** 2 - 2.0 * Vj * Vk * w)


def eval_kkt_residual(problem: HorizonProblem, y: np.ndarray) -> np.ndarray:
    """Gradient of the barrier Lagrangian, stacked over all layout indices.

    Stationarity rows carry objective + J^T-multiplier + barrier terms;
    equality and slack rows carry the constraint residuals themselves.
    """
    R, _ = problem._evaluate(y, need_hessian=False)
    return R


def assemble_hessian(problem: HorizonProblem, y: np.ndarray) -> KktSystem:
    """Exact sparse symmetric Hessian of the barrier Lagrangian at ``y``."""
    R, H = problem._evaluate(y, need_hessian=True)
    return KktSystem(hessian=H, residual=R, iterate=y.copy())


def eval_lagrangian(problem: HorizonProblem, y: np.ndarray) -> float:
    """Scalar barrier Lagrangian; finite differences of this match the residual."""
    L = problem.layout
    tr = problem._trig(y)
    s = y[L.s_all]
    val = eval_objective(problem, y) - problem.barrier_mu * float(np.log(s).sum())
    val += float(y[L.eq_all] @ problem._equality_values(y))
    val += float(y[L.ineq_all] @ (problem._inequality_values(y, tr) + s))
    return val


def barrier_update(problem: HorizonProblem, y: np.ndarray) -> float:
    """Next barrier parameter: shrink by sigma once the residual is centered."""
    res = float(np.linalg.norm(eval_kkt_residual(problem, y), np.inf))
    return barrier_rule(problem.barrier_mu, res)


def barrier_rule(mu: float, residual_inf: float) -> float:
    if residual_inf < 10.0 * mu:
        return max(BARRIER_MU_MIN, BARRIER_SIGMA * mu)
    return mu


def fraction_to_boundary(layout: VariableLayout, y: np.ndarray, dy: np.ndarray,
                         tau: float = FTB_TAU) -> float:
    """Largest step in (0, 1] keeping every inequality slack positive.

    Multipliers are left free: under the exact (primal) barrier Hessian their
    stationary value mu/s is positive, but clamping them on the way there
    deadlocks block steps.
    """
    alpha = 1.0
    vals = y[layout.s_all]
    step = dy[layout.s_all]
    shrink = step < 0
    if np.any(shrink):
        alpha = min(alpha, float(np.min(-tau * vals[shrink] / step[shrink])))
    return alpha


def recenter_barrier(problem: HorizonProblem, y: np.ndarray,
                     mu0: float) -> np.ndarray:
    """Reset slacks/inequality multipliers of a shifted iterate for a fresh
    barrier ladder: s = max(-c_I(x), sqrt(mu0)) puts active constraints on
    the mu0-centered path, and lambda_I = mu0/s matches."""
    L = problem.layout
    out = y.copy()
    tr = problem._trig(out)
    ci = problem._inequality_values(out, tr)
    s0 = np.maximum(-ci, np.sqrt(mu0))
    out[L.s_all] = s0
    out[L.ineq_all] = mu0 / s0
    return out


def flat_start(problem: HorizonProblem, mu0: float = BARRIER_MU0) -> np.ndarray:
    """The common starting iterate: flat voltages, mid-box generation, idle
    storage, slacks at half box width, multipliers 0 (equalities) or mu/s."""
    L = problem.layout
    y = np.zeros(L.size)
    v0 = np.ones(len(problem.system.buses))
    for p, bidx in enumerate(L.pinned_bus):
        v0[bidx] = problem.v_set[p]
    y[L.v] = v0
    y[L.pg] = 0.5 * (problem.pg_min + problem.pg_max)
    y[L.e] = problem.e_start

    def half(width):
        return np.maximum(0.5 * width, 1e-6)

    for t in range(L.horizon):
        y[L.s_v_lo[t]] = y[L.s_v_hi[t]] = half(problem.v_max - problem.v_min)
        y[L.s_pg_lo[t]] = y[L.s_pg_hi[t]] = half(problem.pg_max - problem.pg_min)
        y[L.s_pin_lo[t]] = y[L.s_pin_hi[t]] = half(problem.pin_max)
        y[L.s_pout_lo[t]] = y[L.s_pout_hi[t]] = half(problem.pout_max)
        y[L.s_e_lo[t]] = y[L.s_e_hi[t]] = half(problem.e_max - problem.e_min)
        y[L.s_line[t]] = half(problem.lim_imax2)
    y[L.ineq_all] = mu0 / y[L.s_all]
    return y
