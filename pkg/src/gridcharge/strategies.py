"""Charging strategies plugged into the simulation engine.

AmasStrategy is the decentralized learner (one bandit pair per EV plus the
cooperative-request protocol handled in agents). UncontrolledStrategy and
ScheduleStrategy provide the two comparison baselines; centralized_oracle
computes schedules for the latter under perfect PV knowledge.
"""
from __future__ import annotations

import heapq
import itertools

import numpy as np

from . import agents
from .agents import EvProfile, EvState, ev_record, required_instants
from .bandit import (BanditState, PvLearnerState, SuperArm,
                     sample_parameter, update_day, update_pv)
from .engine import Scenario
from .gridnet import pv_power, solve_power_flow

__all__ = [
    "Strategy",
    "AmasStrategy",
    "UncontrolledStrategy",
    "ScheduleStrategy",
    "uncontrolled_action",
    "centralized_oracle",
    "default_pv_exploration",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "gridcharge.checkpoint/1"


def default_pv_exploration(pv_area: float, pv_efficiency: float) -> float:
    """Default PV exploration scale: a tenth of the rated panel power."""
    return 0.1 * pv_area * pv_efficiency * 1000.0


class Strategy:
    """Hooks invoked by the engine; defaults do nothing."""

    selections: dict = {}

    def session_start(self, profile: EvProfile, state: EvState, rng):
        pass

    def decide(self, profile, state, now, requests, delta_i) -> float:
        raise NotImplementedError

    def feedback(self, profile, state, now, charged, cost_norm, crits, pv_w):
        ev_record(state, now, charged, cost_norm, crits, pv_w)

    def session_end(self, profile: EvProfile, state: EvState):
        pass


class AmasStrategy(Strategy):
    """Per-EV combinatorial linear Thompson Sampling with cooperation."""

    def __init__(self, alpha=0.5, beta=360.0, update_rule="rank_one",
                 pv_update_rule="per_arm"):
        if update_rule not in ("rank_one", "per_arm"):
            raise ValueError(f"unknown update rule {update_rule!r}")
        if pv_update_rule not in ("rank_one", "per_arm"):
            raise ValueError(f"unknown PV update rule {pv_update_rule!r}")
        self.alpha = alpha
        self.beta = beta
        self.update_rule = update_rule
        # PV masks cover the whole connection window, where the rank-one
        # system drifts; the diagonal rule keeps the estimate convergent.
        self.pv_update_rule = pv_update_rule
        self.bandits = {}      # ev_id -> BanditState
        self.pv_learners = {}  # ev_id -> PvLearnerState
        self.selections = {}   # ev_id -> [(SuperArm, theta_hat_d), ...]
        self.days_completed = 0

    def session_start(self, profile, state, rng):
        ev = profile.ev_id
        if ev not in self.bandits:
            self.bandits[ev] = BanditState.initial(state.m, self.alpha)
            self.pv_learners[ev] = PvLearnerState.initial(state.m, self.beta)
            self.selections[ev] = []
        state.sampled_theta = sample_parameter(self.bandits[ev], rng)
        state.sampled_phi = sample_parameter(self.pv_learners[ev], rng)

    def decide(self, profile, state, now, requests, delta_i):
        return agents.ev_decide(profile, state, now, requests, delta_i)

    def session_end(self, profile, state):
        ev = profile.ev_id
        theta_hat_d = self.bandits[ev].estimate.copy()
        played = SuperArm(tuple(np.flatnonzero(state.played_mask)))
        self.selections[ev].append((played, theta_hat_d))
        self.bandits[ev] = update_day(self.bandits[ev], state.played_mask,
                                      state.reward_trace, self.update_rule)
        self.pv_learners[ev] = update_pv(self.pv_learners[ev], state.pv_mask,
                                         state.pv_obs, self.pv_update_rule)

    # -- checkpointing -----------------------------------------------------

    def to_checkpoint(self) -> dict:
        def dump(st):
            return {"gram": st.gram.tolist(), "response": st.response.tolist(),
                    "scale": st.scale}
        return {
            "format": CHECKPOINT_FORMAT,
            "days_completed": self.days_completed,
            "alpha": self.alpha,
            "beta": self.beta,
            "update_rule": self.update_rule,
            "pv_update_rule": self.pv_update_rule,
            "evs": {ev: {"bandit": dump(self.bandits[ev]),
                         "pv": dump(self.pv_learners[ev])}
                    for ev in sorted(self.bandits)},
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> "AmasStrategy":
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"unsupported checkpoint format {payload.get('format')!r}")

        def load(cls_, blob):
            gram = np.array(blob["gram"])
            response = np.array(blob["response"])
            return cls_(gram=gram, response=response,
                        estimate=np.linalg.solve(gram, response),
                        scale=blob["scale"])

        strat = cls(alpha=payload["alpha"], beta=payload["beta"],
                    update_rule=payload["update_rule"],
                    pv_update_rule=payload.get("pv_update_rule", "per_arm"))
        strat.days_completed = payload["days_completed"]
        for ev, blob in payload["evs"].items():
            strat.bandits[ev] = load(BanditState, blob["bandit"])
            strat.pv_learners[ev] = load(PvLearnerState, blob["pv"])
            strat.selections[ev] = []
        return strat


def uncontrolled_action(profile: EvProfile, state: EvState) -> float:
    """Plug-and-charge: full power until the SoC target, blind to everything."""
    return profile.p_max if state.soc < profile.soc_target else 0.0


class UncontrolledStrategy(Strategy):
    """Charges at maximum power from plug-in; ignores prices and requests."""

    def decide(self, profile, state, now, requests, delta_i):
        return uncontrolled_action(profile, state)


class ScheduleStrategy(Strategy):
    """Replays fixed per-EV schedules (local-instant booleans)."""

    def __init__(self, schedules: dict):
        self.schedules = {ev: np.asarray(s, dtype=bool)
                          for ev, s in schedules.items()}

    def decide(self, profile, state, now, requests, delta_i):
        plan = self.schedules.get(profile.ev_id)
        if plan is None or now >= plan.shape[0] or not plan[now]:
            return 0.0
        return profile.p_max if state.soc < 1.0 else 0.0


# -- centralized oracle ------------------------------------------------------


def _true_pv_local(scenario: Scenario, profile: EvProfile) -> np.ndarray:
    site = scenario.sites[scenario.ev_site[profile.ev_id]]
    w = profile.window_length
    out = np.empty(w)
    for l in range(w):
        i = (profile.t_arrive + l) % scenario.m
        out[l] = pv_power(site.pv_area, site.pv_efficiency,
                          scenario.irradiance_profile[i])
    return out


class _FeasibilityChecker:
    """Power-flow limit check for a set of EVs charging at a day-instant.

    Base injections assume every connected EV absorbs its site's PV output
    (the engine's behavior away from a full battery).
    """

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        net = scenario.topology
        m = scenario.m
        site_bus = np.array([net.bus_index[s.bus_id] for s in scenario.sites])
        self.ev_bus = {p.ev_id: net.bus_index[p.bus_id]
                       for p in scenario.fleet}
        self.p_max_w = {p.ev_id: p.p_max * 1000.0 for p in scenario.fleet}
        connected = {i: set() for i in range(m)}
        for p in scenario.fleet:
            site = scenario.ev_site[p.ev_id]
            for l in range(p.window_length):
                connected[(p.t_arrive + l) % m].add(site)
        self.base = np.zeros((m, net.n_buses))
        for i in range(m):
            inj = np.zeros(net.n_buses)
            np.add.at(inj, site_bus, scenario.site_load_profiles[:, i])
            for s_idx, site in enumerate(scenario.sites):
                if s_idx not in connected[i]:
                    inj[site_bus[s_idx]] -= pv_power(
                        site.pv_area, site.pv_efficiency,
                        scenario.irradiance_profile[i])
            self.base[i] = inj
        self._memo = {}

    def feasible(self, i_day: int, charging_ev_ids) -> bool:
        key = (i_day, frozenset(charging_ev_ids))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        net = self.sc.topology
        inj = self.base[i_day].copy()
        for ev in charging_ev_ids:
            inj[self.ev_bus[ev]] += self.p_max_w[ev]
        sol = solve_power_flow(net, inj)
        ok = bool(sol.converged
                  and not (sol.line_currents > net.i_rated).any()
                  and not ((sol.bus_voltages < net.v_min) |
                           (sol.bus_voltages > net.v_max)).any())
        self._memo[key] = ok
        return ok


def centralized_oracle(scenario: Scenario, mode="greedy",
                       max_expansions=500_000) -> dict:
    """Violation-free charging schedules under perfect PV foresight.

    "exhaustive" (fleet <= 12): best-first search over the joint per-EV
    instant subsets, returning the minimum-total-cost feasible assignment.
    "greedy": EVs ordered by flexibility take their cheapest instants that
    keep the power flow within limits.
    Returns ev_id -> boolean array over the EV's local connection window.
    """
    fleet = scenario.fleet
    if not fleet:
        return {}
    checker = _FeasibilityChecker(scenario)
    m = scenario.m

    needs = {}
    local_price = {}
    for p in fleet:
        phi = _true_pv_local(scenario, p)
        needs[p.ev_id] = required_instants(p, scenario.delta_i, phi, 0, 0)
        local_price[p.ev_id] = np.array(
            [scenario.price_profile[(p.t_arrive + l) % m]
             for l in range(p.window_length)])

    if mode == "greedy":
        return _oracle_greedy(scenario, checker, needs, local_price)
    if mode == "exhaustive":
        if len(fleet) > 12:
            raise ValueError(
                f"exhaustive oracle limited to 12 EVs (got {len(fleet)}); "
                "use greedy mode")
        return _oracle_exhaustive(scenario, checker, needs, local_price,
                                  max_expansions)
    raise ValueError(f"unknown oracle mode {mode!r}")


def _oracle_greedy(scenario, checker, needs, local_price):
    m = scenario.m
    order = sorted(scenario.fleet,
                   key=lambda p: (p.window_length - needs[p.ev_id], p.ev_id))
    charging_at = {i: set() for i in range(m)}
    schedules = {}
    for p in order:
        plan = np.zeros(p.window_length, dtype=bool)
        got = 0
        for l in sorted(range(p.window_length),
                        key=lambda l: (local_price[p.ev_id][l], l)):
            if got == needs[p.ev_id]:
                break
            i = (p.t_arrive + l) % m
            if checker.feasible(i, charging_at[i] | {p.ev_id}):
                plan[l] = True
                charging_at[i].add(p.ev_id)
                got += 1
        schedules[p.ev_id] = plan
    return schedules


def _oracle_exhaustive(scenario, checker, needs, local_price, max_expansions):
    m = scenario.m
    fleet = scenario.fleet
    per_ev = []
    for p in fleet:
        k = needs[p.ev_id]
        prices = local_price[p.ev_id]
        subsets = sorted(
            (sum(prices[list(c)]), c)
            for c in itertools.combinations(range(p.window_length), k)
        )
        per_ev.append(subsets)

    def feasible_joint(idxs):
        charging_at = {}
        for e, p in enumerate(fleet):
            for l in per_ev[e][idxs[e]][1]:
                charging_at.setdefault((p.t_arrive + l) % m, set()).add(p.ev_id)
        return all(checker.feasible(i, evs) for i, evs in charging_at.items())

    start = tuple(0 for _ in fleet)
    heap = [(sum(per_ev[e][0][0] for e in range(len(fleet))), start)]
    seen = {start}
    pops = 0
    while heap:
        cost, idxs = heapq.heappop(heap)
        pops += 1
        if pops > max_expansions:
            raise RuntimeError(
                "exhaustive oracle exceeded the search budget; use greedy mode")
        if feasible_joint(idxs):
            return {p.ev_id: _plan_from(per_ev[e][idxs[e]][1],
                                        p.window_length)
                    for e, p in enumerate(fleet)}
        for e in range(len(fleet)):
            nxt = list(idxs)
            nxt[e] += 1
            if nxt[e] >= len(per_ev[e]):
                continue
            nxt = tuple(nxt)
            if nxt in seen:
                continue
            seen.add(nxt)
            delta = per_ev[e][nxt[e]][0] - per_ev[e][idxs[e]][0]
            heapq.heappush(heap, (cost + delta, nxt))
    raise RuntimeError("no violation-free joint schedule exists")


def _plan_from(instants, window):
    plan = np.zeros(window, dtype=bool)
    plan[list(instants)] = True
    return plan
