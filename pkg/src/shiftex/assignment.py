"""Facility-location assignment of parties to experts: exact and greedy solvers.

The exact solver is a small-instance oracle used to measure the greedy
router's optimality gap; both minimize embedding mismatch plus expert
opening cost plus a label-imbalance penalty.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .stats import KernelSpec, as_histogram, jsd, mmd_squared

MAX_PARTIES = 12
MAX_FACILITIES = 5
MAX_JOINT_STATES = 200_000


@dataclass(frozen=True, eq=False)
class AssignmentProblem:
    """One routing instance.

    parties: (party_id, embedding sample, label hist); existing experts are
    always-open facilities (id, signature sample, aggregate hist); candidates
    are openable facilities (id, centroid sample) carrying lambda_open cost.
    """

    parties: tuple
    existing: tuple
    candidates: tuple
    lambda_open: float
    mu_balance: float
    u_max: int | None
    reference_hist: np.ndarray
    kernel: KernelSpec = KernelSpec()

    def __post_init__(self):
        object.__setattr__(self, "parties", tuple(self.parties))
        object.__setattr__(self, "existing", tuple(self.existing))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "reference_hist", as_histogram(self.reference_hist))
        if not self.existing and not self.candidates:
            raise ValueError("need at least one existing expert or candidate")
        ids = [f[0] for f in self.existing] + [f[0] for f in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("facility ids must be unique")
        pids = [p[0] for p in self.parties]
        if len(set(pids)) != len(pids):
            raise ValueError("party ids must be unique")
        for _, sample, hist in self.parties:
            if np.asarray(sample).ndim != 2:
                raise ValueError("party samples must be 2-D arrays")
            as_histogram(hist)
        for _, sample, hist in self.existing:
            if np.asarray(sample).ndim != 2:
                raise ValueError("expert signature samples must be 2-D arrays")
            as_histogram(hist)
        for _, sample in self.candidates:
            if np.asarray(sample).ndim != 2:
                raise ValueError("candidate centroid samples must be 2-D arrays")
        if self.lambda_open < 0 or self.mu_balance < 0:
            raise ValueError("lambda_open and mu_balance must be nonnegative")
        if self.u_max is not None and self.u_max < 1:
            raise ValueError("u_max must be at least 1 when bounded")

    def facility_ids(self) -> list[int]:
        return [f[0] for f in self.existing] + [f[0] for f in self.candidates]

    def facility_sample(self, fid: int) -> np.ndarray:
        for f in self.existing:
            if f[0] == fid:
                return f[1]
        for f in self.candidates:
            if f[0] == fid:
                return f[1]
        raise KeyError(fid)


@dataclass(frozen=True)
class AssignmentSolution:
    z: dict = field(default_factory=dict)  # (party_id, facility_id) -> 1
    w: dict = field(default_factory=dict)  # candidate_id -> 0/1
    objective: float = 0.0


def _cost_table(problem: AssignmentProblem) -> dict[tuple[int, int], float]:
    table = {}
    for pid, sample, _ in problem.parties:
        for fid in problem.facility_ids():
            table[(pid, fid)] = mmd_squared(sample, problem.facility_sample(fid), problem.kernel)
    return table


def check_feasibility(
    problem: AssignmentProblem, solution: AssignmentSolution
) -> tuple[bool, list[str]]:
    """Verify totality, activation coupling, K0 openness, and capacity."""
    violations = []
    existing_ids = {f[0] for f in problem.existing}
    candidate_ids = {f[0] for f in problem.candidates}
    party_ids = {p[0] for p in problem.parties}
    counts = {pid: 0 for pid in party_ids}
    loads: dict[int, int] = {}
    for (pid, fid), val in solution.z.items():
        if val not in (0, 1):
            violations.append(f"domain: z[{pid},{fid}] = {val}")
            continue
        if val == 0:
            continue
        if pid not in party_ids:
            violations.append(f"totality: unknown party {pid}")
            continue
        if fid not in existing_ids and fid not in candidate_ids:
            violations.append(f"activation coupling: unknown facility {fid}")
            continue
        counts[pid] += 1
        loads[fid] = loads.get(fid, 0) + 1
        if fid in candidate_ids and solution.w.get(fid, 0) != 1:
            violations.append(f"activation coupling: party {pid} on closed candidate {fid}")
    for pid, c in sorted(counts.items()):
        if c != 1:
            violations.append(f"totality: party {pid} has {c} assignments")
    for fid in sorted(solution.w):
        if fid in existing_ids:
            violations.append(f"activation coupling: w declared for existing expert {fid}")
        elif fid not in candidate_ids:
            violations.append(f"activation coupling: w for unknown candidate {fid}")
        elif solution.w[fid] not in (0, 1):
            violations.append(f"domain: w[{fid}] = {solution.w[fid]}")
    if problem.u_max is not None:
        for fid, load in sorted(loads.items()):
            if load > problem.u_max:
                violations.append(f"capacity: facility {fid} holds {load} > {problem.u_max}")
    return (not violations, violations)


def _mu_term(problem: AssignmentProblem, assigned: dict[int, list[int]]) -> float:
    """Label-imbalance penalty over facilities with at least one party."""
    if problem.mu_balance == 0.0:
        return 0.0
    hist_of = {p[0]: (p[1].shape[0], p[2]) for p in problem.parties}
    total = 0.0
    for fid, pids in assigned.items():
        if not pids:
            continue
        weights = np.array([hist_of[p][0] for p in pids], dtype=float)
        hists = np.array([hist_of[p][1] for p in pids], dtype=float)
        agg = (weights[:, None] * hists).sum(axis=0) / weights.sum()
        total += jsd(agg, problem.reference_hist)
    return problem.mu_balance * total


def objective_value(problem: AssignmentProblem, solution: AssignmentSolution) -> float:
    ok, violations = check_feasibility(problem, solution)
    if not ok:
        raise ValueError("infeasible solution: " + "; ".join(violations))
    cost = _cost_table(problem)
    mmd_total = sum(cost[key] for key, val in solution.z.items() if val == 1)
    open_total = problem.lambda_open * sum(v for v in solution.w.values())
    assigned: dict[int, list[int]] = {}
    for (pid, fid), val in solution.z.items():
        if val == 1:
            assigned.setdefault(fid, []).append(pid)
    return mmd_total + open_total + _mu_term(problem, assigned)


def _assignment_objective(
    problem: AssignmentProblem,
    cost: dict[tuple[int, int], float],
    choice: dict[int, int],
    n_open: int,
) -> float:
    mmd_total = sum(cost[(pid, fid)] for pid, fid in choice.items())
    assigned: dict[int, list[int]] = {}
    for pid, fid in choice.items():
        assigned.setdefault(fid, []).append(pid)
    return mmd_total + problem.lambda_open * n_open + _mu_term(problem, assigned)


def solve_exact(problem: AssignmentProblem) -> AssignmentSolution:
    """Global optimum by enumeration over candidate subsets.

    Per subset the assignment is optimal: a per-party argmin when the
    label term is off and capacity unbounded, a min-cost matching on
    replicated facility slots when capacity binds, and full joint
    enumeration when the label term couples parties. Ties break
    lexicographically toward fewer opens and lower facility ids.
    """
    n = len(problem.parties)
    facilities = problem.facility_ids()
    if n > MAX_PARTIES or len(facilities) > MAX_FACILITIES:
        raise ValueError(
            f"exact solver envelope is {MAX_PARTIES} parties x {MAX_FACILITIES} facilities"
        )
    if problem.mu_balance > 0 and len(facilities) ** max(n, 1) > MAX_JOINT_STATES:
        raise ValueError(
            "label-term instances must satisfy |facilities|^|parties| <= "
            f"{MAX_JOINT_STATES}"
        )
    candidate_ids = sorted(f[0] for f in problem.candidates)
    existing_ids = sorted(f[0] for f in problem.existing)
    if n == 0:
        return AssignmentSolution(z={}, w={cid: 0 for cid in candidate_ids}, objective=0.0)
    cost = _cost_table(problem)
    pids = [p[0] for p in problem.parties]
    order = sorted(range(len(pids)), key=lambda i: pids[i])
    pids_sorted = [pids[i] for i in order]

    best = None  # (objective, w_tuple, z_tuple, choice, opened)
    for mask in range(2 ** len(candidate_ids)):
        opened = [cid for b, cid in enumerate(candidate_ids) if mask >> b & 1]
        open_f = sorted(existing_ids + opened)
        if not open_f:
            continue
        if problem.u_max is not None and problem.u_max * len(open_f) < n:
            continue
        if problem.mu_balance == 0.0 and problem.u_max is None:
            choice = {
                pid: min(open_f, key=lambda fid: (cost[(pid, fid)], fid))
                for pid in pids_sorted
            }
            total = _assignment_objective(problem, cost, choice, len(opened))
        elif problem.mu_balance == 0.0:
            replicas = min(problem.u_max, n)
            slots = [fid for fid in open_f for _ in range(replicas)]
            matrix = np.array(
                [[cost[(pid, fid)] for fid in slots] for pid in pids_sorted]
            )
            rows, cols = linear_sum_assignment(matrix)
            choice = {pids_sorted[r]: slots[c] for r, c in zip(rows, cols)}
            total = _assignment_objective(problem, cost, choice, len(opened))
        else:
            choice, total = None, math.inf
            for combo in itertools.product(open_f, repeat=n):
                if problem.u_max is not None:
                    loads: dict[int, int] = {}
                    overload = False
                    for fid in combo:
                        loads[fid] = loads.get(fid, 0) + 1
                        if loads[fid] > problem.u_max:
                            overload = True
                            break
                    if overload:
                        continue
                trial = dict(zip(pids_sorted, combo))
                value = _assignment_objective(problem, cost, trial, len(opened))
                z_tuple = tuple(combo)
                if value < total - 1e-15 or (
                    choice is not None
                    and abs(value - total) <= 1e-15
                    and z_tuple < tuple(choice[p] for p in pids_sorted)
                ):
                    choice, total = trial, value
            if choice is None:
                continue
        w_tuple = tuple(1 if cid in opened else 0 for cid in candidate_ids)
        z_tuple = tuple(choice[p] for p in pids_sorted)
        key = (total, w_tuple, z_tuple)
        if best is None or key < best[0]:
            best = (key, choice, opened)
    if best is None:
        raise ValueError("no feasible assignment exists under the given capacity")
    (objective, _, _), choice, opened = best
    return AssignmentSolution(
        z={(pid, fid): 1 for pid, fid in choice.items()},
        w={cid: (1 if cid in opened else 0) for cid in candidate_ids},
        objective=float(objective),
    )


def solve_greedy(problem: AssignmentProblem) -> AssignmentSolution:
    """Cluster-then-route approximation.

    Each party joins its nearest candidate's implied cluster; a cluster goes
    to the cheapest existing expert unless the centroid cost plus the opening
    charge undercuts it. Capacity overflows spill to the cheapest facility
    with room, opening further candidates when nothing open has space.
    """
    candidate_ids = sorted(f[0] for f in problem.candidates)
    existing_ids = sorted(f[0] for f in problem.existing)
    pids = sorted(p[0] for p in problem.parties)
    w = {cid: 0 for cid in candidate_ids}
    if not pids:
        return AssignmentSolution(z={}, w=w, objective=0.0)
    cost = _cost_table(problem)

    clusters: dict[int, list[int]] = {cid: [] for cid in candidate_ids}
    residual: list[int] = []
    for pid in pids:
        if candidate_ids:
            nearest = min(candidate_ids, key=lambda cid: (cost[(pid, cid)], cid))
            clusters[nearest].append(pid)
        else:
            residual.append(pid)

    choice: dict[int, int] = {}
    for cid in candidate_ids:
        members = clusters[cid]
        if not members:
            continue
        centroid_total = sum(cost[(pid, cid)] for pid in members)
        if existing_ids:
            cheapest = min(
                existing_ids,
                key=lambda eid: (sum(cost[(pid, eid)] for pid in members), eid),
            )
            existing_total = sum(cost[(pid, cheapest)] for pid in members)
            if existing_total <= centroid_total + problem.lambda_open:
                for pid in members:
                    choice[pid] = cheapest
                continue
        w[cid] = 1
        for pid in members:
            choice[pid] = cid
    for pid in residual:
        choice[pid] = min(existing_ids, key=lambda eid: (cost[(pid, eid)], eid))

    if problem.u_max is not None:
        cap = problem.u_max
        spilled: list[int] = []
        for fid in sorted(set(choice.values())):
            members = sorted((p for p in choice if choice[p] == fid),
                             key=lambda p: (cost[(p, fid)], p))
            for pid in members[cap:]:
                del choice[pid]
                spilled.append(pid)
        for pid in sorted(spilled):
            loads: dict[int, int] = {}
            for q, fid in choice.items():
                loads[fid] = loads.get(fid, 0) + 1
            open_f = existing_ids + [cid for cid in candidate_ids if w[cid] == 1]
            with_room = [fid for fid in open_f if loads.get(fid, 0) < cap]
            if with_room:
                choice[pid] = min(with_room, key=lambda fid: (cost[(pid, fid)], fid))
                continue
            closed = [cid for cid in candidate_ids if w[cid] == 0]
            if not closed:
                raise ValueError("no feasible assignment exists under the given capacity")
            cid = min(closed, key=lambda c: (cost[(pid, c)], c))
            w[cid] = 1
            choice[pid] = cid

    solution = AssignmentSolution(
        z={(pid, fid): 1 for pid, fid in choice.items()}, w=w, objective=0.0
    )
    return AssignmentSolution(
        z=solution.z, w=solution.w, objective=objective_value(problem, solution)
    )


def random_instance(seed: int) -> AssignmentProblem:
    """Seeded fuzz instance inside the exact solver's envelope."""
    rng = np.random.default_rng(seed)
    dim = 4
    n_parties = int(rng.integers(1, 7))
    n_existing = int(rng.integers(0, 3))
    n_candidates = int(rng.integers(0, 3))
    if n_existing == 0 and n_candidates == 0:
        n_existing = 1
    centers = rng.normal(0.0, 2.0, size=(3, dim))

    def sample_near(center):
        rows = int(rng.integers(2, 6))
        return center + 0.5 * rng.normal(size=(rows, dim))

    parties = tuple(
        (
            pid,
            sample_near(centers[rng.integers(0, 3)]),
            rng.dirichlet(np.ones(4)),
        )
        for pid in range(n_parties)
    )
    existing = tuple(
        (100 + eid, sample_near(centers[rng.integers(0, 3)]), rng.dirichlet(np.ones(4)))
        for eid in range(n_existing)
    )
    candidates = tuple(
        (200 + cid, sample_near(centers[rng.integers(0, 3)])) for cid in range(n_candidates)
    )
    mu = float(rng.choice([0.0, 0.0, 0.3]))
    u_max = None
    if rng.random() < 0.3:
        k_total = n_existing + n_candidates
        u_max = int(
            max(math.ceil(n_parties / k_total), rng.integers(1, n_parties + 1))
        )
    return AssignmentProblem(
        parties=parties,
        existing=existing,
        candidates=candidates,
        lambda_open=float(np.round(rng.uniform(0.0, 1.0), 3)),
        mu_balance=mu,
        u_max=u_max,
        reference_hist=np.full(4, 0.25),
        kernel=KernelSpec(gamma=0.5),
    )


def problem_to_json(problem: AssignmentProblem) -> dict:
    return {
        "parties": [
            {"party_id": pid, "sample": s.tolist(), "label_hist": h.tolist()}
            for pid, s, h in problem.parties
        ],
        "existing": [
            {"expert_id": eid, "sample": np.asarray(s).tolist(), "agg_label_hist": np.asarray(h).tolist()}
            for eid, s, h in problem.existing
        ],
        "candidates": [
            {"candidate_id": cid, "sample": np.asarray(s).tolist()} for cid, s in problem.candidates
        ],
        "lambda_open": problem.lambda_open,
        "mu_balance": problem.mu_balance,
        "u_max": problem.u_max,
        "reference_hist": problem.reference_hist.tolist(),
        "kernel": {"family": problem.kernel.family, "gamma": problem.kernel.gamma},
    }


def problem_from_json(obj: dict) -> AssignmentProblem:
    return AssignmentProblem(
        parties=tuple(
            (p["party_id"], np.array(p["sample"], dtype=float), np.array(p["label_hist"]))
            for p in obj["parties"]
        ),
        existing=tuple(
            (e["expert_id"], np.array(e["sample"], dtype=float), np.array(e["agg_label_hist"]))
            for e in obj["existing"]
        ),
        candidates=tuple(
            (c["candidate_id"], np.array(c["sample"], dtype=float)) for c in obj["candidates"]
        ),
        lambda_open=float(obj["lambda_open"]),
        mu_balance=float(obj["mu_balance"]),
        u_max=obj["u_max"],
        reference_hist=np.array(obj["reference_hist"], dtype=float),
        kernel=KernelSpec(family=obj["kernel"]["family"], gamma=obj["kernel"]["gamma"]),
    )


def solution_to_json(solution: AssignmentSolution) -> dict:
    return {
        "z": [[pid, fid, val] for (pid, fid), val in sorted(solution.z.items())],
        "w": {str(cid): val for cid, val in sorted(solution.w.items())},
        "objective": solution.objective,
    }


def solution_from_json(obj: dict) -> AssignmentSolution:
    return AssignmentSolution(
        z={(pid, fid): val for pid, fid, val in obj["z"]},
        w={int(cid): val for cid, val in obj["w"].items()},
        objective=float(obj["objective"]),
    )
