"""Per-round client-class scheduling.

Candidates are ``(client, class, n_samples)`` triples reported by clients. A
schedule picks a subset under a per-client cap and a global cap. The greedy
solver adds, one at a time, the feasible pair with the largest marginal gain of

    F(S) = sum_{(k,c) in S} alpha * Rbar[k,c] + beta * Vbar_c(S)

where ``Rbar`` is the log data volume normalized by its candidate maximum and
``Vbar_c(S)`` is the class-imbalance weight recomputed with the counts of
``S`` added and normalized over all classes. Because ``Vbar`` couples every
selected pair, gains are recomputed from scratch at every step.

Sums are taken with ``math.fsum`` so F depends only on the multiset of terms;
equal candidates therefore tie exactly and the (client, class) order decides.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigError, InstanceTooLargeError, InvalidInputError

BRUTE_FORCE_LIMIT = 22
DEFAULT_EPSILON = 1e-8
POLICIES = ("smg", "rs", "so", "bo", "brute")


@dataclass(frozen=True, order=True)
class Candidate:
    client: int
    class_id: int
    n_samples: int

    @property
    def pair(self):
        return (self.client, self.class_id)


@dataclass(frozen=True)
class BalanceState:
    b_cum: tuple
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "b_cum", tuple(int(b) for b in self.b_cum))
        if any(b < 0 for b in self.b_cum):
            raise InvalidInputError("cumulative update counts must be >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0", key="scheduler.epsilon")

    @classmethod
    def zeros(cls, n_classes: int, epsilon: float = DEFAULT_EPSILON) -> "BalanceState":
        return cls((0,) * n_classes, epsilon)

    @property
    def n_classes(self) -> int:
        return len(self.b_cum)


@dataclass(frozen=True)
class Budgets:
    per_client: tuple
    global_: int

    def __post_init__(self):
        object.__setattr__(self, "per_client", tuple(int(x) for x in self.per_client))
        if any(x < 0 for x in self.per_client):
            raise ConfigError("per-client budgets must be >= 0", key="budgets.per_client")
        if self.global_ < 0:
            raise ConfigError("global budget must be >= 0", key="budgets.global")

    @classmethod
    def uniform(cls, n_clients: int, per_client: int, global_: int) -> "Budgets":
        return cls((per_client,) * n_clients, global_)

    def cap(self, client: int) -> int:
        if not 0 <= client < len(self.per_client):
            raise InvalidInputError(f"no budget for client {client}")
        return self.per_client[client]


@dataclass(frozen=True)
class ScoreWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not self.alpha + self.beta > 0:
            raise ConfigError("alpha, beta must be >= 0 with alpha + beta > 0", key="scheduler.alpha")


@dataclass(frozen=True)
class GreedyStep:
    selected_before: tuple
    gains: dict
    chosen: tuple | None


@dataclass(frozen=True)
class Schedule:
    selected: tuple
    objective: float = 0.0
    trace: tuple = field(default=(), compare=False, repr=False)

    @property
    def per_client_sets(self) -> dict:
        out = {}
        for k, c in self.selected:
            out.setdefault(k, []).append(c)
        return out

    def classes(self) -> dict:
        """Selected pairs per class (``kappa_c``)."""
        out = {}
        for _, c in self.selected:
            out[c] = out.get(c, 0) + 1
        return out


# --- scores ------------------------------------------------------------------


def data_sufficiency_score(n: int) -> float:
    if n < 0:
        raise InvalidInputError("sample count must be >= 0")
    return math.log1p(n)


def class_update_distribution(b_cum: Sequence[int]) -> list[float]:
    """Share of past updates per class; uniform when nothing has been updated yet."""
    total = sum(b_cum)
    if total == 0:
        return [1.0 / len(b_cum)] * len(b_cum)
    return [b / total for b in b_cum]


def class_imbalance_weight(pi: float, epsilon: float = DEFAULT_EPSILON) -> float:
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0", key="scheduler.epsilon")
    return math.log1p(1.0 / (pi + epsilon))


def _normalized_balance(counts: Sequence[int], epsilon: float) -> list[float]:
    v = [class_imbalance_weight(p, epsilon) for p in class_update_distribution(counts)]
    total = math.fsum(v)
    return [x / total for x in v]


def normalized_sufficiency(candidates: Sequence[Candidate]) -> dict:
    """``Rbar`` for every candidate pair; all zero when every N is zero."""
    r = {cand.pair: data_sufficiency_score(cand.n_samples) for cand in candidates}
    top = max(r.values(), default=0.0)
    if top == 0.0:
        return {p: 0.0 for p in r}
    return {p: x / top for p, x in r.items()}


def priority_scores(candidates: Sequence[Candidate], balance: BalanceState, weights: ScoreWeights) -> list[float]:
    """``U = alpha * Rbar + beta * Vbar`` at round entry, in candidate order."""
    if not candidates:
        raise InvalidInputError("priority scores need at least one candidate")
    rbar = normalized_sufficiency(candidates)
    vbar = _normalized_balance(balance.b_cum, balance.epsilon)
    return [weights.alpha * rbar[c.pair] + weights.beta * vbar[c.class_id] for c in candidates]


def _check_candidates(candidates, balance: BalanceState):
    seen = set()
    for cand in candidates:
        if cand.pair in seen:
            raise InvalidInputError(f"duplicate candidate {cand.pair}")
        seen.add(cand.pair)
        if not 0 <= cand.class_id < balance.n_classes:
            raise InvalidInputError(f"class {cand.class_id} outside 0..{balance.n_classes - 1}")
        if cand.n_samples <= 0:
            raise InvalidInputError(f"candidate {cand.pair} has no samples")


class _Objective:
    """Evaluates F for subsets of one fixed candidate set."""

    def __init__(self, candidates, balance: BalanceState, weights: ScoreWeights):
        self.rbar = normalized_sufficiency(candidates)
        self.balance = balance
        self.weights = weights

    def __call__(self, selected: Iterable[tuple]) -> float:
        selected = list(selected)
        if not selected:
            return 0.0
        counts = list(self.balance.b_cum)
        for _, c in selected:
            counts[c] += 1
        vbar = _normalized_balance(counts, self.balance.epsilon)
        a, b = self.weights.alpha, self.weights.beta
        return math.fsum(a * self.rbar[p] + b * vbar[p[1]] for p in selected)


def objective_value(selected, candidates, balance: BalanceState, weights: ScoreWeights) -> float:
    pairs = {c.pair for c in candidates}
    selected = [tuple(p) for p in selected]
    missing = [p for p in selected if p not in pairs]
    if missing:
        raise InvalidInputError(f"selected pairs {missing} are not candidates")
    return _Objective(candidates, balance, weights)(selected)


def is_feasible(selected, candidates, budgets: Budgets) -> bool:
    pairs = {c.pair for c in candidates}
    selected = [tuple(p) for p in selected]
    if len(set(selected)) != len(selected) or any(p not in pairs for p in selected):
        return False
    if len(selected) > budgets.global_:
        return False
    per = {}
    for k, _ in selected:
        per[k] = per.get(k, 0) + 1
    return all(n <= budgets.cap(k) for k, n in per.items())


# --- solvers -----------------------------------------------------------------


def smg_schedule(candidates, balance: BalanceState, budgets: Budgets, weights: ScoreWeights,
                 *, trace: bool = False) -> Schedule:
    """Sequential marginal-gain greedy.

    Stops when the global budget is used up, no feasible pair is left, or the
    best marginal gain is <= 0. Ties go to the smallest ``(client, class)``.
    """
    candidates = sorted(candidates)
    _check_candidates(candidates, balance)
    objective = _Objective(candidates, balance, weights)
    selected: list = []
    used = {}
    current = 0.0
    steps = []
    while len(selected) < budgets.global_:
        feasible = [c.pair for c in candidates
                    if c.pair not in selected and used.get(c.client, 0) < budgets.cap(c.client)]
        if not feasible:
            break
        gains = {}
        best, best_gain = None, -math.inf
        for pair in feasible:
            gain = objective(selected + [pair]) - current
            gains[pair] = gain
            if gain > best_gain:
                best, best_gain = pair, gain
        if best_gain <= 0:
            if trace:
                steps.append(GreedyStep(tuple(selected), gains, None))
            break
        if trace:
            steps.append(GreedyStep(tuple(selected), gains, best))
        selected.append(best)
        used[best[0]] = used.get(best[0], 0) + 1
        current = objective(selected)
    return Schedule(tuple(sorted(selected)), objective(selected), tuple(steps))


def brute_force_schedule(candidates, balance: BalanceState, budgets: Budgets, weights: ScoreWeights,
                         *, limit: int = BRUTE_FORCE_LIMIT) -> Schedule:
    """Exact maximizer of F by enumerating every feasible subset.

    Ties go to the lexicographically smallest sorted pair tuple.
    """
    candidates = sorted(candidates)
    if len(candidates) > limit:
        raise InstanceTooLargeError(f"{len(candidates)} candidates exceed the exhaustive limit of {limit}")
    _check_candidates(candidates, balance)
    objective = _Objective(candidates, balance, weights)
    pairs = [c.pair for c in candidates]
    best_key, best_val = (), 0.0
    for size in range(1, min(budgets.global_, len(pairs)) + 1):
        for combo in itertools.combinations(pairs, size):
            per = {}
            ok = True
            for k, _ in combo:
                per[k] = per.get(k, 0) + 1
                if per[k] > budgets.cap(k):
                    ok = False
                    break
            if not ok:
                continue
            val = objective(combo)
            if val > best_val or (val == best_val and combo < best_key):
                best_key, best_val = combo, val
    return Schedule(tuple(best_key), best_val)


def baseline_schedule(policy: str, candidates, balance: BalanceState, budgets: Budgets, rng=None,
                      weights: ScoreWeights | None = None) -> Schedule:
    """Two-stage baselines: clients nominate, then the server picks.

    rs: uniform at random at both stages. so: largest sample count first.
    bo: smallest cumulative class update count first. Deterministic orders
    break ties by class id (clients) and by (client, class) (server).
    """
    policy = policy.lower()
    candidates = sorted(candidates)
    _check_candidates(candidates, balance)
    if policy == "rs" and rng is None:
        raise InvalidInputError("random scheduling needs an rng")
    b = balance.b_cum
    by_client = {}
    for cand in candidates:
        by_client.setdefault(cand.client, []).append(cand)
    nominated = []
    for k in sorted(by_client):
        own = by_client[k]
        quota = min(budgets.cap(k), len(own))
        if policy == "rs":
            idx = rng.choice(len(own), size=quota, replace=False) if quota else []
            nominated += [own[i] for i in sorted(idx)]
        elif policy == "so":
            nominated += sorted(own, key=lambda c: (-c.n_samples, c.class_id))[:quota]
        elif policy == "bo":
            nominated += sorted(own, key=lambda c: (b[c.class_id], c.class_id))[:quota]
        else:
            raise ConfigError(f"unknown baseline policy {policy!r}", key="scheduler.policy")
    quota = min(budgets.global_, len(nominated))
    if policy == "rs":
        chosen = [nominated[i] for i in rng.choice(len(nominated), size=quota, replace=False)] if quota else []
    elif policy == "so":
        chosen = sorted(nominated, key=lambda c: (-c.n_samples, c.client, c.class_id))[:quota]
    else:
        chosen = sorted(nominated, key=lambda c: (b[c.class_id], c.client, c.class_id))[:quota]
    selected = tuple(sorted(c.pair for c in chosen))
    value = objective_value(selected, candidates, balance, weights) if weights is not None else 0.0
    return Schedule(selected, value)


def schedule(policy: str, candidates, balance, budgets, weights, rng=None) -> Schedule:
    policy = policy.lower()
    if policy == "smg":
        return smg_schedule(candidates, balance, budgets, weights)
    if policy == "brute":
        return brute_force_schedule(candidates, balance, budgets, weights)
    return baseline_schedule(policy, candidates, balance, budgets, rng, weights)


def advance_balance(balance: BalanceState, sched: Schedule) -> BalanceState:
    counts = list(balance.b_cum)
    for _, c in sched.selected:
        counts[c] += 1
    return BalanceState(tuple(counts), balance.epsilon)


# --- instances for the scheduling benchmark -----------------------------------


@dataclass(frozen=True)
class SchedInstance:
    candidates: tuple
    balance: BalanceState
    budgets: Budgets
    weights: ScoreWeights

    def to_record(self) -> dict:
        return {
            "candidates": [[c.client, c.class_id, c.n_samples] for c in self.candidates],
            "b_cum": list(self.balance.b_cum),
            "epsilon": self.balance.epsilon,
            "per_client": list(self.budgets.per_client),
            "global": self.budgets.global_,
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SchedInstance":
        try:
            cands = tuple(sorted(Candidate(int(k), int(c), int(n)) for k, c, n in rec["candidates"]))
            return cls(
                cands,
                BalanceState(tuple(rec["b_cum"]), float(rec.get("epsilon", DEFAULT_EPSILON))),
                Budgets(tuple(rec["per_client"]), int(rec["global"])),
                ScoreWeights(float(rec["alpha"]), float(rec["beta"])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise InvalidInputError(f"malformed scheduling instance: {exc}") from exc


def write_instances(stream, instances) -> None:
    for inst in instances:
        stream.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def read_instances(stream) -> list[SchedInstance]:
    out = []
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"line {lineno}: {exc}") from exc
        out.append(SchedInstance.from_record(rec))
    return out


def random_instance(rng, *, max_clients=3, max_classes=4, max_n=200, max_b=20,
                    alpha=0.5, beta=0.5, max_cap=3, max_global=None, epsilon=DEFAULT_EPSILON) -> SchedInstance:
    """A small random instance; every (client, class) pair is available with prob. 0.7."""
    n_clients = int(rng.integers(1, max_clients + 1))
    n_classes = int(rng.integers(1, max_classes + 1))
    cands = []
    for k in range(n_clients):
        for c in range(n_classes):
            if rng.random() < 0.7:
                cands.append(Candidate(k, c, int(rng.integers(1, max_n + 1))))
    b_cum = tuple(int(x) for x in rng.integers(0, max_b + 1, size=n_classes))
    if rng.random() < 0.15:
        b_cum = (0,) * n_classes
    per_client = tuple(int(x) for x in rng.integers(0, max_cap + 1, size=n_clients))
    top = max_global if max_global is not None else n_clients * max_cap
    return SchedInstance(
        tuple(cands),
        BalanceState(b_cum, epsilon),
        Budgets(per_client, int(rng.integers(0, top + 1))),
        ScoreWeights(alpha, beta),
    )
