"""Round engine: arrival, reports, scheduling, broadcast, training, upload, aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig
from .errors import InvalidInputError, ModiadError, RoundError
from .lora import (ClassAdapter, LoraConfig, Mode, ModeState, decide_mode, init_class_adapter, layer_shapes,
                   lora_train, merge_class, merge_mean_delta, smooth_quality, uploaded_param_count)
from .metrics import auroc, per_class_report
from .anomaly import score_set
from .nn import ClassModel, TrainingConfig, init_class_model, local_train, mean_models, stack_samples
from .scheduler import BalanceState, Budgets, Candidate, ScoreWeights, advance_balance, schedule
from .seeding import stream
from .streamgen import (ClientPool, DefectConfig, assign_classes, build_eval_sets, draw_packet,
                        generate_normal, make_generators)


@dataclass
class ModelBank:
    """Server-side global model per class plus any adapter still pending a merge."""

    models: dict
    adapters: dict = field(default_factory=dict)

    def copy(self) -> "ModelBank":
        return ModelBank(dict(self.models), dict(self.adapters))

    @property
    def n_classes(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class StatusReport:
    client: int
    round: int
    counts: dict

    def __post_init__(self):
        if any(n <= 0 for n in self.counts.values()):
            raise InvalidInputError("status reports list only classes with samples")


@dataclass(frozen=True)
class RoundCost:
    uplink: int = 0
    downlink: int = 0
    train_param_steps: int = 0

    def __add__(self, other: "RoundCost") -> "RoundCost":
        return RoundCost(self.uplink + other.uplink, self.downlink + other.downlink,
                         self.train_param_steps + other.train_param_steps)


@dataclass(frozen=True)
class CostLedger:
    per_round: tuple = ()

    @property
    def cumulative(self) -> RoundCost:
        total = RoundCost()
        for c in self.per_round:
            total = total + c
        return total

    def append(self, cost: RoundCost) -> "CostLedger":
        return CostLedger(self.per_round + (cost,))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    policy: str
    selected: tuple
    q: tuple
    mean_q: float
    modes: tuple
    cost: RoundCost
    cumulative: RoundCost

    def to_record(self) -> dict:
        return {
            "round": self.round,
            "policy": self.policy,
            "selected": [list(p) for p in self.selected],
            "q": list(self.q),
            "mean_q": self.mean_q,
            "modes": list(self.modes),
            "uplink": self.cost.uplink,
            "downlink": self.cost.downlink,
            "train_param_steps": self.cost.train_param_steps,
            "cum_uplink": self.cumulative.uplink,
            "cum_downlink": self.cumulative.downlink,
            "cum_train_param_steps": self.cumulative.train_param_steps,
        }


@dataclass(frozen=True)
class Environment:
    """Everything fixed for a run: generators, topology and evaluation sets."""

    config: RunConfig
    seed: int
    generators: tuple
    assignment: object
    eval_sets: dict

    @property
    def training(self) -> TrainingConfig:
        t = self.config.training
        return TrainingConfig(t.eta, t.tau_max, t.batch)

    @property
    def lora(self) -> LoraConfig:
        lo = self.config.lora
        return LoraConfig(lo.t_warm, lo.gamma, lo.rank, lo.adapt_biases, lo.init_scale)

    @property
    def budgets(self) -> Budgets:
        return Budgets(self.config.per_client_budgets(), self.config.budgets.global_)

    @property
    def weights(self) -> ScoreWeights:
        return ScoreWeights(self.config.scheduler.alpha, self.config.scheduler.beta)


@dataclass
class SimState:
    """Mutable-looking but only ever replaced: run_round returns a new instance."""

    round: int
    pools: list
    bank: ModelBank
    modes: ModeState
    balance: BalanceState
    ledger: CostLedger
    q: list
    q_version: list
    client_cache: dict

    def copy(self) -> "SimState":
        return SimState(self.round, [p.copy() for p in self.pools], self.bank.copy(), self.modes.copy(),
                        self.balance, self.ledger, list(self.q), list(self.q_version),
                        {k: dict(v) for k, v in self.client_cache.items()})


def build_environment(config: RunConfig, seed: int | None = None) -> Environment:
    seed = config.seeds.master if seed is None else seed
    s, t = config.stream, config.topology
    generators = tuple(make_generators(t.classes, s.d2d, s.d3d, s.grid, stream(seed, "generators"),
                                       noise_sigma=s.noise_sigma, cond_bound=s.cond_bound,
                                       mean_scale=s.mean_scale, offset_scale=s.offset_scale,
                                       latent_dim=s.latent_dim))
    assignment = assign_classes(t.clients, t.classes, t.per_client, t.share, stream(seed, "assignment"))
    defect_cfg = DefectConfig(s.defect.min_size, s.defect.max_size, s.defect.offset_magnitude)
    val = build_eval_sets(generators, s.eval.val_normal, s.eval.val_anomalous, stream(seed, "validation"),
                          defect_cfg=defect_cfg)
    test = build_eval_sets(generators, s.eval.test_normal, s.eval.test_anomalous, stream(seed, "test"),
                           defect_cfg=defect_cfg)
    eval_sets = {c: (val[c].validation, test[c].test) for c in val}
    return Environment(config, seed, generators, assignment, eval_sets)


def initial_state(env: Environment) -> SimState:
    cfg = env.config
    models = {c: init_class_model(c, cfg.stream.d2d, cfg.stream.d3d, stream(env.seed, "init", c),
                                  hidden=cfg.model.hidden, depth=cfg.model.depth)
              for c in range(cfg.topology.classes)}
    pools = [ClientPool.with_stock(k, classes, cfg.stream.pool_per_pair)
             for k, classes in enumerate(env.assignment.client_classes)]
    n = cfg.topology.classes
    return SimState(0, pools, ModelBank(models), ModeState.fresh(n),
                    BalanceState.zeros(n, cfg.scheduler.epsilon), CostLedger(),
                    [None] * n, [None] * n, {k: {} for k in range(cfg.topology.clients)})


def validation_quality(env: Environment, model: ClassModel) -> float:
    val, _ = env.eval_sets[model.class_id]
    scores, _, labels, _ = score_set(model, val, None, env.config.metrics.score_reduction)
    return auroc(scores, labels)


def _train_batch(n_samples: int, cfg: TrainingConfig) -> int:
    return n_samples if cfg.batch is None else min(cfg.batch, n_samples)


class _Context:
    client = None
    class_id = None


def run_round(env: Environment, state: SimState, policy: str | None = None):
    """Execute one round and return ``(new_state, RoundRecord)``; ``state`` is never modified."""
    ctx = _Context()
    try:
        return _run_round(env, state, policy or env.config.scheduler.policy, ctx)
    except ModiadError as exc:
        raise RoundError(exc, round=state.round + 1, client=ctx.client, class_id=ctx.class_id) from exc
    except (ValueError, ArithmeticError, FloatingPointError) as exc:
        raise RoundError(exc, round=state.round + 1, client=ctx.client, class_id=ctx.class_id) from exc


def _run_round(env: Environment, state: SimState, policy: str, ctx: _Context):
    cfg = env.config
    seed = env.seed
    t = state.round
    rnd = t + 1
    new = state.copy()
    generators = env.generators

    # (1) data arrival
    for pool in new.pools:
        ctx.client = pool.client
        packet = draw_packet(pool, cfg.stream.dirichlet_alpha, cfg.stream.packet_cap,
                             stream(seed, "packet", pool.client, t))
        feat_rng = stream(seed, "features", pool.client, t)
        for c, n in packet:
            pool.add(c, [generate_normal(generators[c], feat_rng) for _ in range(n)])
    ctx.client = None

    # (2) status reports
    reports = [StatusReport(p.client, rnd, {c: n for c, n in sorted(p.counts().items()) if n > 0})
               for p in new.pools]

    # (3) modes, scheduling, broadcast
    lcfg = env.lora
    if cfg.lora.enabled and all(q is not None for q in new.modes.q_smooth):
        modes = decide_mode(new.modes.q_smooth, t, lcfg.t_warm)
    else:
        modes = [Mode.FULL] * cfg.topology.classes
    new.modes.modes = list(modes)

    candidates = [Candidate(r.client, c, n) for r in reports for c, n in r.counts.items()]
    sched = schedule(policy, candidates, new.balance, env.budgets, env.weights, rng=stream(seed, "schedule", t))

    cost_up = cost_down = cost_train = 0
    issued = {}
    for k, c in sched.selected:
        ctx.client, ctx.class_id = k, c
        base = new.bank.models[c]
        if new.client_cache[k].get(c) != base.version:
            cost_down += uploaded_param_count(layer_shapes(base), Mode.FULL)
            new.client_cache[k][c] = base.version
        if modes[c] is Mode.LOW_RANK:
            if c not in issued:
                issued[c] = init_class_adapter(base, lcfg, stream(seed, "adapter", c, t))
            cost_down += uploaded_param_count(layer_shapes(base), Mode.LOW_RANK, lcfg.rank, lcfg.adapt_biases)

    # (4-6) local training and upload, in client order
    tcfg = env.training
    uploads: dict = {}
    for k, c in sched.selected:
        ctx.client, ctx.class_id = k, c
        base = new.bank.models[c]
        data = stack_samples(new.pools[k].samples[c])
        rng = stream(seed, "train", k, c, t)
        if modes[c] is Mode.LOW_RANK:
            result, steps = lora_train(base, issued[c], data, tcfg, rng, round=rnd)
            n_params = uploaded_param_count(layer_shapes(base), Mode.LOW_RANK, lcfg.rank, lcfg.adapt_biases)
        else:
            result, steps = local_train(base, data, tcfg, rng, round=rnd)
            n_params = uploaded_param_count(layer_shapes(base), Mode.FULL)
        cost_train += n_params * steps * _train_batch(data.n_samples, tcfg)
        cost_up += n_params
        uploads.setdefault(c, []).append(result)
    ctx.client = ctx.class_id = None

    # (7) aggregation, quality, balance
    for c in sorted(uploads):
        ctx.class_id = c
        base = new.bank.models[c]
        if modes[c] is Mode.LOW_RANK:
            merged = merge_mean_delta(base, uploads[c])
        else:
            merged = mean_models(uploads[c])
        new.bank.models[c] = replace(merged, version=rnd)
        new.bank.adapters.pop(c, None)
    for c in range(cfg.topology.classes):
        ctx.class_id = c
        model = new.bank.models[c]
        if new.q_version[c] != model.version:
            new.q[c] = validation_quality(env, model)
            new.q_version[c] = model.version
        new.modes.q_smooth[c] = smooth_quality(new.q[c], new.modes.q_smooth[c], lcfg.gamma)
    ctx.class_id = None
    new.balance = advance_balance(new.balance, sched)

    cost = RoundCost(cost_up, cost_down, cost_train)
    new.ledger = new.ledger.append(cost)
    new.round = rnd
    record = RoundRecord(rnd, policy, tuple(sched.selected), tuple(float(q) for q in new.q),
                         float(np.mean(new.q)), tuple(m.value for m in modes), cost, new.ledger.cumulative)
    return new, record


def pending_merge(bank: ModelBank, class_id: int) -> ClassModel:
    """Base model with any stored adapter folded in."""
    model = bank.models[class_id]
    adapter: ClassAdapter | None = bank.adapters.get(class_id)
    return model if adapter is None else merge_class(model, adapter)


@dataclass
class ExperimentResult:
    config: RunConfig
    seed: int
    policy: str
    log: list
    report: dict
    state: SimState
    test_history: dict = field(default_factory=dict)


def test_report(env: Environment, bank: ModelBank) -> dict:
    m = env.config.metrics
    models = {c: pending_merge(bank, c) for c in bank.models}
    tests = {c: env.eval_sets[c][1] for c in models}
    return per_class_report(models, tests, tuple(m.fpr_limits), reduction=m.score_reduction,
                            connectivity=m.connectivity)


def run_experiment(config: RunConfig, seed: int | None = None, *, policy: str | None = None,
                   lora: bool | None = None, test_rounds=(), on_round=None) -> ExperimentResult:
    """Run ``config.rounds`` rounds and report test metrics on the final bank.

    ``test_rounds`` lists extra rounds after which the test report is also
    computed (kept in ``test_history``).
    """
    if lora is not None and lora != config.lora.enabled:
        config = config.replace(lora={"enabled": lora})
    env = build_environment(config, seed)
    policy = (policy or config.scheduler.policy).lower()
    state = initial_state(env)
    log, history = [], {}
    wanted = set(test_rounds)
    if 0 in wanted:
        history[0] = test_report(env, state.bank)
    for _ in range(config.rounds):
        state, record = run_round(env, state, policy)
        log.append(record)
        if on_round is not None:
            on_round(record)
        if record.round in wanted:
            history[record.round] = test_report(env, state.bank)
    report = test_report(env, state.bank)
    return ExperimentResult(config, env.seed, policy, log, report, state, history)
