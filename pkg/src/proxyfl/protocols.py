"""ProxyFL and the FedAvg / FML / AvgPush / CWT / Regular / Joint baselines.

Every method runs on the same substrate: Poisson-sampled mini-batches,
DP-SGD via :mod:`proxyfl.dp`, per-client RDP ledgers, and message passing
through a :class:`~proxyfl.gossip.Mailbox` with round barriers.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import nn
from .accountant import BudgetStatus, PrivacyLedger, check_budget, default_delta
from .data import LabeledDataset, evaluate
from .dp import (DpConfig, OptimizerConfig, OptimizerState, PoissonSampler, apply_update,
                 dp_gradient, steps_per_epoch)
from .errors import ConfigError
from .gossip import (Mailbox, Message, MixingMatrix, ProxyState, TopologyKind,
                     TopologySchedule, debias, generate_matrix, gossip_round)
from .nn import DmlConfig, ModelSpec, ParamVector


class Method(str, enum.Enum):
    PROXYFL = "ProxyFL"
    FEDAVG = "FedAvg"
    FML = "FML"
    AVGPUSH = "AvgPush"
    CWT = "CWT"
    REGULAR = "Regular"
    JOINT = "Joint"

    @property
    def centralized(self) -> bool:
        return self in (Method.FEDAVG, Method.FML)

    @property
    def decentralized(self) -> bool:
        return self in (Method.PROXYFL, Method.AVGPUSH, Method.CWT)

    @property
    def mutual(self) -> bool:
        """Methods that keep a private model next to a shared proxy."""
        return self in (Method.PROXYFL, Method.FML)


DEFAULT_TOPOLOGY = {
    Method.PROXYFL: TopologyKind.EXPONENTIAL_PERMUTATION,
    Method.AVGPUSH: TopologyKind.EXPONENTIAL_PERMUTATION,
    Method.FEDAVG: TopologyKind.STAR,
    Method.FML: TopologyKind.STAR,
    Method.CWT: TopologyKind.RING,
}

# stream tags mixed into every seed so no two purposes share random numbers
_INIT, _TRAIN = 0, 1


def client_rng(seed: int, client: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TRAIN, client, t])


@dataclass(frozen=True)
class ProtocolConfig:
    method: Method
    rounds: int = 10
    dml: DmlConfig = field(default_factory=DmlConfig)
    dp: DpConfig = field(default_factory=DpConfig)
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    topology: Optional[TopologyKind] = None
    delta: Optional[float] = None
    budget_epsilon: Optional[float] = None
    debias_in_place: bool = False
    weighting: str = "uniform"

    def __post_init__(self):
        method = Method(self.method)
        object.__setattr__(self, "method", method)
        topo = self.topology
        if topo is None:
            topo = DEFAULT_TOPOLOGY.get(method)
        elif topo is not None:
            topo = TopologyKind(topo)
        object.__setattr__(self, "topology", topo)
        errors = []
        if self.rounds < 1:
            errors.append("rounds must be positive")
        if method.centralized and topo is not TopologyKind.STAR:
            errors.append(f"{method.value} requires the Star topology, got {topo.value}")
        if method is Method.CWT and topo is not TopologyKind.RING:
            errors.append(f"CWT requires the Ring topology, got {topo.value}")
        if self.weighting not in ("uniform", "size"):
            errors.append(f"weighting must be 'uniform' or 'size', got {self.weighting!r}")
        if self.delta is not None and not 0 < self.delta < 1:
            errors.append("delta must lie in (0, 1)")
        if self.budget_epsilon is not None and self.budget_epsilon < 0:
            errors.append("budget_epsilon must be >= 0")
        if errors:
            raise ConfigError(errors)


@dataclass
class ClientState:
    """Everything one client owns. ``proxy`` is the only part ever shared;
    single-model sharing baselines (FedAvg, AvgPush, CWT) keep their model
    there, local-only baselines (Regular, Joint) keep it in ``private``."""
    client_id: int
    dataset: LabeledDataset
    private: Optional[ParamVector] = None
    proxy: Optional[ProxyState] = None
    proxy_spec: Optional[ModelSpec] = None
    ledger: Optional[PrivacyLedger] = None
    private_opt: OptimizerState = field(default_factory=OptimizerState)
    proxy_opt: OptimizerState = field(default_factory=OptimizerState)
    dp_invocations: int = 0
    resamples: int = 0
    exhausted: bool = False

    def working_proxy(self, in_place: bool = False) -> ParamVector:
        theta = self.proxy.theta if in_place else debias(self.proxy)
        return ParamVector(theta, self.proxy_spec)

    def store_proxy(self, params: ParamVector, in_place: bool = False) -> None:
        w = self.proxy.weight
        theta = params.values if in_place else params.values * w
        self.proxy = ProxyState(theta, w)

    @property
    def epsilon(self) -> float:
        return math.inf if self.ledger is None else self.ledger.epsilon()


def _make_ledger(n: int, cfg: ProtocolConfig) -> Optional[PrivacyLedger]:
    if not cfg.dp.enabled or cfg.dp.noise_multiplier <= 0:
        return None
    delta = cfg.delta if cfg.delta is not None else default_delta(n)
    return PrivacyLedger(min(cfg.dp.batch_size / n, 1.0), cfg.dp.noise_multiplier, delta,
                         cfg.budget_epsilon)


def _budget_allows(state: ClientState, cfg: ProtocolConfig, steps: int) -> bool:
    """False once a further epoch of DP steps would overshoot the budget."""
    if state.exhausted:
        return False
    if state.ledger is None or state.ledger.budget_epsilon is None:
        return True
    if check_budget(state.ledger.after(steps)) is BudgetStatus.EXHAUSTED:
        state.exhausted = True
        return False
    return True


def _gradient(params: ParamVector, x, y, peer_probs, mix, dp: DpConfig,
              rng: np.random.Generator, state: ClientState) -> np.ndarray:
    if dp.enabled:
        state.dp_invocations += 1
    return dp_gradient(params, x, y, dp, rng, peer_probs, mix)


def local_round_proxyfl(state: ClientState, cfg: ProtocolConfig,
                        rng: np.random.Generator) -> ClientState:
    """One epoch of alternating DML steps: DP update of the proxy, plain
    update of the private model, both on the same Poisson batch.

    Each step uses the pre-step outputs of the other model. Once the privacy
    budget would be overshot the proxy is frozen and only the private model
    keeps training.
    """
    data = state.dataset
    dp = cfg.dp
    steps = steps_per_epoch(len(data), min(dp.batch_size, len(data)))
    train_proxy = _budget_allows(state, cfg, steps)
    sampler = PoissonSampler(len(data), min(dp.batch_size, len(data)), rng)
    proxy = state.working_proxy(cfg.debias_in_place)
    private = state.private
    proxy_opt = state.proxy_opt
    private_opt = state.private_opt
    for _ in range(steps):
        idx = sampler.sample()
        x, y = data.features[idx], data.labels[idx]
        p_private = nn.forward(private, x)
        p_proxy = nn.forward(proxy, x)
        if train_proxy:
            g = _gradient(proxy, x, y, p_private, cfg.dml.beta, dp, rng, state)
            proxy, proxy_opt = apply_update(proxy, g, cfg.opt, proxy_opt)
        g = nn.batch_gradient(private, x, y, p_proxy, cfg.dml.alpha)
        private, private_opt = apply_update(private, g, cfg.opt, private_opt)
    if train_proxy:
        if state.ledger is not None:
            state.ledger.advance(steps)
        state.store_proxy(proxy, cfg.debias_in_place)
        state.proxy_opt = proxy_opt
    state.private = private
    state.private_opt = private_opt
    state.resamples += sampler.resamples
    return state


def local_round_single(state: ClientState, cfg: ProtocolConfig,
                       rng: np.random.Generator, shared: bool) -> ClientState:
    """One epoch of DP (or plain, if disabled) CE training of a single model.

    ``shared`` selects the proxy slot (a model that gets communicated)
    instead of the private slot.
    """
    data = state.dataset
    dp = cfg.dp
    batch = min(dp.batch_size, len(data))
    steps = steps_per_epoch(len(data), batch)
    if not _budget_allows(state, cfg, steps):
        return state
    sampler = PoissonSampler(len(data), batch, rng)
    if shared:
        params, opt_state = state.working_proxy(cfg.debias_in_place), state.proxy_opt
    else:
        params, opt_state = state.private, state.private_opt
    for _ in range(steps):
        idx = sampler.sample()
        g = _gradient(params, data.features[idx], data.labels[idx], None, 0.0, dp, rng, state)
        params, opt_state = apply_update(params, g, cfg.opt, opt_state)
    if state.ledger is not None:
        state.ledger.advance(steps)
    if shared:
        state.store_proxy(params, cfg.debias_in_place)
        state.proxy_opt = opt_state
    else:
        state.private, state.private_opt = params, opt_state
    state.resamples += sampler.resamples
    return state


def communicate_proxyfl(states: Sequence[ClientState], mixing: MixingMatrix,
                        mailbox: Mailbox, t: int, in_place: bool = False) -> List[ClientState]:
    """PushSum exchange of the shared models.

    KxK matrices mix peer to peer. A (K+1)x(K+1) Star matrix gathers onto
    the server node, which de-biases and broadcasts the average back.
    In-place mode stores theta/w with w kept at its mixed value; otherwise
    the mixed numerator is kept and de-biased copies are used for training.
    """
    k = len(states)
    proxies = [s.proxy for s in states]
    if mixing.size == k + 1:
        proxies.append(ProxyState(np.zeros_like(proxies[0].theta), 0.0))
        mixed = gossip_round(proxies, mixing, mailbox, t, present=[True] * k + [False])
        mean = debias(mixed[k])
        for j in range(k):
            mailbox.post(Message(k, j, t, mean, 1.0))
        for j, s in enumerate(states):
            (msg,) = mailbox.collect(j, [k], t)
            s.proxy = ProxyState(msg.theta, msg.weight)
        return list(states)
    if mixing.size != k:
        raise ConfigError(f"mixing matrix of size {mixing.size} for {k} clients")
    mixed = gossip_round(proxies, mixing, mailbox, t)
    for s, p in zip(states, mixed):
        s.proxy = ProxyState(debias(p), p.weight) if in_place else p
    return list(states)


def server_average(states: Sequence[ClientState], mailbox: Mailbox, t: int,
                   weights: Optional[np.ndarray] = None) -> List[ClientState]:
    """Central aggregation: upload to the server, average, broadcast."""
    k = len(states)
    server = k
    for s in states:
        mailbox.post(Message(s.client_id, server, t, debias(s.proxy), 1.0))
    msgs = mailbox.collect(server, [s.client_id for s in states], t)
    avg = np.average(np.stack([m.theta for m in msgs]), axis=0, weights=weights)
    for s in states:
        mailbox.post(Message(server, s.client_id, t, avg, 1.0))
    for s in states:
        (msg,) = mailbox.collect(s.client_id, [server], t)
        s.proxy = ProxyState(msg.theta, 1.0)
    return list(states)


def _map(fn, items, executor: Optional[ThreadPoolExecutor]):
    if executor is None:
        return [fn(i) for i in items]
    return list(executor.map(fn, items))


def round_baseline(states: List[ClientState], cfg: ProtocolConfig, t: int,
                   rng_for: Callable[[int, int], np.random.Generator], mailbox: Mailbox,
                   executor: Optional[ThreadPoolExecutor] = None) -> List[ClientState]:
    method = cfg.method
    if method is Method.PROXYFL:
        raise ValueError("ProxyFL rounds go through local_round_proxyfl/communicate_proxyfl")
    if method is Method.FML:
        _map(lambda s: local_round_proxyfl(s, cfg, rng_for(s.client_id, t)), states, executor)
        return server_average(states, mailbox, t, _weights(states, cfg))
    shared = method in (Method.FEDAVG, Method.AVGPUSH, Method.CWT)
    _map(lambda s: local_round_single(s, cfg, rng_for(s.client_id, t), shared), states, executor)
    if method is Method.FEDAVG:
        return server_average(states, mailbox, t, _weights(states, cfg))
    if method in (Method.AVGPUSH, Method.CWT):
        mixing = generate_matrix(TopologySchedule(cfg.topology, len(states)), t)
        return communicate_proxyfl(states, mixing, mailbox, t, cfg.debias_in_place)
    return states


def round_proxyfl(states: List[ClientState], cfg: ProtocolConfig, t: int,
                  rng_for: Callable[[int, int], np.random.Generator], mailbox: Mailbox,
                  executor: Optional[ThreadPoolExecutor] = None) -> List[ClientState]:
    _map(lambda s: local_round_proxyfl(s, cfg, rng_for(s.client_id, t)), states, executor)
    mixing = generate_matrix(TopologySchedule(cfg.topology, len(states)), t)
    return communicate_proxyfl(states, mixing, mailbox, t, cfg.debias_in_place)


def _weights(states, cfg: ProtocolConfig) -> Optional[np.ndarray]:
    if cfg.weighting == "size":
        return np.array([len(s.dataset) for s in states], dtype=np.float64)
    return None


def init_clients(cfg: ProtocolConfig, datasets: Sequence[LabeledDataset],
                 private_specs: Sequence[ModelSpec], proxy_spec: ModelSpec,
                 seed: int) -> List[ClientState]:
    """Builds the client states for ``cfg.method``.

    Every single-model method, and every proxy, starts from one common
    initialization stream; private models of ProxyFL/FML are initialized per
    client. Joint pools all data into one client using the first private
    architecture.
    """
    method = cfg.method
    common = lambda spec: nn.init_params(spec, np.random.default_rng([seed, _INIT, 0]))  # noqa: E731
    if method is Method.JOINT:
        union = LabeledDataset.concat(list(datasets))
        return [ClientState(0, union, private=common(private_specs[0]),
                            ledger=_make_ledger(len(union), cfg))]
    shared0 = common(proxy_spec)
    states = []
    for k, data in enumerate(datasets):
        spec = private_specs[k % len(private_specs)]
        state = ClientState(k, data, ledger=_make_ledger(len(data), cfg), proxy_spec=proxy_spec)
        if method.mutual:
            state.private = nn.init_params(spec, np.random.default_rng([seed, _INIT, 1, k]))
        elif method is Method.REGULAR:
            state.private = common(spec)
        if method is not Method.REGULAR:
            state.proxy = ProxyState(shared0.values.copy(), 1.0)
        states.append(state)
    return states


def reporting_model(state: ClientState, method: Method) -> ParamVector:
    if method.mutual or method in (Method.REGULAR, Method.JOINT):
        return state.private
    return ParamVector(debias(state.proxy), state.proxy_spec)


def comm_cost_model(method, num_clients: int, model_bytes: int,
                    link_time_per_byte: float) -> float:
    """Simulated communication seconds per round.

    Centralized methods move every model up and back down through one
    server in sequence; decentralized ones send and receive one model per
    client in parallel; Regular and Joint do not communicate.
    """
    method = Method(method)
    one_way = model_bytes * link_time_per_byte
    if method.centralized:
        return 2.0 * num_clients * one_way
    if method.decentralized:
        return 2.0 * one_way
    return 0.0


@dataclass
class RoundMetrics:
    run: int
    round: int
    method: str
    clients: List[int]
    accuracy: List[float]
    macro_accuracy: List[float]
    epsilon: List[float]
    bytes_sent: List[int]
    bytes_received: List[int]
    comm_time: float
    proxy_accuracy: Optional[List[float]] = None
    proxy_macro_accuracy: Optional[List[float]] = None

    def rows(self) -> List[dict]:
        out = []
        for i, c in enumerate(self.clients):
            out.append(dict(run=self.run, round=self.round, client=c, method=self.method,
                            accuracy=self.accuracy[i], macro_accuracy=self.macro_accuracy[i],
                            epsilon=self.epsilon[i], bytes_sent=self.bytes_sent[i],
                            bytes_received=self.bytes_received[i], comm_time=self.comm_time))
        if self.proxy_accuracy is not None:
            for i, c in enumerate(self.clients):
                out.append(dict(run=self.run, round=self.round, client=c,
                                method=f"{self.method}-proxy",
                                accuracy=self.proxy_accuracy[i],
                                macro_accuracy=self.proxy_macro_accuracy[i],
                                epsilon=self.epsilon[i], bytes_sent=0, bytes_received=0,
                                comm_time=0.0))
        return out


@dataclass
class ExperimentResult:
    method: Method
    run: int
    seed: int
    metrics: List[RoundMetrics]
    clients: List[ClientState]
    proxy_history: List[np.ndarray] = field(default_factory=list)
    messages: List[Message] = field(default_factory=list)

    def final(self) -> RoundMetrics:
        return self.metrics[-1]


def run_experiment(cfg: ProtocolConfig, datasets: Sequence[LabeledDataset],
                   test: LabeledDataset, private_specs: Sequence[ModelSpec],
                   proxy_spec: ModelSpec, seed: int, run: int = 0, workers: int = 1,
                   link_time_per_byte: float = 1e-9, record_proxies: bool = False,
                   keep_messages: bool = False) -> ExperimentResult:
    """Runs ``cfg.rounds`` rounds and evaluates every client after each one.

    Results depend only on ``seed``: all randomness comes from per-client,
    per-round streams and aggregation always walks clients in index order,
    so ``workers`` changes speed, not output.
    """
    method = cfg.method
    states = init_clients(cfg, datasets, private_specs, proxy_spec, seed)
    mailbox = Mailbox()
    mailbox.keep_log = keep_messages
    rng_for = lambda client, t: client_rng(seed, client, t)  # noqa: E731
    comm_time = comm_cost_model(method, len(datasets), proxy_spec.num_bytes, link_time_per_byte)
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    result = ExperimentResult(method, run, seed, [], states)
    try:
        for t in range(cfg.rounds):
            mailbox.reset_counters()
            if method is Method.PROXYFL:
                states = round_proxyfl(states, cfg, t, rng_for, mailbox, executor)
            else:
                states = round_baseline(states, cfg, t, rng_for, mailbox, executor)
            result.metrics.append(_evaluate_round(states, method, test, mailbox, run, t,
                                                  comm_time))
            if record_proxies and states[0].proxy is not None:
                result.proxy_history.append(np.stack([debias(s.proxy) for s in states]))
    finally:
        if executor is not None:
            executor.shutdown()
    result.clients = states
    result.messages = mailbox.messages
    return result


def _evaluate_round(states, method: Method, test, mailbox: Mailbox, run: int, t: int,
                    comm_time: float) -> RoundMetrics:
    acc, macro, proxy_acc, proxy_macro = [], [], [], []
    for s in states:
        a, m = evaluate(reporting_model(s, method), test)
        acc.append(a)
        macro.append(m)
        if method.mutual:
            a, m = evaluate(ParamVector(debias(s.proxy), s.proxy_spec), test)
            proxy_acc.append(a)
            proxy_macro.append(m)
    ids = [s.client_id for s in states]
    return RoundMetrics(
        run=run, round=t, method=method.value, clients=ids, accuracy=acc, macro_accuracy=macro,
        epsilon=[s.epsilon for s in states],
        bytes_sent=[mailbox.bytes_sent.get(i, 0) for i in ids],
        bytes_received=[mailbox.bytes_received.get(i, 0) for i in ids],
        comm_time=comm_time,
        proxy_accuracy=proxy_acc if method.mutual else None,
        proxy_macro_accuracy=proxy_macro if method.mutual else None)
