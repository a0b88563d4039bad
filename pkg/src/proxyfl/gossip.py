"""PushSum mixing over time-varying column-stochastic topologies.

``P[k, j] > 0`` means client k receives from client j, so each column
describes how a sender splits its mass.
"""
from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from .errors import ConfigError, ProtocolFault, ShapeError


class TopologyKind(str, enum.Enum):
    EXPONENTIAL_PERMUTATION = "ExponentialPermutation"
    EXPONENTIAL_SELF_LOOP = "ExponentialSelfLoop"
    RING = "Ring"
    FULL_UNIFORM = "FullUniform"
    STAR = "Star"


@dataclass(frozen=True)
class MixingMatrix:
    entries: np.ndarray
    round: int = 0

    def __post_init__(self):
        p = np.asarray(self.entries, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ShapeError(f"mixing matrix must be square, got {p.shape}")
        if np.any(p < 0):
            raise ValueError("mixing matrix has negative entries")
        if not np.allclose(p.sum(axis=0), 1.0, rtol=0, atol=1e-12):
            raise ValueError("mixing matrix is not column-stochastic")
        object.__setattr__(self, "entries", p)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def out_neighbors(self, sender: int) -> List[int]:
        return [int(k) for k in np.flatnonzero(self.entries[:, sender]) if k != sender]

    def in_neighbors(self, receiver: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.entries[receiver]) if j != receiver]


def exponential_period(num_clients: int) -> int:
    """Number of distinct hop distances 2^0 .. 2^floor(log2(K-1))."""
    if num_clients <= 2:
        return 1
    return int(math.floor(math.log2(num_clients - 1))) + 1


def exponential_offset(num_clients: int, t: int) -> int:
    return 2 ** (t % exponential_period(num_clients))


@dataclass(frozen=True)
class TopologySchedule:
    kind: TopologyKind
    num_clients: int

    def __post_init__(self):
        object.__setattr__(self, "kind", TopologyKind(self.kind))
        if self.num_clients < 1:
            raise ConfigError("topology needs at least one client")

    def matrix(self, t: int) -> MixingMatrix:
        return generate_matrix(self, t)


def generate_matrix(schedule: TopologySchedule, t: int) -> MixingMatrix:
    """Mixing matrix for round ``t``.

    Star returns a (K+1)x(K+1) gather matrix whose last row/column is the
    server; every other kind is KxK.
    """
    k = schedule.num_clients
    kind = schedule.kind
    if k < 1:
        raise ConfigError("topology needs at least one client")
    if kind is TopologyKind.STAR:
        p = np.zeros((k + 1, k + 1))
        p[k, :] = 1.0
        return MixingMatrix(p, t)
    if k == 1:
        return MixingMatrix(np.ones((1, 1)), t)
    idx = np.arange(k)
    p = np.zeros((k, k))
    if kind is TopologyKind.FULL_UNIFORM:
        p[:] = 1.0 / k
    elif kind is TopologyKind.RING:
        p[(idx + 1) % k, idx] = 1.0
    else:
        dst = (idx + exponential_offset(k, t)) % k
        if kind is TopologyKind.EXPONENTIAL_PERMUTATION:
            p[dst, idx] = 1.0
        else:
            p[dst, idx] += 0.5
            p[idx, idx] += 0.5
    return MixingMatrix(p, t)


@dataclass
class ProxyState:
    """Shared model numerator ``theta`` and its de-biasing weight."""
    theta: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.weight = float(self.weight)


def pushsum_step(states: Sequence[ProxyState], mixing: MixingMatrix) -> List[ProxyState]:
    p = mixing.entries
    if len(states) != p.shape[0]:
        raise ShapeError(f"{len(states)} states for a {p.shape[0]}-node mixing matrix")
    thetas = np.stack([s.theta for s in states])
    weights = np.array([s.weight for s in states])
    new_thetas = p @ thetas
    new_weights = p @ weights
    return [ProxyState(th, w) for th, w in zip(new_thetas, new_weights)]


def debias(state: ProxyState) -> np.ndarray:
    if not state.weight > 0:
        raise ProtocolFault(f"de-biasing weight must be positive, got {state.weight}")
    return state.theta / state.weight


@dataclass(frozen=True)
class Message:
    """A scaled shared-model payload. There is deliberately no slot for
    anything but the shared parameters and their weight."""
    src: int
    dst: int
    round: int
    theta: np.ndarray
    weight: float

    @property
    def num_bytes(self) -> int:
        return 8 * self.theta.size


class Mailbox:
    """Value-passing message store with a per-round barrier.

    Self-addressed mass never enters the mailbox, so byte counters only see
    traffic between distinct nodes.
    """

    def __init__(self):
        self._inbox: Dict[int, List[Message]] = defaultdict(list)
        self.bytes_sent: Dict[int, int] = defaultdict(int)
        self.bytes_received: Dict[int, int] = defaultdict(int)
        self.messages: List[Message] = []
        self.keep_log = False

    def post(self, msg: Message) -> None:
        msg = Message(msg.src, msg.dst, msg.round, np.array(msg.theta, copy=True), msg.weight)
        self._inbox[msg.dst].append(msg)
        self.bytes_sent[msg.src] += msg.num_bytes
        if self.keep_log:
            self.messages.append(msg)

    def collect(self, dst: int, expected_src: Sequence[int], t: int) -> List[Message]:
        got = {m.src: m for m in self._inbox.pop(dst, []) if m.round == t}
        missing = sorted(set(expected_src) - set(got))
        if missing:
            raise ProtocolFault(f"round {t}: client {dst} is missing messages from {missing}")
        out = [got[s] for s in sorted(expected_src)]
        for m in out:
            self.bytes_received[dst] += m.num_bytes
        return out

    def reset_counters(self) -> None:
        self.bytes_sent.clear()
        self.bytes_received.clear()


def gossip_round(states: Sequence[ProxyState], mixing: MixingMatrix, mailbox: Mailbox,
                 t: int, present: Optional[Sequence[bool]] = None) -> List[ProxyState]:
    """Executes one PushSum step as per-node sends followed by a barrier.

    ``present`` marks which nodes hold a state; absent nodes (e.g. a server
    that starts each round empty) contribute zero mass.
    """
    p = mixing.entries
    n = len(states)
    if n != p.shape[0]:
        raise ShapeError(f"{n} states for a {p.shape[0]}-node mixing matrix")
    for j in range(n):
        if present is not None and not present[j]:
            continue
        for k in mixing.out_neighbors(j):
            mailbox.post(Message(j, k, t, p[k, j] * states[j].theta, p[k, j] * states[j].weight))
    out = []
    for k in range(n):
        senders = [j for j in mixing.in_neighbors(k) if present is None or present[j]]
        msgs = mailbox.collect(k, senders, t)
        theta = p[k, k] * states[k].theta
        weight = p[k, k] * states[k].weight
        for m in msgs:
            theta = theta + m.theta
            weight = weight + m.weight
        out.append(ProxyState(theta, weight))
    return out


def taint_trace(schedule: TopologySchedule, rounds: int, source: int = 0) -> List[Set[int]]:
    """Clients that have seen ``source``'s round-0 information after each round.

    Element 0 is the initial set ``{source}``. A client stays informed once
    reached, since its private model keeps what it learned.
    """
    informed = {source}
    trace = [set(informed)]
    for t in range(rounds):
        p = generate_matrix(schedule, t).entries
        reached = {int(k) for j in informed for k in np.flatnonzero(p[:, j])}
        informed |= reached
        trace.append(set(informed))
    return trace


def rounds_to_full_propagation(schedule: TopologySchedule, source: int = 0,
                               max_rounds: int = 10_000) -> Optional[int]:
    k = schedule.num_clients
    informed = {source}
    if len(informed) == k:
        return 0
    for t in range(max_rounds):
        p = generate_matrix(schedule, t).entries
        informed |= {int(i) for j in informed for i in np.flatnonzero(p[:, j])}
        if len(informed) >= k:
            return t + 1
    return None
