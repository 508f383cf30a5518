"""Deterministic discrete-event mesh: topology, latency links, partitions.

Events fire in (time, sequence) order with a monotone sequence counter, so a
run is a pure function of its configuration and seed. Links are point-to-point
with integer latency; disabling a link drops messages already in flight on it.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from .identity import GATEWAY_TAG, MacAddress, Metadata, Oid, edge_mac, gateway_mac

ROLE_GATEWAY = "Gateway"
ROLE_CONSUMER = "Consumer"
ROLE_PUBLISHER = "Publisher"

DEFAULT_LATENCY = 1


class Engine:
    """Event queue with deterministic tie-breaking."""

    def __init__(self):
        self._queue: list[tuple[float, int, object]] = []
        self._seq = 0
        self.now = 0.0
        self.events_processed = 0

    def schedule(self, delay: float, action) -> None:
        if delay < 0:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._queue, (self.now + delay, self._seq, action))
        self._seq += 1

    def run_until(self, t_end: float) -> None:
        if t_end < self.now:
            raise ValueError("t_end is in the past")
        queue = self._queue
        while queue and queue[0][0] <= t_end:
            fire_time, _, action = heapq.heappop(queue)
            self.now = fire_time
            action()
            self.events_processed += 1
        self.now = t_end

    def pending(self) -> int:
        return len(self._queue)


def run_until(engine: Engine, t_end: float) -> None:
    engine.run_until(t_end)


@dataclass(frozen=True)
class TopologyLink:
    a: MacAddress
    b: MacAddress
    latency: int = DEFAULT_LATENCY

    def key(self) -> tuple[MacAddress, MacAddress]:
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)


@dataclass(frozen=True)
class Topology:
    nodes: tuple[tuple[MacAddress, str], ...]
    links: tuple[TopologyLink, ...]

    def gateways(self) -> list[MacAddress]:
        return [mac for mac, role in self.nodes if role == ROLE_GATEWAY]

    def edge_nodes_of(self, gateway: MacAddress) -> list[MacAddress]:
        roles = dict(self.nodes)
        attached = []
        for link in self.links:
            for near, far in ((link.a, link.b), (link.b, link.a)):
                if near == gateway and roles.get(far) in (ROLE_CONSUMER, ROLE_PUBLISHER):
                    attached.append(far)
        return sorted(attached)

    def publisher_of(self, gateway: MacAddress) -> MacAddress:
        roles = dict(self.nodes)
        for mac in self.edge_nodes_of(gateway):
            if roles[mac] == ROLE_PUBLISHER:
                return mac
        raise ValueError(f"gateway {gateway} has no publisher")

    def consumers_of(self, gateway: MacAddress) -> list[MacAddress]:
        roles = dict(self.nodes)
        edges = self.edge_nodes_of(gateway)
        consumers = [m for m in edges if roles[m] == ROLE_CONSUMER]
        return consumers or edges  # a lone attached publisher doubles as consumer

    def default_gateway_of(self, edge: MacAddress) -> MacAddress:
        roles = dict(self.nodes)
        for link in self.links:
            for near, far in ((link.a, link.b), (link.b, link.a)):
                if near == edge and roles.get(far) == ROLE_GATEWAY:
                    return far
        raise ValueError(f"edge node {edge} has no gateway")

    def export_edges(self) -> str:
        lines = [f"{link.a} {link.b} {link.latency}" for link in self.links]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_edges(cls, text: str) -> "Topology":
        """Re-ingest an exported edge list; roles come from the address tag byte
        (gateways carry one tag, edge nodes another; the lowest-addressed edge
        node attached to each gateway is its publisher)."""
        links = []
        macs: set[MacAddress] = set()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            a_s, b_s, lat_s = line.split()
            a, b = MacAddress.parse(a_s), MacAddress.parse(b_s)
            links.append(TopologyLink(a, b, int(lat_s)))
            macs.update((a, b))
        nodes = []
        gateways = sorted(m for m in macs if m.raw[0] == GATEWAY_TAG)
        edges = sorted(m for m in macs if m.raw[0] != GATEWAY_TAG)
        nodes.extend((m, ROLE_GATEWAY) for m in gateways)
        partial = cls(tuple(nodes) + tuple((m, ROLE_CONSUMER) for m in edges), tuple(links))
        roles = {}
        for gw in gateways:
            attached = partial.edge_nodes_of(gw)
            for i, m in enumerate(attached):
                roles[m] = ROLE_PUBLISHER if i == 0 else ROLE_CONSUMER
        nodes = [(m, ROLE_GATEWAY) for m in gateways] + [(m, roles.get(m, ROLE_CONSUMER)) for m in edges]
        return cls(tuple(nodes), tuple(links))


def build_topology(
    gateway_count: int,
    consumers_per_gateway: int,
    seed: int,
    latency: int = DEFAULT_LATENCY,
) -> Topology:
    """Random geometric mesh, deterministic from the seed.

    Gateways land on random plane positions, each links to its nearest
    neighbours until it has degree >= 2 (relaxed when impossible), and the
    shortest inter-component candidate links are added until connected. Every
    gateway gets consumers_per_gateway directly attached edge nodes, the first
    of which is its publisher.
    """
    if gateway_count < 2:
        raise ValueError("need at least 2 gateways")
    if consumers_per_gateway < 1:
        raise ValueError("need at least 1 edge node per gateway")
    rng = random.Random(seed)
    positions = [(rng.random(), rng.random()) for _ in range(gateway_count)]
    macs = [gateway_mac(i) for i in range(gateway_count)]

    def dist2(i: int, j: int) -> float:
        dx = positions[i][0] - positions[j][0]
        dy = positions[i][1] - positions[j][1]
        return dx * dx + dy * dy

    candidates = sorted(
        ((dist2(i, j), i, j) for i in range(gateway_count) for j in range(i + 1, gateway_count))
    )
    edges: set[tuple[int, int]] = set()
    degree = [0] * gateway_count

    def add_edge(i: int, j: int) -> None:
        key = (i, j) if i < j else (j, i)
        if key not in edges:
            edges.add(key)
            degree[i] += 1
            degree[j] += 1

    target_degree = 2 if gateway_count > 2 else 1
    for i in range(gateway_count):
        by_dist = sorted((dist2(i, j), j) for j in range(gateway_count) if j != i)
        for _, j in by_dist:
            if degree[i] >= target_degree:
                break
            add_edge(i, j)

    parent = list(range(gateway_count))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        parent[find(i)] = find(j)
    for _, i, j in candidates:
        if find(i) != find(j):
            add_edge(i, j)
            parent[find(i)] = find(j)

    nodes: list[tuple[MacAddress, str]] = [(m, ROLE_GATEWAY) for m in macs]
    links = [TopologyLink(macs[i], macs[j], latency) for i, j in sorted(edges)]
    for g in range(gateway_count):
        for k in range(consumers_per_gateway):
            mac = edge_mac(g * consumers_per_gateway + k)
            role = ROLE_PUBLISHER if k == 0 else ROLE_CONSUMER
            nodes.append((mac, role))
            links.append(TopologyLink(macs[g], mac, latency))
    return Topology(tuple(nodes), tuple(links))


# -- messages ----------------------------------------------------------------


@dataclass(frozen=True)
class InterestRequest:
    """Object request flooding through the mesh; the path grows hop by hop."""

    request_id: int
    oid: Oid
    path: tuple[MacAddress, ...]


@dataclass(frozen=True)
class ObjectResponse:
    """Reply retracing the reversed request path back to the origin gateway."""

    request_id: int
    oid: Oid
    payload: bytes
    metadata: Metadata
    return_path: tuple[MacAddress, ...]


@dataclass(frozen=True)
class ResponseRelay:
    """Transport frame: which return-path hop the response sits at, and how
    the responder served it (cache vs pinned producer copy)."""

    response: ObjectResponse
    hop: int
    serve_kind: str


@dataclass(frozen=True)
class TxGossip:
    tx: object


@dataclass(frozen=True)
class BlockGossip:
    block: object


@dataclass(frozen=True)
class ChainRequest:
    pass


@dataclass(frozen=True)
class ChainPush:
    data: bytes


class _LinkState:
    __slots__ = ("latency", "enabled", "epoch")

    def __init__(self, latency: int):
        self.latency = latency
        self.enabled = True
        self.epoch = 0


class Network:
    """Binds nodes to the engine; owns link state and the connectivity oracle."""

    def __init__(self, topology: Topology, observer=None):
        self.topology = topology
        self.engine = Engine()
        self.observer = observer
        self.nodes: dict[MacAddress, object] = {}
        self._links: dict[tuple[MacAddress, MacAddress], _LinkState] = {}
        self._gw_neighbors: dict[MacAddress, list[MacAddress]] = {}
        self._gateway_set = set(topology.gateways())
        for link in topology.links:
            self._register_link(link)
        self._partition_epoch = 0
        self._components: dict[MacAddress, tuple[MacAddress, ...]] | None = None
        self._request_seq = 0
        self.stats: dict[str, int] = {"sent": 0, "delivered": 0, "dropped": 0}
        self.interest_sends: dict[int, int] = {}
        self.corrupt_requests: set[int] = set()
        self._diameter: int | None = None

    def _register_link(self, link: TopologyLink) -> None:
        key = link.key()
        if key[0] == key[1]:
            raise ValueError("self-links are not allowed")
        if key in self._links:
            raise ValueError(f"duplicate link {key[0]}–{key[1]}")
        self._links[key] = _LinkState(link.latency)
        for near, far in ((link.a, link.b), (link.b, link.a)):
            if near in self._gateway_set and far in self._gateway_set:
                self._gw_neighbors.setdefault(near, []).append(far)
        for m in (link.a, link.b):
            if m in self._gateway_set:
                self._gw_neighbors.setdefault(m, [])
        for mac in self._gw_neighbors:
            self._gw_neighbors[mac].sort()

    @property
    def now(self) -> float:
        return self.engine.now

    def register_node(self, mac: MacAddress, node) -> None:
        if mac in self.nodes:
            raise ValueError(f"node {mac} already registered")
        self.nodes[mac] = node

    def add_gateway_links(self, mac: MacAddress, peers: list[tuple[MacAddress, int]]) -> None:
        """Grow the mesh at runtime (new-node join)."""
        nodes = self.topology.nodes + ((mac, ROLE_GATEWAY),)
        new_links = tuple(TopologyLink(mac, peer, lat) for peer, lat in peers)
        self._gateway_set.add(mac)
        for link in new_links:
            self._register_link(link)
        self.topology = Topology(nodes, self.topology.links + new_links)
        self._components = None
        self._diameter = None
        self._partition_epoch += 1

    def gateway_neighbors(self, mac: MacAddress) -> list[MacAddress]:
        return self._gw_neighbors.get(mac, [])

    def _link(self, a: MacAddress, b: MacAddress) -> _LinkState:
        key = (a, b) if a <= b else (b, a)
        state = self._links.get(key)
        if state is None:
            raise ValueError(f"no link between {a} and {b}")
        return state

    def link_enabled(self, a: MacAddress, b: MacAddress) -> bool:
        return self._link(a, b).enabled

    def send(self, src: MacAddress, dst: MacAddress, msg) -> None:
        link = self._link(src, dst)
        self.stats["sent"] += 1
        if isinstance(msg, InterestRequest):
            self.interest_sends[msg.request_id] = self.interest_sends.get(msg.request_id, 0) + 1
        if not link.enabled:
            self.stats["dropped"] += 1
            return
        epoch = link.epoch
        self.engine.schedule(link.latency, lambda: self._deliver(src, dst, msg, link, epoch))

    def _deliver(self, src: MacAddress, dst: MacAddress, msg, link: _LinkState, epoch: int) -> None:
        if not link.enabled or link.epoch != epoch:
            self.stats["dropped"] += 1
            return
        self.stats["delivered"] += 1
        self.nodes[dst].receive(src, msg)

    # -- partitions ----------------------------------------------------------

    def set_partition(self, links: list[tuple[MacAddress, MacAddress]]) -> None:
        """Disable links; messages in flight on them are dropped. Idempotent."""
        changed = False
        for a, b in links:
            state = self._link(a, b)
            if state.enabled:
                state.enabled = False
                state.epoch += 1
                changed = True
        if changed:
            self._partition_epoch += 1
            self._components = None

    def heal_partition(self, links: list[tuple[MacAddress, MacAddress]]) -> None:
        changed = False
        for a, b in links:
            state = self._link(a, b)
            if not state.enabled:
                state.enabled = True
                changed = True
        if changed:
            self._partition_epoch += 1
            self._components = None

    def disabled_links(self) -> list[tuple[MacAddress, MacAddress]]:
        return sorted(key for key, state in self._links.items() if not state.enabled)

    def reachable_gateways(self, frm: MacAddress) -> tuple[MacAddress, ...]:
        """Gateways connected to frm over enabled links, frm included, sorted."""
        if self._components is None:
            self._components = {}
            remaining = set(self._gateway_set)
            while remaining:
                start = min(remaining)
                seen = {start}
                frontier = [start]
                while frontier:
                    cur = frontier.pop()
                    for nb in self._gw_neighbors.get(cur, []):
                        if nb not in seen and self._link(cur, nb).enabled:
                            seen.add(nb)
                            frontier.append(nb)
                component = tuple(sorted(seen))
                for mac in component:
                    self._components[mac] = component
                remaining -= seen
        return self._components[frm]

    def gateway_diameter(self) -> int:
        """Hop diameter of the full (un-partitioned) gateway mesh."""
        if self._diameter is None:
            best = 1
            for start in self._gateway_set:
                depth = {start: 0}
                frontier = [start]
                while frontier:
                    nxt = []
                    for cur in frontier:
                        for nb in self._gw_neighbors.get(cur, []):
                            if nb not in depth:
                                depth[nb] = depth[cur] + 1
                                nxt.append(nb)
                    frontier = nxt
                best = max(best, max(depth.values()))
            self._diameter = best
        return self._diameter

    def max_latency(self) -> int:
        return max(
            (s.latency for k, s in self._links.items() if k[0] in self._gateway_set and k[1] in self._gateway_set),
            default=DEFAULT_LATENCY,
        )

    def request_timeout(self) -> float:
        return 4 * self.gateway_diameter() * self.max_latency()

    def new_request_id(self) -> int:
        self._request_seq += 1
        return self._request_seq


def set_partition(net: Network, links: list[tuple[MacAddress, MacAddress]]) -> None:
    net.set_partition(links)


def heal_partition(net: Network, links: list[tuple[MacAddress, MacAddress]]) -> None:
    net.heal_partition(links)
