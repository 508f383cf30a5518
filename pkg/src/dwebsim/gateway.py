"""Gateway node behaviour: publishing, ledger gossip, interest routing, search.

Each gateway owns a chain replica, a pending pool, an object cache, a keyword
index derived from the chain, bounded route hints and duplicate-suppression
state. All interaction with other gateways happens through simulated messages;
a handler always runs to completion before the next event fires.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from .cache import CacheConfig, ObjectCache, Policy, PopularityTable, on_path_observe
from .identity import (
    Certificate,
    KeyPair,
    MacAddress,
    Metadata,
    Oid,
    compute_oid,
    verify_object,
)
from .ledger import (
    Chain,
    PendingPool,
    Reject,
    Transaction,
    make_certificate_transaction,
    make_object_transaction,
    merge_after_partition,
    next_proposer,
    propose_block,
    select_chain,
    validate_block,
    validate_transaction,
)
from .simnet import (
    BlockGossip,
    ChainPush,
    ChainRequest,
    InterestRequest,
    Network,
    ObjectResponse,
    ResponseRelay,
    TxGossip,
)


class PublishError(Exception):
    pass


class JoinRefused(Exception):
    pass


@dataclass(frozen=True)
class Link:
    """Search result a consumer can click: object identifier plus metadata."""

    oid: Oid
    metadata: Metadata


def tokenize(metadata: Metadata) -> list[str]:
    """The network-wide indexing rule: lowercase whitespace tokens drawn from
    the object name and keywords. Every gateway applies exactly this."""
    tokens = metadata.name.lower().split()
    for keyword in metadata.keywords:
        tokens.extend(keyword.lower().split())
    return tokens


class SearchIndex:
    """Inverted keyword index over committed object registrations."""

    def __init__(self):
        self._postings: dict[str, dict[bytes, Link]] = {}

    def add(self, oid: Oid, metadata: Metadata) -> None:
        link = Link(oid, metadata)
        for token in tokenize(metadata):
            self._postings.setdefault(token, {})[oid.digest] = link

    def add_block(self, block) -> None:
        for tx in block.transactions:
            if tx.oid is not None:
                self.add(tx.oid, tx.metadata)

    @classmethod
    def from_chain(cls, chain: Chain) -> "SearchIndex":
        index = cls()
        for tx in chain.object_transactions():
            index.add(tx.oid, tx.metadata)
        return index

    def search(self, query: list[str]) -> list[Link]:
        """Links whose keywords contain every query token, ordered by oid."""
        if not query:
            return []
        postings = []
        for token in query:
            p = self._postings.get(token.lower())
            if not p:
                return []
            postings.append(p)
        postings.sort(key=len)
        matched = set(postings[0])
        for p in postings[1:]:
            matched &= set(p)
        return [postings[0][d] for d in sorted(matched)]

    def dump_lines(self) -> str:
        lines = []
        for token in sorted(self._postings):
            for d in sorted(self._postings[token]):
                lines.append(f"{token}\t{d.hex()}")
        return "\n".join(lines) + "\n" if lines else ""


class BoundedSeen:
    """Insertion-ordered set with a capacity bound; evicts oldest first."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: OrderedDict = OrderedDict()

    def add(self, item) -> bool:
        if item in self._items:
            return False
        self._items[item] = None
        if len(self._items) > self.capacity:
            self._items.popitem(last=False)
        return True

    def __contains__(self, item) -> bool:
        return item in self._items


class HintCache:
    """Bounded next-hop hints keyed by object or gateway, expiring by TTL."""

    def __init__(self, capacity: int, ttl: float):
        self.capacity = capacity
        self.ttl = ttl
        self._hints: OrderedDict[object, tuple[MacAddress, float]] = OrderedDict()

    def put(self, subject, next_hop: MacAddress, now: float) -> None:
        if subject in self._hints:
            del self._hints[subject]
        self._hints[subject] = (next_hop, now)
        if len(self._hints) > self.capacity:
            self._hints.popitem(last=False)

    def get(self, subject, now: float) -> MacAddress | None:
        hint = self._hints.get(subject)
        if hint is None:
            return None
        next_hop, stored_at = hint
        if now - stored_at > self.ttl:
            del self._hints[subject]
            return None
        return next_hop

    def __len__(self) -> int:
        return len(self._hints)


class Outcome(str, Enum):
    HIT_LOCAL = "hit_local"
    HIT_REMOTE = "hit_remote"
    PRODUCER_LOCAL = "producer_local"
    PRODUCER_REMOTE = "producer_remote"
    TIMEOUT = "timeout"
    INTEGRITY_FAILURE = "integrity_failure"


HIT_OUTCOMES = (Outcome.HIT_LOCAL, Outcome.HIT_REMOTE)
PRODUCER_OUTCOMES = (Outcome.PRODUCER_LOCAL, Outcome.PRODUCER_REMOTE)
FAILURE_OUTCOMES = (Outcome.TIMEOUT, Outcome.INTEGRITY_FAILURE)

SERVE_CACHE = "cache"
SERVE_PRODUCER = "producer"


@dataclass
class FetchResult:
    outcome: Outcome
    payload: bytes | None = None
    metadata: Metadata | None = None

    @property
    def ok(self) -> bool:
        return self.outcome not in FAILURE_OUTCOMES


@dataclass
class RequestState:
    oid: Oid
    link: Link
    consumer: MacAddress
    attempt: int = 1
    resolved: bool = False
    request_ids: list[int] = field(default_factory=list)
    result: FetchResult | None = None


@dataclass(frozen=True)
class NodeConfig:
    """Per-gateway behaviour knobs shared across a scenario."""

    cache: CacheConfig
    block_interval: float = 50.0
    max_txs_per_block: int = 100
    route_hints_enabled: bool = True
    hint_capacity: int = 65536
    hint_ttl: float = 100000.0
    seen_capacity: int = 8192


class GatewayNode:
    """One mesh router: ledger replica, cache, index and protocol handlers."""

    def __init__(
        self,
        net: Network,
        mac: MacAddress,
        keys: KeyPair,
        certificate: Certificate,
        chain: Chain,
        config: NodeConfig,
    ):
        self.net = net
        self.mac = mac
        self.keys = keys
        self.certificate = certificate
        self.chain = chain
        self.config = config
        self.pool = PendingPool()
        self.popularity = PopularityTable()
        self.cache = ObjectCache(config.cache, self.popularity)
        self.published: dict[bytes, tuple[bytes, Metadata]] = {}
        self.index = SearchIndex.from_chain(chain)
        self.route_hints = HintCache(config.hint_capacity, config.hint_ttl)
        self.seen_requests = BoundedSeen(config.seen_capacity)
        self.seen_txs = BoundedSeen(config.seen_capacity)
        self.seen_blocks = BoundedSeen(config.seen_capacity)
        self.outstanding: dict[int, RequestState] = {}
        self.prev_reachable: tuple[MacAddress, ...] | None = None
        self.blocks_proposed = 0
        net.register_node(mac, self)

    # -- plumbing ------------------------------------------------------------

    def start_timers(self) -> None:
        self.net.engine.schedule(self.config.block_interval, self.on_block_tick)

    def _neighbors(self) -> list[MacAddress]:
        return self.net.gateway_neighbors(self.mac)

    def receive(self, src: MacAddress, msg) -> None:
        if isinstance(msg, InterestRequest):
            self.handle_interest(src, msg)
        elif isinstance(msg, ResponseRelay):
            self.handle_response(src, msg)
        elif isinstance(msg, TxGossip):
            self.handle_tx(src, msg.tx)
        elif isinstance(msg, BlockGossip):
            self.handle_block(src, msg.block)
        elif isinstance(msg, ChainRequest):
            self.net.send(self.mac, src, ChainPush(self.chain.dump()))
        elif isinstance(msg, ChainPush):
            self.handle_chain_push(src, msg.data)
        else:
            raise TypeError(f"unhandled message {type(msg).__name__}")

    # -- publishing and search -------------------------------------------------

    def publish(self, payload: bytes, metadata: Metadata) -> Transaction:
        """Pin the object locally, register it on the ledger, gossip the
        transaction. Publishing an already-registered object is refused."""
        if metadata.publisher not in self.net.topology.edge_nodes_of(self.mac):
            raise PublishError(f"{metadata.publisher} is not attached to {self.mac}")
        oid = compute_oid(payload, metadata)
        if self.chain.has_object(oid) or ("obj", oid.digest) in self.pool:
            raise PublishError(f"object {oid.hex[:12]} already registered")
        tx = make_object_transaction(payload, metadata, self.keys, self.mac)
        self.published[oid.digest] = (payload, metadata)
        self.submit_transaction(tx)
        return tx

    def submit_transaction(self, tx: Transaction) -> None:
        verdict = validate_transaction(tx, self.chain)
        if not verdict:
            raise PublishError(f"transaction refused: {verdict.reason}")
        self.seen_txs.add(tx.dedupe_key())
        self.pool.add(tx)
        for nb in self._neighbors():
            self.net.send(self.mac, nb, TxGossip(tx))

    def search(self, query: list[str]) -> list[Link]:
        return self.index.search(query)

    # -- interest handling -----------------------------------------------------

    def start_request(self, consumer: MacAddress, link: Link) -> RequestState:
        """Entry point for a consumer request via this (default) gateway."""
        net = self.net
        rid = net.new_request_id()
        state = RequestState(link.oid, link, consumer, request_ids=[rid])
        self.outstanding[rid] = state
        self.popularity.observe(link.oid)
        held = self.published.get(link.oid.digest)
        if held is not None:
            self._deliver(state, held[0], held[1], Outcome.PRODUCER_LOCAL)
            return state
        entry = self.cache.get(link.oid, net.now)
        if entry is not None:
            self._deliver(state, entry.payload, entry.metadata, Outcome.HIT_LOCAL)
            return state
        self.seen_requests.add(rid)
        request = InterestRequest(rid, link.oid, (self.mac,))
        self._forward_interest(request, arrived_from=None, allow_hint=True)
        net.engine.schedule(net.request_timeout(), lambda: self._on_timeout(state, 1))
        return state

    def _forward_interest(self, request: InterestRequest, arrived_from, allow_hint: bool) -> None:
        # One unicast probe along a live hint when we have one; otherwise flood
        # to every neighbor except where the request came from.
        targets = None
        if allow_hint and self.config.route_hints_enabled:
            hop = self.route_hints.get(request.oid.digest, self.net.now)
            if (
                hop is not None
                and hop != arrived_from
                and hop not in request.path
                and hop in self._neighbors()
                and self.net.link_enabled(self.mac, hop)
            ):
                targets = [hop]
        if targets is None:
            targets = [
                nb
                for nb in self._neighbors()
                if nb != arrived_from and nb not in request.path
            ]
        for nb in targets:
            self.net.send(self.mac, nb, request)

    def handle_interest(self, frm: MacAddress, request: InterestRequest) -> str:
        if not self.seen_requests.add(request.request_id):
            return "dropped"
        self.popularity.observe(request.oid)
        held = self.published.get(request.oid.digest)
        if held is not None:
            self._respond(request, held[0], held[1], SERVE_PRODUCER)
            return "served"
        entry = self.cache.get(request.oid, self.net.now)
        if entry is not None:
            self._respond(request, entry.payload, entry.metadata, SERVE_CACHE)
            return "served"
        extended = InterestRequest(request.request_id, request.oid, request.path + (self.mac,))
        self._forward_interest(extended, arrived_from=frm, allow_hint=True)
        return "forwarded"

    def _respond(self, request: InterestRequest, payload: bytes, metadata: Metadata, kind: str) -> None:
        if request.request_id in self.net.corrupt_requests:
            # test-only fault injection: flip one payload byte
            payload = bytes([payload[0] ^ 0xFF]) + payload[1:] if payload else b"\x00"
        response = ObjectResponse(
            request.request_id, request.oid, payload, metadata, tuple(reversed(request.path))
        )
        self.net.send(self.mac, response.return_path[0], ResponseRelay(response, 0, kind))

    # -- response path -----------------------------------------------------------

    def handle_response(self, frm: MacAddress, relay: ResponseRelay) -> None:
        response = relay.response
        self.record_route_hint(response.oid.digest, frm)
        last = relay.hop == len(response.return_path) - 1
        if not last:
            # preemptive caching of popular objects transiting this hop
            if self.config.cache.policy is Policy.POPULARITY and verify_object(
                response.payload, response.metadata, response.oid
            ):
                on_path_observe(self.cache, response.oid, response.payload, response.metadata, self.net.now)
            nxt = response.return_path[relay.hop + 1]
            self.net.send(self.mac, nxt, ResponseRelay(response, relay.hop + 1, relay.serve_kind))
            return
        state = self.outstanding.get(response.request_id)
        if state is None or state.resolved:
            return  # first response already won
        if not verify_object(response.payload, response.metadata, state.oid):
            self._resolve(state, FetchResult(Outcome.INTEGRITY_FAILURE))
            return
        self.cache.insert(state.oid, response.payload, response.metadata, self.net.now)
        outcome = Outcome.HIT_REMOTE if relay.serve_kind == SERVE_CACHE else Outcome.PRODUCER_REMOTE
        self._deliver(state, response.payload, response.metadata, outcome)

    def _deliver(self, state: RequestState, payload: bytes, metadata: Metadata, outcome: Outcome) -> None:
        # the consumer's own integrity check before accepting the object
        if not verify_object(payload, metadata, state.link.oid):
            self._resolve(state, FetchResult(Outcome.INTEGRITY_FAILURE))
            return
        self._resolve(state, FetchResult(outcome, payload, metadata))

    def _resolve(self, state: RequestState, result: FetchResult) -> None:
        state.resolved = True
        state.result = result
        for rid in state.request_ids:
            self.outstanding.pop(rid, None)
        observer = self.net.observer
        if observer is not None:
            observer.on_request_resolved(self.mac, state.consumer, result.outcome)

    def _on_timeout(self, state: RequestState, attempt: int) -> None:
        if state.resolved or state.attempt != attempt:
            return
        if state.attempt >= 2:
            self._resolve(state, FetchResult(Outcome.TIMEOUT))
            return
        # one retry: fresh request id, full flood, no hint shortcut
        state.attempt = 2
        rid = self.net.new_request_id()
        state.request_ids.append(rid)
        self.outstanding[rid] = state
        self.popularity.observe(state.oid)
        self.seen_requests.add(rid)
        request = InterestRequest(rid, state.oid, (self.mac,))
        self._forward_interest(request, arrived_from=None, allow_hint=False)
        self.net.engine.schedule(self.net.request_timeout(), lambda: self._on_timeout(state, 2))

    def record_route_hint(self, subject, next_hop: MacAddress, now: float | None = None) -> None:
        self.route_hints.put(subject, next_hop, self.net.now if now is None else now)

    # -- ledger gossip -----------------------------------------------------------

    def handle_tx(self, frm: MacAddress, tx: Transaction) -> None:
        key = tx.dedupe_key()
        if not self.seen_txs.add(key):
            return
        # remember where registrations come from: next hop toward the origin
        if tx.oid is not None:
            self.record_route_hint(tx.oid.digest, frm)
        self.record_route_hint(tx.origin, frm)
        if not validate_transaction(tx, self.chain):
            return
        self.pool.add(tx)
        for nb in self._neighbors():
            if nb != frm:
                self.net.send(self.mac, nb, TxGossip(tx))

    def active_schedule_set(self, reachable: tuple[MacAddress, ...]) -> list[MacAddress]:
        reach = set(reachable)
        return [m for m in self.chain.schedule_order() if m in reach]

    def on_block_tick(self) -> None:
        net = self.net
        reachable = net.reachable_gateways(self.mac)
        if self.prev_reachable is not None and reachable != self.prev_reachable:
            previously = set(self.prev_reachable)
            for peer in reachable:
                # a healed link shows up as a newly reachable direct neighbor;
                # exchange chains with it so both partitions converge
                if peer not in previously and peer in self._neighbors():
                    net.send(self.mac, peer, ChainPush(self.chain.dump()))
        self.prev_reachable = reachable
        self.pool.drop_invalid(self.chain)
        schedule = self.active_schedule_set(reachable)
        if schedule and next_proposer(self.chain, schedule) == self.mac and len(self.pool):
            block = propose_block(self.chain, self.pool, self.mac, self.config.max_txs_per_block)
            if block is not None:
                self._commit_block(block, schedule)
                self.blocks_proposed += 1
                self.seen_blocks.add(block.block_digest)
                for nb in self._neighbors():
                    net.send(self.mac, nb, BlockGossip(block))
        net.engine.schedule(self.config.block_interval, self.on_block_tick)

    def _commit_block(self, block, active_set) -> None:
        self.chain.append(block, active_set)
        self.pool.remove_committed(block)
        self.index.add_block(block)

    def handle_block(self, frm: MacAddress, block) -> None:
        if not self.seen_blocks.add(block.block_digest):
            return
        reachable = self.net.reachable_gateways(self.mac)
        verdict = validate_block(block, self.chain, self.active_schedule_set(reachable))
        if verdict:
            self._commit_block(block, None)
            for nb in self._neighbors():
                if nb != frm:
                    self.net.send(self.mac, nb, BlockGossip(block))
        elif verdict.reason is Reject.BAD_LINK:
            # diverged from the sender (partition or late join): pull its chain
            self.net.send(self.mac, frm, ChainRequest())

    def handle_chain_push(self, frm: MacAddress, data: bytes) -> None:
        try:
            other = Chain.load(data, self.chain.authority_public_key)
        except Exception:
            return
        if other.tip.block_digest == self.chain.tip.block_digest:
            return
        winner = select_chain(self.chain, other)
        if winner is self.chain:
            # tell the loser; it will adopt and cascade
            self.net.send(self.mac, frm, ChainPush(self.chain.dump()))
            return
        self.adopt_chain(other, push_except=frm)

    def adopt_chain(self, other: Chain, push_except: MacAddress | None = None) -> None:
        """Switch to a heavier chain; rebroadcast local commits it is missing."""
        _, rebroadcast = merge_after_partition(self.chain, other)
        survivors = self.pool.transactions()
        self.chain = other
        self.index = SearchIndex.from_chain(other)
        self.pool = PendingPool()
        for tx in survivors + rebroadcast:
            if validate_transaction(tx, self.chain):
                self.pool.add(tx)
        for tx in rebroadcast:
            self.seen_txs.add(tx.dedupe_key())
            for nb in self._neighbors():
                self.net.send(self.mac, nb, TxGossip(tx))
        for nb in self._neighbors():
            if nb != push_except:
                self.net.send(self.mac, nb, ChainPush(self.chain.dump()))


# -- scenario-level helpers ------------------------------------------------------


def consume(net: Network, consumer: MacAddress, link: Link, max_wait: float | None = None) -> FetchResult:
    """Fetch an object on behalf of a consumer and run the engine until the
    request settles. Convenience wrapper for tests and scripts."""
    gateway_mac = net.topology.default_gateway_of(consumer)
    gateway: GatewayNode = net.nodes[gateway_mac]
    state = gateway.start_request(consumer, link)
    budget = max_wait if max_wait is not None else 3 * net.request_timeout() + 2
    deadline = net.now + budget
    while not state.resolved and net.now < deadline:
        net.engine.run_until(min(net.now + 1.0, deadline))
    if not state.resolved:
        return FetchResult(Outcome.TIMEOUT)
    return state.result


def sync_new_node(new_gateway: GatewayNode, peer_gateway: GatewayNode) -> None:
    """Bring a freshly certified gateway onto the ledger via a peer.

    The peer refuses certificates the authority did not sign; otherwise the
    chain travels as a dump/load stream, the index is rebuilt from it, and the
    peer sponsors the certificate-registration transaction into the pool.
    """
    cert = new_gateway.certificate
    if not cert.verify(peer_gateway.chain.authority_public_key):
        raise JoinRefused(f"certificate for {cert.subject} does not verify")
    if cert.subject != new_gateway.mac:
        raise JoinRefused("certificate subject does not match the joining node")
    stream = peer_gateway.chain.dump()
    new_gateway.chain = Chain.load(stream, peer_gateway.chain.authority_public_key)
    new_gateway.index = SearchIndex.from_chain(new_gateway.chain)
    new_gateway.pool = PendingPool()
    tx = make_certificate_transaction(cert, peer_gateway.keys, peer_gateway.mac)
    peer_gateway.submit_transaction(tx)


def revoke_gateway(authority, sponsor: GatewayNode, subject: MacAddress) -> Certificate:
    """Blacklist a gateway: sponsor registers a dummy certificate for it."""
    from .identity import make_dummy_certificate

    dummy = make_dummy_certificate(authority, subject)
    tx = make_certificate_transaction(dummy, sponsor.keys, sponsor.mac)
    sponsor.submit_transaction(tx)
    return dummy
