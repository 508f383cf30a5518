"""Scenario orchestration: corpus, workload, metrics, CSV output and sweeps.

A scenario builds a topology, bootstraps certificates and a genesis ledger,
publishes a corpus round-robin across publishers, replays a two-class
popularity workload through the event engine, and emits per-gateway hit-ratio
time series. Identical (config, seed) pairs produce byte-identical CSV files.
"""
from __future__ import annotations

import csv
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cache import CacheConfig, Policy
from .gateway import (
    FAILURE_OUTCOMES,
    GatewayNode,
    HIT_OUTCOMES,
    Link,
    NodeConfig,
    Outcome,
)
from .identity import Authority, MacAddress, Metadata, Oid, compute_oid, derive_node_keys, digest, gateway_mac
from .ledger import Chain, chain_weight, make_genesis
from .simnet import Network, Topology, build_topology
from . import wire

KEYWORD_VOCABULARY = (
    "news", "sports", "music", "video", "science", "travel",
    "health", "games", "weather", "history", "art", "code",
)

REQUEST_SPACING = 1.0  # mean per-gateway time units between requests


@dataclass
class ScenarioConfig:
    """Complete experiment description; every field is a legal config-file key."""

    gateway_count: int = 10
    consumers_per_gateway: int = 2
    corpus_size: int = 1000
    object_size_bytes: int = 65536
    popular_set_size: int = 50
    popularity_fraction: float = 0.6
    requests_per_gateway: int = 2000
    policy: Policy = Policy.POPULARITY
    cache_capacity_bytes: int = 3276800  # ~5% of the default corpus
    popularity_threshold: int = 3
    block_interval: float = 50.0
    partition_schedule: str = ""
    seed: int = 0
    sample_every: int = 100
    max_txs_per_block: int = 100
    route_hints_enabled: bool = True
    latency: int = 1

    def __post_init__(self):
        if isinstance(self.policy, str):
            self.policy = Policy.parse(self.policy)

    def validate(self) -> None:
        positive = (
            "gateway_count", "consumers_per_gateway", "corpus_size", "object_size_bytes",
            "popular_set_size", "requests_per_gateway", "cache_capacity_bytes",
            "popularity_threshold", "sample_every", "max_txs_per_block", "latency",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gateway_count < 2:
            raise ValueError("gateway_count must be at least 2")
        if not 0.0 <= self.popularity_fraction <= 1.0:
            raise ValueError("popularity_fraction must be within [0, 1]")
        if self.popular_set_size > self.corpus_size:
            raise ValueError("popular_set_size cannot exceed corpus_size")
        if self.block_interval <= 0:
            raise ValueError("block_interval must be positive")
        parse_partition_schedule(self.partition_schedule, self.gateway_count)


def _coerce(field_type: str, raw: str):
    raw = raw.strip()
    if field_type == "int":
        return int(raw)
    if field_type == "float":
        return float(raw)
    if field_type == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"bad boolean {raw!r}")
    if field_type == "Policy":
        return Policy.parse(raw)
    return raw


_FIELD_TYPES = {
    "gateway_count": "int", "consumers_per_gateway": "int", "corpus_size": "int",
    "object_size_bytes": "int", "popular_set_size": "int", "popularity_fraction": "float",
    "requests_per_gateway": "int", "policy": "Policy", "cache_capacity_bytes": "int",
    "popularity_threshold": "int", "block_interval": "float", "partition_schedule": "str",
    "seed": "int", "sample_every": "int", "max_txs_per_block": "int",
    "route_hints_enabled": "bool", "latency": "int",
}


def parse_flat(text: str) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(mapping: dict[str, str]) -> ScenarioConfig:
    kwargs = {}
    for key, raw in mapping.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(_FIELD_TYPES[key], raw)
    config = ScenarioConfig(**kwargs)
    config.validate()
    return config


def load_config(path: str | Path) -> ScenarioConfig:
    return config_from_mapping(parse_flat(Path(path).read_text()))


def parse_partition_schedule(
    schedule: str, gateway_count: int
) -> list[tuple[float, str, list[tuple[MacAddress, MacAddress]]]]:
    """`TIME disable|enable gI-gJ [gK-gL ...]` entries separated by semicolons."""
    actions = []
    for entry in schedule.split(";"):
        entry = entry.strip()
        if not entry:
            continue
        parts = entry.split()
        if len(parts) < 3:
            raise ValueError(f"bad partition entry {entry!r}")
        when = float(parts[0])
        action = parts[1].lower()
        if action not in ("disable", "enable"):
            raise ValueError(f"bad partition action {parts[1]!r}")
        links = []
        for token in parts[2:]:
            a_s, _, b_s = token.partition("-")
            if not a_s.startswith("g") or not b_s.startswith("g"):
                raise ValueError(f"bad link token {token!r}")
            i, j = int(a_s[1:]), int(b_s[1:])
            for idx in (i, j):
                if not 0 <= idx < gateway_count:
                    raise ValueError(f"gateway index {idx} out of range")
            links.append((gateway_mac(i), gateway_mac(j)))
        actions.append((when, action, links))
    return actions


# -- corpus and workload -------------------------------------------------------


@dataclass(frozen=True)
class CorpusObject:
    payload: bytes
    metadata: Metadata
    oid: Oid
    gateway: MacAddress
    publisher: MacAddress

    @property
    def link(self) -> Link:
        return Link(self.oid, self.metadata)


@dataclass
class Corpus:
    objects: list[CorpusObject]
    popular_indices: tuple[int, ...]

    def popular_oids(self) -> set[bytes]:
        return {self.objects[i].oid.digest for i in self.popular_indices}


def _sub_rng(seed: int, label: str):
    import random

    return random.Random(int.from_bytes(digest(label.encode() + wire.u64(seed))[:8], "big"))


def build_corpus(config: ScenarioConfig, topology: Topology) -> Corpus:
    """Deterministic object corpus, assigned round-robin to publishers."""
    rng = _sub_rng(config.seed, "corpus")
    gateways = topology.gateways()
    objects = []
    for i in range(config.corpus_size):
        gw = gateways[i % len(gateways)]
        publisher = topology.publisher_of(gw)
        keywords = (
            rng.choice(KEYWORD_VOCABULARY),
            rng.choice(KEYWORD_VOCABULARY),
            f"tag{i:05d}",
        )
        payload = rng.randbytes(config.object_size_bytes)
        metadata = Metadata(
            name=f"object-{i:05d}",
            keywords=keywords,
            publisher=publisher,
            created_at=i,
            size_bytes=len(payload),
        )
        objects.append(CorpusObject(payload, metadata, compute_oid(payload, metadata), gw, publisher))
    popular = tuple(sorted(rng.sample(range(config.corpus_size), config.popular_set_size)))
    return Corpus(objects, popular)


def generate_workload(
    config: ScenarioConfig, topology: Topology, corpus: Corpus | None = None
) -> list[tuple[float, MacAddress, Link]]:
    """Per-gateway request streams: each request targets the popular set with
    probability popularity_fraction (uniform within class), times spread
    uniformly over the run. Deterministic from the seed."""
    if corpus is None:
        corpus = build_corpus(config, topology)
    if config.popularity_fraction > 0 and not corpus.popular_indices:
        raise ValueError("popular set is empty but popularity_fraction > 0")
    rng = _sub_rng(config.seed, "workload")
    duration = config.requests_per_gateway * REQUEST_SPACING
    popular = list(corpus.popular_indices)
    popular_set = set(popular)
    unpopular = [i for i in range(config.corpus_size) if i not in popular_set]
    requests: list[tuple[float, MacAddress, Link]] = []
    for gw in topology.gateways():
        consumers = topology.consumers_of(gw)
        times = sorted(rng.uniform(0.0, duration) for _ in range(config.requests_per_gateway))
        for k, when in enumerate(times):
            if unpopular and (not popular or rng.random() >= config.popularity_fraction):
                target = rng.choice(unpopular)
            else:
                target = rng.choice(popular)
            requests.append((when, consumers[k % len(consumers)], corpus.objects[target].link))
    requests.sort(key=lambda r: (r[0], r[1]))
    return requests


# -- metrics --------------------------------------------------------------------


@dataclass
class GatewaySeries:
    outcomes: list[Outcome] = field(default_factory=list)
    samples: list[dict] = field(default_factory=list)

    def counts(self, upto: int | None = None) -> dict[str, int]:
        window = self.outcomes if upto is None else self.outcomes[:upto]
        c = {
            "requests": len(window),
            "hits_local": 0,
            "hits_remote": 0,
            "producer_fetches": 0,
            "failures": 0,
        }
        for outcome in window:
            if outcome is Outcome.HIT_LOCAL:
                c["hits_local"] += 1
            elif outcome is Outcome.HIT_REMOTE:
                c["hits_remote"] += 1
            elif outcome in (Outcome.PRODUCER_LOCAL, Outcome.PRODUCER_REMOTE):
                c["producer_fetches"] += 1
            else:
                c["failures"] += 1
        return c


class RunMetrics:
    """Per-gateway outcome series plus run-level accounting."""

    def __init__(self, config: ScenarioConfig, gateways: list[MacAddress]):
        self.config = config
        self.per_gateway: dict[MacAddress, GatewaySeries] = {m: GatewaySeries() for m in gateways}
        self.resolution_order: list[tuple[MacAddress, Outcome]] = []
        self.deliveries_ok = 0
        self.integrity_failures = 0
        self.final_weights: dict[MacAddress, int] = {}
        self.final_tips: dict[MacAddress, str] = {}
        self.message_stats: dict[str, int] = {}
        self.requests_start = 0.0

    # Network observer hook
    def on_request_resolved(self, gateway: MacAddress, consumer: MacAddress, outcome: Outcome) -> None:
        series = self.per_gateway[gateway]
        series.outcomes.append(outcome)
        self.resolution_order.append((gateway, outcome))
        if outcome in FAILURE_OUTCOMES:
            if outcome is Outcome.INTEGRITY_FAILURE:
                self.integrity_failures += 1
        else:
            self.deliveries_ok += 1
        if len(series.outcomes) % self.config.sample_every == 0:
            self._sample(series)

    def _sample(self, series: GatewaySeries) -> None:
        counts = series.counts()
        hits = counts["hits_local"] + counts["hits_remote"]
        counts["hit_ratio"] = hits / counts["requests"] if counts["requests"] else 0.0
        series.samples.append(counts)

    def finalize(self) -> None:
        for series in self.per_gateway.values():
            if not series.samples or series.samples[-1]["requests"] != len(series.outcomes):
                if series.outcomes:
                    self._sample(series)

    def gateway_hit_ratio(self, gateway: MacAddress, upto: int | None = None) -> float | None:
        series = self.per_gateway[gateway]
        counts = series.counts(upto)
        if counts["requests"] == 0:
            return None
        return (counts["hits_local"] + counts["hits_remote"]) / counts["requests"]

    def overall_hit_ratio(self) -> float | None:
        total = hits = 0
        for series in self.per_gateway.values():
            counts = series.counts()
            total += counts["requests"]
            hits += counts["hits_local"] + counts["hits_remote"]
        return hits / total if total else None

    def overall_curve(self, window: int = 1000) -> list[float]:
        """Cumulative network-wide hit ratio sampled every `window` resolutions."""
        curve = []
        hits = 0
        for i, (_, outcome) in enumerate(self.resolution_order, start=1):
            if outcome in HIT_OUTCOMES:
                hits += 1
            if i % window == 0:
                curve.append(hits / i)
        if self.resolution_order and len(self.resolution_order) % window != 0:
            curve.append(hits / len(self.resolution_order))
        return curve

    def totals(self) -> dict[str, int]:
        agg = {"requests": 0, "hits_local": 0, "hits_remote": 0, "producer_fetches": 0, "failures": 0}
        for series in self.per_gateway.values():
            for key, value in series.counts().items():
                agg[key] += value
        return agg

    def write_metrics_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["gateway_mac", "sample_requests", "hits_local", "hits_remote",
                 "producer_fetches", "failures", "hit_ratio"]
            )
            for mac in sorted(self.per_gateway):
                for sample in self.per_gateway[mac].samples:
                    writer.writerow(
                        [str(mac), sample["requests"], sample["hits_local"], sample["hits_remote"],
                         sample["producer_fetches"], sample["failures"], f"{sample['hit_ratio']:.6f}"]
                    )

    def write_summary(self, path: str | Path) -> None:
        totals = self.totals()
        overall = self.overall_hit_ratio()
        lines = [
            f"policy = {self.config.policy.value}",
            f"gateways = {self.config.gateway_count}",
            f"seed = {self.config.seed}",
            f"requests = {totals['requests']}",
            f"hits_local = {totals['hits_local']}",
            f"hits_remote = {totals['hits_remote']}",
            f"producer_fetches = {totals['producer_fetches']}",
            f"failures = {totals['failures']}",
            f"overall_hit_ratio = {overall:.6f}" if overall is not None else "overall_hit_ratio = n/a",
            f"chain_weight = {max(self.final_weights.values(), default=0)}",
            f"messages_sent = {self.message_stats.get('sent', 0)}",
            f"messages_delivered = {self.message_stats.get('delivered', 0)}",
            f"messages_dropped = {self.message_stats.get('dropped', 0)}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")


def hit_ratio(metrics: RunMetrics, gateway: MacAddress, upto_requests: int) -> float | None:
    """Cache-hit fraction over the first upto_requests requests issued via this
    gateway; hits from any gateway cache count, pinned producer copies do not."""
    series = metrics.per_gateway[gateway]
    if upto_requests > len(series.outcomes):
        raise ValueError("upto_requests exceeds requests issued")
    if upto_requests == 0:
        return None
    return metrics.gateway_hit_ratio(gateway, upto_requests)


# -- scenario runner --------------------------------------------------------------


@dataclass
class Scenario:
    """A bootstrapped network ready to run: useful for tests and scripts."""

    config: ScenarioConfig
    topology: Topology
    net: Network
    authority: Authority
    gateways: dict[MacAddress, GatewayNode]
    corpus: Corpus
    metrics: RunMetrics
    requests_start: float = 0.0


def node_config_from(config: ScenarioConfig) -> NodeConfig:
    return NodeConfig(
        cache=CacheConfig(config.cache_capacity_bytes, config.policy, config.popularity_threshold),
        block_interval=config.block_interval,
        max_txs_per_block=config.max_txs_per_block,
        route_hints_enabled=config.route_hints_enabled,
    )


def bootstrap(config: ScenarioConfig) -> Scenario:
    """Topology, authority, genesis and gateway nodes; no events injected yet."""
    config.validate()
    topology = build_topology(
        config.gateway_count, config.consumers_per_gateway, config.seed, config.latency
    )
    authority = Authority.from_seed(config.seed)
    gateway_macs = topology.gateways()
    keys = {mac: derive_node_keys(config.seed, mac) for mac in gateway_macs}
    genesis = make_genesis(authority, [(mac, keys[mac].public_key) for mac in gateway_macs])
    metrics = RunMetrics(config, gateway_macs)
    net = Network(topology, observer=metrics)
    node_config = node_config_from(config)
    gateways = {}
    for mac in gateway_macs:
        chain = Chain(genesis, authority.public_key)
        cert = chain.active_certificate(mac)
        node = GatewayNode(net, mac, keys[mac], cert, chain, node_config)
        node.start_timers()
        gateways[mac] = node
    return Scenario(config, topology, net, authority, gateways, build_corpus(config, topology), metrics)


def publish_window(config: ScenarioConfig) -> float:
    """Simulation time needed to publish and commit the whole corpus."""
    blocks_needed = -(-config.corpus_size // config.max_txs_per_block)
    return (blocks_needed + 3) * config.block_interval


def run_scenario(config: ScenarioConfig, out_dir: str | Path | None = None) -> RunMetrics:
    """Execute one full experiment; optionally write metrics.csv and summary.txt."""
    scenario = bootstrap(config)
    net, engine = scenario.net, scenario.net.engine

    # publish the corpus inside the first block interval, commits follow
    spread = max(config.block_interval * 0.8, 1.0)
    for i, obj in enumerate(scenario.corpus.objects):
        when = 1.0 + (i * spread) / max(len(scenario.corpus.objects), 1)
        gw = scenario.gateways[obj.gateway]
        engine.schedule(when, (lambda g, o: lambda: g.publish(o.payload, o.metadata))(gw, obj))

    requests_start = publish_window(config)
    scenario.requests_start = requests_start
    scenario.metrics.requests_start = requests_start

    workload = generate_workload(config, scenario.topology, scenario.corpus)
    for when, consumer, link in workload:
        gw = scenario.gateways[scenario.topology.default_gateway_of(consumer)]
        engine.schedule(
            requests_start + when, (lambda g, c, l: lambda: g.start_request(c, l))(gw, consumer, link)
        )

    for when, action, links in parse_partition_schedule(config.partition_schedule, config.gateway_count):
        if action == "disable":
            engine.schedule(when, (lambda ls: lambda: net.set_partition(ls))(links))
        else:
            engine.schedule(when, (lambda ls: lambda: net.heal_partition(ls))(links))

    duration = config.requests_per_gateway * REQUEST_SPACING
    drain = 3 * net.request_timeout() + 5 * config.block_interval
    engine.run_until(requests_start + duration + drain)

    metrics = scenario.metrics
    metrics.finalize()
    metrics.message_stats = dict(net.stats)
    for mac, node in scenario.gateways.items():
        metrics.final_weights[mac] = chain_weight(node.chain)
        metrics.final_tips[mac] = node.chain.tip.block_digest.hex()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_metrics_csv(out / "metrics.csv")
        metrics.write_summary(out / "summary.txt")
    return metrics


# -- matrix runner ------------------------------------------------------------------


def _run_cell(config: ScenarioConfig) -> float:
    metrics = run_scenario(config)
    ratio = metrics.overall_hit_ratio()
    return -1.0 if ratio is None else ratio


def run_matrix(
    configs: list[ScenarioConfig],
    seeds: list[int],
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> list[dict]:
    """Run every (config, seed) pair independently and aggregate final ratios.

    A failing cell is reported in its row and excluded from its aggregate; the
    rest of the matrix still runs.
    """
    if not configs or not seeds:
        raise ValueError("matrix needs at least one config and one seed")
    jobs = [(ci, replace(config, seed=seed)) for ci, config in enumerate(configs) for seed in seeds]
    results: dict[int, tuple[float | None, str]] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, cfg) for _, cfg in jobs]
            for idx, future in enumerate(futures):
                try:
                    results[idx] = (future.result(), "")
                except Exception as exc:  # noqa: BLE001 - error isolation per cell
                    results[idx] = (None, str(exc))
    else:
        for idx, (_, cfg) in enumerate(jobs):
            try:
                results[idx] = (_run_cell(cfg), "")
            except Exception as exc:  # noqa: BLE001
                results[idx] = (None, str(exc))

    rows: list[dict] = []
    run_rows: list[dict] = []
    for idx, (ci, cfg) in enumerate(jobs):
        ratio, error = results[idx]
        run_rows.append(
            {
                "policy": cfg.policy.value,
                "gateways": cfg.gateway_count,
                "seed": cfg.seed,
                "final_hit_ratio": f"{ratio:.6f}" if ratio is not None else "",
                "error": error,
            }
        )
        rows.append(
            {
                "policy": cfg.policy.value,
                "gateways": cfg.gateway_count,
                "seed_count": 1,
                "mean_final_hit_ratio": f"{ratio:.6f}" if ratio is not None else "",
                "stddev": f"{0.0:.6f}" if ratio is not None else "",
            }
        )
    for ci, config in enumerate(configs):
        ratios = [
            results[idx][0]
            for idx, (cj, _) in enumerate(jobs)
            if cj == ci and results[idx][0] is not None
        ]
        mean = statistics.fmean(ratios) if ratios else None
        stddev = statistics.pstdev(ratios) if len(ratios) > 1 else 0.0
        rows.append(
            {
                "policy": config.policy.value,
                "gateways": config.gateway_count,
                "seed_count": len(ratios),
                "mean_final_hit_ratio": f"{mean:.6f}" if mean is not None else "",
                "stddev": f"{stddev:.6f}" if mean is not None else "",
            }
        )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "aggregate.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["policy", "gateways", "seed_count", "mean_final_hit_ratio", "stddev"]
            )
            writer.writeheader()
            writer.writerows(rows)
        with open(out / "runs.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["policy", "gateways", "seed", "final_hit_ratio", "error"]
            )
            writer.writeheader()
            writer.writerows(run_rows)
    return rows


def parse_sweep(text: str) -> tuple[list[ScenarioConfig], list[int]]:
    """Sweep file: flat key = value where values may be comma-separated lists;
    the matrix is the Cartesian product. `seeds` is the reserved seed list."""
    mapping = parse_flat(text)
    seeds = [int(s) for s in mapping.pop("seeds", "0").split(",")]
    lists: dict[str, list[str]] = {}
    for key, raw in mapping.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        lists[key] = [v.strip() for v in raw.split(",")] if key != "partition_schedule" else [raw]
    configs = [config_from_mapping({})] if not lists else []
    if lists:
        combos: list[dict[str, str]] = [{}]
        for key, values in lists.items():
            combos = [dict(c, **{key: v}) for c in combos for v in values]
        configs = [config_from_mapping(c) for c in combos]
    return configs, seeds
