"""dwebsim: deterministic simulator for a mesh of content gateways sharing a
permissioned ledger of object fingerprints, with a cache-replacement
experiment harness."""

from .cache import CacheConfig, CacheEntry, ObjectCache, Policy, PopularityTable, on_path_observe
from .gateway import (
    FetchResult,
    GatewayNode,
    JoinRefused,
    Link,
    NodeConfig,
    Outcome,
    PublishError,
    SearchIndex,
    consume,
    revoke_gateway,
    sync_new_node,
)
from .harness import (
    Corpus,
    RunMetrics,
    Scenario,
    ScenarioConfig,
    bootstrap,
    build_corpus,
    generate_workload,
    hit_ratio,
    load_config,
    run_matrix,
    run_scenario,
)
from .identity import (
    Authority,
    Certificate,
    KeyPair,
    MacAddress,
    Metadata,
    Oid,
    compute_oid,
    issue_certificate,
    make_dummy_certificate,
    verify_object,
)
from .ledger import (
    Block,
    Chain,
    PendingPool,
    Reject,
    Transaction,
    TxKind,
    active_certificate,
    chain_weight,
    make_genesis,
    make_object_transaction,
    merge_after_partition,
    next_proposer,
    propose_block,
    select_chain,
    validate_block,
    validate_transaction,
)
from .simnet import (
    Engine,
    InterestRequest,
    Network,
    ObjectResponse,
    Topology,
    build_topology,
    heal_partition,
    run_until,
    set_partition,
)

__version__ = "0.1.0"
