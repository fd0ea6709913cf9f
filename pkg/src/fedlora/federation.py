"""The communication-round protocol: sampling, local-update fan-out,
server aggregation, and the baseline strategies.

Only adapter sets ever cross the client boundary; the per-round transcript
accounts every byte that moved.  Runs are bit-deterministic given
(config, data, seed): client sampling derives from (seed, round), the local
shuffle seed derives from the round alone (so clients holding identical
data produce identical updates), and aggregation sums in ascending
client-id order.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    AggregationRule,
    InfluenceReport,
    WeightMode,
    aggregate,
    influence_report,
    size_weights,
    validation_loss,
)
from .datasim import SiteDataset, SiteSpec
from .lora import AdapterSet, serialize_adapters, serialized_a_size
from .model import Backbone, Example, SgdConfig, Task, ToyModel, local_update
from .seeding import derive_seed


class Strategy(enum.Enum):
    ZERO_SHOT = "zero_shot"
    SINGLE_SITE = "single_site"
    CENTRALIZED = "centralized"
    FEDAVG = "fedavg"  # size-weighted adapter averaging
    INFLUENCE = "influence"  # validation-influence-weighted averaging
    SHARE_A = "share_a"  # aggregate A factors only, B stays client-local


FEDERATED_STRATEGIES = (Strategy.FEDAVG, Strategy.INFLUENCE, Strategy.SHARE_A)


@dataclass(frozen=True)
class FederationConfig:
    strategy: Strategy
    total_clients: int
    clients_per_round: int
    rounds: int
    sgd: SgdConfig
    weight_mode: WeightMode = WeightMode.NORMALIZED
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ValueError("need 1 <= clients_per_round <= total_clients")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass(frozen=True)
class CommVolume:
    params: int
    payload_bytes: int


@dataclass(frozen=True)
class RoundTranscript:
    round_index: int
    sampled: tuple[str, ...]
    weights: dict[str, float]
    uploads: dict[str, CommVolume]
    downloads: dict[str, CommVolume]
    global_checksum: str
    val_losses: dict[str, float] | None = None
    influence: InfluenceReport | None = None


@dataclass
class FederationResult:
    config: FederationConfig
    adapters: AdapterSet | None
    transcripts: list[RoundTranscript]
    client_adapters: dict[str, AdapterSet] = field(default_factory=dict)


def sample_clients(total: int, per_round: int, seed: int, round_index: int) -> list[int]:
    """Uniform sample without replacement, deterministic in (seed, round)."""
    if per_round > total:
        raise ValueError("cannot sample more clients than exist")
    rng = np.random.default_rng(derive_seed(seed, "sample", round_index))
    picked = rng.choice(total, size=per_round, replace=False)
    return sorted(int(i) for i in picked)


def pool_sites(sites: list[SiteDataset]) -> SiteDataset:
    examples: list[Example] = []
    clean: list[Example] = []
    tasks: list[Task] = []
    for site in sites:
        examples.extend(site.examples)
        clean.extend(site.clean_examples or site.examples)
        for task in site.spec.tasks:
            if task not in tasks:
                tasks.append(task)
    spec = SiteSpec(
        site_id="pooled",
        n_examples=len(examples),
        tasks=tuple(tasks),
        seed=sites[0].spec.seed,
    )
    return SiteDataset(spec, examples, clean)


def _fan_out(jobs: dict[str, tuple[ToyModel, list[Example]]], sgd: SgdConfig,
             seed: int, max_workers: int | None) -> dict[str, AdapterSet]:
    if max_workers is None or max_workers <= 1 or len(jobs) == 1:
        return {
            cid: local_update(model, data, sgd, seed) for cid, (model, data) in jobs.items()
        }
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {
            cid: pool.submit(local_update, model, data, sgd, seed)
            for cid, (model, data) in jobs.items()
        }
        return {cid: fut.result() for cid, fut in futures.items()}


def _comm_volume(adapters: AdapterSet, rule: AggregationRule) -> CommVolume:
    if rule is AggregationRule.A_ONLY:
        return CommVolume(adapters.a_param_count(), serialized_a_size(adapters))
    return CommVolume(adapters.param_count(), len(serialize_adapters(adapters)))


def _with_client_b(global_adapters: AdapterSet, client_set: AdapterSet) -> AdapterSet:
    layers = {
        key: pair.with_factors(client_set[key].b, pair.a)
        for key, pair in global_adapters.items()
    }
    return AdapterSet(layers)


def _run_protocol(
    config: FederationConfig,
    sites: list[SiteDataset],
    val_set: list[Example] | None,
    backbone: Backbone,
    initial: AdapterSet,
    max_workers: int | None,
) -> FederationResult:
    rule = (
        AggregationRule.A_ONLY
        if config.strategy is Strategy.SHARE_A
        else AggregationRule.BOTH_FACTORS
    )
    by_id = {site.spec.site_id: site for site in sites}
    ids = sorted(by_id)
    sizes = {cid: len(by_id[cid]) for cid in ids}
    total_size = sum(sizes.values())
    model = ToyModel(backbone, initial)

    global_adapters = initial
    retained_b: dict[str, AdapterSet] = {cid: initial for cid in ids}
    transcripts: list[RoundTranscript] = []

    for t in range(config.rounds):
        sampled_idx = sample_clients(
            len(ids), config.clients_per_round, config.seed, t
        )
        sampled = [ids[i] for i in sampled_idx]
        local_seed = derive_seed(config.seed, "local", t)

        jobs = {}
        for cid in sampled:
            start = global_adapters
            if rule is AggregationRule.A_ONLY:
                start = _with_client_b(global_adapters, retained_b[cid])
            jobs[cid] = (model.with_adapters(start), by_id[cid].examples)
        updated = _fan_out(jobs, config.sgd, local_seed, max_workers)

        val_losses = None
        report = None
        if config.strategy is Strategy.INFLUENCE:
            val_losses = {
                cid: validation_loss(model, updated[cid], val_set) for cid in sampled
            }
            report = influence_report(
                sampled, [sizes[c] for c in sampled], [val_losses[c] for c in sampled]
            )
            weights = report.as_weight_map()
        else:
            weights = size_weights(
                sizes, sampled, total_size=total_size, mode=config.weight_mode
            ).values

        global_adapters, retained = aggregate(updated, weights, rule)
        if rule is AggregationRule.A_ONLY:
            retained_b.update(retained)

        upload = {cid: _comm_volume(updated[cid], rule) for cid in sampled}
        download = {cid: _comm_volume(global_adapters, rule) for cid in sampled}
        transcripts.append(
            RoundTranscript(
                round_index=t,
                sampled=tuple(sampled),
                weights=dict(weights),
                uploads=upload,
                downloads=download,
                global_checksum=global_adapters.checksum(),
                val_losses=val_losses,
                influence=report,
            )
        )

    client_adapters = {}
    if rule is AggregationRule.A_ONLY:
        # personalized model per client: its own B factors, the shared A
        client_adapters = {
            cid: _with_client_b(global_adapters, retained_b[cid]) for cid in ids
        }
    return FederationResult(config, global_adapters, transcripts, client_adapters)


def run_federation(
    config: FederationConfig,
    sites: list[SiteDataset],
    val_set: list[Example] | None,
    backbone: Backbone,
    max_workers: int | None = None,
) -> FederationResult:
    """Execute the configured strategy over the given sites.

    ZERO_SHOT returns the freshly initialised adapters (zero B, so the
    merged model equals the backbone).  CENTRALIZED trains one pseudo-client
    holding the pooled data through the same round loop, so its compute
    budget is rounds x epochs like every federated client.  SINGLE_SITE
    trains each site independently on the same budget and returns
    per-site adapters; metric averaging happens at evaluation time.
    """
    if not sites:
        raise ValueError("no sites")
    ids = [site.spec.site_id for site in sites]
    if len(set(ids)) != len(ids):
        raise ValueError("site ids must be unique")
    for site in sites:
        if len(site) == 0:
            raise ValueError(f"site {site.spec.site_id!r} is empty")
    if config.strategy in FEDERATED_STRATEGIES and len(sites) != config.total_clients:
        raise ValueError(
            f"config declares {config.total_clients} clients but got {len(sites)} sites"
        )
    if config.strategy is Strategy.INFLUENCE and not val_set:
        raise ValueError("influence-weighted aggregation requires a validation set")

    initial = backbone.init_adapters(derive_seed(config.seed, "adapter_init"))

    if config.strategy is Strategy.ZERO_SHOT:
        return FederationResult(config, initial, [])

    if config.strategy is Strategy.CENTRALIZED:
        pooled = pool_sites(sites)
        sub = FederationConfig(
            strategy=Strategy.CENTRALIZED,
            total_clients=1,
            clients_per_round=1,
            rounds=config.rounds,
            sgd=config.sgd,
            weight_mode=config.weight_mode,
            seed=config.seed,
        )
        return _run_protocol(sub, [pooled], val_set, backbone, initial, max_workers)

    if config.strategy is Strategy.SINGLE_SITE:
        client_adapters = {}
        for site in sites:
            sub = FederationConfig(
                strategy=Strategy.SINGLE_SITE,
                total_clients=1,
                clients_per_round=1,
                rounds=config.rounds,
                sgd=config.sgd,
                weight_mode=config.weight_mode,
                seed=config.seed,
            )
            result = _run_protocol(sub, [site], val_set, backbone, initial, max_workers)
            client_adapters[site.spec.site_id] = result.adapters
        return FederationResult(config, None, [], client_adapters)

    return _run_protocol(config, sites, val_set, backbone, initial, max_workers)


def uneven_task_run(
    config: FederationConfig,
    sites: list[SiteDataset],
    val_set: list[Example] | None,
    backbone: Backbone,
    max_workers: int | None = None,
) -> FederationResult:
    """run_federation over sites whose declared task sets differ.

    The protocol is identical: a client's local loss only ever touches the
    tasks its data contains, and evaluation still reports all tasks.
    """
    for site in sites:
        for ex in site.examples:
            if ex.task not in site.spec.tasks:
                raise ValueError(
                    f"site {site.spec.site_id!r} holds an example of undeclared task {ex.task}"
                )
    return run_federation(config, sites, val_set, backbone, max_workers)
