"""Client weighting and weighted aggregation of adapter sets.

Weighting comes in two families: size-based (classic federated averaging)
and influence-aware, where each client's updated model is scored on a small
server-held validation set and the softmax of the negated losses scales its
contribution.  When all influences are equal the influence-aware weights
reduce to plain size weights; that reduction is implemented exactly (same
arithmetic path), so the two strategies then aggregate bit-identically.

Summation order is fixed by ascending client id, which makes aggregation
bit-deterministic regardless of scheduling.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .lora import AdapterSet
from .model import Example, ToyModel, loss


class WeightMode(enum.Enum):
    # The printed size-weight formula carries a 1/m factor that makes full
    # participation weights sum to 1/m; it is kept behind LITERAL for
    # fidelity testing.  NORMALIZED renormalizes over the participants and
    # is the default everywhere.
    LITERAL = "literal"
    NORMALIZED = "normalized"


class AggregationRule(enum.Enum):
    BOTH_FACTORS = "both_factors"  # weighted sum of B and of A
    A_ONLY = "a_only"  # share A; every client keeps its own B


class IncompatibleAdapters(ValueError):
    def __init__(self, client_id: str, layer_key: str, detail: str):
        self.client_id = client_id
        self.layer_key = layer_key
        super().__init__(f"client {client_id!r}, layer {layer_key!r}: {detail}")


@dataclass(frozen=True)
class InfluenceReport:
    client_ids: tuple[str, ...]
    val_losses: tuple[float, ...]
    influences: tuple[float, ...]
    weights: tuple[float, ...]
    stability_shift: float

    def as_weight_map(self) -> dict[str, float]:
        return dict(zip(self.client_ids, self.weights))


@dataclass(frozen=True)
class AggregationWeights:
    values: dict[str, float]
    mode: WeightMode

    def __post_init__(self):
        if any(w < 0 for w in self.values.values()):
            raise ValueError("weights must be non-negative")
        if self.mode is WeightMode.NORMALIZED:
            total = math.fsum(self.values.values())
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"normalized weights sum to {total}, not 1")

    def __getitem__(self, client_id: str) -> float:
        return self.values[client_id]


def validation_loss(model: ToyModel, adapters: AdapterSet, val_set: list[Example]) -> float:
    """Mean cross-entropy of the merged (backbone + adapters) model on D_v."""
    if not val_set:
        raise ValueError("validation set is empty")
    return loss(model.with_adapters(adapters), val_set)


def influence_scores(val_losses) -> tuple[list[float], float]:
    """Softmax of negated validation losses, plus the stability shift used.

    Exponents are shifted by c = min_i(-l_i) before exponentiation; the
    result is shift-invariant, strictly decreasing in the loss, and sums
    to one.
    """
    losses = [float(l) for l in val_losses]
    if not losses:
        raise ValueError("need at least one loss")
    if any(math.isnan(l) or math.isinf(l) for l in losses):
        raise ValueError("losses must be finite")
    shift = min(-l for l in losses)
    exps = [math.exp(-l - shift) for l in losses]
    total = math.fsum(exps)
    return [e / total for e in exps], shift


def data_aware_weights(sizes, influences) -> list[float]:
    """Combine dataset sizes with influences: w_k proportional to n_k * I_k.

    When every influence is bit-equal this reduces exactly to normalized
    size weights — literally the same arithmetic — so equal validation
    losses reproduce plain size-weighted averaging down to the last bit.
    """
    sizes = [float(n) for n in sizes]
    influences = [float(i) for i in influences]
    if len(sizes) != len(influences):
        raise ValueError("sizes and influences must align")
    if any(n <= 0 for n in sizes):
        raise ValueError("sizes must be positive")
    if max(influences) == min(influences):
        total = math.fsum(sizes)
        return [n / total for n in sizes]
    products = [n * i for n, i in zip(sizes, influences)]
    total = math.fsum(products)
    if total <= 0:
        raise ValueError("all size-influence products vanished")
    return [p / total for p in products]


def influence_report(client_ids, sizes, val_losses) -> InfluenceReport:
    """Full influence pipeline for one round, clients in ascending id order."""
    order = sorted(range(len(client_ids)), key=lambda i: client_ids[i])
    ids = [client_ids[i] for i in order]
    losses = [float(val_losses[i]) for i in order]
    ordered_sizes = [sizes[i] for i in order]
    influences, shift = influence_scores(losses)
    weights = data_aware_weights(ordered_sizes, influences)
    return InfluenceReport(
        client_ids=tuple(ids),
        val_losses=tuple(losses),
        influences=tuple(influences),
        weights=tuple(weights),
        stability_shift=shift,
    )


def size_weights(
    sizes: dict[str, int],
    participants: list[str],
    total_size: int | None = None,
    mode: WeightMode = WeightMode.NORMALIZED,
) -> AggregationWeights:
    """Per-client size weights over the participating set.

    NORMALIZED: w_k = n_k / sum of participating sizes (sums to 1).
    LITERAL: w_k = (1/m) * n_k / N with N the global total, exactly as the
    printed update rule has it; under full participation these sum to 1/m.
    """
    if not participants:
        raise ValueError("participant set is empty")
    ordered = sorted(participants)
    if mode is WeightMode.NORMALIZED:
        denom = math.fsum(float(sizes[c]) for c in ordered)
        values = {c: sizes[c] / denom for c in ordered}
    else:
        n_global = float(total_size if total_size is not None else sum(sizes.values()))
        m = len(ordered)
        values = {c: sizes[c] / n_global / m for c in ordered}
    return AggregationWeights(values, mode)


def _check_compatible(clients: dict[str, AdapterSet]) -> None:
    ids = sorted(clients)
    reference = clients[ids[0]]
    for cid in ids[1:]:
        candidate = clients[cid]
        if candidate.keys() != reference.keys():
            raise IncompatibleAdapters(cid, "<keys>", "layer key sets differ")
        for key, pair in candidate.items():
            ref = reference[key]
            if (pair.d, pair.l, pair.rank, pair.alpha) != (ref.d, ref.l, ref.rank, ref.alpha):
                raise IncompatibleAdapters(
                    cid,
                    key,
                    f"shape ({pair.d}, {pair.l}, r={pair.rank}, alpha={pair.alpha}) vs "
                    f"({ref.d}, {ref.l}, r={ref.rank}, alpha={ref.alpha})",
                )


def aggregate(
    clients: dict[str, AdapterSet],
    weights: AggregationWeights | dict[str, float],
    rule: AggregationRule = AggregationRule.BOTH_FACTORS,
) -> tuple[AdapterSet, dict[str, AdapterSet]]:
    """Weighted aggregation of client adapter sets.

    BOTH_FACTORS: per layer, global B = sum of w_k B_k and global A = sum of
    w_k A_k.  A_ONLY: only the A factors aggregate; each client's B is
    returned unchanged in the retained map and the global set carries zero
    B factors (the aggregated A travels, B stays local).
    """
    if not clients:
        raise ValueError("no clients to aggregate")
    values = weights.values if isinstance(weights, AggregationWeights) else dict(weights)
    if set(values) != set(clients):
        raise ValueError("weights must cover exactly the given clients")
    _check_compatible(clients)
    ids = sorted(clients)
    reference = clients[ids[0]]
    layers = {}
    for key, ref_pair in reference.items():
        b_sum = np.zeros_like(ref_pair.b)
        a_sum = np.zeros_like(ref_pair.a)
        for cid in ids:
            pair = clients[cid][key]
            w = values[cid]
            if rule is AggregationRule.BOTH_FACTORS:
                b_sum += w * pair.b
            a_sum += w * pair.a
        layers[key] = ref_pair.with_factors(b_sum, a_sum)
    retained = {}
    if rule is AggregationRule.A_ONLY:
        retained = {cid: clients[cid] for cid in ids}
    return AdapterSet(layers), retained
