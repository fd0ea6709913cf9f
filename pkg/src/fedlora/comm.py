"""Exact communication-volume accounting.

Every count is integer arithmetic: an entry's byte volume is exactly
``params * bytes_per_param`` (4 bytes/param by default, the float32 wire
convention).  Quoted "GB" figures use binary gibibytes (2^30 bytes) — the
convention under which an 8,030,261,248-parameter full model comes out at
29.92 per site per round and the rank-16 adapter run at 1.25 for two
sites over two rounds.  Upload and download are both counted; a sampled
client moves its payload once in each direction per round.

The reduction percentage is the pure parameter-count ratio
100 * (1 - lora/full), half-up to two decimals; figures computed under
other accounting conventions for the same model class will differ.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .federation import RoundTranscript
from .lora import LLAMA3_8B_FULL_PARAMS, llama3_8b_lora_params

GIB = 2**30
DEFAULT_BYTES_PER_PARAM = 4


@dataclass(frozen=True)
class CommEntry:
    round_index: int
    client_id: str
    direction: str  # "upload" | "download"
    params: int
    nbytes: int


@dataclass(frozen=True)
class CommReport:
    bytes_per_param: int
    total_params: int
    total_bytes: int
    full_params: int | None = None
    full_total_bytes: int | None = None
    reduction: float | None = None

    def total_gib(self) -> float:
        return self.total_bytes / GIB


@dataclass(frozen=True)
class CommPreset:
    name: str
    full_params: int
    lora_params: int
    bytes_per_param: int = DEFAULT_BYTES_PER_PARAM


PRESETS = {
    "llama3_8b": CommPreset(
        "llama3_8b", LLAMA3_8B_FULL_PARAMS, llama3_8b_lora_params(16)
    ),
}


def reduction_pct(full_params: int, lora_params: int) -> float:
    """100 * (1 - lora/full), rounded half-up to two decimals."""
    if lora_params > full_params:
        raise ValueError("lora parameter count exceeds the full model")
    if full_params < 1:
        raise ValueError("full parameter count must be positive")
    ratio = Decimal(lora_params) / Decimal(full_params)
    pct = (Decimal(100) * (Decimal(1) - ratio)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return float(pct)


def format_gb(nbytes: int, decimals: int = 2) -> str:
    """Binary-gibibyte display value, half-up at the given precision."""
    quantum = Decimal(1).scaleb(-decimals) if decimals else Decimal(1)
    value = (Decimal(nbytes) / Decimal(GIB)).quantize(quantum, rounding=ROUND_HALF_UP)
    return f"{value:.{decimals}f}" if decimals else str(value)


def entries_from_transcripts(
    transcripts: list[RoundTranscript], bytes_per_param: int = DEFAULT_BYTES_PER_PARAM
) -> list[CommEntry]:
    entries = []
    for transcript in transcripts:
        for direction, volumes in (
            ("upload", transcript.uploads),
            ("download", transcript.downloads),
        ):
            for client_id in sorted(volumes):
                params = volumes[client_id].params
                entries.append(
                    CommEntry(
                        transcript.round_index,
                        client_id,
                        direction,
                        params,
                        params * bytes_per_param,
                    )
                )
    return entries


def record(
    transcripts: list[RoundTranscript],
    bytes_per_param: int = DEFAULT_BYTES_PER_PARAM,
    full_params: int | None = None,
) -> tuple[list[CommEntry], CommReport]:
    """Ledger plus totals for a completed run's transcript stream."""
    entries = entries_from_transcripts(transcripts, bytes_per_param)
    total_params = sum(e.params for e in entries)
    total_bytes = sum(e.nbytes for e in entries)
    full_total = None
    reduction = None
    if full_params is not None:
        # the same movement pattern at full-model size
        moves = len(entries)
        full_total = moves * full_params * bytes_per_param
        lora_per_move = total_params // moves if moves else 0
        reduction = reduction_pct(full_params, lora_per_move)
    report = CommReport(
        bytes_per_param=bytes_per_param,
        total_params=total_params,
        total_bytes=total_bytes,
        full_params=full_params,
        full_total_bytes=full_total,
        reduction=reduction,
    )
    return entries, report


def full_model_comparison(
    full_params: int,
    bytes_per_param: int,
    rounds: int,
    clients: int,
) -> dict[str, int]:
    """Full-model traffic under the upload+download convention."""
    if min(full_params, bytes_per_param, rounds, clients) < 1:
        raise ValueError("all inputs must be positive")
    per_site_round = full_params * bytes_per_param
    return {
        "per_site_round_bytes": per_site_round,
        "run_total_bytes": rounds * clients * 2 * per_site_round,
    }


def preset_summary(
    preset: CommPreset, rounds: int = 2, site_counts: tuple[int, ...] = (2, 3)
) -> list[dict]:
    """Headline table for a named preset: adapter vs full-model traffic."""
    rows = []
    for clients in site_counts:
        full = full_model_comparison(preset.full_params, preset.bytes_per_param, rounds, clients)
        lora_total = rounds * clients * 2 * preset.lora_params * preset.bytes_per_param
        rows.append(
            {
                "sites": clients,
                "rounds": rounds,
                "lora_params": preset.lora_params,
                "full_params": preset.full_params,
                "lora_total_bytes": lora_total,
                "full_total_bytes": full["run_total_bytes"],
                "full_per_site_round_bytes": full["per_site_round_bytes"],
                "lora_total_gb": format_gb(lora_total, 2),
                "full_total_gb": format_gb(full["run_total_bytes"], 0),
                "full_per_site_round_gb": format_gb(full["per_site_round_bytes"], 2),
                "reduction_pct": reduction_pct(preset.full_params, preset.lora_params),
            }
        )
    return rows
