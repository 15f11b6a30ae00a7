"""Masking and replacement sampling that turns clean batches into corrupted ones.

Per sequence: pick mask positions (never position 0, the sequence-embedding
anchor; the trailing separator is fair game), feed the masked input to the
auxiliary model in inference mode, and draw one replacement per masked slot
from its predicted distribution at temperature 1. Unmasked positions are
copied through untouched and the corrupted output never contains the mask
symbol. The discrete draw is a graph boundary: no gradient flows from the
main model's losses into the auxiliary model through the sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .corpus import CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID
from .encoder import gather_positions

# ids never produced as replacements; sampling one would break the
# [CLS] body [SEP] structure invariants
SAMPLING_EXCLUDED = (PAD_ID, CLS_ID, MASK_ID)


@dataclass
class CorruptionRecord:
    """One sequence's corruption bookkeeping.

    corrupted[i] == original[i] for every i outside mask_set; replaced_flags
    may only be true inside mask_set; aux_input carries the mask symbol
    exactly at mask_set.
    """

    original: list[int]
    mask_set: list[int]
    aux_input: list[int]
    corrupted: list[int] | None = None
    replaced_flags: list[bool] | None = None


def mask_count(seq_len: int, mask_rate: float) -> int:
    """round(mask_rate * len) with a floor of one position."""
    return max(1, int(np.floor(mask_rate * seq_len + 0.5)))


def sample_mask_positions(ids: list[int], mask_rate: float, rng: np.random.Generator) -> list[int]:
    """Uniform without-replacement choice among positions 1..len-1."""
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1)")
    n = len(ids)
    maskable = np.arange(1, n)
    count = min(mask_count(n, mask_rate), len(maskable))
    chosen = rng.choice(maskable, size=count, replace=False)
    return sorted(int(p) for p in chosen)


def build_record(ids: list[int], mask_rate: float, rng: np.random.Generator) -> CorruptionRecord:
    mask_set = sample_mask_positions(ids, mask_rate, rng)
    aux_input = list(ids)
    for p in mask_set:
        aux_input[p] = MASK_ID
    return CorruptionRecord(original=list(ids), mask_set=mask_set, aux_input=aux_input)


def pad_records(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = 1.0
    return ids, mask


def apply_sampled_ids(records: list[CorruptionRecord], sampled: np.ndarray) -> None:
    """Write per-slot sampled ids back into the records, setting replaced flags."""
    k = 0
    for rec in records:
        corrupted = list(rec.original)
        for p in rec.mask_set:
            corrupted[p] = int(sampled[k])
            k += 1
        rec.corrupted = corrupted
        rec.replaced_flags = [c != o for c, o in zip(corrupted, rec.original)]
    if k != len(sampled):
        raise ValueError("sampled id count does not match total masked slots")


def sample_from_logits(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One multinomial draw per row at temperature 1, specials excluded."""
    shifted = logits.copy()
    shifted[:, list(SAMPLING_EXCLUDED)] = -np.inf
    shifted -= shifted.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(logits))
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, logits.shape[1] - 1)


def sample_replacements(model, records: list[CorruptionRecord],
                        rng: np.random.Generator) -> None:
    """Fill corrupted ids by sampling the auxiliary model in inference mode."""
    ids, mask = pad_records([rec.aux_input for rec in records])
    rows, cols = [], []
    for r, rec in enumerate(records):
        rows.extend([r] * len(rec.mask_set))
        cols.extend(rec.mask_set)
    with no_grad():
        hidden = model.aux.encode(ids, mask, train_mode=False)
        logits = model.mlm_logits(gather_positions(hidden, np.array(rows), np.array(cols)))
    apply_sampled_ids(records, sample_from_logits(logits.data, rng))


def random_replacements(records: list[CorruptionRecord], vocab_size: int,
                        rng: np.random.Generator) -> None:
    """Ablation: fill masked slots with uniform random non-special tokens."""
    total = sum(len(rec.mask_set) for rec in records)
    sampled = rng.integers(NUM_SPECIALS, vocab_size, size=total)
    apply_sampled_ids(records, sampled)


def write_corruption_tsv(records: list[CorruptionRecord], vocab, path) -> None:
    """Per-position dump for eyeballing: position, original, aux input, corrupted, flag."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("position\toriginal_token\taux_input_token\tcorrupted_token\treplaced_flag\n")
        for rec in records:
            for i, (orig, aux) in enumerate(zip(rec.original, rec.aux_input)):
                corr = rec.corrupted[i] if rec.corrupted else orig
                flag = rec.replaced_flags[i] if rec.replaced_flags else False
                fh.write(f"{i}\t{vocab.id_to_token[orig]}\t{vocab.id_to_token[aux]}\t"
                         f"{vocab.id_to_token[corr]}\t{int(flag)}\n")
