"""Analysis probes: gate/LM accuracy by token class, view-pair cosine curves,
pair-file cosine distributions, alignment/uniformity, and embedding export.

Probes are read-only: they run the model in inference mode (no dropout) on
deterministic evaluation batches or on held-out pair files, and never touch
optimizer state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .corpus import UNK_ID, Vocabulary
from .corruption import build_record, pad_records, random_replacements, sample_replacements
from .encoder import gather_positions, sequence_embedding
from .objectives import corrective_lm_dist

HIST_BIN_WIDTH = 0.05


@dataclass
class MetricRecord:
    """Step-indexed probe values; missing classes stay None, never zero."""

    step: int
    copy_acc_replaced: float | None = None
    copy_acc_original: float | None = None
    clm_acc_replaced: float | None = None
    clm_acc_original: float | None = None
    mean_cos_positive: float | None = None
    mean_cos_negative: float | None = None
    alignment: float | None = None
    uniformity: float | None = None

    CSV_HEADER = ("step,copy_acc_replaced,copy_acc_original,clm_acc_replaced,"
                  "clm_acc_original,mean_cos_positive,mean_cos_negative,"
                  "alignment,uniformity")

    def csv_row(self) -> str:
        cells = [str(self.step)]
        for f in fields(self)[1:]:
            v = getattr(self, f.name)
            cells.append("" if v is None else f"{v:.9g}")
        return ",".join(cells)


def copy_accuracy(copy_probs: np.ndarray, replaced_flags: np.ndarray
                  ) -> tuple[float | None, float | None]:
    """Detection accuracy of the copy gate at threshold 0.5.

    Original tokens count as correct when p(copy) > 0.5; replaced tokens when
    p(copy) <= 0.5. An empty class reports None.
    """
    probs = np.asarray(copy_probs, dtype=float)
    flags = np.asarray(replaced_flags, dtype=bool)
    acc_replaced = None
    acc_original = None
    if flags.any():
        acc_replaced = float(np.mean(probs[flags] <= 0.5))
    if (~flags).any():
        acc_original = float(np.mean(probs[~flags] > 0.5))
    return acc_replaced, acc_original


def clm_accuracy(plm_argmax: np.ndarray, original_ids: np.ndarray,
                 replaced_flags: np.ndarray) -> tuple[float | None, float | None]:
    """Argmax-recovery accuracy at masked positions, split by replaced flag."""
    hit = np.asarray(plm_argmax) == np.asarray(original_ids)
    flags = np.asarray(replaced_flags, dtype=bool)
    acc_replaced = float(np.mean(hit[flags])) if flags.any() else None
    acc_original = float(np.mean(hit[~flags])) if (~flags).any() else None
    return acc_replaced, acc_original


def alignment_uniformity(positive_pairs: np.ndarray, random_points: np.ndarray
                         ) -> tuple[float, float]:
    """Wang-Isola style scores on L2-normalized embeddings; lower is better.

    alignment = mean over positive pairs of ||u - v||^2
    uniformity = log mean over distinct random pairs of exp(-2 ||u - v||^2)
    """
    pos = np.asarray(positive_pairs, dtype=float)
    pts = np.asarray(random_points, dtype=float)
    if len(pts) < 2:
        raise ValueError("uniformity needs at least 2 random embeddings")

    def norm_rows(x):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    u = norm_rows(pos[:, 0])
    v = norm_rows(pos[:, 1])
    alignment = float(np.mean(np.sum((u - v) ** 2, axis=-1)))
    p = norm_rows(pts)
    sq = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(p), k=1)
    uniformity = float(np.log(np.mean(np.exp(-2.0 * sq[iu]))))
    return alignment, uniformity


def pairwise_cosines(embeddings: np.ndarray) -> np.ndarray:
    normed = embeddings / np.linalg.norm(embeddings, axis=-1, keepdims=True)
    return normed @ normed.T


@dataclass
class EvalBatchResult:
    record: MetricRecord
    positive_cosines: list[float]
    negative_cosines: list[float]
    copy_probs: np.ndarray
    replaced_flags: np.ndarray


def evaluate_batch(model, sequences: list[list[int]], step: int, mask_rate: float,
                   crop_keep: float, rng: np.random.Generator,
                   replacement_source: str = "sampled") -> EvalBatchResult:
    """One inference pass over corrupted + cropped views of the given origins."""
    from .corpus import crop as crop_fn

    records = [build_record(seq, mask_rate, rng) for seq in sequences]
    if replacement_source == "random":
        random_replacements(records, model.vocab_size, rng)
    else:
        sample_replacements(model, records, rng)
    crops = [crop_fn(seq, crop_keep, rng)[0] for seq in sequences]
    n = len(sequences)
    views = [rec.corrupted for rec in records] + crops
    ids, mask = pad_records(views)

    rows, cols, originals, flags_at_m = [], [], [], []
    all_flags, all_rows, all_cols = [], [], []
    for r, rec in enumerate(records):
        for p in rec.mask_set:
            rows.append(r)
            cols.append(p)
            originals.append(rec.original[p])
            flags_at_m.append(rec.replaced_flags[p])
        for p in range(len(rec.original)):
            all_rows.append(r)
            all_cols.append(p)
            all_flags.append(rec.replaced_flags[p])

    with no_grad():
        hidden = model.main.encode(ids, mask, train_mode=False)
        emb = sequence_embedding(hidden).data
        h_sel = gather_positions(hidden, np.array(rows), np.array(cols))
        lm_logits = ad.matmul(h_sel, ad.transpose(model.embedding, (1, 0))) \
            + model.main_head["lm_bias"]
        gate_sel = ad.reshape(ad.matmul(h_sel, model.main_head["w_copy"]), (len(rows),))
        dist = corrective_lm_dist(lm_logits, gate_sel,
                                  np.array([rec.corrupted[p] for rec, p in
                                            zip([records[r] for r in rows], cols)]))
        h_all = gather_positions(hidden, np.array(all_rows), np.array(all_cols))
        gate_all = ad.reshape(ad.matmul(h_all, model.main_head["w_copy"]), (len(all_rows),))
        copy_probs = ad.sigmoid(gate_all).data

    flags_all = np.array(all_flags, dtype=bool)
    acc_rep, acc_orig = copy_accuracy(copy_probs, flags_all)
    clm_rep, clm_orig = clm_accuracy(dist.data.argmax(axis=-1), np.array(originals),
                                     np.array(flags_at_m, dtype=bool))

    sims = pairwise_cosines(emb)
    pos_idx = (np.arange(2 * n) + n) % (2 * n)
    pos_vals = [float(sims[i, i + n]) for i in range(n)]
    neg_vals = [float(sims[i, j]) for i in range(2 * n) for j in range(i + 1, 2 * n)
                if pos_idx[i] != j]
    pos_pairs = np.stack([np.stack([emb[i], emb[i + n]]) for i in range(n)])
    alignment, uniformity = alignment_uniformity(pos_pairs, emb[:n])

    record = MetricRecord(
        step=step,
        copy_acc_replaced=acc_rep,
        copy_acc_original=acc_orig,
        clm_acc_replaced=clm_rep,
        clm_acc_original=clm_orig,
        mean_cos_positive=float(np.mean(pos_vals)),
        mean_cos_negative=float(np.mean(neg_vals)),
        alignment=alignment,
        uniformity=uniformity,
    )
    return EvalBatchResult(record, pos_vals, neg_vals, copy_probs, flags_all)


def encode_sentences(model, vocab: Vocabulary, sentences: list[str], max_len: int
                     ) -> tuple[np.ndarray, int]:
    """Inference-mode sequence embeddings; returns (embeddings, oov count)."""
    seqs = [vocab.encode(s, max_len) for s in sentences]
    unk = sum(seq.count(UNK_ID) for seq in seqs)
    ids, mask = pad_records(seqs)
    with no_grad():
        hidden = model.main.encode(ids, mask, train_mode=False)
        emb = sequence_embedding(hidden).data
    return emb, unk


def pair_cosines(model, vocab: Vocabulary, pairs: list[tuple[str, str]], max_len: int
                 ) -> tuple[list[float], int]:
    """Cosine of the two sequence embeddings per pair; counts OOV fallbacks."""
    values = []
    total_unk = 0
    for a, b in pairs:
        emb, unk = encode_sentences(model, vocab, [a, b], max_len)
        total_unk += unk
        na = emb[0] / np.linalg.norm(emb[0])
        nb = emb[1] / np.linalg.norm(emb[1])
        values.append(float(np.dot(na, nb)))
    return values, total_unk


def histogram_bins(values: list[float]) -> list[tuple[float, float, int]]:
    """Fixed 0.05-wide bins spanning [-1, 1]."""
    edges = np.round(np.arange(-1.0, 1.0 + HIST_BIN_WIDTH, HIST_BIN_WIDTH), 10)
    counts, _ = np.histogram(np.asarray(values), bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def write_pair_cosines_csv(path, values: list[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pair,cosine\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{v:.9g}\n")


def write_histogram_csv(path, values: list[float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in histogram_bins(values):
            fh.write(f"{lo:.9g},{hi:.9g},{c}\n")


def export_embeddings(model, vocab: Vocabulary, sentences: list[str], path,
                      max_len: int) -> None:
    """TSV, one row per sentence: id then hidden_dim full-precision floats."""
    emb, _ = encode_sentences(model, vocab, sentences, max_len)
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(emb):
            fh.write("\t".join([str(i)] + [f"{x:.17g}" for x in row]) + "\n")
