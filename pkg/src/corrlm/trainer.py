"""Joint training loop: corrupt, encode both views, combine the mode's losses,
then one clipped Adam update over auxiliary, main, and shared parameters.

Determinism contract: every random draw at step t comes from a generator
derived from (seed, tag, t), and the epoch shuffle from (seed, tag, epoch), so
a resumed run replays the exact stream an uninterrupted run would have seen.
Checkpoints are written atomically (tmp dir, then rename) and carry a config
hash; resuming under a different effective config is refused.
"""

from __future__ import annotations

import datetime
import json
import os
import shutil
import subprocess
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .config import RunConfig, UsageError, save_config
from .corpus import Vocabulary, crop, truncate
from .corruption import (
    CorruptionRecord,
    build_record,
    pad_records,
    random_replacements,
    sample_replacements,
)
from .encoder import DualModel, dump_relpos_table, gather_positions, sequence_embedding
from .objectives import (
    ClampCounter,
    LossBreakdown,
    ObjectiveMode,
    all_token_mlm_loss,
    copy_loss,
    lm_loss,
    mlm_loss,
    rtd_loss,
    scl_loss,
    stopgrad_on,
    total_loss,
    uses_all_token_lm,
    uses_clm,
    uses_copy_loss,
    uses_rtd,
    uses_scl,
)
from .optim import AdamState, adam_step, clip_grad_norm, grad_check, zero_grads
from .probe import MetricRecord, evaluate_batch

INIT_TAG = 101
EPOCH_TAG = 202
STEP_TAG = 303
PROBE_TAG = 404

TRAIN_CSV_HEADER = "step,l_mlm_aux,l_copy,l_lm,l_scl,total,lr,grad_norm"


class TrainAbort(RuntimeError):
    """Numeric failure during training; maps to exit code 2 in the CLI."""


def lr_at(step: int, trainer) -> float:
    """Linear ramp to lr_peak over warmup_steps, then linear decay to 0 at steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if trainer.warmup_steps > 0 and step <= trainer.warmup_steps:
        return trainer.lr_peak * step / trainer.warmup_steps
    if step >= trainer.steps:
        return 0.0
    span = trainer.steps - trainer.warmup_steps
    return trainer.lr_peak * (trainer.steps - step) / span


def build_model(cfg: RunConfig, vocab_size: int) -> DualModel:
    rng = np.random.default_rng([cfg.trainer.seed, INIT_TAG])
    return DualModel(vocab_size, cfg.encoder_config("main"), cfg.encoder_config("aux"), rng)


def mask_position_arrays(records: list[CorruptionRecord]
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(rows, cols, originals, inputs, replaced) across all masked slots."""
    rows, cols, originals, inputs, flags = [], [], [], [], []
    for r, rec in enumerate(records):
        for p in rec.mask_set:
            rows.append(r)
            cols.append(p)
            originals.append(rec.original[p])
            inputs.append(rec.corrupted[p])
            flags.append(rec.replaced_flags[p])
    return (np.array(rows), np.array(cols), np.array(originals),
            np.array(inputs), np.array(flags, dtype=bool))


def compute_losses(model: DualModel, records: list[CorruptionRecord],
                   crops: list[list[int]] | None, mode: ObjectiveMode,
                   trainer, train_mode: bool, rng: np.random.Generator | None,
                   clamp_counter: ClampCounter | None = None) -> dict[str, Tensor]:
    """Build the loss graph for one corrupted batch (corruption already frozen)."""
    parts: dict[str, Tensor] = {}

    aux_ids, aux_mask = pad_records([rec.aux_input for rec in records])
    h_aux = model.aux.encode(aux_ids, aux_mask, train_mode=train_mode, rng=rng)
    rows, cols, originals, inputs, _ = mask_position_arrays(records)
    aux_logits = model.mlm_logits(gather_positions(h_aux, rows, cols))
    parts["mlm_aux"] = mlm_loss(aux_logits, originals)

    n = len(records)
    views = [rec.corrupted for rec in records]
    if uses_scl(mode):
        if crops is None:
            raise ValueError("contrastive mode needs crop views")
        views = views + crops
    ids, mask = pad_records(views)
    hidden = model.main.encode(ids, mask, train_mode=train_mode, rng=rng)
    seq_len = ids.shape[1]

    if uses_scl(mode):
        parts["scl"] = scl_loss(sequence_embedding(hidden), trainer.tau)
        h_mlm = ad.narrow(hidden, 0, 0, n)
    else:
        h_mlm = hidden
    mlm_pad = mask[:n]

    flags_grid = np.zeros((n, seq_len), dtype=bool)
    for r, rec in enumerate(records):
        flags_grid[r, : len(rec.replaced_flags)] = rec.replaced_flags

    if uses_clm(mode) or uses_all_token_lm(mode):
        copy_logits = ad.reshape(ad.matmul(h_mlm, model.main_head["w_copy"]), (n, seq_len))

    if uses_clm(mode):
        if uses_copy_loss(mode):
            parts["copy"] = copy_loss(copy_logits, flags_grid, mlm_pad)
        h_sel = gather_positions(h_mlm, rows, cols)
        lm_sel = ad.matmul(h_sel, ad.transpose(model.embedding, (1, 0))) \
            + model.main_head["lm_bias"]
        gate_sel = ad.reshape(
            gather_positions(ad.reshape(copy_logits, (n, seq_len, 1)), rows, cols),
            (len(rows),))
        use_gate = not (mode is ObjectiveMode.CLM_NO_COPY and trainer.drop_copy_gate)
        parts["lm"] = lm_loss(lm_sel, gate_sel, inputs, originals,
                              stopgrad=stopgrad_on(mode), use_copy_gate=use_gate,
                              clamp_counter=clamp_counter)

    if uses_rtd(mode):
        parts["rtd"] = rtd_loss(model.rtd_head(h_mlm), flags_grid, mlm_pad)

    if uses_all_token_lm(mode):
        lm_full = ad.matmul(h_mlm, ad.transpose(model.embedding, (1, 0))) \
            + model.main_head["lm_bias"]
        originals_grid = np.array(
            [rec.original + [0] * (seq_len - len(rec.original)) for rec in records])
        parts["all_token_lm"] = all_token_mlm_loss(
            lm_full, copy_logits, ids[:n], originals_grid, mlm_pad,
            clamp_counter=clamp_counter)

    return parts


def corrupt_batch(model: DualModel, sequences: list[list[int]], trainer,
                  rng: np.random.Generator
                  ) -> tuple[list[CorruptionRecord], list[list[int]] | None]:
    records = [build_record(seq, trainer.mask_rate, rng) for seq in sequences]
    if trainer.replacement_source == "random":
        random_replacements(records, model.vocab_size, rng)
    else:
        sample_replacements(model, records, rng)
    crops = None
    if uses_scl(ObjectiveMode(trainer.mode)):
        crops = [crop(seq, trainer.crop_keep, rng)[0] for seq in sequences]
    return records, crops


def train_step(model: DualModel, params: "OrderedDict[str, Tensor]", adam: AdamState,
               sequences: list[list[int]], cfg: RunConfig, step: int,
               clamp_counter: ClampCounter | None = None
               ) -> tuple[LossBreakdown, float, float]:
    """One optimizer update; returns (breakdown, lr, pre-clip grad norm)."""
    t = cfg.trainer
    mode = cfg.mode()
    rng = np.random.default_rng([t.seed, STEP_TAG, step])
    seqs = [truncate(s, t.seq_len) for s in sequences]
    records, crops = corrupt_batch(model, seqs, t, rng)
    parts = compute_losses(model, records, crops, mode, t, train_mode=True, rng=rng,
                           clamp_counter=clamp_counter)
    total = total_loss(mode, parts, t.lambda_copy)
    zero_grads(params)
    total.backward()
    grads = [p.grad for p in params.values() if p.grad is not None]
    grad_norm = clip_grad_norm(grads, t.clip_norm)
    lr = lr_at(step + 1, t)
    adam_step(params, adam, lr, weight_decay=t.weight_decay)

    def val(key):
        return parts[key].item() if key in parts else 0.0

    breakdown = LossBreakdown(
        l_mlm_aux=val("mlm_aux"), l_copy=val("copy"), l_lm=val("lm"),
        l_scl=val("scl"), l_rtd=val("rtd") + val("all_token_lm"),
        total=total.item(), lambda_copy=t.lambda_copy)
    return breakdown, lr, grad_norm


def epoch_batches(num_seqs: int, batch_origins: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Deterministic shuffle for one epoch; a size-1 tail is dropped because
    the contrastive loss needs at least two origins."""
    order = np.random.default_rng([seed, EPOCH_TAG, epoch]).permutation(num_seqs)
    chunks = [order[i:i + batch_origins] for i in range(0, num_seqs, batch_origins)]
    return [c for c in chunks if len(c) >= 2]


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(root, step: int, params: "OrderedDict[str, Tensor]",
                    adam: AdamState, cfg: RunConfig) -> str:
    """Atomic write: build in a tmp dir, then rename to checkpoints/step_NNNNNN."""
    final = os.path.join(root, f"step_{step:06d}")
    tmp = final + f".tmp-{os.getpid()}"
    os.makedirs(tmp, exist_ok=True)
    adam.ensure(params)
    tensors = []
    blob = bytearray()
    for kind, source in (("param", {k: p.data for k, p in params.items()}),
                         ("adam_m", adam.m), ("adam_v", adam.v)):
        for name, arr in source.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            tensors.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "offset": len(blob), "nbytes": len(raw)})
            blob.extend(raw)
    manifest = {
        "format": "corrlm-checkpoint-v1",
        "step": step,
        "config_hash": cfg.config_hash(),
        "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon,
                 "step_count": adam.step_count},
        "rng": {"scheme": "derived-per-step", "seed": cfg.trainer.seed},
        "dtype": "<f8",
        "tensors": tensors,
    }
    with open(os.path.join(tmp, "data.bin"), "wb") as fh:
        fh.write(bytes(blob))
    with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    if os.path.exists(final):
        shutil.rmtree(final)
    os.rename(tmp, final)
    return final


def load_checkpoint(path, params: "OrderedDict[str, Tensor]", adam: AdamState,
                    cfg: RunConfig) -> int:
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest["config_hash"] != cfg.config_hash():
        raise UsageError("checkpoint was written under a different config; refusing to resume")
    with open(os.path.join(path, "data.bin"), "rb") as fh:
        blob = fh.read()
    adam.beta1 = manifest["adam"]["beta1"]
    adam.beta2 = manifest["adam"]["beta2"]
    adam.epsilon = manifest["adam"]["epsilon"]
    adam.step_count = manifest["adam"]["step_count"]
    adam.m.clear()
    adam.v.clear()
    for entry in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(entry["shape"]) or 1),
                            offset=entry["offset"]).reshape(entry["shape"]).copy()
        if entry["kind"] == "param":
            if entry["name"] not in params:
                raise UsageError(f"checkpoint tensor '{entry['name']}' not in model")
            params[entry["name"]].data = arr
        elif entry["kind"] == "adam_m":
            adam.m[entry["name"]] = arr
        else:
            adam.v[entry["name"]] = arr
    return int(manifest["step"])


def latest_checkpoint(ckpt_root) -> tuple[int, str] | None:
    best = None
    if not os.path.isdir(ckpt_root):
        return None
    for name in os.listdir(ckpt_root):
        full = os.path.join(ckpt_root, name)
        if not name.startswith("step_") or ".tmp" in name:
            continue
        if not os.path.exists(os.path.join(full, "manifest.json")):
            continue
        try:
            step = int(name.split("_")[1])
        except ValueError:
            continue
        if best is None or step > best[0]:
            best = (step, full)
    return best


# ---------------------------------------------------------------------------
# run directory management


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or None
    except Exception:
        return None


def _truncate_csv(path, header: str, max_step: int) -> None:
    if not os.path.exists(path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
        return
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    kept = [header]
    for line in lines[1:]:
        if not line:
            continue
        try:
            step = int(line.split(",", 1)[0])
        except ValueError:
            continue
        if step <= max_step:
            kept.append(line)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(kept) + "\n")


@dataclass
class RunResult:
    final_step: int
    checkpoint: str
    breakdowns: list[LossBreakdown]
    metrics: list[MetricRecord]
    clamp_count: int


def run(cfg: RunConfig, out_dir: str, resume: bool = False, force: bool = False,
        stop_after: int | None = None, quiet: bool = True) -> RunResult:
    """Execute (or resume) a pretraining run, writing metrics and checkpoints.

    ``stop_after`` halts abruptly after the given step's bookkeeping, standing
    in for a mid-run kill in tests.
    """
    cfg.validate()
    t = cfg.trainer
    if os.path.exists(out_dir) and os.listdir(out_dir) and not (resume or force):
        raise UsageError(f"run directory '{out_dir}' exists; pass force to overwrite "
                         "or resume to continue")
    if force and os.path.exists(out_dir) and not resume:
        shutil.rmtree(out_dir)
    metrics_dir = os.path.join(out_dir, "metrics")
    ckpt_root = os.path.join(out_dir, "checkpoints")
    os.makedirs(metrics_dir, exist_ok=True)
    os.makedirs(ckpt_root, exist_ok=True)

    if cfg.data.corpus is None or cfg.data.vocab is None:
        raise UsageError("pretraining needs data.corpus and data.vocab paths")
    vocab = Vocabulary.load(cfg.data.vocab)
    with open(cfg.data.corpus, encoding="utf-8") as fh:
        docs = [line.strip() for line in fh if line.strip()]
    sequences = [vocab.encode(doc, t.seq_len) for doc in docs]
    if len(sequences) < 2:
        raise UsageError("corpus must contain at least 2 documents")

    model = build_model(cfg, vocab.size)
    params = model.parameters()
    adam = AdamState(beta1=t.adam_beta1, beta2=t.adam_beta2, epsilon=t.adam_eps)

    save_config(cfg, os.path.join(out_dir, "config.effective.yaml"))
    dump_relpos_table(os.path.join(out_dir, "relpos_buckets.tsv"),
                      cfg.main.relpos_num_buckets, cfg.main.relpos_max_distance)
    run_json = os.path.join(out_dir, "run.json")
    run_info = {"config": cfg.to_dict(), "seed": t.seed,
                "start_time": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "end_time": None, "git_describe": _git_describe()}
    with open(run_json, "w", encoding="utf-8") as fh:
        json.dump(run_info, fh, indent=1)

    start_step = 0
    if resume:
        found = latest_checkpoint(ckpt_root)
        if found is None:
            raise UsageError("resume requested but no checkpoint found")
        start_step = load_checkpoint(found[1], params, adam, cfg)
        # drop any rows written after the checkpoint (a kill mid-interval)
        for name in os.listdir(ckpt_root):
            if ".tmp" in name:
                shutil.rmtree(os.path.join(ckpt_root, name), ignore_errors=True)

    train_csv = os.path.join(metrics_dir, "train_losses.csv")
    probe_csv = os.path.join(metrics_dir, "probe.csv")
    _truncate_csv(train_csv, TRAIN_CSV_HEADER, start_step)
    _truncate_csv(probe_csv, MetricRecord.CSV_HEADER, start_step)

    probe_seqs = [truncate(s, t.seq_len)
                  for s in sequences[: max(2, min(t.probe_origins, len(sequences)))]]
    bpe = len(epoch_batches(len(sequences), t.batch_origins, 0, t.seed))
    if bpe == 0:
        raise UsageError("corpus too small for the configured batch size")

    breakdowns: list[LossBreakdown] = []
    metrics: list[MetricRecord] = []
    clamp = ClampCounter()

    def do_probe(step):
        rng = np.random.default_rng([t.seed, PROBE_TAG, step])
        rec = evaluate_batch(model, probe_seqs, step, t.mask_rate, t.crop_keep, rng,
                             t.replacement_source).record
        metrics.append(rec)
        with open(probe_csv, "a", encoding="utf-8") as fh:
            fh.write(rec.csv_row() + "\n")

    if start_step == 0:
        save_checkpoint(ckpt_root, 0, params, adam, cfg)
        if t.steps > 0 and t.probe_every > 0:
            do_probe(0)

    step_delay_ms = float(os.environ.get("CORRLM_STEP_DELAY_MS", "0") or 0)
    train_fh = open(train_csv, "a", encoding="utf-8")
    try:
        for step in range(start_step, t.steps):
            batches = epoch_batches(len(sequences), t.batch_origins, step // bpe, t.seed)
            batch_idx = batches[step % bpe]
            batch = [sequences[i] for i in batch_idx]
            try:
                breakdown, lr, grad_norm = train_step(model, params, adam, batch, cfg,
                                                      step, clamp)
            except NonFiniteError as exc:
                raise TrainAbort(f"aborted at step {step + 1}: {exc}") from exc
            breakdowns.append(breakdown)
            done = step + 1
            train_fh.write(
                f"{done},{breakdown.l_mlm_aux:.17g},{breakdown.l_copy:.17g},"
                f"{breakdown.l_lm:.17g},{breakdown.l_scl:.17g},{breakdown.total:.17g},"
                f"{lr:.17g},{grad_norm:.17g}\n")
            train_fh.flush()
            if not quiet:
                print(f"step {done}: total={breakdown.total:.5f} lr={lr:.2e}", flush=True)
            if t.probe_every > 0 and (done % t.probe_every == 0 or done == t.steps):
                do_probe(done)
            if done % t.checkpoint_every == 0 or done == t.steps:
                save_checkpoint(ckpt_root, done, params, adam, cfg)
            if stop_after is not None and done >= stop_after:
                return RunResult(done, os.path.join(ckpt_root, f"step_{done:06d}"),
                                 breakdowns, metrics, clamp.count)
            if step_delay_ms:
                import time
                time.sleep(step_delay_ms / 1000.0)
    finally:
        train_fh.close()

    final_step = t.steps
    run_info["end_time"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(run_json, "w", encoding="utf-8") as fh:
        json.dump(run_info, fh, indent=1)
    return RunResult(final_step, os.path.join(ckpt_root, f"step_{final_step:06d}"),
                     breakdowns, metrics, clamp.count)


# ---------------------------------------------------------------------------
# gradient verification over the assembled objective


def build_micro_batch(cfg: RunConfig, vocab_size: int, rng: np.random.Generator
                      ) -> list[list[int]]:
    from .corpus import CLS_ID, NUM_SPECIALS, SEP_ID

    n = cfg.trainer.batch_origins
    seqs = []
    for _ in range(n):
        body_len = int(rng.integers(6, max(7, cfg.trainer.seq_len - 2)))
        body = rng.integers(NUM_SPECIALS, vocab_size, size=body_len).tolist()
        seqs.append([CLS_ID] + body + [SEP_ID])
    return seqs


def grad_check_mode(cfg: RunConfig, mode: ObjectiveMode, vocab_size: int,
                    epsilon: float = 1e-4, coords_per_param: int = 3) -> float:
    """Freeze one corrupted batch, then compare autodiff against central
    differences for the mode's full combined loss."""
    t = cfg.trainer
    model = build_model(cfg, vocab_size)
    params = model.parameters()
    rng = np.random.default_rng([t.seed, 7])
    seqs = build_micro_batch(cfg, vocab_size, rng)
    records = [build_record(s, t.mask_rate, rng) for s in seqs]
    if t.replacement_source == "random":
        random_replacements(records, vocab_size, rng)
    else:
        sample_replacements(model, records, rng)
    crops = [crop(s, t.crop_keep, rng)[0] for s in seqs] if uses_scl(mode) else None

    def loss_fn():
        parts = compute_losses(model, records, crops, mode, t, train_mode=False, rng=None)
        return total_loss(mode, parts, t.lambda_copy)

    return grad_check(loss_fn, params, epsilon=epsilon,
                      rng=np.random.default_rng([t.seed, 8]),
                      coords_per_param=coords_per_param)


def grad_check_all_modes(cfg: RunConfig, vocab_size: int | None = None,
                         modes: list[ObjectiveMode] | None = None,
                         epsilon: float = 1e-4, coords_per_param: int = 3
                         ) -> dict[str, float]:
    if vocab_size is None:
        if cfg.data.vocab:
            vocab_size = Vocabulary.load(cfg.data.vocab).size
        elif cfg.data.vocab_size:
            vocab_size = cfg.data.vocab_size
        else:
            raise UsageError("grad check needs data.vocab or data.vocab_size")
    out = {}
    for mode in modes or list(ObjectiveMode):
        out[mode.value] = grad_check_mode(cfg, mode, vocab_size, epsilon, coords_per_param)
    return out
