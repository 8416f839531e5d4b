"""Two-phase training: pretrain a base model, freeze it, fine-tune adapters.

``pretrain`` trains every parameter on a temperature-sampled mixture of tasks
and returns the best-dev checkpoint with the base permanently frozen.
``adapt`` trains exactly one task's adapter bundle against a frozen base with
a fresh optimizer restarted from step 0. ``full_finetune`` is the baseline
that keeps training all parameters, continuing the optimizer state and
schedule from the base checkpoint without a reset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .adapters import AdapterBundle, AdapterConfig, create_bundle, set_trainable
from .autodiff import Tape, Tensor
from .bleu import corpus_bleu
from .checkpoint import (KIND_BASE, KIND_BUNDLE, Checkpoint,
                         check_bundle_compatible, config_hash)
from .data import (BOS, EOS, PAD, Corpus, IdPair, RawTask, TaskSpec, Vocab,
                   build_vocab, derive_seed, prepend_task_token, sample_stream,
                   tokenize_task)
from .errors import ContractError, TaskNotFoundError
from .model import ModelConfig, Transformer
from .optim import OptimizerState, lr_schedule, optimizer_step
from .store import BASE, ParameterStore


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training phase."""

    steps: int
    eval_every: int = 100
    seed: int = 0
    base_lr: float = 1.0
    warmup: int = 400
    batch_tokens: int = 1024
    select_by: str = "loss"  # "loss" (min dev loss) or "bleu" (max dev bleu)
    temperature: float = 1.0
    dev_bleu_cap: int = 64  # dev pairs decoded per eval; 0 disables

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.eval_every < 1:
            raise ContractError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.select_by not in ("loss", "bleu"):
            raise ContractError(f"select_by must be loss or bleu, got "
                                f"{self.select_by!r}")
        if self.select_by == "bleu" and self.dev_bleu_cap == 0:
            raise ContractError("select_by=bleu requires dev_bleu_cap > 0")


@dataclass
class EvalRecord:
    step: int
    split: str
    loss: float | None = None
    accuracy: float | None = None
    bleu: float | None = None


def write_metrics(records: Sequence[EvalRecord], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "split", "loss", "accuracy", "bleu"])
        for rec in records:
            writer.writerow([
                rec.step, rec.split,
                "" if rec.loss is None else repr(rec.loss),
                "" if rec.accuracy is None else repr(rec.accuracy),
                "" if rec.bleu is None else repr(rec.bleu),
            ])
    return path


def read_metrics(path: Path | str) -> list[EvalRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(EvalRecord(
                step=int(row["step"]), split=row["split"],
                loss=float(row["loss"]) if row["loss"] else None,
                accuracy=float(row["accuracy"]) if row["accuracy"] else None,
                bleu=float(row["bleu"]) if row["bleu"] else None,
            ))
    return records


# -- batching ----------------------------------------------------------------


def make_batch(pairs: Sequence[IdPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad pairs into (src, decoder_input, targets) id arrays.

    The decoder input is bos + target; targets are target + eos; pads fill
    the tails and are excluded from the loss.
    """
    batch = len(pairs)
    src_width = max(len(s) for s, _ in pairs)
    tgt_width = max(len(t) for _, t in pairs) + 1
    src = np.full((batch, src_width), PAD, dtype=np.int64)
    dec_in = np.full((batch, tgt_width), PAD, dtype=np.int64)
    targets = np.full((batch, tgt_width), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        dec_in[i, 0] = BOS
        dec_in[i, 1 : len(t) + 1] = t
        targets[i, : len(t)] = t
        targets[i, len(t)] = EOS
    return src, dec_in, targets


def token_batches(stream: Iterator[tuple[str, IdPair]], budget: int,
                  max_len: int, bucket_width: int = 4) -> Iterator[list[IdPair]]:
    """Assemble length-bucketed batches of roughly ``budget`` target tokens."""
    buckets: dict[int, tuple[list[IdPair], int]] = {}
    for _, (src, tgt) in stream:
        if len(src) > max_len or len(tgt) + 1 > max_len:
            raise ContractError(
                f"pair of lengths ({len(src)}, {len(tgt)}) exceeds max_len {max_len}"
            )
        key = len(tgt) // bucket_width
        pairs, count = buckets.get(key, ([], 0))
        pairs.append((src, tgt))
        count += len(tgt) + 1
        if count >= budget:
            del buckets[key]
            yield pairs
        else:
            buckets[key] = (pairs, count)


def eval_batches(pairs: Sequence[IdPair], budget: int) -> list[list[IdPair]]:
    """Deterministic consecutive chunks of at most ``budget`` target tokens."""
    out: list[list[IdPair]] = []
    current: list[IdPair] = []
    count = 0
    for pair in pairs:
        current.append(pair)
        count += len(pair[1]) + 1
        if count >= budget:
            out.append(current)
            current, count = [], 0
    if current:
        out.append(current)
    return out


# -- metric helpers ----------------------------------------------------------


def teacher_metrics(model: Transformer, batches: Sequence[list[IdPair]],
                    bundle: AdapterBundle | None = None) -> tuple[float, float]:
    """(mean loss, token accuracy) over non-pad positions, no gradients."""
    nll = 0.0
    correct = 0
    total = 0
    for pairs in batches:
        src, dec_in, targets = make_batch(pairs)
        stack = model.encode(src, bundle)
        logits = model.decode(dec_in, stack[-1], src, bundle).data
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        keep = targets != PAD
        picked = np.take_along_axis(
            log_probs, np.where(keep, targets, 0)[..., None], axis=-1)[..., 0]
        nll -= float((picked * keep).sum())
        correct += int(((log_probs.argmax(axis=-1) == targets) & keep).sum())
        total += int(keep.sum())
    if total == 0:
        return 0.0, 0.0
    return nll / total, correct / total


def sequence_losses(model: Transformer, pairs: Sequence[IdPair],
                    bundle: AdapterBundle | None = None) -> list[float]:
    """Per-pair mean cross-entropy, one forward pass per pair."""
    return [float(model.pair_loss(s, t, bundle).data) for s, t in pairs]


def decode_bleu(model: Transformer, pairs: Sequence[IdPair],
                bundle: AdapterBundle | None = None,
                batch_size: int = 64, beam: int = 1) -> tuple[float, list[list[int]]]:
    """Greedy (or beam) decode the pairs and score corpus BLEU on token ids."""
    refs = [list(map(int, t)) for _, t in pairs]
    max_steps = min(model.config.max_len - 1,
                    max(len(r) for r in refs) + 8)
    hyps: list[list[int]] = []
    if beam == 1:
        for start in range(0, len(pairs), batch_size):
            chunk = [np.asarray(s) for s, _ in pairs[start:start + batch_size]]
            hyps.extend(model.decode_greedy(chunk, bundle, max_steps))
    else:
        for s, _ in pairs:
            hyps.append(model.decode_beam(np.asarray(s), beam, bundle, max_steps))
    return corpus_bleu(hyps, refs), hyps


# -- the shared fitting loop ---------------------------------------------------


@dataclass
class FitResult:
    best_step: int
    best_params: dict[str, np.ndarray]
    best_optim: tuple[int, dict[str, np.ndarray], dict[str, np.ndarray]] | None
    records: list[EvalRecord]


def _snapshot_optim(state: OptimizerState):
    return (state.step,
            {n: a.copy() for n, a in state.m.items()},
            {n: a.copy() for n, a in state.v.items()})


def _fit(model: Transformer, state: OptimizerState,
         batches: Iterator[list[IdPair]], schedule: Callable[[int], float],
         config: TrainConfig, dev_pairs: Sequence[IdPair],
         bundle: AdapterBundle | None, snapshot_task: str | None,
         keep_optim: bool) -> FitResult:
    store = model.store
    rng = np.random.default_rng(derive_seed(config.seed, "dropout"))
    dev_eval = eval_batches(dev_pairs, config.batch_tokens)
    bleu_pairs = list(dev_pairs[: config.dev_bleu_cap])

    records: list[EvalRecord] = []
    best_step = 0
    best_metric = None
    best_params = store.snapshot(snapshot_task)
    best_optim = _snapshot_optim(state) if keep_optim else None

    window_loss = 0.0
    window_count = 0
    for step in range(1, config.steps + 1):
        src, dec_in, targets = make_batch(next(batches))
        with Tape() as tape:
            loss = model.forward_loss(src, dec_in, targets, bundle, rng)
            tape.backward(loss)
        optimizer_step(store, state, schedule(state.step + 1))
        window_loss += float(loss.data)
        window_count += 1

        if step % config.eval_every == 0 or step == config.steps:
            records.append(EvalRecord(step, "train", window_loss / window_count))
            window_loss, window_count = 0.0, 0
            dev_loss, dev_acc = teacher_metrics(model, dev_eval, bundle)
            dev_bleu = None
            if bleu_pairs:
                dev_bleu, _ = decode_bleu(model, bleu_pairs, bundle)
            records.append(EvalRecord(step, "dev", dev_loss, dev_acc, dev_bleu))
            metric = dev_loss if config.select_by == "loss" else -dev_bleu
            if best_metric is None or metric < best_metric:
                best_metric = metric
                best_step = step
                best_params = store.snapshot(snapshot_task)
                if keep_optim:
                    best_optim = _snapshot_optim(state)
    return FitResult(best_step, best_params, best_optim, records)


# -- checkpoint glue -----------------------------------------------------------


def make_base_checkpoint(model: Transformer, vocab: Vocab,
                         optim: tuple[int, dict, dict],
                         task_ids: Sequence[str], best_step: int,
                         vocab_mode: str = "word") -> Checkpoint:
    cfg = model.config
    header = {"kind": KIND_BASE,
              "config_hash": config_hash(cfg.d_model, cfg.num_layers)}
    header.update(cfg.to_header())
    header["vocab"] = vocab.to_text()
    header["vocab_mode"] = vocab_mode
    header["multi_task"] = "1" if task_ids else "0"
    header["tasks"] = ",".join(task_ids)
    header["best_step"] = str(best_step)
    step, m, v = optim
    header["optim.step"] = str(step)
    tensors: dict[str, np.ndarray] = {}
    for name in model.store.names(BASE):
        tensors[name] = model.store[name].data.copy()
    for name, arr in m.items():
        tensors[f"optim.m.{name}"] = arr.copy()
    for name, arr in v.items():
        tensors[f"optim.v.{name}"] = arr.copy()
    return Checkpoint(header, tensors)


def make_bundle_checkpoint(bundle: AdapterBundle, best_step: int) -> Checkpoint:
    header = {
        "kind": KIND_BUNDLE,
        "config_hash": config_hash(bundle.d_model, bundle.num_layers),
        "task_id": bundle.task_id,
        "adapter.bottleneck": str(bundle.config.bottleneck),
        "adapter.init_scale": repr(bundle.config.init_scale),
        "model.num_layers": str(bundle.num_layers),
        "model.d_model": str(bundle.d_model),
        "best_step": str(best_step),
    }
    tensors = {name: t.data.copy() for name, t in bundle.param_items()}
    return Checkpoint(header, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Transformer, Vocab]:
    """Rebuild the frozen base model and its vocabulary from a checkpoint."""
    if ckpt.kind != KIND_BASE:
        raise ContractError(f"expected a base checkpoint, got {ckpt.kind!r}")
    config = ModelConfig.from_header(ckpt.header)
    vocab = Vocab.from_text(ckpt.header["vocab"])
    store = ParameterStore()
    for name, arr in ckpt.param_items():
        store.add(name, Tensor(arr.copy()), task=BASE, frozen=True)
    return Transformer(config, store), vocab


def bundle_from_checkpoint(ckpt: Checkpoint,
                           base: Checkpoint | None = None) -> AdapterBundle:
    if base is not None:
        check_bundle_compatible(base, ckpt)
    config = AdapterConfig(bottleneck=int(ckpt.header["adapter.bottleneck"]),
                           init_scale=float(ckpt.header["adapter.init_scale"]))
    return AdapterBundle.from_arrays(
        ckpt.header["task_id"], config,
        num_layers=int(ckpt.header["model.num_layers"]),
        d_model=int(ckpt.header["model.d_model"]),
        arrays=dict(ckpt.tensors),
    )


def optimizer_from_checkpoint(ckpt: Checkpoint,
                              store: ParameterStore) -> OptimizerState:
    state = OptimizerState(step=int(ckpt.header["optim.step"]))
    for name, _ in store.trainable():
        m_key, v_key = f"optim.m.{name}", f"optim.v.{name}"
        if m_key not in ckpt.tensors or v_key not in ckpt.tensors:
            raise ContractError(f"checkpoint lacks optimizer state for {name!r}")
        state.m[name] = ckpt.tensors[m_key].copy()
        state.v[name] = ckpt.tensors[v_key].copy()
    return state


def _base_tasks(ckpt: Checkpoint) -> list[str]:
    tasks = ckpt.header.get("tasks", "")
    return [t for t in tasks.split(",") if t]


def _prepended(spec: TaskSpec, vocab: Vocab, multi: bool) -> TaskSpec:
    if not multi:
        return spec
    token = vocab.task_token_id(spec.task_id)

    def conv(corpus: Corpus) -> Corpus:
        return Corpus([prepend_task_token(p, token) for p in corpus])

    return TaskSpec(spec.task_id, spec.kind, conv(spec.train), conv(spec.dev),
                    conv(spec.test))


# -- the three phases ----------------------------------------------------------


def pretrain(tasks: Sequence[RawTask], config: TrainConfig,
             model_opts: dict | None = None, vocab_mode: str = "word",
             max_vocab: int | None = None, multi_task: bool | None = None,
             metrics_path: Path | str | None = None,
             ) -> tuple[Checkpoint, list[EvalRecord]]:
    """Phase 1: train every parameter on the task mixture, then freeze.

    Returns the checkpoint with the best dev performance. With more than one
    task (or ``multi_task=True``) the model is trained fully shared, with a
    per-task token prepended to every source sentence.
    """
    if multi_task is None:
        multi_task = len(tasks) > 1
    task_ids = sorted(t.task_id for t in tasks) if multi_task else []
    sentences = [sent for task in tasks for sent in task.sentences("train")]
    vocab = build_vocab(sentences, vocab_mode, max_vocab, task_ids)
    specs = [_prepended(tokenize_task(t, vocab), vocab, multi_task)
             for t in tasks]

    mc = ModelConfig(vocab_size=len(vocab), **(model_opts or {}))
    model = Transformer.create(mc, derive_seed(config.seed, "model-init"))
    state = OptimizerState.for_store(model.store)
    stream = sample_stream(specs, config.temperature, config.seed)
    batches = token_batches(stream, config.batch_tokens, mc.max_len)
    dev_pairs = [pair for spec in specs for pair in spec.dev]

    def schedule(step: int) -> float:
        return lr_schedule(step, config.base_lr, config.warmup, mc.d_model)

    result = _fit(model, state, batches, schedule, config, dev_pairs,
                  bundle=None, snapshot_task=BASE, keep_optim=True)
    model.store.restore(result.best_params)
    model.store.freeze_base()
    ckpt = make_base_checkpoint(model, vocab, result.best_optim, task_ids,
                                result.best_step, vocab_mode)
    if metrics_path is not None:
        write_metrics(result.records, metrics_path)
    return ckpt, result.records


def adapt(base_ckpt: Checkpoint, task: RawTask, adapter_config: AdapterConfig,
          config: TrainConfig, metrics_path: Path | str | None = None,
          ) -> tuple[Checkpoint, list[EvalRecord]]:
    """Phase 2: train one task's adapter bundle against the frozen base.

    The optimizer restarts from step 0 with zeroed accumulators and the same
    schedule used for pretraining. Only bundle parameters change; the base is
    frozen absolutely.
    """
    model, vocab = model_from_checkpoint(base_ckpt)
    multi = base_ckpt.header.get("multi_task") == "1"
    if multi and task.task_id not in _base_tasks(base_ckpt):
        raise TaskNotFoundError(
            f"task {task.task_id!r} was not part of pretraining; new language "
            "pairs cannot be added during adaptation"
        )
    spec = _prepended(tokenize_task(task, vocab), vocab, multi)
    bundle = create_bundle(task.task_id, model.config.num_layers,
                           model.config.d_model, adapter_config,
                           derive_seed(config.seed, f"adapter:{task.task_id}"),
                           store=model.store)
    if bundle.param_count() == 0:
        # bottleneck 0: nothing to train, the bundle is an empty no-op
        dev_loss, dev_acc = teacher_metrics(
            model, eval_batches(list(spec.dev), config.batch_tokens))
        records = [EvalRecord(0, "dev", dev_loss, dev_acc)]
        if metrics_path is not None:
            write_metrics(records, metrics_path)
        return make_bundle_checkpoint(bundle, 0), records

    set_trainable(model.store, task.task_id)
    state = OptimizerState.for_store(model.store)
    stream = sample_stream([spec], 1.0, config.seed)
    batches = token_batches(stream, config.batch_tokens, model.config.max_len)

    def schedule(step: int) -> float:
        return lr_schedule(step, config.base_lr, config.warmup,
                           model.config.d_model)

    result = _fit(model, state, batches, schedule, config, list(spec.dev),
                  bundle=bundle, snapshot_task=task.task_id, keep_optim=False)
    model.store.restore(result.best_params)
    ckpt = make_bundle_checkpoint(bundle, result.best_step)
    if metrics_path is not None:
        write_metrics(result.records, metrics_path)
    return ckpt, result.records


def full_finetune(base_ckpt: Checkpoint, task: RawTask, config: TrainConfig,
                  metrics_path: Path | str | None = None,
                  ) -> tuple[Checkpoint, list[EvalRecord]]:
    """Baseline: continue training all parameters on the task corpus.

    The optimizer accumulators and step counter are restored from the base
    checkpoint and deliberately NOT reset, so the learning-rate schedule
    continues to decay from where pretraining stopped.
    """
    model, vocab = model_from_checkpoint(base_ckpt)
    multi = base_ckpt.header.get("multi_task") == "1"
    if multi and task.task_id not in _base_tasks(base_ckpt):
        raise TaskNotFoundError(
            f"task {task.task_id!r} was not part of pretraining"
        )
    model.store.set_trainable_all()
    state = optimizer_from_checkpoint(base_ckpt, model.store)
    spec = _prepended(tokenize_task(task, vocab), vocab, multi)
    stream = sample_stream([spec], 1.0, config.seed)
    batches = token_batches(stream, config.batch_tokens, model.config.max_len)

    def schedule(step: int) -> float:
        return lr_schedule(step, config.base_lr, config.warmup,
                           model.config.d_model)

    result = _fit(model, state, batches, schedule, config, list(spec.dev),
                  bundle=None, snapshot_task=BASE, keep_optim=True)
    model.store.restore(result.best_params)
    model.store.freeze_base()
    task_ids = _base_tasks(base_ckpt)
    ckpt = make_base_checkpoint(model, vocab, result.best_optim, task_ids,
                                result.best_step,
                                base_ckpt.header.get("vocab_mode", "word"))
    if metrics_path is not None:
        write_metrics(result.records, metrics_path)
    return ckpt, result.records


def evaluate(base_ckpt: Checkpoint, bundle_ckpt: Checkpoint | None,
             task: RawTask, split: str, beam: int = 1,
             batch_tokens: int = 1024) -> dict[str, float]:
    """Greedy-decode a split and report corpus BLEU, token accuracy, loss."""
    model, vocab = model_from_checkpoint(base_ckpt)
    multi = base_ckpt.header.get("multi_task") == "1"
    bundle = None
    if bundle_ckpt is not None:
        bundle = bundle_from_checkpoint(bundle_ckpt, base_ckpt)
    spec = _prepended(tokenize_task(task, vocab), vocab, multi)
    pairs = list(spec.split(split))
    loss, accuracy = teacher_metrics(
        model, eval_batches(pairs, batch_tokens), bundle)
    bleu, _ = decode_bleu(model, pairs, bundle, beam=beam)
    return {"bleu": bleu, "token_accuracy": accuracy, "loss": loss}
