"""Corpora, vocabulary, task registry, temperature sampling, synthetic tasks.

Parallel corpora live on disk as UTF-8 text, one sentence per line, in file
pairs ``<task>.<split>.src`` / ``<task>.<split>.tgt`` listed by a line-oriented
``key=value`` manifest. Synthetic tasks are generated from a seeded
token-substitution grammar and stand in for real domain/language-pair data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, VocabularyMismatchError

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD, BOS, EOS, UNK = 0, 1, 2, 3

SPLITS = ("train", "dev", "test")

RawPair = tuple[list[str], list[str]]
IdPair = tuple[np.ndarray, np.ndarray]


def derive_seed(seed: int, tag: str) -> int:
    """Stable child seed for a (seed, tag) pair, independent of platform."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def tokenize_line(line: str, mode: str = "word") -> list[str]:
    if mode == "word":
        return line.split()
    if mode == "char":
        return list(line.strip().replace(" ", "▁"))
    raise ContractError(f"unknown tokenization mode {mode!r}")


def task_token(task_id: str) -> str:
    return f"<task:{task_id}>"


class Vocab:
    """Token/id mapping with reserved ids 0..3 for pad/bos/eos/unk.

    Optional per-task tokens follow the reserved block. Unknown words fall
    back to their character spellings when every character is itself a vocab
    entry, else to ``<unk>``.
    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise ContractError("vocab must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocab contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode_words(self, words: Iterable[str]) -> list[int]:
        ids: list[int] = []
        for word in words:
            hit = self.index.get(word)
            if hit is not None:
                ids.append(hit)
                continue
            chars = [self.index.get(c) for c in word]
            if chars and all(c is not None for c in chars):
                ids.extend(chars)
            else:
                ids.append(UNK)
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i < len(RESERVED):
                continue
            out.append(self.tokens[int(i)])
        return out

    def task_token_id(self, task_id: str) -> int:
        tok = task_token(task_id)
        hit = self.index.get(tok)
        if hit is None:
            raise VocabularyMismatchError(f"vocab has no task token for {task_id!r}")
        return hit

    def task_ids(self) -> list[str]:
        return [t[len("<task:"):-1] for t in self.tokens if t.startswith("<task:")]

    def to_text(self) -> str:
        return "\n".join(self.tokens)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(text.split("\n"))


def build_vocab(sentences: Iterable[Sequence[str]], mode: str = "word",
                max_size: int | None = None,
                task_ids: Sequence[str] = ()) -> Vocab:
    """Frequency-ranked vocabulary with deterministic lexicographic tie-break.

    ``sentences`` are already-tokenized token lists; ``mode`` only matters for
    recording which tokenization produced them. Task tokens, when given, take
    the ids right after the reserved block, in sorted task-id order.
    """
    counts: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    head = list(RESERVED) + [task_token(t) for t in sorted(set(task_ids))]
    if max_size is not None:
        if max_size < len(head):
            raise ContractError(
                f"max_size {max_size} cannot hold the {len(head)} reserved tokens"
            )
        ranked = ranked[:max_size - len(head)]
    return Vocab(head + [t for t in ranked if t not in set(head)])


@dataclass
class RawTask:
    """A task's parallel text, tokenized to words but not yet to ids."""

    task_id: str
    kind: str  # "domain" | "language_pair"
    splits: dict[str, list[RawPair]]

    @property
    def size(self) -> int:
        return len(self.splits["train"])

    def sentences(self, split: str = "train") -> Iterator[list[str]]:
        for src, tgt in self.splits[split]:
            yield src
            yield tgt


@dataclass
class Corpus:
    """Tokenized parallel pairs; both sides non-empty, ids within the vocab."""

    pairs: list[IdPair]

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> IdPair:
        return self.pairs[i]

    def __iter__(self) -> Iterator[IdPair]:
        return iter(self.pairs)


@dataclass
class TaskSpec:
    """A named task with id-encoded train/dev/test corpora."""

    task_id: str
    kind: str
    train: Corpus
    dev: Corpus
    test: Corpus

    @property
    def size(self) -> int:
        return len(self.train)

    def split(self, name: str) -> Corpus:
        if name not in SPLITS:
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)


def tokenize_task(raw: RawTask, vocab: Vocab) -> TaskSpec:
    """Encode a raw task against ``vocab``; empty encoded sides are an error."""
    encoded: dict[str, Corpus] = {}
    all_unk = True
    for split, pairs in raw.splits.items():
        out: list[IdPair] = []
        for src, tgt in pairs:
            s = np.asarray(vocab.encode_words(src), dtype=np.int64)
            t = np.asarray(vocab.encode_words(tgt), dtype=np.int64)
            if s.size == 0 or t.size == 0:
                raise ContractError(
                    f"empty side after tokenization in task {raw.task_id!r}"
                )
            if split == "train" and np.any(t != UNK):
                all_unk = False
            out.append((s, t))
        encoded[split] = Corpus(out)
    if all_unk and len(raw.splits.get("train", ())) > 0:
        raise VocabularyMismatchError(
            f"every target token of task {raw.task_id!r} is unknown to the vocabulary"
        )
    return TaskSpec(raw.task_id, raw.kind, encoded["train"], encoded["dev"],
                    encoded["test"])


def temperature_distribution(sizes: Sequence[int], temperature: float) -> np.ndarray:
    """Sampling probabilities proportional to (size/total)^(1/T).

    T = 1 reproduces the raw data proportions exactly; large T approaches the
    uniform distribution.
    """
    if len(sizes) == 0:
        raise ContractError("at least one task is required")
    if any(s <= 0 for s in sizes):
        raise ContractError(f"all corpus sizes must be positive, got {list(sizes)}")
    if temperature < 1.0:
        raise ContractError(f"temperature must be >= 1, got {temperature}")
    p = np.asarray(sizes, dtype=np.float64)
    p = p / p.sum()
    if temperature == 1.0:
        return p
    w = p ** (1.0 / temperature)
    return w / w.sum()


class _EpochShuffler:
    """Uniform order over one corpus, reshuffled at every epoch boundary."""

    def __init__(self, corpus: Corpus, seed: int):
        self._corpus = corpus
        self._rng = np.random.default_rng(seed)
        self._perm = self._rng.permutation(len(corpus))
        self._pos = 0

    def next(self) -> IdPair:
        if self._pos == len(self._perm):
            self._perm = self._rng.permutation(len(self._corpus))
            self._pos = 0
        pair = self._corpus[int(self._perm[self._pos])]
        self._pos += 1
        return pair


def sample_stream(tasks: Sequence[TaskSpec], temperature: float,
                  seed: int) -> Iterator[tuple[str, IdPair]]:
    """Deterministic infinite stream of (task_id, pair).

    Tasks are drawn i.i.d. from the temperature distribution; pairs are drawn
    from per-task shuffled epochs so every pair of a task appears exactly once
    per task-local epoch.
    """
    probs = temperature_distribution([t.size for t in tasks], temperature)
    rng = np.random.default_rng(derive_seed(seed, "task-choice"))
    shufflers = [
        _EpochShuffler(t.train, derive_seed(seed, f"epoch:{t.task_id}"))
        for t in tasks
    ]
    n = len(tasks)
    while True:
        picks = rng.choice(n, size=1024, p=probs)
        for i in picks:
            yield tasks[i].task_id, shufflers[i].next()


def prepend_task_token(pair: IdPair, token_id: int) -> IdPair:
    src, tgt = pair
    return np.concatenate(([token_id], src)), tgt


def subsample(pairs: Sequence, fraction: float, seed: int) -> list:
    """Deterministic uniform subsample without replacement, keeping order.

    Size is round(fraction * N) with a minimum of 1.
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    n = len(pairs)
    k = max(1, round(fraction * n))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return [pairs[int(i)] for i in idx]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Generator parameters for one synthetic task.

    The family shares a base bijection over ``content_vocab`` source words.
    ``shift_fraction`` remaps that fraction of the word images (a domain
    shift); ``new_language`` replaces the bijection wholesale; ``reorder``
    swaps adjacent target positions, a deterministic word-order divergence.
    """

    task_id: str
    kind: str = "domain"
    content_vocab: int = 64
    train_size: int = 2000
    dev_size: int = 500
    test_size: int = 500
    min_len: int = 4
    max_len: int = 10
    shift_fraction: float = 0.0
    reorder: bool = False
    new_language: bool = False

    def __post_init__(self):
        if self.content_vocab < 2:
            raise ContractError("content_vocab must be >= 2")
        if not 0.0 <= self.shift_fraction <= 1.0:
            raise ContractError(f"shift fraction {self.shift_fraction} not in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ContractError("need 1 <= min_len <= max_len")


def _task_mapping(spec: SyntheticTaskSpec, seed: int) -> np.ndarray:
    """Word index -> target word index for one task."""
    base_rng = np.random.default_rng(derive_seed(seed, "base-map"))
    mapping = base_rng.permutation(spec.content_vocab)
    if spec.new_language:
        rng = np.random.default_rng(derive_seed(seed, f"language:{spec.task_id}"))
        return rng.permutation(spec.content_vocab)
    if spec.shift_fraction > 0.0:
        k = max(2, round(spec.shift_fraction * spec.content_vocab))
        k = min(k, spec.content_vocab)
        rng = np.random.default_rng(derive_seed(seed, f"shift:{spec.task_id}"))
        chosen = rng.choice(spec.content_vocab, size=k, replace=False)
        # rotate the images of the chosen words so each one changes
        mapping = mapping.copy()
        mapping[chosen] = np.roll(mapping[chosen], 1)
    return mapping


def make_synthetic_task(spec: SyntheticTaskSpec, seed: int) -> RawTask:
    """Generate a task's parallel splits from the substitution grammar."""
    mapping = _task_mapping(spec, seed)
    src_words = [f"s{i:03d}" for i in range(spec.content_vocab)]
    tgt_words = [f"t{i:03d}" for i in range(spec.content_vocab)]
    sizes = {"train": spec.train_size, "dev": spec.dev_size, "test": spec.test_size}
    splits: dict[str, list[RawPair]] = {}
    for split, count in sizes.items():
        rng = np.random.default_rng(derive_seed(seed, f"pairs:{spec.task_id}:{split}"))
        pairs: list[RawPair] = []
        for _ in range(count):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            idx = rng.integers(0, spec.content_vocab, size=length)
            src = [src_words[i] for i in idx]
            tgt_idx = mapping[idx]
            if spec.reorder:
                tgt_idx = tgt_idx.copy()
                for j in range(0, length - 1, 2):
                    tgt_idx[j], tgt_idx[j + 1] = tgt_idx[j + 1], tgt_idx[j]
            tgt = [tgt_words[i] for i in tgt_idx]
            pairs.append((src, tgt))
        splits[split] = pairs
    return RawTask(spec.task_id, spec.kind, splits)


def write_task(raw: RawTask, out_dir: Path | str) -> dict[str, str]:
    """Write a task's split files; returns relative paths keyed by manifest field."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, str] = {}
    for split in SPLITS:
        for side, col in (("src", 0), ("tgt", 1)):
            name = f"{raw.task_id}.{split}.{side}"
            lines = [" ".join(pair[col]) for pair in raw.splits[split]]
            (out_dir / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
            paths[f"{split}_{side}"] = name
    return paths


def write_manifest(tasks: Sequence[RawTask], out_dir: Path | str,
                   manifest_name: str = "manifest.txt") -> Path:
    """Write split files plus the key=value manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    blocks = []
    for raw in tasks:
        paths = write_task(raw, out_dir)
        lines = [f"task={raw.task_id}", f"kind={raw.kind}"]
        lines += [f"{key}={paths[key]}"
                  for key in ("train_src", "train_tgt", "dev_src", "dev_tgt",
                              "test_src", "test_tgt")]
        lines.append(f"size={raw.size}")
        blocks.append("\n".join(lines))
    manifest = out_dir / manifest_name
    manifest.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")
    return manifest


def load_tasks(manifest_path: Path | str, mode: str = "word") -> list[RawTask]:
    """Read a manifest and its corpus files back into raw tasks."""
    manifest_path = Path(manifest_path)
    base_dir = manifest_path.parent
    text = manifest_path.read_text(encoding="utf-8")
    tasks: list[RawTask] = []
    for block in [b for b in text.split("\n\n") if b.strip()]:
        fields: dict[str, str] = {}
        for line in block.strip().splitlines():
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        splits: dict[str, list[RawPair]] = {}
        for split in SPLITS:
            src_lines = (base_dir / fields[f"{split}_src"]).read_text(
                encoding="utf-8").splitlines()
            tgt_lines = (base_dir / fields[f"{split}_tgt"]).read_text(
                encoding="utf-8").splitlines()
            if len(src_lines) != len(tgt_lines):
                raise ContractError(
                    f"side lengths differ for {fields['task']} {split}"
                )
            splits[split] = [
                (tokenize_line(s, mode), tokenize_line(t, mode))
                for s, t in zip(src_lines, tgt_lines)
            ]
        task = RawTask(fields["task"], fields.get("kind", "domain"), splits)
        declared = int(fields.get("size", task.size))
        if declared != task.size:
            raise ContractError(
                f"manifest size {declared} != actual {task.size} for {task.task_id}"
            )
        tasks.append(task)
    return tasks
