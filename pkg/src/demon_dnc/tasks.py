"""Sequence tasks: copy, repeat-copy, associative recall, and bAbI.

Every sample carries a per-timestep loss mask; target rows outside the mask
are all-zero.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, QUERY, UNKNOWN = "<pad>", "<query>", "<unk>"
RESERVED_TOKENS = (PAD, QUERY, UNKNOWN)


class BabiParseError(ValueError):
    pass


@dataclass
class TaskSample:
    inputs: np.ndarray     # (T, input_dim)
    targets: np.ndarray    # (T, output_dim); for bAbI one-hot answers
    loss_mask: np.ndarray  # (T,) of {0, 1}

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


@dataclass
class TaskConfig:
    kind: str = "repeat_copy"          # copy | repeat_copy | associative_recall | babi
    bits: int = 8
    min_length: int = 1
    max_length: int = 8
    min_repeats: int = 1
    max_repeats: int = 3
    min_items: int = 2
    max_items: int = 6
    item_length: int = 3
    babi_dir: str = ""
    babi_tasks: list = field(default_factory=lambda: [1])
    babi_max_stories: int = 0
    max_story_len: int = 400
    seed: int = 0

    def validate(self) -> "TaskConfig":
        if self.kind not in ("copy", "repeat_copy", "associative_recall", "babi"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        pairs = [("min_length", "max_length"), ("min_repeats", "max_repeats"), ("min_items", "max_items")]
        for lo, hi in pairs:
            if getattr(self, lo) < 1 or getattr(self, hi) < getattr(self, lo):
                raise ValueError(f"invalid range {lo}..{hi}")
        if self.bits < 1 or self.item_length < 1:
            raise ValueError("bits and item_length must be >= 1")
        if self.kind == "associative_recall" and self.min_items < 2:
            raise ValueError("associative recall needs at least 2 items")
        return self

    def dims(self) -> tuple[int, int]:
        """(input_dim, output_dim) of the bit tasks."""
        B = self.bits
        if self.kind == "copy":
            return B + 2, B
        if self.kind == "repeat_copy":
            return B + 2, B + 1
        if self.kind == "associative_recall":
            return B + 2, B
        raise ValueError("bAbI dimensions come from the corpus vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)


def _bits(rng: np.random.Generator, n: int, B: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, B)).astype(np.float64)


def gen_copy(cfg: TaskConfig, rng: np.random.Generator, length: int | None = None) -> TaskSample:
    """L data steps, one delimiter step, then L output steps.

    Input channels: B data bits, delimiter flag, repeat-count channel (unused
    here, kept so copy and repeat-copy share an input layout).
    """
    B = cfg.bits
    L = int(rng.integers(cfg.min_length, cfg.max_length + 1)) if length is None else length
    seq = _bits(rng, L, B)
    T = 2 * L + 1
    x = np.zeros((T, B + 2))
    y = np.zeros((T, B))
    mask = np.zeros(T)
    x[:L, :B] = seq
    x[L, B] = 1.0
    y[L + 1:] = seq
    mask[L + 1:] = 1.0
    return TaskSample(x, y, mask)


def gen_repeat_copy(cfg: TaskConfig, rng: np.random.Generator, length: int | None = None,
                    repeats: int | None = None) -> TaskSample:
    """Copy with a repeat count R / R_max on the last input channel at the
    delimiter step; the target is the sequence R times followed by an end
    marker on the extra output channel."""
    B = cfg.bits
    L = int(rng.integers(cfg.min_length, cfg.max_length + 1)) if length is None else length
    R = int(rng.integers(cfg.min_repeats, cfg.max_repeats + 1)) if repeats is None else repeats
    seq = _bits(rng, L, B)
    T = L + 1 + R * L + 1
    x = np.zeros((T, B + 2))
    y = np.zeros((T, B + 1))
    mask = np.zeros(T)
    x[:L, :B] = seq
    x[L, B] = 1.0
    x[L, B + 1] = R / cfg.max_repeats
    start = L + 1
    for r in range(R):
        y[start + r * L:start + (r + 1) * L, :B] = seq
    y[T - 1, B] = 1.0
    mask[start:] = 1.0
    return TaskSample(x, y, mask)


def gen_associative_recall(cfg: TaskConfig, rng: np.random.Generator, items: int | None = None,
                           query: int | None = None) -> TaskSample:
    """K items of ``item_length`` B-bit rows, each preceded by an item
    delimiter; then a query delimiter, the query item, a closing query
    delimiter, and an answer phase holding the item that followed the query.
    """
    B, n = cfg.bits, cfg.item_length
    K = int(rng.integers(cfg.min_items, cfg.max_items + 1)) if items is None else items
    if K < 2:
        raise ValueError("associative recall needs at least 2 items")
    blocks = [_bits(rng, n, B) for _ in range(K)]
    q = int(rng.integers(0, K - 1)) if query is None else query
    T = K * (n + 1) + 1 + n + 1 + n
    x = np.zeros((T, B + 2))
    y = np.zeros((T, B))
    mask = np.zeros(T)
    t = 0
    for blk in blocks:
        x[t, B] = 1.0
        x[t + 1:t + 1 + n, :B] = blk
        t += n + 1
    x[t, B + 1] = 1.0
    x[t + 1:t + 1 + n, :B] = blocks[q]
    t += n + 1
    x[t, B + 1] = 1.0
    t += 1
    y[t:t + n] = blocks[q + 1]
    mask[t:t + n] = 1.0
    return TaskSample(x, y, mask)


GENERATORS = {
    "copy": gen_copy,
    "repeat_copy": gen_repeat_copy,
    "associative_recall": gen_associative_recall,
}


def generate(cfg: TaskConfig, rng: np.random.Generator) -> TaskSample:
    return GENERATORS[cfg.kind](cfg, rng)


# ---------------------------------------------------------------------------
# bAbI


@dataclass
class BabiQuestion:
    line: int                 # index into the story's lines
    answer: str
    supporting: list


@dataclass
class BabiStory:
    lines: list               # token lists, questions included
    questions: list           # BabiQuestion
    source: str = ""


@dataclass
class BabiCorpus:
    stories: list
    vocab: dict

    @property
    def n_questions(self) -> int:
        return sum(len(s.questions) for s in self.stories)

    def answers(self) -> list[str]:
        return [q.answer for s in self.stories for q in s.questions]


_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _babi_files(path: Path, tasks: Sequence[int] | None, split: str | None) -> list[Path]:
    if path.is_file():
        return [path]
    files = sorted(path.glob("*.txt"))
    if split:
        files = [f for f in files if f.stem.endswith(f"_{split}")]
    if tasks:
        wanted = {f"qa{t}_" for t in tasks}
        files = [f for f in files if any(f.name.startswith(w) for w in wanted)]
    return files


def babi_parse(path, tasks: Sequence[int] | None = None, split: str | None = None,
               vocab: dict | None = None) -> BabiCorpus:
    """Parse bAbI files (a single file or a directory of ``qaN_*.txt``).

    Lines are ``<id> <sentence>`` or ``<id> <question>\\t<answer>\\t<ids>``; an
    id of 1 starts a new story. Multi-word answers ("apple,football") stay
    a single comma-joined token.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    files = _babi_files(path, tasks, split)
    if not files:
        raise BabiParseError(f"{path}: no bAbI task files found")
    stories = []
    for fname in files:
        stories.extend(_parse_file(fname))
    vocab = dict(vocab) if vocab else {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
    for story in stories:
        for line in story.lines:
            for tok in line:
                vocab.setdefault(tok, len(vocab))
        for q in story.questions:
            vocab.setdefault(q.answer, len(vocab))
    return BabiCorpus(stories, vocab)


def _parse_file(fname: Path) -> list[BabiStory]:
    stories: list[BabiStory] = []
    story = None
    id_to_line: dict[int, int] = {}
    last_id = 0
    with open(fname, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.rstrip("\n").rstrip("\r")
            if not raw.strip():
                continue
            where = f"{fname}:{lineno}"
            head, _, rest = raw.partition(" ")
            if not head.isdigit() or not rest:
                raise BabiParseError(f"{where}: expected '<id> <text>', got {raw!r}")
            line_id = int(head)
            if line_id == 1 or story is None:
                if line_id != 1:
                    raise BabiParseError(f"{where}: story must start at id 1")
                story = BabiStory(lines=[], questions=[], source=str(fname))
                stories.append(story)
                id_to_line = {}
            elif line_id != last_id + 1:
                raise BabiParseError(f"{where}: line id {line_id} does not follow {last_id}")
            last_id = line_id
            parts = rest.split("\t")
            if len(parts) == 1:
                story.lines.append(tokenize(parts[0]))
            elif len(parts) in (2, 3):
                answer = parts[1].strip().lower()
                if not answer:
                    raise BabiParseError(f"{where}: empty answer")
                try:
                    support = [int(s) for s in parts[2].split()] if len(parts) == 3 else []
                except ValueError as exc:
                    raise BabiParseError(f"{where}: bad supporting ids {parts[2]!r}") from exc
                for s in support:
                    if s not in id_to_line:
                        raise BabiParseError(f"{where}: supporting id {s} not in story")
                story.lines.append(tokenize(parts[0]))
                story.questions.append(BabiQuestion(len(story.lines) - 1, answer, support))
            else:
                raise BabiParseError(f"{where}: too many tab-separated fields")
            id_to_line[line_id] = len(story.lines) - 1
    return stories


def babi_serialize(corpus: BabiCorpus) -> str:
    """Inverse of :func:`babi_parse` up to tokenization (tokens space-joined)."""
    out = []
    for story in corpus.stories:
        q_at = {q.line: q for q in story.questions}
        for i, toks in enumerate(story.lines):
            text = " ".join(toks)
            if i in q_at:
                q = q_at[i]
                text += "\t" + q.answer + "\t" + " ".join(str(s) for s in q.supporting)
            out.append(f"{i + 1} {text}")
    return "\n".join(out) + "\n"


@dataclass
class BabiEncoding:
    samples: list
    answer_ids: list          # per sample, answer vocabulary ids in question order
    skipped: int


def babi_encode(corpus: BabiCorpus, max_story_len: int) -> BabiEncoding:
    """One-hot token stream per story.

    A question's closing "?" token is replaced by the query marker; that step
    has loss_mask 1 and the answer token as target. Stories longer than
    ``max_story_len`` tokens are skipped and counted.
    """
    V = len(corpus.vocab)
    qid = corpus.vocab[QUERY]
    unk = corpus.vocab[UNKNOWN]
    samples, answers, skipped = [], [], 0
    for story in corpus.stories:
        ids, marks = [], {}
        q_at = {q.line: q for q in story.questions}
        for i, toks in enumerate(story.lines):
            if i in q_at:
                body = toks[:-1] if toks and toks[-1] == "?" else toks
                ids.extend(corpus.vocab.get(t, unk) for t in body)
                marks[len(ids)] = corpus.vocab.get(q_at[i].answer, unk)
                ids.append(qid)
            else:
                ids.extend(corpus.vocab.get(t, unk) for t in toks)
        if len(ids) > max_story_len:
            skipped += 1
            continue
        T = len(ids)
        x = np.zeros((T, V))
        x[np.arange(T), ids] = 1.0
        y = np.zeros((T, V))
        mask = np.zeros(T)
        for t, a in marks.items():
            y[t, a] = 1.0
            mask[t] = 1.0
        samples.append(TaskSample(x, y, mask))
        answers.append([marks[t] for t in sorted(marks)])
    return BabiEncoding(samples, answers, skipped)


# ---------------------------------------------------------------------------
# metrics


def bit_error(outputs: np.ndarray, targets: np.ndarray, loss_mask: np.ndarray) -> float:
    """Fraction of masked output bits that disagree after thresholding at 0.5.

    ``outputs`` are probabilities (apply a sigmoid to logits first).
    """
    outputs, targets, loss_mask = np.asarray(outputs), np.asarray(targets), np.asarray(loss_mask)
    if outputs.shape != targets.shape or outputs.shape[:-1] != loss_mask.shape:
        raise ValueError(f"shape mismatch: {outputs.shape}, {targets.shape}, {loss_mask.shape}")
    n = loss_mask.sum() * outputs.shape[-1]
    if n == 0:
        raise ValueError("bit_error is undefined for an all-zero loss mask")
    wrong = (outputs >= 0.5) != (targets >= 0.5)
    return float((wrong * loss_mask[..., None]).sum() / n)


def babi_error_rate(predictions: Sequence[int], answers: Sequence[int]) -> float:
    """Fraction of questions whose predicted token id differs from the answer id."""
    predictions, answers = list(predictions), list(answers)
    if len(predictions) != len(answers):
        raise ValueError(f"{len(predictions)} predictions for {len(answers)} questions")
    if not answers:
        raise ValueError("no questions to score")
    return float(np.mean([p != a for p, a in zip(predictions, answers)]))


def pad_batch(samples: Iterable[TaskSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack into time-major (T, B, .) arrays, zero-padded; returns lengths too."""
    samples = list(samples)
    T = max(s.length for s in samples)
    B = len(samples)
    x = np.zeros((T, B, samples[0].inputs.shape[1]))
    y = np.zeros((T, B, samples[0].targets.shape[1]))
    m = np.zeros((T, B))
    lengths = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(samples):
        n = s.length
        x[:n, b] = s.inputs
        y[:n, b] = s.targets
        m[:n, b] = s.loss_mask
        lengths[b] = n
    return x, y, m, lengths
