"""Datasets: a synthetic planted-signal classification task and JSONL I/O.

Records are ``{"tokens": [int, ...], "label": int}``. Ids 0 and 1 are
reserved for padding and the classification token; every sequence starts
with the classification token. In the synthetic task the label is carried
entirely by ``signal_count`` planted copies of one signal id (one id per
class) amid uniformly drawn distractor ids, so an oracle that keeps only
the signal tokens and drops everything else preserves label computability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
CLS_ID = 1
FIRST_SIGNAL_ID = 2


@dataclass
class DatasetSpec:
    """Where a dataset lives and how it is scored."""

    name: str
    path: str | None = None
    vocab_path: str | None = None
    vocab_size: int = 1000
    num_labels: int = 2
    metric: str = "accuracy"  # "accuracy" | "f1"

    def __post_init__(self):
        if self.metric not in ("accuracy", "f1"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class SynthSpec:
    """Parameters of the planted-signal generator."""

    vocab_size: int = 1000
    num_labels: int = 2
    signal_count: int = 2
    min_len: int = 8
    max_len: int = 24
    num_examples: int = 2000

    def __post_init__(self):
        if self.vocab_size < FIRST_SIGNAL_ID + self.num_labels + 1:
            raise ValueError("vocabulary too small for the signal alphabet plus distractors")
        if self.min_len < self.signal_count + 1 or self.max_len < self.min_len:
            raise ValueError("length range cannot hold the classification and signal tokens")
        if self.num_labels < 2 or self.signal_count < 1:
            raise ValueError("need >= 2 classes and >= 1 signal token")

    def signal_id(self, label: int) -> int:
        return FIRST_SIGNAL_ID + label


def generate_synthetic(spec: SynthSpec, rng: np.random.Generator) -> list:
    """Balanced list of (tokens, label).

    Labels are assigned round-robin before shuffling, so class counts never
    differ by more than one.
    """
    labels = np.arange(spec.num_examples) % spec.num_labels
    rng.shuffle(labels)
    distractor_lo = FIRST_SIGNAL_ID + spec.num_labels
    data = []
    for label in labels:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        body = rng.integers(distractor_lo, spec.vocab_size, size=length - 1)
        slots = rng.choice(length - 1, size=spec.signal_count, replace=False)
        body[slots] = spec.signal_id(int(label))
        tokens = [CLS_ID] + body.tolist()
        data.append((tokens, int(label)))
    return data


def oracle_signal_mask(tokens: list, spec: SynthSpec) -> np.ndarray:
    """1 for the classification token and planted signals, 0 for distractors."""
    arr = np.asarray(tokens)
    is_signal = (arr >= FIRST_SIGNAL_ID) & (arr < FIRST_SIGNAL_ID + spec.num_labels)
    is_signal[0] = True
    return is_signal.astype(np.float64)


def oracle_label(tokens: list, spec: SynthSpec) -> int:
    """Recover the label from signal tokens alone (majority signal id)."""
    arr = np.asarray(tokens[1:])
    sig = arr[(arr >= FIRST_SIGNAL_ID) & (arr < FIRST_SIGNAL_ID + spec.num_labels)]
    if sig.size == 0:
        return 0
    ids, counts = np.unique(sig, return_counts=True)
    return int(ids[counts.argmax()] - FIRST_SIGNAL_ID)


def save_jsonl(path, data) -> None:
    with open(path, "w") as fh:
        for tokens, label in data:
            fh.write(json.dumps({"tokens": list(map(int, tokens)), "label": int(label)}) + "\n")


def load_jsonl(path, vocab_size: int, num_labels: int) -> list:
    """Load and validate records; errors name the offending line."""
    data = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            try:
                tokens = [int(t) for t in rec["tokens"]]
                label = int(rec["label"])
            except (KeyError, TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: record needs integer 'tokens' and 'label'") from None
            if not tokens:
                raise ValueError(f"{path}:{lineno}: empty token list")
            bad = [t for t in tokens if t < 0 or t >= vocab_size]
            if bad:
                raise ValueError(f"{path}:{lineno}: token id {bad[0]} outside vocabulary of size {vocab_size}")
            if not 0 <= label < num_labels:
                raise ValueError(f"{path}:{lineno}: label {label} outside [0, {num_labels})")
            data.append((tokens, label))
    return data


def write_vocab(path, vocab_size: int, num_labels: int) -> None:
    """Id -> string map, for trace readability only."""
    names = ["<pad>", "<cls>"]
    names += [f"<sig{i}>" for i in range(num_labels)]
    names += [f"tok{i}" for i in range(len(names), vocab_size)]
    with open(path, "w") as fh:
        json.dump(names[:vocab_size], fh)


def batches(data: list, batch_size: int, pad_id: int = PAD_ID):
    """Yield (ids array (B, Lmax), labels array, raw lengths) in order."""
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        lengths = [len(t) for t, _ in chunk]
        width = max(lengths)
        ids = np.full((len(chunk), width), pad_id, dtype=np.intp)
        labels = np.empty(len(chunk), dtype=np.intp)
        for r, (tokens, label) in enumerate(chunk):
            ids[r, : len(tokens)] = tokens
            labels[r] = label
        yield ids, labels, lengths
