"""Prompt assembly and the whitespace tokenizer.

Prompt grammar (``\\n`` is a newline)::

    {instruction}\\n
    Input: {exemplar input}\\nOutput: {exemplar target}\\n\\n     (k times)
    Input: {query input}\\nOutput:

The tokenizer splits on whitespace, so newlines only matter for the text
form; ``Input:`` and ``Output:`` are ordinary tokens.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .records import TaskRecord

INPUT_TAG = "Input:"
OUTPUT_TAG = "Output:"

PAD = "<pad>"
EOS = "<eos>"
UNK = "<unk>"
SPECIALS = (PAD, EOS, UNK)


class PromptError(ValueError):
    pass


def assemble_prompt(record: TaskRecord, k: int | None = None) -> str:
    k = len(record.exemplars) if k is None else k
    if k < 0 or k > len(record.exemplars):
        raise PromptError(f"{record.task_name}: asked for {k} exemplars, record has {len(record.exemplars)}")
    parts = [record.instruction + "\n"]
    for ex_in, ex_out in record.exemplars[:k]:
        parts.append(f"{INPUT_TAG} {ex_in}\n{OUTPUT_TAG} {ex_out}\n\n")
    parts.append(f"{INPUT_TAG} {record.input}\n{OUTPUT_TAG}")
    return "".join(parts)


class Tokenizer:
    """Word-level vocabulary; ids 0..2 are <pad>, <eos>, <unk>."""

    def __init__(self, words: Iterable[str]):
        vocab = list(SPECIALS)
        seen = set(vocab)
        for w in words:
            if w not in seen:
                vocab.append(w)
                seen.add(w)
        self.vocab: list[str] = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def from_records(cls, records: Iterable[TaskRecord]) -> Tokenizer:
        words = set()
        for r in records:
            texts = [assemble_prompt(r), r.target]
            for text in texts:
                words.update(text.split())
        return cls(sorted(words))

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if i == self.pad_id:
                continue
            out.append(self.vocab[i])
        return " ".join(out)
