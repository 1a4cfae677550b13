"""Deterministic synthetic instruction tasks.

Each operation appears under a held-in instruction and a held-out paraphrase.
The held-in mixture is used for instruction tuning; the held-out tasks (new
instruction wording for a known operation) are scored after transfer. A
``paraphrase`` task maps the alternate wordings onto the canonical ones.

Directory layout written by :func:`gen_synthetic_tasks`::

    manifest.json
    <task>.train.jsonl
    <task>.test.jsonl
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

from ..numerics.rng import Rng
from .prompts import Tokenizer
from .records import AnswerMode, SuiteSpec, TaskRecord, read_task_file, write_task_file
from .scoring import COT_MARKER

HELD_IN = "held_in"
HELD_OUT = "held_out"


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 20000
    n_test: int = 200
    n_finetune: int = 64
    seq_len: int = 5
    n_symbols: int = 8
    n_pairs: int = 3
    modulus: int = 10

    def __post_init__(self):
        if not 1 <= self.n_symbols <= 26:
            raise ValueError("n_symbols must be in [1, 26]")
        if self.n_pairs > self.n_symbols:
            raise ValueError("n_pairs cannot exceed n_symbols")


@dataclass(frozen=True)
class TaskDef:
    name: str
    op: str
    instruction: str
    split: str
    answer_mode: AnswerMode = AnswerMode.DIRECT
    k_shot: int = 0


PARAPHRASES = (
    ("repeat the list", "copy the sequence"),
    ("duplicate the items", "copy the sequence"),
    ("flip the list", "reverse the sequence"),
    ("mirror the items", "reverse the sequence"),
    ("retrieve what the key holds", "find the value of the key"),
    ("look up the key", "find the value of the key"),
    ("sum the two values", "add the numbers"),
    ("combine the two numbers", "add the numbers"),
)

CATALOG: tuple[TaskDef, ...] = (
    TaskDef("copy", "copy", "copy the sequence", HELD_IN, k_shot=1),
    TaskDef("reverse", "reverse", "reverse the sequence", HELD_IN, k_shot=1),
    TaskDef("lookup", "lookup", "find the value of the key", HELD_IN, k_shot=1),
    TaskDef("add", "add", "add the numbers", HELD_IN, k_shot=0),
    TaskDef("add_cot", "add_cot", "add the numbers step by step", HELD_IN, AnswerMode.COT, k_shot=2),
    TaskDef("paraphrase", "paraphrase", "rewrite the instruction", HELD_IN, k_shot=0),
    TaskDef("copy_alt", "copy", "repeat the list", HELD_OUT, k_shot=1),
    TaskDef("reverse_alt", "reverse", "flip the list", HELD_OUT, k_shot=1),
    TaskDef("lookup_alt", "lookup", "retrieve what the key holds", HELD_OUT, k_shot=1),
    TaskDef("add_alt", "add", "sum the two values", HELD_OUT, k_shot=0),
)


def catalog_by_name() -> dict[str, TaskDef]:
    return {t.name: t for t in CATALOG}


def default_suites(spec: SyntheticSpec | None = None) -> list[SuiteSpec]:
    """Four suites laid out like the usual Direct/Direct/CoT/Direct report."""
    spec = spec or SyntheticSpec()
    return [
        SuiteSpec("Seq", ("copy_alt", "reverse_alt"), k_shot=1),
        SuiteSpec("Lookup", ("lookup_alt",), k_shot=1, random_baseline={"lookup_alt": 100.0 / spec.n_pairs}),
        SuiteSpec(
            "Arith", ("add_cot",), k_shot=2, answer_mode=AnswerMode.COT,
            random_baseline={"add_cot": 100.0 / spec.modulus},
        ),
        SuiteSpec("QA", ("add_alt",), k_shot=0, random_baseline={"add_alt": 100.0 / spec.modulus}),
    ]


# -- operations -------------------------------------------------------------------------


def _letters(spec: SyntheticSpec) -> list[str]:
    return list(string.ascii_lowercase[: spec.n_symbols])


def _copy(rng: Rng, spec: SyntheticSpec) -> tuple[str, str]:
    letters = _letters(spec)
    seq = [letters[i] for i in rng.integers(0, spec.n_symbols, spec.seq_len)]
    return " ".join(seq), " ".join(seq)


def _reverse(rng: Rng, spec: SyntheticSpec) -> tuple[str, str]:
    x, _ = _copy(rng, spec)
    return x, " ".join(reversed(x.split()))


def _lookup(rng: Rng, spec: SyntheticSpec) -> tuple[str, str]:
    letters = _letters(spec)
    keys = [letters[i] for i in rng.choice(spec.n_symbols, size=spec.n_pairs, replace=False)]
    values = [str(int(v)) for v in rng.integers(0, 10, spec.n_pairs)]
    q = int(rng.integers(0, spec.n_pairs))
    body = " ".join(f"{k} {v}" for k, v in zip(keys, values))
    return f"{body} query {keys[q]}", values[q]


def _add_operands(rng: Rng, spec: SyntheticSpec) -> tuple[int, int]:
    a, b = rng.integers(0, spec.modulus, 2)
    return int(a), int(b)


def _add(rng: Rng, spec: SyntheticSpec) -> tuple[str, str]:
    a, b = _add_operands(rng, spec)
    return f"{a} + {b}", str((a + b) % spec.modulus)


def _add_cot(rng: Rng, spec: SyntheticSpec) -> tuple[str, str]:
    a, b = _add_operands(rng, spec)
    s = a + b
    r = s % spec.modulus
    return f"{a} + {b}", f"{a} + {b} = {s} , {s} mod {spec.modulus} = {r} . {COT_MARKER} {r} ."


def _paraphrase(rng: Rng, spec: SyntheticSpec) -> tuple[str, str]:
    alt, canon = PARAPHRASES[int(rng.integers(0, len(PARAPHRASES)))]
    return alt, canon


OPS: dict[str, Callable[[Rng, SyntheticSpec], tuple[str, str]]] = {
    "copy": _copy,
    "reverse": _reverse,
    "lookup": _lookup,
    "add": _add,
    "add_cot": _add_cot,
    "paraphrase": _paraphrase,
}


def _input_space(op: str, spec: SyntheticSpec) -> int:
    if op in ("copy", "reverse"):
        return spec.n_symbols**spec.seq_len
    if op in ("add", "add_cot"):
        return spec.modulus**2
    if op == "paraphrase":
        return len(PARAPHRASES)
    return 10**9


def _draw(td: TaskDef, rng: Rng, spec: SyntheticSpec, n: int, exclude: set[str]) -> list[tuple[str, str]]:
    fn = OPS[td.op]
    # inputs stay distinct (and clear of ``exclude``) only when the space leaves room for it
    distinct = _input_space(td.op, spec) - len(exclude) >= 4 * n
    out, seen = [], set(exclude)
    while len(out) < n:
        x, y = fn(rng, spec)
        if distinct and x in seen:
            continue
        seen.add(x)
        out.append((x, y))
    return out


def _records(td: TaskDef, pairs, pool, rng: Rng) -> list[TaskRecord]:
    out = []
    for i, (x, y) in enumerate(pairs):
        exemplars = ()
        if td.k_shot:
            # exemplars come from the train pool, never the query itself
            picks = []
            while len(picks) < td.k_shot:
                j = int(rng.integers(0, len(pool)))
                if pool[j][0] != x and j not in picks:
                    picks.append(j)
            exemplars = tuple(pool[j] for j in picks)
        out.append(TaskRecord(td.name, td.instruction, x, y, exemplars, td.answer_mode))
    return out


def synthetic_words(spec: SyntheticSpec) -> list[str]:
    """Every word the generators can emit, independent of the sampled data."""
    words = {"Input:", "Output:", "query", "+", "=", ",", "mod", ".", str(spec.modulus)}
    words.update(COT_MARKER.split())
    words.update(_letters(spec))
    words.update(str(i) for i in range(2 * spec.modulus - 1))
    for td in CATALOG:
        words.update(td.instruction.split())
    for alt, canon in PARAPHRASES:
        words.update(alt.split())
        words.update(canon.split())
    return sorted(words)


@dataclass
class TaskSet:
    train: dict[str, list[TaskRecord]]
    test: dict[str, list[TaskRecord]]
    splits: dict[str, str]
    suites: list[SuiteSpec]
    vocab_words: list[str] | None = None

    def held_in(self) -> list[str]:
        return [n for n, s in self.splits.items() if s == HELD_IN]

    def held_out(self) -> list[str]:
        return [n for n, s in self.splits.items() if s == HELD_OUT]

    def tokenizer(self) -> Tokenizer:
        if self.vocab_words is not None:
            return Tokenizer(self.vocab_words)
        recs = [r for rs in self.train.values() for r in rs] + [r for rs in self.test.values() for r in rs]
        return Tokenizer.from_records(recs)


def build_synthetic(seed: int, spec: SyntheticSpec | None = None, tasks: list[str] | None = None) -> TaskSet:
    spec = spec or SyntheticSpec()
    root = Rng(seed).child("tasks")
    defs = [td for td in CATALOG if tasks is None or td.name in tasks]
    train, test, splits = {}, {}, {}
    for td in defs:
        rng = root.child(td.name)
        n_train = spec.n_train if td.split == HELD_IN else spec.n_finetune
        train_pairs = _draw(td, rng.child("train"), spec, n_train, set())
        train_inputs = {x for x, _ in train_pairs}
        test_pairs = _draw(td, rng.child("test"), spec, spec.n_test, train_inputs)
        train[td.name] = _records(td, train_pairs, train_pairs, rng.child("train_exemplars"))
        test[td.name] = _records(td, test_pairs, train_pairs, rng.child("test_exemplars"))
        splits[td.name] = td.split
    suites = [s for s in default_suites(spec) if all(t in train for t in s.tasks)]
    return TaskSet(train, test, splits, suites, synthetic_words(spec))


def gen_synthetic_tasks(seed: int, spec: SyntheticSpec | None, out_dir) -> TaskSet:
    """Write train/test JSON-lines files plus a manifest; returns the task set."""
    spec = spec or SyntheticSpec()
    ts = build_synthetic(seed, spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ts.train:
        write_task_file(out / f"{name}.train.jsonl", ts.train[name])
        write_task_file(out / f"{name}.test.jsonl", ts.test[name])
    manifest = {
        "seed": seed,
        "spec": asdict(spec),
        "splits": ts.splits,
        "suites": [s.to_dict() for s in ts.suites],
        "vocab": ts.vocab_words,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ts


def load_task_dir(path) -> TaskSet:
    """Load a directory of ``<task>.train.jsonl`` / ``<task>.test.jsonl`` files.

    ``manifest.json`` is optional; without it every task is treated as held-in
    and there are no suites.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"task directory not found: {path}")
    train, test = {}, {}
    for f in sorted(path.glob("*.train.jsonl")):
        train[f.name[: -len(".train.jsonl")]] = read_task_file(f)
    for f in sorted(path.glob("*.test.jsonl")):
        test[f.name[: -len(".test.jsonl")]] = read_task_file(f)
    manifest_path = path / "manifest.json"
    splits = {n: HELD_IN for n in sorted(set(train) | set(test))}
    suites: list[SuiteSpec] = []
    vocab = None
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        splits.update(manifest.get("splits", {}))
        suites = [SuiteSpec.from_dict(s) for s in manifest.get("suites", [])]
        vocab = manifest.get("vocab")
    for n in splits:
        train.setdefault(n, [])
        test.setdefault(n, [])
    return TaskSet(train, test, splits, suites, vocab)
