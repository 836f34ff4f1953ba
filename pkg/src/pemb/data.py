"""Synthetic multi-task retrieval data over an integer alphabet.

Tokens 0..7 are reserved (0 is EOS, 1..7 build instructions). The content
alphabet is split into disjoint classes. A query holds ``per_class`` tokens
from every class in shuffled order; under task t the positive document is the
subsequence of class-t tokens, in query order. The same query therefore has a
different positive under every task, so only the instruction says which one is
wanted.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .contrastive import TrainingTriplet
from .errors import ConfigError, DataError

__all__ = [
    "SyntheticTask",
    "TaskFamily",
    "EvalItem",
    "default_family",
    "gen_dataset",
    "write_dataset",
    "read_dataset",
    "gen_eval_set",
]

FIRST_CONTENT = 8


@dataclass(frozen=True)
class SyntheticTask:
    task_id: int
    instruction: tuple[int, ...]
    members: tuple[int, ...]  # the token class this task selects

    def relation(self, query: Sequence[int]) -> tuple[int, ...]:
        keep = set(self.members)
        return tuple(int(x) for x in query if x in keep)

    def check(self, query: Sequence[int], doc: Sequence[int]) -> bool:
        return tuple(int(x) for x in doc) == self.relation(query)


@dataclass(frozen=True)
class TaskFamily:
    tasks: tuple[SyntheticTask, ...]
    per_class: int
    vocab_size: int

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def query_len(self) -> int:
        return self.per_class * len(self.tasks)

    def task(self, task_id: int) -> SyntheticTask:
        try:
            return self.tasks[task_id]
        except IndexError:
            raise DataError(f"unknown task id {task_id}") from None

    def sample_query(self, rng: np.random.Generator) -> np.ndarray:
        parts = [rng.choice(np.asarray(t.members), self.per_class, replace=False) for t in self.tasks]
        q = np.concatenate(parts)
        return q[rng.permutation(q.size)]

    def hard_negative(self, task: SyntheticTask, query: np.ndarray, rng: np.random.Generator,
                      max_swaps: int = 2) -> tuple[int, ...]:
        """Positive with s in {1..max_swaps} positions overwritten by other-class query tokens.

        A single-task family has no other classes; it swaps in class tokens the
        query does not hold instead.
        """
        pos = np.array(task.relation(query))
        others = np.array([x for x in query if x not in set(task.members)])
        if others.size == 0:
            others = np.array(sorted(set(task.members) - {int(x) for x in query}))
        if others.size == 0:
            raise DataError(f"task {task.task_id} leaves no token to build a hard negative from")
        s = int(rng.integers(1, min(max_swaps, pos.size, others.size) + 1))
        where = rng.choice(pos.size, s, replace=False)
        neg = pos.copy()
        neg[where] = rng.choice(others, s, replace=False)
        return tuple(int(x) for x in neg)


def default_family(n_tasks: int = 4, per_class: int = 10, vocab_size: int = 64) -> TaskFamily:
    if n_tasks < 1:
        raise ConfigError("need at least one task")
    if n_tasks + 2 > FIRST_CONTENT:
        raise ConfigError(f"at most {FIRST_CONTENT - 2} tasks fit the reserved instruction tokens")
    size = (vocab_size - FIRST_CONTENT) // n_tasks
    if size < per_class or (n_tasks > 1 and size * (n_tasks - 1) < per_class):
        raise ConfigError(f"vocabulary {vocab_size} too small for {n_tasks} classes of {per_class}")
    tasks = tuple(
        SyntheticTask(t, (1, 2 + t, FIRST_CONTENT - 2),
                      tuple(range(FIRST_CONTENT + size * t, FIRST_CONTENT + size * (t + 1))))
        for t in range(n_tasks))
    return TaskFamily(tasks, per_class, vocab_size)


def gen_dataset(seed: int, family: TaskFamily | None = None, per_task: int = 500) -> list[TrainingTriplet]:
    """``per_task`` triplets for every task, in a seeded shuffled order."""
    if per_task < 1:
        raise ConfigError("per_task must be >= 1")
    family = family or default_family()
    rng = np.random.default_rng(seed)
    order = rng.permutation(np.repeat(np.arange(family.n_tasks), per_task))
    out = []
    for t in order:
        task = family.task(int(t))
        q = family.sample_query(rng)
        out.append(TrainingTriplet(task.instruction, q, task.relation(q),
                                   family.hard_negative(task, q, rng), task=int(t)))
    return out


def _record(tr: TrainingTriplet) -> str:
    return json.dumps({"task": tr.task, "instruction": list(tr.instruction), "query": list(tr.query),
                       "pos": list(tr.positive), "neg": list(tr.negative)}, separators=(",", ":"))


def write_dataset(path: str | Path, triplets: Iterable[TrainingTriplet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tr in triplets:
            fh.write(_record(tr) + "\n")


def read_dataset(path: str | Path) -> list[TrainingTriplet]:
    out = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out.append(TrainingTriplet(r["instruction"], r["query"], r["pos"], r["neg"],
                                           task=int(r.get("task", -1))))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from exc
    if not out:
        raise DataError(f"dataset {path} is empty")
    return out


@dataclass(frozen=True)
class EvalItem:
    task: int
    instruction: tuple[int, ...]
    query: tuple[int, ...]
    positive: tuple[int, ...]
    distractors: tuple[tuple[int, ...], ...]


def gen_eval_set(seed: int, family: TaskFamily | None = None, n_queries: int = 512,
                 corpus_size: int = 16, pool: str = "query") -> list[EvalItem]:
    """Held-out queries, each ranked against ``corpus_size - 1`` distractors.

    Distractors are distinct same-length subsequences of the query, in query
    order. With ``pool="query"`` they are drawn from all query tokens, so the
    positive is just one more such subsequence and a scorer that ignores token
    classes ranks it first with probability 1/C. ``pool="other"`` draws only from
    other-class tokens (an easier, biased corpus kept for comparison).
    """
    if corpus_size < 2:
        raise ConfigError(f"corpus size must be >= 2, got {corpus_size}")
    if pool not in ("query", "other"):
        raise ConfigError(f"distractor pool must be query or other, got {pool!r}")
    family = family or default_family()
    rng = np.random.default_rng(seed)
    out = []
    for n in range(n_queries):
        task = family.task(n % family.n_tasks)
        q = family.sample_query(rng)
        where = {int(x): i for i, x in enumerate(q)}
        members = set(task.members)
        others = np.array([x for x in q if x not in members]) if pool == "other" else q
        pos = task.relation(q)
        seen: set[tuple[int, ...]] = set()
        dists = []
        tries = 0
        while len(dists) < corpus_size - 1:
            tries += 1
            if tries > 1000 * corpus_size:
                raise ConfigError(f"cannot draw {corpus_size - 1} distinct distractors")
            pick = rng.choice(others, len(pos), replace=False)
            d = tuple(sorted((int(x) for x in pick), key=where.__getitem__))
            if d != pos and d not in seen:
                seen.add(d)
                dists.append(d)
        out.append(EvalItem(task.task_id, task.instruction, tuple(int(x) for x in q), pos, tuple(dists)))
    return out
