"""Synthetic tasks with deterministic verifiers.

Token layout for a vocabulary of size ``V``: ids ``0 .. V-6`` are numbers, the
last five ids are ``+``, ``*``, ``=``, ``<bos>`` and ``<sep>``.

MOD_ARITH prompts are ``<bos> a op b =`` with a single answer token
``(a op b) mod p``. SEQ_COPY prompts are ``<bos> d1 .. dL <sep>`` and the
answer is the digit string reversed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

__all__ = ["TaskKind", "TaskSpec", "Vocab"]

N_SPECIAL = 5


class TaskKind(str, Enum):
    MOD_ARITH = "MOD_ARITH"
    SEQ_COPY = "SEQ_COPY"


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < N_SPECIAL + 2:
            raise ValueError(f"vocabulary of {self.size} tokens is too small")

    @property
    def n_numbers(self) -> int:
        return self.size - N_SPECIAL

    @property
    def plus(self) -> int:
        return self.size - 5

    @property
    def times(self) -> int:
        return self.size - 4

    @property
    def eq(self) -> int:
        return self.size - 3

    @property
    def bos(self) -> int:
        return self.size - 2

    @property
    def sep(self) -> int:
        return self.size - 1

    def token_str(self, tok: int) -> str:
        tok = int(tok)
        special = {self.plus: "+", self.times: "*", self.eq: "=", self.bos: "<bos>", self.sep: "<sep>"}
        return special.get(tok, str(tok))


@dataclass(frozen=True)
class TaskSpec:
    """A verifiable task.

    ``min_digits``/``max_digits`` bound the SEQ_COPY prompt length; MOD_ARITH
    always has a five-token prompt and a one-token answer.
    """

    kind: TaskKind = TaskKind.MOD_ARITH
    modulus: int = 17
    ops: str = "+*"
    min_digits: int = 3
    max_digits: int = 3
    vocab_size: int = 24

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        vocab = Vocab(self.vocab_size)
        if self.kind is TaskKind.MOD_ARITH:
            if not 2 <= self.modulus <= vocab.n_numbers:
                raise ValueError(f"modulus {self.modulus} needs {self.modulus} number tokens; "
                                 f"vocabulary has {vocab.n_numbers}")
            if not self.ops or set(self.ops) - {"+", "*"}:
                raise ValueError(f"ops must be a non-empty subset of '+*', got {self.ops!r}")
        else:
            if not 1 <= self.min_digits <= self.max_digits:
                raise ValueError("need 1 <= min_digits <= max_digits")
            if vocab.n_numbers < 10:
                raise ValueError("SEQ_COPY needs at least 10 number tokens")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def answer_len(self, prompt) -> int:
        if self.kind is TaskKind.MOD_ARITH:
            return 1
        return len(prompt) - 2

    def max_prompt_len(self) -> int:
        return 5 if self.kind is TaskKind.MOD_ARITH else self.max_digits + 2

    def max_answer_len(self) -> int:
        return 1 if self.kind is TaskKind.MOD_ARITH else self.max_digits

    def answer(self, prompt) -> np.ndarray:
        """The unique correct completion for ``prompt``."""
        prompt = [int(t) for t in prompt]
        v = self.vocab
        if self.kind is TaskKind.MOD_ARITH:
            if len(prompt) != 5 or prompt[0] != v.bos or prompt[4] != v.eq or prompt[2] not in (v.plus, v.times):
                raise ValueError(f"malformed MOD_ARITH prompt {prompt}")
            a, op, b = prompt[1], prompt[2], prompt[3]
            val = a + b if op == v.plus else a * b
            return np.array([val % self.modulus])
        if len(prompt) < 3 or prompt[0] != v.bos or prompt[-1] != v.sep:
            raise ValueError(f"malformed SEQ_COPY prompt {prompt}")
        return np.array(prompt[1:-1][::-1])

    def reward(self, prompt, completion) -> float:
        """1.0 when the completion starts with the exact answer, else 0.0."""
        ans = self.answer(prompt)
        completion = np.asarray(completion).reshape(-1)
        if completion.shape[0] < ans.shape[0]:
            return 0.0
        return float(np.array_equal(completion[: ans.shape[0]], ans))

    def sample_prompts(self, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        v = self.vocab
        prompts = []
        for _ in range(n):
            if self.kind is TaskKind.MOD_ARITH:
                a, b = rng.integers(0, self.modulus, size=2)
                op = v.plus if self.ops[rng.integers(len(self.ops))] == "+" else v.times
                prompts.append(np.array([v.bos, a, op, b, v.eq], dtype=np.int64))
            else:
                length = int(rng.integers(self.min_digits, self.max_digits + 1))
                digits = rng.integers(0, 10, size=length)
                prompts.append(np.concatenate([[v.bos], digits, [v.sep]]).astype(np.int64))
        return prompts
