"""Prompt templates: the forward classification wrapper and the backward meta-prompt."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

FORWARD_ANSWER_SLOT = "Output: "

BACKWARD_PREAMBLE = (
    "A student is completing a task that requires producing a text output from a text input. "
    "The student receives an instruction that describes how to produce the output given each "
    "input. The student has made some errors. Your task is to improve the instruction such that "
    "the student can fix the errors."
)
BACKWARD_ANSWER_SLOT = "Improved Instruction: "

# verbatim, including spelling and missing final periods
MSGS = (
    "Clarify the instruction by adding few words or a short sentence. Be concise",
    "Improve the instruction by providing examples on how to solve the task. Be concise.",
    "Shorten the instruction by removing superflous words or sentences.",
    "Rewrite the instruction by providing detailed information to avoid ambiguity. Be concise",
)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    classes: tuple[str, ...]
    initial_instruction: str

    def __post_init__(self):
        classes = tuple(self.classes)
        object.__setattr__(self, "classes", classes)
        if not classes or any(not c for c in classes):
            raise ValueError(f"task {self.name!r}: classes must be non-empty strings")
        if len(set(classes)) != len(classes):
            raise ValueError(f"task {self.name!r}: classes must be distinct")


BUILTIN_TASKS = {
    "sst2": TaskSpec(
        "sst2", ("negative", "positive"),
        "Classify the input text as positive or negative.",
    ),
    "trec": TaskSpec(
        "trec", ("description", "entity", "expression", "human", "location", "number"),
        "Read the following question, then choose whether it is about a description, entity, "
        "expression, human, location or number.",
    ),
    "mpqa": TaskSpec(
        "mpqa", ("negative", "positive"),
        "Read the following review, then choose whether it is negative or positive.",
    ),
    "disaster": TaskSpec(
        "disaster", ("not relevant", "relevant"),
        "Read the following sentence, then choose whether it is relevant to a disaster.",
    ),
}


@dataclass(frozen=True)
class PredictedExample:
    x: str
    y: str
    y_hat: Optional[str]  # None when a remote backend's completion matched no label

    @property
    def correct(self) -> bool:
        return self.y_hat == self.y


def render_forward(pi: str, x: str) -> str:
    return f"{pi}\n\n{x}\n\n{FORWARD_ANSWER_SLOT}"


def render_backward(examples: Sequence[PredictedExample], pi: str, z: str, msg: str) -> str:
    """Render the meta-prompt asking for an improved instruction.

    Sections are separated by blank lines, as are the examples within a
    section. Successes and errors keep their headers even when empty. The
    partial generation ``z`` is appended directly after the answer slot, so
    ``render_backward(S, pi, a + b, m) == render_backward(S, pi, a, m) + b``.
    """
    if not examples:
        raise ValueError("backward template needs at least one example")
    successes = [f"Input: {ex.x}\nCorrect Output: {ex.y}" for ex in examples if ex.correct]
    errors = [
        f"Input: {ex.x}\nStudent Output: {'' if ex.y_hat is None else ex.y_hat}\n"
        f"Correct Ouput: {ex.y}"
        for ex in examples if not ex.correct
    ]
    blocks = [
        BACKWARD_PREAMBLE,
        "This was the instruction.",
        f"Instruction: {pi}",
        "\n".join(["# Student successes"] + (["\n\n".join(successes)] if successes else [])),
        "\n".join(["# Student errors"] + (["\n\n".join(errors)] if errors else [])),
        f"Improve the instruction to fix the student errors. {msg}\n{BACKWARD_ANSWER_SLOT}{z}",
    ]
    return "\n\n".join(blocks)


def pick_msg(rng: np.random.Generator) -> str:
    return MSGS[int(rng.integers(len(MSGS)))]
