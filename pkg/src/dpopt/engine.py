"""Prompt tuning pipeline: forward pass, candidate generation, selection.

Three generation modes share one loop:

* ``dp-opt``: ensemble voting over disjoint demo subsets, each token released
  through LimitedDomain and charged to the train-scope ledger; the final prompt
  is picked with the exponential mechanism on validation accuracy.
* ``opt``: the same ensemble with plain argmax voting and argmax selection.
* ``dln-1``: one meta-prompt over a minibatch, sampled directly, selected by
  validation log-likelihood.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from dpopt import accountant as acct
from dpopt.accountant import Budget, Ledger, PrivacyEvent
from dpopt.backends.base import GenRequest, best_label
from dpopt.data import Example, partition, poisson_sample
from dpopt.mechanisms import (MechanismParams, SensitivitySpec, TokenHistogram, exp_mech_argmax,
                              limited_domain)
from dpopt.templates import PredictedExample, TaskSpec, pick_msg, render_backward, render_forward
from dpopt.tokens import BOTTOM, EOS, token_sort_key, token_to_json

logger = logging.getLogger(__name__)

DP_OPT, OPT, DLN1 = "dp-opt", "opt", "dln-1"
MODES = (DP_OPT, OPT, DLN1)

TERM_EOS = "eos"
TERM_DOUBLE_BOTTOM = "double-bottom"
TERM_TOKEN_LIMIT = "token-limit"
TERM_BUDGET = "budget"

# substream tags
_SPLIT, _GEN, _QUERY, _SELECT, _DLN = range(5)


class BudgetExhaustedError(RuntimeError):
    """Raised when the privacy budget stops tuning before a usable result."""

    def __init__(self, message: str, report: Optional["TuneReport"] = None):
        super().__init__(message)
        self.reason = TERM_BUDGET
        self.report = report


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


@dataclass
class EngineConfig:
    mode: str = DP_OPT
    n_candidates: int = 20
    max_tokens: int = 50
    subsample_rate: float = 1.0
    demos_per_subset: int = 5
    temperature: float = 1.1
    epsilon0: float = 1.8
    delta0: float = 5e-7
    selection_epsilon: float = 1.8
    budget_epsilon: float = 8.0
    budget_delta: Optional[float] = None  # None: 1 / |train|
    k_bar: int = 10
    delta_zero: int = 2
    delta_inf: int = 1
    domain_size: Optional[int] = None  # None: backend vocabulary size
    amplify_delta: bool = True
    repetition_penalty: float = 1.0
    dln_temperature: float = 0.7
    dln_batch_size: int = 20
    dln_iterations: int = 1
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == OPT:
            self.epsilon0 = math.inf
            self.selection_epsilon = math.inf
        if self.mode == DP_OPT:
            if not (0 < self.epsilon0 < math.inf):
                raise ValueError("dp-opt needs a finite positive epsilon0")
            if not (0 < self.selection_epsilon < math.inf):
                raise ValueError("dp-opt needs a finite positive selection_epsilon")
            if not 0 < self.delta0 < 1:
                raise ValueError("delta0 must lie in (0, 1)")
        if self.n_candidates < 1 or self.max_tokens < 1:
            raise ValueError("n_candidates and max_tokens must be >= 1")
        if not 0 <= self.subsample_rate <= 1:
            raise ValueError("subsample_rate must lie in [0, 1]")
        if self.demos_per_subset < 1 or self.dln_batch_size < 1 or self.dln_iterations < 1:
            raise ValueError("demos_per_subset, dln_batch_size and dln_iterations must be >= 1")
        if self.temperature < 0 or self.dln_temperature < 0:
            raise ValueError("temperatures must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def private(self) -> bool:
        return self.mode == DP_OPT

    def budget(self, n_train: int) -> Budget:
        delta = self.budget_delta if self.budget_delta is not None else 1.0 / max(n_train, 1)
        return Budget(self.budget_epsilon, delta)

    def mechanism_params(self) -> MechanismParams:
        return MechanismParams(self.epsilon0, self.delta0, self.k_bar)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and math.isinf(v):
                d[k] = "inf"
        return d


@dataclass
class PromptCandidate:
    text: str
    mode: str
    tokens_emitted: int
    terminated_by: str
    index: int = 0
    tokens: list = field(default_factory=list)
    msg: str = ""
    limited_domain_calls: int = 0
    val_correct: Optional[int] = None
    val_logprob: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "text": self.text,
            "mode": self.mode,
            "tokens_emitted": self.tokens_emitted,
            "tokens": [token_to_json(t) for t in self.tokens],
            "terminated_by": self.terminated_by,
            "msg": self.msg,
            "limited_domain_calls": self.limited_domain_calls,
            "val_correct": self.val_correct,
            "val_logprob": self.val_logprob,
        }


@dataclass
class VotingRound:
    """Trace record of one ensemble vote (for audits and tests)."""

    candidate: int
    position: int
    attempt: int
    histogram: TokenHistogram
    selected: object
    dropped: int


# ---------------------------------------------------------------------------
# Forward pass and evaluation
# ---------------------------------------------------------------------------


def predict(backend, pi: str, x: str, task: TaskSpec) -> Optional[str]:
    return best_label(backend.score_labels(render_forward(pi, x), list(task.classes)))


def forward_pass(train: Sequence[Example], pi: str, task: TaskSpec, backend) -> list[PredictedExample]:
    return [PredictedExample(ex.text, ex.label, predict(backend, pi, ex.text, task)) for ex in train]


def count_correct(pi: str, dataset: Sequence[Example], task: TaskSpec, backend) -> int:
    return sum(p.correct for p in forward_pass(dataset, pi, task, backend))


def evaluate(pi: str, dataset: Sequence[Example], task: TaskSpec, backend) -> float:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    return count_correct(pi, dataset, task, backend) / len(dataset)


def mean_gold_logprob(pi: str, dataset: Sequence[Example], task: TaskSpec, backend) -> float:
    total = 0.0
    for ex in dataset:
        scores = backend.score_labels(render_forward(pi, ex.text), list(task.classes))
        total += next(s.logprob for s in scores if s.label == ex.label)
    return total / len(dataset)


def icl_prompt(task: TaskSpec, demos: Sequence[Example]) -> str:
    """Initial instruction followed by demonstrations in forward-template layout.

    The forward template appends ``"\\n\\n{x}\\n\\nOutput: "``, so each demo
    renders as ``"{x}\\n\\nOutput: {y}"`` separated by blank lines.
    """
    parts = [task.initial_instruction] + [f"{d.text}\n\nOutput: {d.label}" for d in demos]
    return "\n\n".join(parts)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _vote(backend, parts, pi, z_text, history, msg, cfg, seed_key, pool):
    def query(j):
        rng = substream(cfg.seed, _QUERY, *seed_key, j)
        req = GenRequest(render_backward(parts[j], pi, z_text, msg), cfg.temperature,
                         cfg.repetition_penalty, rng, tuple(history))
        return backend.next_token(req)

    if pool is not None and len(parts) > 1:
        votes = list(pool.map(query, range(len(parts))))
    else:
        votes = [query(j) for j in range(len(parts))]
    return Counter(votes)


def dp_ens_gen(predicted: Sequence[PredictedExample], pi: str, cfg: EngineConfig, backend,
               ledger: Optional[Ledger] = None, *, budget: Optional[Budget] = None,
               index: int = 0, on_round: Optional[Callable[[VotingRound], None]] = None
               ) -> PromptCandidate:
    """Generate one candidate instruction by ensemble token voting.

    Every position queries the backend once per disjoint demo subset and
    releases the winning token: through LimitedDomain (charged to ``ledger``)
    in private mode, by plain argmax otherwise. A first BOTTOM at a position
    retries with a fresh batch; a second consecutive one ends the candidate.
    A denied budget check also ends it.
    """
    private = cfg.private
    if private and (ledger is None or budget is None):
        raise ValueError("private generation needs a ledger and a budget")
    rng = substream(cfg.seed, _GEN, index)
    msg = pick_msg(rng)
    domain = cfg.domain_size or backend.vocab_size
    sens = SensitivitySpec(cfg.delta_zero, cfg.delta_inf)
    params = cfg.mechanism_params() if private else None
    tokens: list = []
    z_text = ""
    failures = 0
    attempt = 0
    ld_calls = 0
    parts, dropped = [], 0
    need_batch = True
    terminated = TERM_TOKEN_LIMIT
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        while len(tokens) < cfg.max_tokens:
            position = len(tokens)
            if private or need_batch:
                pb = partition(poisson_sample(predicted, cfg.subsample_rate, rng),
                               cfg.demos_per_subset, rng)
                parts, dropped = pb.partitions, pb.dropped
                need_batch = False
            if private:
                # check before querying so a denied round costs no backend calls
                event = PrivacyEvent(acct.LIMITED_DOMAIN, cfg.epsilon0, cfg.delta0,
                                     cfg.subsample_rate, acct.TRAIN)
                if not acct.budget_check(ledger, event, budget):
                    terminated = TERM_BUDGET
                    break
            if not parts:
                logger.warning("candidate %d position %d: empty batch, round fails", index, position)
            votes = (_vote(backend, parts, pi, z_text, tokens, msg, cfg,
                           (index, position, attempt), pool) if parts else Counter())
            hist = TokenHistogram(votes, max(domain, len(votes) + 1))
            if private:
                selected, event = limited_domain(hist, params, sens, rng,
                                                 subsample_rate=cfg.subsample_rate)
                ledger.append(event)
                ld_calls += 1
            else:
                ranked = hist.ranked()
                selected = ranked[0][0] if ranked else BOTTOM
            if on_round is not None:
                on_round(VotingRound(index, position, attempt, hist, selected, dropped))
            if selected is EOS:
                terminated = TERM_EOS
                break
            if selected is BOTTOM:
                failures += 1
                attempt += 1
                if failures >= 2:
                    terminated = TERM_DOUBLE_BOTTOM
                    break
                need_batch = True
                continue
            failures = 0
            attempt = 0
            tokens.append(selected)
            z_text += selected
    finally:
        if pool is not None:
            pool.shutdown()
    return PromptCandidate(z_text, cfg.mode, len(tokens), terminated, index, tokens, msg, ld_calls)


def dln1_generate(batch: Sequence[PredictedExample], pi: str, backend, rng: np.random.Generator,
                  *, temperature: float = 0.7, max_tokens: int = 50,
                  repetition_penalty: float = 1.0, index: int = 0) -> PromptCandidate:
    """Sample one instruction from a single meta-prompt over ``batch`` (no privacy)."""
    if not batch:
        raise ValueError("DLN-1 generation needs a non-empty batch")
    msg = pick_msg(rng)
    tokens: list = []
    z_text = ""
    terminated = TERM_TOKEN_LIMIT
    while len(tokens) < max_tokens:
        tok = backend.next_token(GenRequest(render_backward(batch, pi, z_text, msg), temperature,
                                            repetition_penalty, rng, tuple(tokens)))
        if tok is EOS:
            terminated = TERM_EOS
            break
        tokens.append(tok)
        z_text += tok
    return PromptCandidate(z_text, DLN1, len(tokens), terminated, index, tokens, msg)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


def select_prompt(candidates: Sequence[PromptCandidate], val: Sequence[Example], task: TaskSpec,
                  cfg: EngineConfig, backend, ledger: Optional[Ledger] = None,
                  budget: Optional[Budget] = None) -> int:
    """Pick a candidate by validation performance; returns its position in ``candidates``.

    Empty candidates are skipped when a non-empty one exists (their emptiness
    is already a released output). ``val_correct`` is filled in on every
    evaluated candidate.
    """
    if not candidates:
        raise ValueError("no candidates to select from")
    pool = [i for i, c in enumerate(candidates) if c.text] or list(range(len(candidates)))
    for i in pool:
        candidates[i].val_correct = count_correct(candidates[i].text, val, task, backend)
    if cfg.mode == DLN1:
        if getattr(backend, "supports_logprobs", True):
            for i in pool:
                candidates[i].val_logprob = mean_gold_logprob(candidates[i].text, val, task, backend)
            scores = {i: candidates[i].val_logprob for i in pool}
        else:
            scores = {i: float(candidates[i].val_correct) for i in pool}
        return exp_mech_argmax(scores, math.inf, 1.0, None)[0]
    scores = {i: float(candidates[i].val_correct) for i in pool}
    if not cfg.private:
        return exp_mech_argmax(scores, math.inf, 1.0, None)[0]
    probe = PrivacyEvent(acct.MONOTONIC_EM, cfg.selection_epsilon, 0.0, 1.0, acct.VALIDATION)
    if not acct.budget_check(ledger, probe, budget):
        raise BudgetExhaustedError("validation budget cannot cover private prompt selection")
    chosen, event = exp_mech_argmax(scores, cfg.selection_epsilon, 1.0,
                                    substream(cfg.seed, _SELECT), monotonic=True,
                                    scope=acct.VALIDATION)
    ledger.append(event)
    return chosen


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------


@dataclass
class TuneReport:
    task: str
    mode: str
    seed: int
    chosen_prompt: str
    chosen_index: Optional[int]
    initial_instruction: str
    candidates: list
    privacy: dict
    budget: dict
    config: dict
    events: list

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "mode": self.mode,
            "seed": self.seed,
            "chosen_prompt": self.chosen_prompt,
            "chosen_index": self.chosen_index,
            "initial_instruction": self.initial_instruction,
            "candidates": [c.to_dict() for c in self.candidates],
            "privacy": self.privacy,
            "budget": self.budget,
            "config": self.config,
            "events": self.events,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def preflight(cfg: EngineConfig, n_train: int) -> None:
    """Reject private runs whose nominal delta mass already exceeds the budget."""
    if not cfg.private:
        return
    budget = cfg.budget(n_train)
    per_event = cfg.delta0 * (cfg.subsample_rate if cfg.amplify_delta else 1.0)
    if budget.delta <= cfg.n_candidates * cfg.max_tokens * per_event:
        raise BudgetExhaustedError(
            f"delta budget {budget.delta:g} <= N*L*delta0 = "
            f"{cfg.n_candidates * cfg.max_tokens * per_event:g}")


def _report(task, cfg, pi0, candidates, chosen, ledger, budget) -> TuneReport:
    privacy = {}
    if ledger is not None and budget is not None:
        privacy = {k: v.to_dict() for k, v in acct.summarize(ledger, budget.delta).items()}
        privacy["amplify_delta"] = ledger.amplify_delta
    return TuneReport(
        task=task.name, mode=cfg.mode, seed=cfg.seed,
        chosen_prompt=candidates[chosen].text if chosen is not None else "",
        chosen_index=candidates[chosen].index if chosen is not None else None,
        initial_instruction=pi0, candidates=list(candidates), privacy=privacy,
        budget={"epsilon": budget.epsilon, "delta": budget.delta} if budget else {},
        config=cfg.to_dict(),
        events=[e.to_dict() for e in ledger.events] if ledger is not None else [],
    )


def tune(cfg: EngineConfig, task: TaskSpec, train: Sequence[Example], val: Sequence[Example],
         backend, *, ledger: Optional[Ledger] = None,
         on_round: Optional[Callable[[VotingRound], None]] = None) -> TuneReport:
    """Run one full tuning job and return its report.

    Raises:
        BudgetExhaustedError: private mode could not release a single token,
            or the validation budget cannot pay for selection. The partial
            report is attached.
    """
    if not train:
        raise ValueError("training set is empty")
    if not val:
        raise ValueError("validation set is empty")
    budget = cfg.budget(len(train))
    if ledger is None:
        ledger = Ledger(amplify_delta=cfg.amplify_delta)
    pi0 = task.initial_instruction
    if cfg.mode in (DP_OPT, OPT):
        expected_j = cfg.subsample_rate * len(train) / cfg.demos_per_subset
        if expected_j < 1:
            logger.warning("expected partitions per round is %.2f; rounds will mostly fail",
                           expected_j)
        predicted = forward_pass(train, pi0, task, backend)
        candidates = [dp_ens_gen(predicted, pi0, cfg, backend, ledger, budget=budget, index=n,
                                 on_round=on_round)
                      for n in range(cfg.n_candidates)]
        if cfg.private and all(c.tokens_emitted == 0 for c in candidates) and \
                any(c.terminated_by == TERM_BUDGET for c in candidates):
            raise BudgetExhaustedError("privacy budget exhausted before any token was released",
                                       _report(task, cfg, pi0, candidates, None, ledger, budget))
        try:
            chosen = select_prompt(candidates, val, task, cfg, backend, ledger, budget)
        except BudgetExhaustedError as exc:
            exc.report = _report(task, cfg, pi0, candidates, None, ledger, budget)
            raise
        return _report(task, cfg, pi0, candidates, chosen, ledger, budget)

    # DLN-1: no privacy accounting
    pi = pi0
    rng = substream(cfg.seed, _DLN)
    all_candidates: list[PromptCandidate] = []
    chosen_cand = None
    for _ in range(cfg.dln_iterations):
        predicted = forward_pass(train, pi, task, backend)
        idx = rng.permutation(len(predicted))[: cfg.dln_batch_size]
        batch = [predicted[i] for i in sorted(idx)]
        candidates = [dln1_generate(batch, pi, backend, rng, temperature=cfg.dln_temperature,
                                    max_tokens=cfg.max_tokens,
                                    repetition_penalty=cfg.repetition_penalty,
                                    index=len(all_candidates) + n)
                      for n in range(cfg.n_candidates)]
        all_candidates += candidates
        chosen_cand = candidates[select_prompt(candidates, val, task, cfg, backend)]
        pi = chosen_cand.text
    chosen = all_candidates.index(chosen_cand)
    return _report(task, cfg, pi0, all_candidates, chosen, None, None)
