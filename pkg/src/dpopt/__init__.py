"""Differentially private discrete prompt tuning with ensemble token voting."""

from dpopt.accountant import Budget, Ledger, PrivacyEvent, compose, summarize, to_eps_delta
from dpopt.data import Example, load_dataset
from dpopt.engine import (BudgetExhaustedError, EngineConfig, PromptCandidate, TuneReport,
                          evaluate, icl_prompt, tune)
from dpopt.leakscan import LeakMatch, scan
from dpopt.mechanisms import exp_mech_argmax, limited_domain
from dpopt.templates import BUILTIN_TASKS, TaskSpec, render_backward, render_forward
from dpopt.tokens import BOTTOM, EOS

__version__ = "0.1.0"

__all__ = [
    "BOTTOM", "BUILTIN_TASKS", "Budget", "BudgetExhaustedError", "EOS", "EngineConfig",
    "Example", "LeakMatch", "Ledger", "PrivacyEvent", "PromptCandidate", "TaskSpec",
    "TuneReport", "compose", "evaluate", "exp_mech_argmax", "icl_prompt", "limited_domain",
    "load_dataset", "render_backward", "render_forward", "scan", "summarize", "to_eps_delta",
    "tune",
]
