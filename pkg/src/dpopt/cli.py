"""``dpopt`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 authentication,
4 privacy budget, 5 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from dpopt import accountant as acct
from dpopt.backends import AuthError, BackendError, EndpointConfig, HttpBackend
from dpopt.config import BackendSection, ConfigError, RunConfig, build_backend, load_config
from dpopt.data import DatasetError, InsufficientExamplesError, balanced_demos, load_dataset, \
    split_validation
from dpopt.engine import BudgetExhaustedError, evaluate, icl_prompt, preflight, substream, tune
from dpopt.leakscan import DEFAULT_MIN_OVERLAP, scan
from dpopt.templates import BUILTIN_TASKS

logger = logging.getLogger("dpopt")

EXIT_OK, EXIT_CONFIG, EXIT_AUTH, EXIT_BUDGET, EXIT_BACKEND = 0, 2, 3, 4, 5
SWEEP_TOKENS = (25, 50, 100, 200)


def _backend(cfg: RunConfig, section: BackendSection, override: str | None):
    if override is not None and override != section.kind:
        section = section.model_copy(update={"kind": override})
        section = BackendSection.model_validate(section.model_dump())
    backend = build_backend(section, cfg.resolve)
    if section.kind == "http":
        logger.warning("HTTP backend: outputs are not reproducible across runs")
    return backend


def _train_val(cfg: RunConfig, task):
    train_path = cfg.resolve(cfg.data.train)
    if train_path is None:
        raise ConfigError("data.train is required")
    train = load_dataset(train_path, task)
    if cfg.data.validation is not None:
        return train, load_dataset(cfg.resolve(cfg.data.validation), task)
    return split_validation(train, cfg.data.validation_fraction, substream(cfg.seed, 99))


def _print_privacy(privacy: dict) -> None:
    for scope in (acct.TRAIN, acct.VALIDATION):
        s = privacy.get(scope)
        if s:
            print(f"  {scope:<10} events={s['events']:<5} epsilon={s['epsilon']:.4f} "
                  f"delta={s['delta']:.3g} order={s['optimal_order']}")


def cmd_tune(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    task = cfg.task_spec()
    ecfg = cfg.engine_config()
    train, val = _train_val(cfg, task)
    if cfg.preflight:
        preflight(ecfg, len(train))
    backend = _backend(cfg, cfg.backend, args.backend)
    out = Path(args.output) if args.output else cfg.resolve(cfg.output or "report.json")
    try:
        report = tune(ecfg, task, train, val, backend)
    except BudgetExhaustedError as exc:
        if exc.report is not None:
            out.write_text(exc.report.to_json(), encoding="utf-8")
        raise
    out.write_text(report.to_json(), encoding="utf-8")
    print(f"chosen prompt: {report.chosen_prompt!r}")
    _print_privacy(report.privacy)
    print(f"report written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    prompt_path = Path(args.prompt_file)
    if not prompt_path.is_file():
        raise ConfigError(f"prompt file not found: {prompt_path}")
    prompt = prompt_path.read_text(encoding="utf-8").rstrip("\n")
    if args.config:
        cfg = load_config(args.config)
        section = cfg.eval_backend or cfg.backend
        task = cfg.task_spec()
        backend = _backend(cfg, section, args.backend)
    else:
        if args.task is None:
            raise ConfigError("--task is required without --config")
        if args.task not in BUILTIN_TASKS:
            raise ConfigError(f"unknown task {args.task!r}")
        task = BUILTIN_TASKS[args.task]
        backend = _flag_backend(args)
    dataset = load_dataset(args.dataset, task)
    acc = evaluate(prompt, dataset, task, backend)
    correct = round(acc * len(dataset))
    print(f"accuracy: {acc:.4f} ({correct}/{len(dataset)})")
    if args.output:
        Path(args.output).write_text(json.dumps(
            {"prompt": prompt, "dataset": str(args.dataset), "accuracy": acc,
             "correct": correct, "examples": len(dataset)}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    return EXIT_OK


def _flag_backend(args):
    kind = args.backend or "ngram"
    if kind == "http":
        if not args.base_url or not args.model:
            raise ConfigError("--base-url and --model are required for the http backend")
        return HttpBackend(EndpointConfig(args.base_url, args.model, api_key_env=args.api_key_env))
    section = BackendSection(kind=kind, corpus=args.corpus, table=args.table, order=args.order)
    return build_backend(section)


def _account_rows(ecfg, n_candidates: int, max_tokens: int, budget: acct.Budget) -> dict:
    n = n_candidates * max_tokens
    events = [acct.PrivacyEvent(acct.LIMITED_DOMAIN, ecfg.epsilon0, ecfg.delta0,
                                ecfg.subsample_rate, acct.TRAIN)] * n
    events.append(acct.PrivacyEvent(acct.MONOTONIC_EM, ecfg.selection_epsilon, 0.0, 1.0,
                                    acct.VALIDATION))
    ledger = acct.Ledger(events, amplify_delta=ecfg.amplify_delta)
    return acct.summarize(ledger, budget.delta)


def cmd_account(args) -> int:
    cfg = load_config(args.config)
    ecfg = cfg.engine_config()
    if not ecfg.private:
        raise ConfigError("account needs engine.mode: dp-opt")
    if ecfg.budget_delta is None:
        n_train = args.train_size
        if n_train is None:
            task = cfg.task_spec()
            n_train = len(_train_val(cfg, task)[0])
        budget = ecfg.budget(n_train)
    else:
        budget = ecfg.budget(1)
    print(f"budget: epsilon={budget.epsilon:g} delta={budget.delta:.6g}; "
          f"N={ecfg.n_candidates} q={ecfg.subsample_rate:.6g} epsilon0={ecfg.epsilon0:g} "
          f"delta0={ecfg.delta0:g} selection_epsilon={ecfg.selection_epsilon:g}")
    token_counts = SWEEP_TOKENS if args.sweep_tokens else (ecfg.max_tokens,)
    print(f"{'L':>5} {'events':>7} {'train_eps':>10} {'train_delta':>12} {'order':>6} "
          f"{'val_eps':>9} {'within':>7}")
    rows = []
    for L in token_counts:
        s = _account_rows(ecfg, ecfg.n_candidates, L, budget)
        tr, va = s[acct.TRAIN], s[acct.VALIDATION]
        ok = tr.epsilon <= budget.epsilon and va.epsilon <= budget.epsilon
        print(f"{L:>5} {tr.events:>7} {tr.epsilon:>10.4f} {tr.delta:>12.4g} "
              f"{str(tr.order):>6} {va.epsilon:>9.4f} {'yes' if ok else 'no':>7}")
        rows.append({"max_tokens": L, acct.TRAIN: tr.to_dict(), acct.VALIDATION: va.to_dict(),
                     "within_budget": ok})
    if args.output:
        Path(args.output).write_text(json.dumps(
            {"budget": {"epsilon": budget.epsilon, "delta": budget.delta}, "rows": rows},
            indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _read_texts(path) -> list[str]:
    texts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                raise DatasetError("record needs a string field 'text'", lineno)
            texts.append(rec["text"])
    return texts


def cmd_leakscan(args) -> int:
    prompt_path = Path(args.prompt_file)
    if not prompt_path.is_file():
        raise ConfigError(f"prompt file not found: {prompt_path}")
    if args.min_overlap < 3:
        raise ConfigError("--min-overlap must be >= 3")
    try:
        texts = _read_texts(args.dataset)
    except FileNotFoundError:
        raise ConfigError(f"dataset not found: {args.dataset}") from None
    matches = scan(prompt_path.read_text(encoding="utf-8"), texts, args.min_overlap)
    if args.json:
        print(json.dumps([m.to_dict() for m in matches], indent=2))
    else:
        print(f"{len(matches)} match(es) at min_overlap={args.min_overlap}")
        for m in matches:
            print(f"  example {m.train_example_index}: overlap={m.overlap_tokens} "
                  f"jaccard={m.jaccard:.3f} span={m.prompt_span!r}")
    return EXIT_OK


def cmd_icl(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    task = cfg.task_spec()
    shots = cfg.icl.shots if args.shots is None else args.shots
    train, _ = _train_val(cfg, task)
    test_path = cfg.resolve(cfg.data.test)
    if test_path is None:
        raise ConfigError("data.test is required for icl")
    test = load_dataset(test_path, task)
    demos = balanced_demos(train, shots, task.classes, substream(cfg.seed, 98))
    prompt = icl_prompt(task, demos)
    backend = _backend(cfg, cfg.eval_backend or cfg.backend, args.backend)
    acc = evaluate(prompt, test, task, backend)
    print(f"{shots}-shot accuracy: {acc:.4f} ({round(acc * len(test))}/{len(test)})")
    if args.output:
        Path(args.output).write_text(json.dumps(
            {"shots": shots, "prompt": prompt, "accuracy": acc, "examples": len(test),
             "demos": [{"text": d.text, "label": d.label} for d in demos]},
            indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpopt", description="Differentially private prompt tuning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tune", help="tune an instruction and write a report")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--output")
    t.add_argument("--backend", choices=("ngram", "table", "http"))
    t.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", help="evaluate a prompt on a labelled dataset")
    e.add_argument("prompt_file")
    e.add_argument("dataset")
    e.add_argument("--config")
    e.add_argument("--task")
    e.add_argument("--backend", choices=("ngram", "table", "http"))
    e.add_argument("--corpus")
    e.add_argument("--order", type=int, default=3)
    e.add_argument("--table")
    e.add_argument("--base-url")
    e.add_argument("--model")
    e.add_argument("--api-key-env", default="DPOPT_API_KEY")
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("account", help="worst-case privacy cost of a configuration")
    a.add_argument("config")
    a.add_argument("--sweep-tokens", action="store_true",
                   help=f"tabulate max_tokens in {SWEEP_TOKENS}")
    a.add_argument("--train-size", type=int)
    a.add_argument("--output")
    a.set_defaults(func=cmd_account)

    s = sub.add_parser("leakscan", help="find training text copied into a prompt")
    s.add_argument("prompt_file")
    s.add_argument("dataset")
    s.add_argument("--min-overlap", type=int, default=DEFAULT_MIN_OVERLAP)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_leakscan)

    i = sub.add_parser("icl", help="evaluate an in-context-learning baseline")
    i.add_argument("config")
    i.add_argument("--shots", type=int)
    i.add_argument("--seed", type=int)
    i.add_argument("--backend", choices=("ngram", "table", "http"))
    i.add_argument("--output")
    i.set_defaults(func=cmd_icl)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, InsufficientExamplesError, FileNotFoundError,
            ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuthError as exc:
        print(f"authentication error: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except (BudgetExhaustedError, acct.BudgetError) as exc:
        print(f"privacy budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
