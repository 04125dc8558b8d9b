"""Experiment orchestration: evaluation, model selection, sweeps, reports.

The harness owns everything around the decoding loop: loading evaluation
items, scoring models individually and as an ensemble, picking the main
model on a validation split, sweeping the step size / anchor count /
iteration budget, running the normalization ablation, and writing the
delimited report rows that the golden regression files pin down.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import ModelBackend
from .decode import EnsembleSession, generate, score_option
from .errors import ArgumentError, ConfigError, RelfuseError
from .fusion import EnsembleConfig
from .relspace import RelativeMatrix, build_relative_matrix, normalize_rows
from .vocab import AnchorSet, common_tokens, select_anchors

logger = logging.getLogger(__name__)

DEFAULT_ETA_GRID = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)

REPORT_HEADER = (
    "condition",
    "split",
    "model",
    "accuracy",
    "delta",
    "eta",
    "steps",
    "anchors",
    "seed",
)


@dataclass(frozen=True)
class EvalItem:
    """One benchmark item: free generation (em) or option scoring (mc)."""

    kind: str
    prompt: str
    answer: str | None = None
    options: tuple[str, ...] | None = None
    gold: int | None = None

    def __post_init__(self):
        if self.kind == "em":
            if not isinstance(self.answer, str):
                raise ArgumentError("em item needs a string answer")
        elif self.kind == "mc":
            if self.options is None or len(self.options) < 2:
                raise ArgumentError("mc item needs at least 2 options")
            if any(not opt for opt in self.options):
                raise ArgumentError("mc options must be non-empty")
            if self.gold is None or not 0 <= self.gold < len(self.options):
                raise ArgumentError(
                    f"mc gold index {self.gold} out of range for "
                    f"{len(self.options) if self.options else 0} options"
                )
        else:
            raise ArgumentError(f"unknown item kind {self.kind!r}")


def save_dataset(items: Sequence[EvalItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            if item.kind == "em":
                rec = {"kind": "em", "prompt": item.prompt, "answer": item.answer}
            else:
                rec = {
                    "kind": "mc",
                    "prompt": item.prompt,
                    "options": list(item.options),
                    "gold": item.gold,
                }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> list[EvalItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if kind == "em":
                    items.append(
                        EvalItem(kind="em", prompt=rec["prompt"], answer=rec["answer"])
                    )
                else:
                    items.append(
                        EvalItem(
                            kind="mc",
                            prompt=rec["prompt"],
                            options=tuple(rec["options"]),
                            gold=int(rec["gold"]),
                        )
                    )
            except (KeyError, ValueError, TypeError, ArgumentError) as exc:
                raise ConfigError(
                    f"{path}: bad dataset record on line {lineno + 1}: {exc}"
                ) from exc
    if not items:
        raise ConfigError(f"{path}: empty dataset")
    return items


@dataclass
class ExperimentSetup:
    """Everything needed to run one ensemble condition.

    Holds both the normalized matrices (the default pipeline) and the raw
    cosine matrices (the ablation arm).  Immutable in spirit: sweep
    helpers derive modified copies instead of mutating.
    """

    backends: list[ModelBackend]
    config: EnsembleConfig
    main: int
    anchor_set: AnchorSet
    matrices: list[RelativeMatrix]
    raw_matrices: list[RelativeMatrix]
    common: set[bytes]
    anchors_label: str
    seed: int
    max_tokens: int = 32
    stop_surfaces: tuple = ()

    def ensemble_session(self, raw: bool = False) -> EnsembleSession:
        return EnsembleSession(
            self.backends,
            self.raw_matrices if raw else self.matrices,
            self.config,
            main=self.main,
            max_tokens=self.max_tokens,
            stop_surfaces=self.stop_surfaces,
            allow_raw=raw,
        )

    def solo_session(self, index: int) -> EnsembleSession:
        """A one-model ensemble: identical to that model's greedy decode."""
        return EnsembleSession(
            [self.backends[index]],
            [self.matrices[index]],
            self.config,
            main=0,
            max_tokens=self.max_tokens,
            stop_surfaces=self.stop_surfaces,
        )

    def with_config(self, **changes) -> "ExperimentSetup":
        return dataclasses.replace(
            self, config=dataclasses.replace(self.config, **changes)
        )

    def with_anchors(self, strategy: str, k: int | None, seed: int) -> "ExperimentSetup":
        """Rebuild both matrix stacks over a fresh anchor selection."""
        vocabularies = [b.vocabulary for b in self.backends]
        anchor_set = select_anchors(
            self.common, vocabularies, strategy=strategy, k=k, seed=seed
        )
        raw = [
            build_relative_matrix(b.embeddings, anchor_set, i)
            for i, b in enumerate(self.backends)
        ]
        label = "full" if strategy == "full" else f"sample:{k}"
        return dataclasses.replace(
            self,
            anchor_set=anchor_set,
            matrices=[normalize_rows(m) for m in raw],
            raw_matrices=raw,
            anchors_label=label,
        )


def build_setup(
    backends: Sequence[ModelBackend],
    config: EnsembleConfig | None = None,
    strategy: str = "full",
    k: int | None = None,
    seed: int = 0,
    dev_items: Sequence[EvalItem] | None = None,
    max_tokens: int = 32,
    stop_surfaces: Sequence[str] = (),
) -> ExperimentSetup:
    """Assemble matrices and resolve the main model for an ensemble run."""
    if not backends:
        raise ArgumentError("need at least one backend")
    config = config or EnsembleConfig()
    for backend in backends:
        if backend.embeddings is None:
            raise ArgumentError(
                f"model {backend.name!r} has no embedding table; "
                "relative matrices cannot be built"
            )
    vocabularies = [b.vocabulary for b in backends]
    if len(backends) == 1:
        common = vocabularies[0].surfaces()
    else:
        common = common_tokens(vocabularies)
    anchor_set = select_anchors(common, vocabularies, strategy=strategy, k=k, seed=seed)
    raw = [
        build_relative_matrix(b.embeddings, anchor_set, i)
        for i, b in enumerate(backends)
    ]
    setup = ExperimentSetup(
        backends=list(backends),
        config=config,
        main=0,
        anchor_set=anchor_set,
        matrices=[normalize_rows(m) for m in raw],
        raw_matrices=raw,
        common=set(common),
        anchors_label="full" if strategy == "full" else f"sample:{k}",
        seed=seed,
        max_tokens=max_tokens,
        stop_surfaces=tuple(stop_surfaces),
    )
    if config.main == "auto":
        if dev_items is None:
            raise ArgumentError(
                "main='auto' needs dev items to select the main model"
            )
        setup.main = select_main_model(setup, dev_items)
    else:
        if not 0 <= config.main < len(backends):
            raise ArgumentError(
                f"main index {config.main} out of range 0..{len(backends) - 1}"
            )
        setup.main = int(config.main)
    return setup


def _score_mc_item(session: EnsembleSession, item: EvalItem) -> int:
    """Pick the option with the best length-normalized log likelihood."""
    main_tok = session.tokenizers[session.main]
    prompt_len = len(main_tok.encode(item.prompt))
    scores = []
    for option in item.options:
        n_forced = len(main_tok.encode(item.prompt + option)) - prompt_len
        total = score_option(session, item.prompt, option)
        scores.append(total / max(n_forced, 1))
    return int(np.argmax(scores))  # ties resolve to the lowest option index


def evaluate(
    setup: ExperimentSetup,
    items: Sequence[EvalItem],
    model: int | None = None,
    raw: bool = False,
) -> float:
    """Accuracy of the ensemble (model=None) or one model run solo.

    Exact-match items compare the generated text to the answer after
    trimming surrounding whitespace; multiple-choice items pick the
    highest-scoring option.  An item whose evaluation raises is counted
    as incorrect and logged.
    """
    if not items:
        raise ArgumentError("cannot evaluate an empty item list")
    correct = 0
    for index, item in enumerate(items):
        session = (
            setup.ensemble_session(raw=raw)
            if model is None
            else setup.solo_session(model)
        )
        try:
            if item.kind == "em":
                text, _ = generate(session, item.prompt)
                if text.strip() == item.answer.strip():
                    correct += 1
            else:
                if _score_mc_item(session, item) == item.gold:
                    correct += 1
        except RelfuseError as exc:
            logger.warning("item %d failed, counted incorrect: %s", index, exc)
    return correct / len(items)


def select_main_model(
    setup: ExperimentSetup, dev_items: Sequence[EvalItem]
) -> int:
    """Index of the backend with the best individual dev accuracy.

    Ties go to the lowest index.  Composed from evaluate: there is no
    separate scoring path.
    """
    if not dev_items:
        raise ArgumentError("cannot select the main model on an empty dev set")
    best_index = 0
    best_accuracy = -1.0
    for index in range(len(setup.backends)):
        accuracy = evaluate(setup, dev_items, model=index)
        logger.info(
            "dev accuracy %.4f for model %r", accuracy, setup.backends[index].name
        )
        if accuracy > best_accuracy:
            best_index = index
            best_accuracy = accuracy
    return best_index


@dataclass(frozen=True)
class ReportRow:
    """One line of the delimited report."""

    condition: str
    split: str
    model: str
    accuracy: float
    delta: float | None
    eta: float
    steps: int
    anchors: str
    seed: int

    def as_record(self) -> list[str]:
        return [
            self.condition,
            self.split,
            self.model,
            f"{self.accuracy:.6f}",
            "" if self.delta is None else f"{self.delta:.6f}",
            f"{self.eta:g}",
            str(self.steps),
            self.anchors,
            str(self.seed),
        ]


def write_report(rows: Sequence[ReportRow], path: str | Path) -> None:
    """CSV with the fixed header; formatting is pinned for reproducibility."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for row in rows:
            writer.writerow(row.as_record())


def _row(setup: ExperimentSetup, condition: str, split: str, model: str,
         accuracy: float, delta: float | None = None,
         eta: float | None = None, steps: int | None = None,
         anchors: str | None = None) -> ReportRow:
    return ReportRow(
        condition=condition,
        split=split,
        model=model,
        accuracy=accuracy,
        delta=delta,
        eta=setup.config.eta if eta is None else eta,
        steps=setup.config.steps if steps is None else steps,
        anchors=setup.anchors_label if anchors is None else anchors,
        seed=setup.seed,
    )


def run_report(
    setup: ExperimentSetup,
    dev_items: Sequence[EvalItem],
    test_items: Sequence[EvalItem],
) -> list[ReportRow]:
    """Individual and ensemble accuracy on both splits.

    The ensemble rows carry delta = ensemble accuracy minus the best
    individual accuracy on the same split (computed here, never stored).
    """
    rows: list[ReportRow] = []
    best = {"dev": -1.0, "test": -1.0}
    for split, items in (("dev", dev_items), ("test", test_items)):
        for index, backend in enumerate(setup.backends):
            accuracy = evaluate(setup, items, model=index)
            best[split] = max(best[split], accuracy)
            rows.append(_row(setup, "individual", split, backend.name, accuracy))
    for split, items in (("dev", dev_items), ("test", test_items)):
        accuracy = evaluate(setup, items)
        rows.append(
            _row(
                setup,
                "ensemble",
                split,
                "ensemble",
                accuracy,
                delta=accuracy - best[split],
            )
        )
    return rows


def sweep_eta(
    setup: ExperimentSetup,
    dev_items: Sequence[EvalItem],
    grid: Sequence[float] = DEFAULT_ETA_GRID,
) -> tuple[list[ReportRow], float]:
    """Dev accuracy per step size; best step size breaks ties downward."""
    if not grid:
        raise ArgumentError("eta grid must be non-empty")
    if any(value < 0 for value in grid):
        raise ArgumentError("eta grid values must be >= 0")
    rows = []
    best_eta = None
    best_accuracy = -1.0
    for eta in grid:
        accuracy = evaluate(setup.with_config(eta=eta), dev_items)
        rows.append(_row(setup, "sweep-eta", "dev", "ensemble", accuracy, eta=eta))
        better = accuracy > best_accuracy
        tied_smaller = accuracy == best_accuracy and eta < best_eta
        if better or tied_smaller:
            best_accuracy = accuracy
            best_eta = eta
    return rows, float(best_eta)


def sweep_steps(
    setup: ExperimentSetup,
    dev_items: Sequence[EvalItem],
    step_grid: Sequence[int],
) -> tuple[list[ReportRow], int]:
    """Dev accuracy per iteration budget."""
    if not step_grid:
        raise ArgumentError("step grid must be non-empty")
    if any(value < 0 for value in step_grid):
        raise ArgumentError("step grid values must be >= 0")
    rows = []
    best_steps = None
    best_accuracy = -1.0
    for steps in step_grid:
        accuracy = evaluate(setup.with_config(steps=steps), dev_items)
        rows.append(
            _row(setup, "sweep-steps", "dev", "ensemble", accuracy, steps=steps)
        )
        better = accuracy > best_accuracy
        tied_smaller = accuracy == best_accuracy and steps < best_steps
        if better or tied_smaller:
            best_accuracy = accuracy
            best_steps = steps
    return rows, int(best_steps)


def sweep_anchor_count(
    setup: ExperimentSetup,
    dev_items: Sequence[EvalItem],
    counts: Sequence[int],
    seed: int | None = None,
) -> list[ReportRow]:
    """Dev accuracy per sampled anchor-set size, plus the full set."""
    limit = len(setup.common)
    sample_seed = setup.seed if seed is None else seed
    rows = []
    for count in counts:
        if not 1 <= count <= limit:
            raise ArgumentError(
                f"anchor count {count} out of range 1..{limit}"
            )
        derived = setup.with_anchors("sample", count, sample_seed)
        accuracy = evaluate(derived, dev_items)
        rows.append(
            _row(
                setup,
                "sweep-anchors",
                "dev",
                "ensemble",
                accuracy,
                anchors=f"sample:{count}",
            )
        )
    full = setup.with_anchors("full", None, sample_seed)
    rows.append(
        _row(
            setup,
            "sweep-anchors",
            "dev",
            "ensemble",
            evaluate(full, dev_items),
            anchors="full",
        )
    )
    return rows


def ablate_normalization(
    setup: ExperimentSetup, items: Sequence[EvalItem]
) -> tuple[list[ReportRow], float, float]:
    """Ensemble accuracy with row-normalized matrices vs raw cosine rows.

    The two runs differ only in the matrices fed to the identical search
    code; probability floors still apply on the raw path.
    """
    normalized = evaluate(setup, items)
    raw = evaluate(setup, items, raw=True)
    rows = [
        _row(setup, "ablate-norm", "dev", "ensemble", normalized),
        _row(setup, "ablate-raw", "dev", "ensemble", raw),
    ]
    return rows, normalized, raw
