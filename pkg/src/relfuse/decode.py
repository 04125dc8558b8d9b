"""Greedy ensemble decoding across models with different tokenizers.

Each step queries every backend on its own tokenization of the running
text, carries the distributions into the shared anchor space, averages
them, and searches the main model's simplex for the distribution whose
image matches the average.  The argmax token of that distribution is
emitted (ties to the lowest id) and the surface is appended to the text;
every model's context is then re-derived by tokenizing the full running
text from scratch, which keeps all models conditioned on the same
surface no matter how differently they segment it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import ModelBackend
from .errors import ArgumentError, BackendError, RelfuseError, TokenizationError
from .fusion import (
    AbsoluteDistribution,
    EnsembleConfig,
    aggregate,
    inverse_transform,
    to_relative,
)
from .relspace import RelativeMatrix
from .vocab import GreedyTokenizer

logger = logging.getLogger(__name__)

TRACE_TOP_K = 5


@dataclass
class TraceStep:
    """Diagnostics for one emitted token."""

    step: int
    emitted: str
    loss0: float
    lossT: float
    per_model_top: list[dict]


@dataclass
class DecodeTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


def save_trace(trace: DecodeTrace, path: str | Path) -> None:
    """One JSON record per emitted token, field names fixed."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in trace.steps:
            fh.write(
                json.dumps(
                    {
                        "step": s.step,
                        "emitted": s.emitted,
                        "loss0": s.loss0,
                        "lossT": s.lossT,
                        "per_model_top": s.per_model_top,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_trace(path: str | Path) -> DecodeTrace:
    trace = DecodeTrace()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            trace.steps.append(
                TraceStep(
                    step=rec["step"],
                    emitted=rec["emitted"],
                    loss0=rec["loss0"],
                    lossT=rec["lossT"],
                    per_model_top=rec["per_model_top"],
                )
            )
    return trace


class EnsembleSession:
    """Decoding state for one ensemble over one piece of running text.

    Single-owner: one session decodes one sequence at a time.  The
    matrices are immutable and may be shared between sessions.
    """

    def __init__(
        self,
        backends: Sequence[ModelBackend],
        matrices: Sequence[RelativeMatrix],
        config: EnsembleConfig,
        main: int,
        max_tokens: int = 64,
        stop_surfaces: Sequence[str | bytes] = (),
        allow_raw: bool = False,
    ):
        if not backends:
            raise ArgumentError("need at least one backend")
        if len(matrices) != len(backends):
            raise ArgumentError(
                f"{len(backends)} backends but {len(matrices)} matrices"
            )
        anchor_counts = {m.anchors for m in matrices}
        if len(anchor_counts) != 1:
            raise ArgumentError(f"matrices disagree on anchor count: {anchor_counts}")
        for backend, matrix in zip(backends, matrices):
            if matrix.rows != backend.vocabulary.size:
                raise ArgumentError(
                    f"model {backend.name!r}: matrix has {matrix.rows} rows, "
                    f"vocabulary has {backend.vocabulary.size}"
                )
            if not matrix.normalized and not allow_raw:
                raise ArgumentError(
                    f"model {backend.name!r}: matrix is not normalized"
                )
        if not 0 <= main < len(backends):
            raise ArgumentError(f"main index {main} out of range 0..{len(backends) - 1}")
        if config.weights is not None and len(config.weights) != len(backends):
            raise ArgumentError(
                f"{len(backends)} backends but {len(config.weights)} weights"
            )
        if max_tokens < 0:
            raise ArgumentError(f"max_tokens must be >= 0, got {max_tokens}")
        self.backends = list(backends)
        self.matrices = list(matrices)
        self.config = config
        self.main = main
        self.max_tokens = max_tokens
        self.stop_surfaces = tuple(
            s.encode("utf-8") if isinstance(s, str) else bytes(s)
            for s in stop_surfaces
        )
        self.allow_raw = allow_raw
        self.tokenizers = [GreedyTokenizer(b.vocabulary) for b in backends]
        self.text = b""
        self.prompt_len = 0
        self.trace = DecodeTrace()

    def reset(self, prompt: str | bytes) -> None:
        data = prompt.encode("utf-8") if isinstance(prompt, str) else bytes(prompt)
        self.text = data
        self.prompt_len = len(data)
        self.trace = DecodeTrace()
        self._contexts()  # fail fast if any model cannot tokenize the prompt

    @property
    def generated(self) -> bytes:
        return self.text[self.prompt_len :]

    def _contexts(self) -> list[list[int]]:
        contexts = []
        for backend, tokenizer in zip(self.backends, self.tokenizers):
            try:
                contexts.append(tokenizer.encode(self.text))
            except TokenizationError as exc:
                raise TokenizationError(
                    f"model {backend.name!r} cannot tokenize the running text: {exc}"
                ) from exc
        return contexts

    def _model_distributions(self) -> list[AbsoluteDistribution]:
        contexts = self._contexts()
        dists = []
        for backend, ctx in zip(self.backends, contexts):
            try:
                dists.append(backend.next_distribution(ctx))
            except BackendError:
                raise
            except RelfuseError as exc:
                raise BackendError(str(exc), model=backend.name) from exc
        return dists

    def _fuse(
        self, dists: Sequence[AbsoluteDistribution]
    ) -> tuple[AbsoluteDistribution, list[float]]:
        rs = [
            to_relative(p, m, allow_raw=self.allow_raw)
            for p, m in zip(dists, self.matrices)
        ]
        target = aggregate(rs, self.config.weights)
        p_init = AbsoluteDistribution(dists[self.main].values, model_index=self.main)
        return inverse_transform(
            target,
            p_init,
            self.matrices[self.main],
            self.config,
            allow_raw=self.allow_raw,
        )


def ensemble_step(session: EnsembleSession) -> bytes:
    """Emit one token: fuse all model distributions, take the argmax.

    Appends the emitted surface to the running text and records a trace
    entry.  Returns the surface bytes.
    """
    dists = session._model_distributions()
    p_final, losses = session._fuse(dists)
    emitted_id = int(np.argmax(p_final.values))  # ties resolve to lowest id
    main_vocab = session.backends[session.main].vocabulary
    surface = main_vocab.surface_of(emitted_id)

    tops = []
    for backend, dist in zip(session.backends, dists):
        k = min(TRACE_TOP_K, len(dist))
        order = np.argsort(-dist.values, kind="stable")[:k]
        tops.append(
            {
                "model": backend.name,
                "ids": [int(i) for i in order],
                "probs": [float(dist.values[i]) for i in order],
            }
        )
    session.trace.steps.append(
        TraceStep(
            step=len(session.trace.steps),
            emitted=surface.decode("utf-8", errors="backslashreplace"),
            loss0=float(losses[0]),
            lossT=float(losses[-1]),
            per_model_top=tops,
        )
    )
    session.text += surface
    return surface


def generate(session: EnsembleSession, prompt: str | bytes) -> tuple[str, DecodeTrace]:
    """Decode greedily from the prompt until a stop surface or the budget.

    Returns the generated continuation (prompt excluded), trimmed at the
    first stop surface, along with the per-step trace.
    """
    session.reset(prompt)
    while len(session.trace.steps) < session.max_tokens:
        ensemble_step(session)
        generated = session.generated
        stop_at = -1
        for stop in session.stop_surfaces:
            idx = generated.find(stop)
            if idx >= 0 and (stop_at < 0 or idx < stop_at):
                stop_at = idx
        if stop_at >= 0:
            return (
                generated[:stop_at].decode("utf-8", errors="backslashreplace"),
                session.trace,
            )
    return session.generated.decode("utf-8", errors="backslashreplace"), session.trace


def score_option(
    session: EnsembleSession, prompt: str | bytes, option: str | bytes
) -> float:
    """Sum of ensemble log probabilities of the option's tokens.

    The option is segmented by the main model's tokenizer; at each
    position the fused distribution is computed exactly as during
    decoding and the forced token's log probability is accumulated.
    """
    prompt_b = prompt.encode("utf-8") if isinstance(prompt, str) else bytes(prompt)
    option_b = option.encode("utf-8") if isinstance(option, str) else bytes(option)
    main_tok = session.tokenizers[session.main]
    prompt_ids = main_tok.encode(prompt_b)
    full_ids = main_tok.encode(prompt_b + option_b)
    if full_ids[: len(prompt_ids)] != prompt_ids:
        raise TokenizationError(
            "option scoring requires the prompt tokenization to be a prefix "
            "of the prompt+option tokenization; a token spans the boundary"
        )
    forced = full_ids[len(prompt_ids) :]
    main_vocab = session.backends[session.main].vocabulary

    session.reset(prompt_b)
    total = 0.0
    for token_id in forced:
        dists = session._model_distributions()
        p_final, _ = session._fuse(dists)
        prob = max(float(p_final.values[token_id]), session.config.prob_floor)
        total += float(np.log(prob))
        session.text += main_vocab.surface_of(token_id)
    return total
