"""Command line interface: one JSON run configuration, several pipelines.

Subcommands cover matrix construction, decoding, evaluation, sweeps, the
normalization ablation, embedding-space inspection, and hosting a model
behind the wire protocol.  Reports are CSV files; each report command
renders a matching PNG next to it.  All human-facing chatter goes to
standard error; standard output carries only machine text (decoded
strings, dry-run plans, protocol frames).

Exit codes: 0 success, 1 configuration or validation error, 2 runtime or
backend error, 3 numeric failure inside the search.
"""

from __future__ import annotations

import argparse
import base64
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import figures
from .backends import (
    ModelBackend,
    ngram_from_text,
    remote_backend,
    serve_socket,
    serve_stdio,
)
from .decode import generate, save_trace
from .errors import (
    ArgumentError,
    BackendError,
    ConfigError,
    NumericError,
    RelfuseError,
)
from .fusion import EnsembleConfig
from .harness import (
    DEFAULT_ETA_GRID,
    ExperimentSetup,
    ablate_normalization,
    build_setup,
    load_dataset,
    run_report,
    sweep_anchor_count,
    sweep_eta,
    sweep_steps,
    write_report,
)
from .relspace import (
    build_relative_matrix,
    consistency,
    load_embeddings,
    nn_distance_histogram,
    normalize_rows,
    save_relative_matrix,
)
from .vocab import (
    common_tokens,
    load_vocabulary,
    parse_anchor_strategy,
    select_anchors,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP_GRID = (0, 1, 2, 3, 5, 8)
DEFAULT_ANCHOR_COUNTS = (25, 50, 100)

BACKEND_KINDS = ("ngram", "stdio", "socket")


@dataclass
class ModelSpec:
    """One model entry after validation: resolved paths, backend params."""

    name: str
    vocabulary_path: Path
    embeddings_path: Path
    kind: str
    corpus_path: Path | None = None
    order: int = 3
    delta: float = 0.1
    argv: tuple[str, ...] | None = None
    host: str | None = None
    port: int | None = None
    timeout: float = 10.0


@dataclass
class RunConfig:
    """A validated run configuration plus any flag overrides."""

    seed: int
    models: list[ModelSpec]
    strategy: str
    sample_k: int | None
    eta: float
    steps: int
    main: object
    weights: tuple[float, ...] | None
    prob_floor: float
    early_stop_loss: float
    max_tokens: int
    stop_surfaces: tuple[str, ...]
    dev_path: Path | None
    test_path: Path | None
    output_dir: Path
    sweeps: dict


def _check_model_entry(entry, index, base, problems) -> ModelSpec | None:
    prefix = f"models[{index}]"
    if not isinstance(entry, dict):
        problems.append(f"{prefix}: must be an object")
        return None
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        problems.append(f"{prefix}.name: required non-empty string")
        name = f"model{index}"
    paths = {}
    for key in ("vocabulary", "embeddings"):
        value = entry.get(key)
        if not isinstance(value, str) or not value:
            problems.append(f"{prefix}.{key}: required path")
            continue
        resolved = (base / value).resolve()
        if not resolved.is_file():
            problems.append(f"{prefix}.{key}: file not found: {resolved}")
            continue
        paths[key] = resolved
    backend = entry.get("backend")
    if not isinstance(backend, dict):
        problems.append(f"{prefix}.backend: required object")
        return None
    kind = backend.get("kind")
    if kind not in BACKEND_KINDS:
        problems.append(
            f"{prefix}.backend.kind: must be one of {', '.join(BACKEND_KINDS)}"
        )
        return None
    spec = ModelSpec(
        name=name,
        vocabulary_path=paths.get("vocabulary"),
        embeddings_path=paths.get("embeddings"),
        kind=kind,
        timeout=float(backend.get("timeout", 10.0)),
    )
    if kind == "ngram":
        corpus = backend.get("corpus")
        if not isinstance(corpus, str) or not corpus:
            problems.append(f"{prefix}.backend.corpus: required path")
        else:
            resolved = (base / corpus).resolve()
            if resolved.is_file():
                spec.corpus_path = resolved
            else:
                problems.append(
                    f"{prefix}.backend.corpus: file not found: {resolved}"
                )
        order = backend.get("order", 3)
        if not isinstance(order, int) or order < 1:
            problems.append(f"{prefix}.backend.order: must be an integer >= 1")
        else:
            spec.order = order
        delta = backend.get("delta", 0.1)
        if not isinstance(delta, (int, float)) or delta <= 0:
            problems.append(f"{prefix}.backend.delta: must be > 0")
        else:
            spec.delta = float(delta)
    elif kind == "stdio":
        argv = backend.get("argv")
        if (
            not isinstance(argv, list)
            or not argv
            or not all(isinstance(a, str) for a in argv)
        ):
            problems.append(
                f"{prefix}.backend.argv: required non-empty list of strings"
            )
        else:
            spec.argv = tuple(argv)
    else:
        endpoint = backend.get("endpoint")
        if not isinstance(endpoint, str) or ":" not in endpoint:
            problems.append(f"{prefix}.backend.endpoint: required host:port")
        else:
            host, _, port_text = endpoint.rpartition(":")
            try:
                spec.host, spec.port = host, int(port_text)
            except ValueError:
                problems.append(
                    f"{prefix}.backend.endpoint: port must be an integer"
                )
    if spec.vocabulary_path is None or spec.embeddings_path is None:
        return None
    return spec


def load_run_config(path: str | Path, args: argparse.Namespace) -> RunConfig:
    """Parse and validate the configuration, folding in flag overrides.

    Every detectable problem is collected and reported at once.
    """
    config_path = Path(path)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    base = config_path.resolve().parent
    problems: list[str] = []

    seed = args.seed if args.seed is not None else raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed: required integer (no implicit randomness)")
        seed = 0

    entries = raw.get("models")
    specs: list[ModelSpec] = []
    if not isinstance(entries, list) or not entries:
        problems.append("models: required non-empty list")
    else:
        for index, entry in enumerate(entries):
            spec = _check_model_entry(entry, index, base, problems)
            if spec is not None:
                specs.append(spec)
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            problems.append("models: names must be unique")

    anchors_text = args.anchors if args.anchors else raw.get("anchors", "full")
    strategy, sample_k = "full", None
    try:
        strategy, sample_k = parse_anchor_strategy(str(anchors_text))
    except ConfigError as exc:
        problems.append(f"anchors: {exc}")
    if sample_k is not None and sample_k < 1:
        problems.append("anchors: sample count must be >= 1")

    fusion = raw.get("fusion") or {}
    if not isinstance(fusion, dict):
        problems.append("fusion: must be an object")
        fusion = {}
    eta = args.eta if args.eta is not None else fusion.get("eta", 0.1)
    if not isinstance(eta, (int, float)) or not np.isfinite(eta) or eta < 0:
        problems.append("fusion.eta: must be a finite number >= 0")
        eta = 0.1
    steps = args.steps if args.steps is not None else fusion.get("steps", 5)
    if not isinstance(steps, int) or steps < 0:
        problems.append("fusion.steps: must be an integer >= 0")
        steps = 5
    main = args.main if args.main is not None else fusion.get("main", "auto")
    if isinstance(main, str) and main != "auto":
        try:
            main = int(main)
        except ValueError:
            problems.append("fusion.main: must be 'auto' or a model index")
            main = "auto"
    if isinstance(main, int) and specs and not 0 <= main < len(specs):
        problems.append(
            f"fusion.main: index {main} out of range 0..{len(specs) - 1}"
        )
    weights = fusion.get("weights")
    if weights is not None:
        ok = isinstance(weights, list) and all(
            isinstance(w, (int, float)) for w in weights
        )
        if not ok:
            problems.append("fusion.weights: must be null or a list of numbers")
            weights = None
        elif specs and len(weights) != len(specs):
            problems.append(
                f"fusion.weights: length {len(weights)} != {len(specs)} models"
            )
            weights = None
        else:
            weights = tuple(float(w) for w in weights)
    prob_floor = fusion.get("prob_floor", 1e-12)
    if not isinstance(prob_floor, (int, float)) or prob_floor <= 0:
        problems.append("fusion.prob_floor: must be > 0")
        prob_floor = 1e-12
    early = fusion.get("early_stop_loss", 1e-9)
    if not isinstance(early, (int, float)) or early < 0:
        problems.append("fusion.early_stop_loss: must be >= 0")
        early = 1e-9

    decode_cfg = raw.get("decode") or {}
    if not isinstance(decode_cfg, dict):
        problems.append("decode: must be an object")
        decode_cfg = {}
    max_tokens = (
        args.max_tokens
        if args.max_tokens is not None
        else decode_cfg.get("max_tokens", 32)
    )
    if not isinstance(max_tokens, int) or max_tokens < 0:
        problems.append("decode.max_tokens: must be an integer >= 0")
        max_tokens = 32
    stops = decode_cfg.get("stop_surfaces", [])
    if not isinstance(stops, list) or not all(
        isinstance(s, str) and s for s in stops
    ):
        problems.append("decode.stop_surfaces: must be a list of non-empty strings")
        stops = []

    datasets = raw.get("datasets") or {}
    if not isinstance(datasets, dict):
        problems.append("datasets: must be an object")
        datasets = {}
    dev_path = test_path = None
    if args.dataset:
        override = (base / args.dataset).resolve()
        if override.is_file():
            dev_path = test_path = override
        else:
            problems.append(f"--dataset: file not found: {override}")
    else:
        for key in ("dev", "test"):
            value = datasets.get(key)
            if value is None:
                continue
            resolved = (base / str(value)).resolve()
            if resolved.is_file():
                if key == "dev":
                    dev_path = resolved
                else:
                    test_path = resolved
            else:
                problems.append(f"datasets.{key}: file not found: {resolved}")

    out_value = args.out if args.out else raw.get("output_dir", "reports")
    output_dir = (base / str(out_value)).resolve()

    sweeps = raw.get("sweeps") or {}
    if not isinstance(sweeps, dict):
        problems.append("sweeps: must be an object")
        sweeps = {}

    if problems:
        raise ConfigError(
            "invalid run configuration:\n  - " + "\n  - ".join(problems)
        )
    return RunConfig(
        seed=seed,
        models=specs,
        strategy=strategy,
        sample_k=sample_k,
        eta=float(eta),
        steps=steps,
        main=main,
        weights=weights,
        prob_floor=float(prob_floor),
        early_stop_loss=float(early),
        max_tokens=max_tokens,
        stop_surfaces=tuple(stops),
        dev_path=dev_path,
        test_path=test_path,
        output_dir=output_dir,
        sweeps=sweeps,
    )


def _load_models(cfg: RunConfig) -> list[ModelBackend]:
    """Instantiate every configured backend, cleaning up on failure."""
    backends: list[ModelBackend] = []
    try:
        for spec in cfg.models:
            vocab = load_vocabulary(spec.vocabulary_path)
            table = load_embeddings(spec.embeddings_path)
            if spec.kind == "ngram":
                text = spec.corpus_path.read_text(encoding="utf-8")
                model = ngram_from_text(
                    vocab,
                    text,
                    order=spec.order,
                    delta=spec.delta,
                    name=spec.name,
                    dim=None,
                )
                model.embeddings = table
            elif spec.kind == "stdio":
                model = remote_backend(
                    list(spec.argv),
                    "stdio",
                    vocab,
                    timeout=spec.timeout,
                    embeddings=table,
                )
            else:
                model = remote_backend(
                    (spec.host, spec.port),
                    "socket",
                    vocab,
                    timeout=spec.timeout,
                    embeddings=table,
                )
            backends.append(model)
    except Exception:
        for backend in backends:
            backend.close()
        raise
    return backends


def _ensemble_config(cfg: RunConfig) -> EnsembleConfig:
    return EnsembleConfig(
        eta=cfg.eta,
        steps=cfg.steps,
        prob_floor=cfg.prob_floor,
        early_stop_loss=cfg.early_stop_loss,
        weights=cfg.weights,
        main=cfg.main,
    )


def _prepare(
    cfg: RunConfig, need_dev: bool = False, need_test: bool = False
) -> tuple[ExperimentSetup, list, list]:
    dev = load_dataset(cfg.dev_path) if cfg.dev_path else None
    test = load_dataset(cfg.test_path) if cfg.test_path else None
    if need_dev and dev is None:
        raise ConfigError("this command needs a dev dataset (datasets.dev)")
    if need_test and test is None:
        raise ConfigError("this command needs a test dataset (datasets.test)")
    if cfg.main == "auto" and dev is None:
        raise ConfigError("main policy 'auto' needs a dev dataset to choose on")
    backends = _load_models(cfg)
    try:
        setup = build_setup(
            backends,
            config=_ensemble_config(cfg),
            strategy=cfg.strategy,
            k=cfg.sample_k,
            seed=cfg.seed,
            dev_items=dev,
            max_tokens=cfg.max_tokens,
            stop_surfaces=cfg.stop_surfaces,
        )
    except Exception:
        for backend in backends:
            backend.close()
        raise
    return setup, dev, test


def _close(setup: ExperimentSetup) -> None:
    for backend in setup.backends:
        backend.close()


def _out_dir(cfg: RunConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def cmd_build_relspace(cfg: RunConfig, args) -> int:
    vocabularies = [load_vocabulary(s.vocabulary_path) for s in cfg.models]
    tables = [load_embeddings(s.embeddings_path) for s in cfg.models]
    if len(vocabularies) == 1:
        common = vocabularies[0].surfaces()
    else:
        common = common_tokens(vocabularies)
    anchors = select_anchors(
        common, vocabularies, strategy=cfg.strategy, k=cfg.sample_k, seed=cfg.seed
    )
    out = _out_dir(cfg)
    for index, (spec, table) in enumerate(zip(cfg.models, tables)):
        matrix = normalize_rows(build_relative_matrix(table, anchors, index))
        path = out / f"{spec.name}.relspace.dpr"
        save_relative_matrix(matrix, path)
        logger.info("wrote %s (%d x %d)", path, *matrix.values.shape)
    manifest = {
        "strategy": cfg.strategy if cfg.sample_k is None else f"sample:{cfg.sample_k}",
        "seed": cfg.seed,
        "count": len(anchors.anchors),
        "anchors": [
            {
                "display": surface.decode("utf-8", "backslashreplace"),
                "bytes": base64.b64encode(surface).decode("ascii"),
            }
            for surface in anchors.anchors
        ],
    }
    manifest_path = out / "anchors.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    logger.info("wrote %s (%d anchors)", manifest_path, len(anchors.anchors))
    return 0


def cmd_decode(cfg: RunConfig, args) -> int:
    if not args.prompt:
        raise ConfigError("decode needs --prompt")
    setup, _, _ = _prepare(cfg)
    try:
        text, trace = generate(setup.ensemble_session(), args.prompt)
    finally:
        _close(setup)
    out = _out_dir(cfg)
    save_trace(trace, out / "decode_trace.jsonl")
    if len(trace) > 0:
        figures.loss_trace(trace, out / "decode_loss.png")
    logger.info(
        "decoded %d tokens; trace at %s", len(trace), out / "decode_trace.jsonl"
    )
    print(text)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if getattr(args, "sweep", None):
        return cmd_sweep(cfg, args, which=args.sweep)
    setup, dev, test = _prepare(cfg, need_dev=True, need_test=True)
    try:
        rows = run_report(setup, dev, test)
    finally:
        _close(setup)
    out = _out_dir(cfg)
    write_report(rows, out / "eval_report.csv")
    figures.accuracy_bars(rows, out / "eval_report.png")
    for row in rows:
        if row.condition == "ensemble":
            logger.info(
                "ensemble %s accuracy %.4f (delta %+.4f)",
                row.split,
                row.accuracy,
                row.delta,
            )
    logger.info("report at %s", out / "eval_report.csv")
    return 0


def cmd_sweep(cfg: RunConfig, args, which: str | None = None) -> int:
    which = which or args.which
    setup, dev, _ = _prepare(cfg, need_dev=True)
    out = _out_dir(cfg)
    try:
        if which == "eta":
            grid = tuple(cfg.sweeps.get("eta", DEFAULT_ETA_GRID))
            rows, best = sweep_eta(setup, dev, grid)
            write_report(rows, out / "sweep_eta.csv")
            figures.sweep_curve(rows, "eta", out / "sweep_eta.png", "step size")
            logger.info("best eta %g; report at %s", best, out / "sweep_eta.csv")
        elif which == "steps":
            grid = tuple(cfg.sweeps.get("steps", DEFAULT_STEP_GRID))
            rows, best = sweep_steps(setup, dev, grid)
            write_report(rows, out / "sweep_steps.csv")
            figures.sweep_curve(
                rows, "steps", out / "sweep_steps.png", "search steps"
            )
            logger.info(
                "best step count %d; report at %s", best, out / "sweep_steps.csv"
            )
        else:
            counts = tuple(cfg.sweeps.get("anchor_counts", DEFAULT_ANCHOR_COUNTS))
            rows = sweep_anchor_count(setup, dev, counts, seed=cfg.seed)
            write_report(rows, out / "sweep_anchors.csv")
            figures.anchor_curve(rows, out / "sweep_anchors.png")
            logger.info("report at %s", out / "sweep_anchors.csv")
    finally:
        _close(setup)
    return 0


def cmd_ablate_norm(cfg: RunConfig, args) -> int:
    setup, dev, _ = _prepare(cfg, need_dev=True)
    try:
        rows, normalized, raw = ablate_normalization(setup, dev)
    finally:
        _close(setup)
    out = _out_dir(cfg)
    write_report(rows, out / "ablate_norm.csv")
    figures.ablation_bars(rows, out / "ablate_norm.png")
    logger.info(
        "normalized %.4f vs raw %.4f; report at %s",
        normalized,
        raw,
        out / "ablate_norm.csv",
    )
    return 0


def cmd_inspect(cfg: RunConfig, args) -> int:
    vocabularies = [load_vocabulary(s.vocabulary_path) for s in cfg.models]
    tables = [load_embeddings(s.embeddings_path) for s in cfg.models]
    out = _out_dir(cfg)
    if args.what == "nn-hist":
        bins = np.linspace(-1.0, 1.0, 41)
        with open(out / "nn_hist.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["model", "bin_low", "bin_high", "count"])
            for spec, table in zip(cfg.models, tables):
                stats = nn_distance_histogram(table, bins)
                for low, high, count in zip(
                    stats.edges[:-1], stats.edges[1:], stats.counts
                ):
                    writer.writerow(
                        [spec.name, f"{low:.6f}", f"{high:.6f}", int(count)]
                    )
                figures.nn_histogram(
                    stats, out / f"nn_hist_{spec.name}.png", title=spec.name
                )
                logger.info(
                    "%s: %d usable tokens, %d flagged",
                    spec.name,
                    stats.similarities.size,
                    stats.flagged,
                )
        logger.info("histogram table at %s", out / "nn_hist.csv")
        return 0
    # consistency across model pairs over the shared anchors
    if len(vocabularies) < 2:
        raise ConfigError("inspect consistency needs at least 2 models")
    common = common_tokens(vocabularies)
    anchors = select_anchors(
        common, vocabularies, strategy=cfg.strategy, k=cfg.sample_k, seed=cfg.seed
    )
    matrices = [
        build_relative_matrix(table, anchors, index)
        for index, table in enumerate(tables)
    ]
    shared_surfaces = sorted(common)
    rng = np.random.default_rng(cfg.seed)
    with open(out / "consistency.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["model_a", "model_b", "shared_mean", "mismatched_mean", "margin",
             "pairs"]
        )
        for i in range(len(cfg.models)):
            for j in range(i + 1, len(cfg.models)):
                pairs = [
                    (vocabularies[i].id_for(s), vocabularies[j].id_for(s))
                    for s in shared_surfaces
                ]
                cosines, shared_mean = consistency(matrices[i], matrices[j], pairs)
                count = len(shared_surfaces)
                left = rng.integers(0, count, size=1000)
                offset = rng.integers(1, count, size=1000)
                right = (left + offset) % count
                mism_pairs = [
                    (
                        vocabularies[i].id_for(shared_surfaces[a]),
                        vocabularies[j].id_for(shared_surfaces[b]),
                    )
                    for a, b in zip(left, right)
                ]
                mism, mism_mean = consistency(matrices[i], matrices[j], mism_pairs)
                name_a, name_b = cfg.models[i].name, cfg.models[j].name
                writer.writerow(
                    [
                        name_a,
                        name_b,
                        f"{shared_mean:.6f}",
                        f"{mism_mean:.6f}",
                        f"{shared_mean - mism_mean:.6f}",
                        count,
                    ]
                )
                figures.consistency_hist(
                    cosines, mism, out / f"consistency_{name_a}_{name_b}.png"
                )
                logger.info(
                    "%s vs %s: shared %.4f mismatched %.4f",
                    name_a,
                    name_b,
                    shared_mean,
                    mism_mean,
                )
    logger.info("consistency table at %s", out / "consistency.csv")
    return 0


def cmd_serve_backend(cfg: RunConfig, args) -> int:
    if args.model:
        matches = [s for s in cfg.models if s.name == args.model]
        if not matches:
            raise ConfigError(f"serve-backend: no model named {args.model!r}")
        spec = matches[0]
    elif len(cfg.models) == 1:
        spec = cfg.models[0]
    else:
        raise ConfigError("serve-backend: --model NAME required with several models")
    if spec.kind != "ngram":
        raise ConfigError(
            f"serve-backend hosts built-in models only; {spec.name!r} is "
            f"{spec.kind!r}"
        )
    vocab = load_vocabulary(spec.vocabulary_path)
    text = spec.corpus_path.read_text(encoding="utf-8")
    model = ngram_from_text(
        vocab, text, order=spec.order, delta=spec.delta, name=spec.name, dim=None
    )
    if args.transport == "stdio":
        logger.info("serving %s over stdio", spec.name)
        serve_stdio(model)
    else:

        def announce(address):
            logger.info("serving %s on %s:%d", spec.name, *address)
            print(f"{address[0]}:{address[1]}", file=sys.stderr, flush=True)

        serve_socket(
            model,
            host=args.host,
            port=args.port,
            ready_callback=announce,
            max_sessions=args.max_sessions,
        )
    return 0


def _print_plan(cfg: RunConfig, command: str, args) -> None:
    lines = [
        "plan:",
        f"  command: {command}",
        "  models: "
        + ", ".join(f"{s.name} ({s.kind})" for s in cfg.models),
        "  anchors: "
        + (cfg.strategy if cfg.sample_k is None else f"sample:{cfg.sample_k}"),
        f"  fusion: eta={cfg.eta:g} steps={cfg.steps} main={cfg.main} "
        + ("weights=uniform" if cfg.weights is None else "weights=custom"),
        f"  decode: max_tokens={cfg.max_tokens} "
        + f"stop_surfaces={list(cfg.stop_surfaces)}",
        f"  datasets: dev={cfg.dev_path} test={cfg.test_path}",
        f"  seed: {cfg.seed}",
        f"  output: {cfg.output_dir}",
    ]
    print("\n".join(lines))


_COMMANDS = {
    "build-relspace": cmd_build_relspace,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate-norm": cmd_ablate_norm,
    "inspect": cmd_inspect,
    "serve-backend": cmd_serve_backend,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration JSON")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--eta", type=float, help="search step size")
    common.add_argument("--steps", type=int, help="search iteration count")
    common.add_argument("--anchors", help="anchor strategy: full or sample:K")
    common.add_argument("--main", help="main model policy: auto or an index")
    common.add_argument("--seed", type=int, help="seed (overrides config)")
    common.add_argument("--prompt", help="prompt text for decode")
    common.add_argument("--max-tokens", type=int, help="generation budget")
    common.add_argument("--dataset", help="dataset path overriding dev and test")
    common.add_argument(
        "--dry-run",
        action="store_true",
        help="validate the configuration and print the plan without running",
    )
    parser = argparse.ArgumentParser(
        prog="relfuse",
        description="Ensemble decoding across heterogeneous vocabularies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser(
        "build-relspace",
        parents=[common],
        help="write per-model relative matrices and the anchor manifest",
    )
    sub.add_parser("decode", parents=[common], help="generate text for a prompt")
    eval_parser = sub.add_parser(
        "eval", parents=[common], help="evaluate individuals and the ensemble"
    )
    eval_parser.add_argument(
        "--sweep",
        choices=("eta", "anchors", "steps"),
        help="run a sweep instead of a plain evaluation",
    )
    sweep_parser = sub.add_parser(
        "sweep", parents=[common], help="dev-set sweep over one knob"
    )
    sweep_parser.add_argument("which", choices=("eta", "anchors", "steps"))
    sub.add_parser(
        "ablate-norm",
        parents=[common],
        help="compare row-normalized against raw cosine matrices",
    )
    inspect_parser = sub.add_parser(
        "inspect", parents=[common], help="embedding-space diagnostics"
    )
    inspect_parser.add_argument("what", choices=("consistency", "nn-hist"))
    serve_parser = sub.add_parser(
        "serve-backend",
        parents=[common],
        help="host a built-in model behind the wire protocol",
    )
    serve_parser.add_argument("--model", help="config model name to serve")
    serve_parser.add_argument(
        "--transport", choices=("stdio", "socket"), default="stdio"
    )
    serve_parser.add_argument("--host", default="127.0.0.1")
    serve_parser.add_argument("--port", type=int, default=0)
    serve_parser.add_argument("--max-sessions", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        cfg = load_run_config(args.config, args)
        if args.dry_run:
            _print_plan(cfg, args.command, args)
            return 0
        return _COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        logger.error("numeric failure: %s", exc)
        return 3
    except (ConfigError, ArgumentError) as exc:
        logger.error("%s", exc)
        return 1
    except BackendError as exc:
        logger.error("backend failure: %s", exc)
        return 2
    except RelfuseError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
