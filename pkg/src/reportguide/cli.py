"""Command-line pipeline orchestrator.

Each stage command reads one JSON config file, validates it, takes a lock on
the working directory, refuses to overwrite its own artifacts without
--force, and leaves a run-metadata file describing what it did. `pipeline`
chains the five stages in-process, so its artifacts are byte-identical to
running the stages one by one.

Exit codes: 0 success, 2 configuration error, 3 gateway error, 4 data error,
5 missing prerequisite.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import bootstrap as bootstrap_mod
from . import classifier as classifier_mod
from . import guidance as guidance_mod
from . import metrics as metrics_mod
from .corpus import Corpus, load_features, load_manifest
from .errors import (
    ConfigError,
    DataError,
    GatewayError,
    GenerationError,
    PipelineError,
    PrerequisiteError,
)
from .gateway import GatewayConfig
from .synthetic import write_synthetic_corpus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATEWAY = 3
EXIT_DATA = 4
EXIT_PREREQ = 5


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class PathsConfig:
    manifest: str = ""
    features: str = ""
    workdir: str = ""


@dataclass
class BootstrapSection:
    b: int = 200
    kappa: int = 200
    theta: int = 15


@dataclass
class GatewaySection:
    backend: str = "mock"
    endpoint: str = ""
    model: str = "mock-clinical-1"
    api_key_env: str = "LLM_API_KEY"
    max_retries: int = 3
    parallelism: int = 4
    requests_per_minute: int = 600


@dataclass
class TrainSection:
    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    tau: float = 1.0
    adjustment: str = "on"


@dataclass
class GeneratorSection:
    backend: str = "mock"
    command: str = ""
    endpoint: str = ""
    model: str = ""


@dataclass
class GuidanceSection:
    mode: str = "image_and_label"
    label_source: str = "pred"
    threshold: float = 0.5
    split: str = "test"
    generator: GeneratorSection = field(default_factory=GeneratorSection)


@dataclass
class MetricsSection:
    enabled: list[str] = field(
        default_factory=lambda: ["bleu", "rouge_l", "cider_d", "meteor_simple", "entity_f1"]
    )


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    bootstrap: BootstrapSection = field(default_factory=BootstrapSection)
    gateway: GatewaySection = field(default_factory=GatewaySection)
    train: TrainSection = field(default_factory=TrainSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)


def _merge_section(obj, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    known = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + '.' + key!r}")
        current = getattr(obj, key)
        if hasattr(current, "__dataclass_fields__"):
            _merge_section(current, value, path + "." + key)
        else:
            setattr(obj, key, value)


def load_config(path: str | Path | None, overrides: list[tuple[str, str]]) -> PipelineConfig:
    """Build the effective config: file values over defaults, then flag
    overrides over the file. Unknown keys are rejected, not ignored."""
    config = PipelineConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in data.items():
            if not hasattr(config, key):
                raise ConfigError(f"unknown config section {key!r}")
            _merge_section(getattr(config, key), value, key)
    for dotted, raw in overrides:
        _apply_override(config, dotted, raw)
    _validate_config(config)
    return config


def _apply_override(config: PipelineConfig, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    obj = config
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(obj, part)
        if not hasattr(obj, "__dataclass_fields__"):
            raise ConfigError(f"config key {dotted!r} does not name a field")
    leaf = parts[-1]
    if leaf not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings may be given unquoted
    setattr(obj, leaf, value)


def _validate_config(config: PipelineConfig) -> None:
    c = config
    if not isinstance(c.bootstrap.b, int) or c.bootstrap.b < 1:
        raise ConfigError("bootstrap.b must be a positive integer")
    if not isinstance(c.bootstrap.kappa, int) or c.bootstrap.kappa < 1:
        raise ConfigError("bootstrap.kappa must be a positive integer")
    if not isinstance(c.bootstrap.theta, int) or c.bootstrap.theta < 0:
        raise ConfigError("bootstrap.theta must be a non-negative integer")
    if c.guidance.mode not in guidance_mod.MODES:
        raise ConfigError(
            f"guidance.mode must be one of {guidance_mod.MODES}, got {c.guidance.mode!r}"
        )
    if c.guidance.label_source not in guidance_mod.LABEL_SOURCES:
        raise ConfigError(
            f"guidance.label_source must be one of {guidance_mod.LABEL_SOURCES}"
        )
    if not 0.0 <= float(c.guidance.threshold) <= 1.0:
        raise ConfigError("guidance.threshold must lie in [0, 1]")
    if c.guidance.split not in ("train", "val", "test"):
        raise ConfigError("guidance.split must be train, val, or test")
    for name in c.metrics.enabled:
        if name not in metrics_mod.METRIC_NAMES:
            raise ConfigError(f"unknown metric {name!r} in metrics.enabled")
    if not c.paths.workdir:
        raise ConfigError("paths.workdir is required")
    if not c.paths.manifest:
        raise ConfigError("paths.manifest is required")
    if not Path(c.paths.manifest).exists():
        raise ConfigError(f"manifest file {c.paths.manifest} does not exist")
    if c.paths.features and not Path(c.paths.features).exists():
        raise ConfigError(f"feature file {c.paths.features} does not exist")
    # Exercise the stricter dataclass validators early so bad values fail
    # at config time with exit code 2 rather than mid-stage.
    _gateway_config(config)
    classifier_mod.TrainConfig(
        learning_rate=float(c.train.learning_rate),
        epochs=int(c.train.epochs),
        batch_size=int(c.train.batch_size),
        seed=int(c.train.seed),
        tau=float(c.train.tau),
        adjustment=str(c.train.adjustment),
    )


def config_fingerprint(config: PipelineConfig) -> str:
    doc = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def _gateway_config(config: PipelineConfig, with_log: bool = False) -> GatewayConfig:
    g = config.gateway
    log_path = None
    if with_log and g.backend == "http" and config.paths.workdir:
        log_path = str(Path(config.paths.workdir) / "gateway_calls.jsonl")
    return GatewayConfig(
        backend=g.backend,
        endpoint=g.endpoint,
        model=g.model,
        api_key_env=g.api_key_env,
        max_retries=int(g.max_retries),
        parallelism=int(g.parallelism),
        requests_per_minute=int(g.requests_per_minute),
        call_log_path=log_path,
    )


def _generator_config(config: PipelineConfig) -> guidance_mod.GeneratorConfig:
    g = config.guidance.generator
    if g.backend == "http":
        gate = config.gateway
        return guidance_mod.GeneratorConfig(
            backend="http",
            gateway=GatewayConfig(
                backend="http",
                endpoint=g.endpoint or gate.endpoint,
                model=g.model or gate.model,
                api_key_env=gate.api_key_env,
                max_retries=int(gate.max_retries),
                parallelism=int(gate.parallelism),
                requests_per_minute=int(gate.requests_per_minute),
            ),
        )
    return guidance_mod.GeneratorConfig(backend=g.backend, command=g.command)


# ---------------------------------------------------------------------------
# Workdir bookkeeping
# ---------------------------------------------------------------------------


class _WorkdirLock:
    """Exclusive lock file guarding a working directory against concurrent
    pipeline commands. Stale locks must be removed by hand."""

    def __init__(self, workdir: Path):
        self.path = workdir / ".lock"
        self._fd: int | None = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"workdir is locked by another command ({self.path}); "
                f"remove the lock file if no other run is active"
            ) from None
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc_info):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _refuse_overwrite(paths: list[Path], force: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        listing = ", ".join(str(p) for p in existing)
        raise ConfigError(
            f"refusing to overwrite existing artifacts: {listing}; pass --force to redo"
        )


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(
            f"missing {path.name} in {path.parent}; run `reportguide {producer}` first"
        )
    return path


def _write_meta(workdir: Path, command: str, config: PipelineConfig, started: float) -> None:
    meta_dir = workdir / "meta"
    meta_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_sha256": config_fingerprint(config),
        "gateway_model": config.gateway.model,
        "gateway_backend": config.gateway.backend,
        "started_unix": round(started, 3),
        "finished_unix": round(time.time(), 3),
    }
    (meta_dir / f"{command}.json").write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8"
    )


def _load_corpus(config: PipelineConfig) -> Corpus:
    return load_manifest(config.paths.manifest)


def _load_corpus_and_features(config: PipelineConfig):
    if not config.paths.features:
        raise ConfigError("paths.features is required for this command")
    corpus = _load_corpus(config)
    features = load_features(config.paths.features, corpus)
    return corpus, features


def _load_stage1(config: PipelineConfig, corpus: Corpus):
    workdir = Path(config.paths.workdir)
    taxonomy = bootstrap_mod.load_taxonomy(_require(workdir / "taxonomy.json", "bootstrap"))
    dataset = bootstrap_mod.load_labels(
        _require(workdir / "labels.jsonl", "bootstrap"), corpus, taxonomy
    )
    return taxonomy, dataset


# ---------------------------------------------------------------------------
# Stage commands
# ---------------------------------------------------------------------------


def cmd_bootstrap(config: PipelineConfig, force: bool = False) -> None:
    started = time.time()
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    _refuse_overwrite(
        [workdir / "taxonomy.json", workdir / "labels.jsonl", workdir / "audit.json"], force
    )
    corpus = _load_corpus(config)
    dataset = bootstrap_mod.bootstrap_dataset(
        corpus,
        bootstrap_mod.BootstrapConfig(
            batch_size=config.bootstrap.b,
            merge_budget=config.bootstrap.kappa,
            min_label_count=config.bootstrap.theta,
        ),
        _gateway_config(config, with_log=True),
        out_dir=workdir,
    )
    audit = bootstrap_mod.audit_taxonomy(dataset)
    (workdir / "audit.json").write_text(
        json.dumps(audit, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    _write_meta(workdir, "bootstrap", config, started)
    logger.info(
        "bootstrap: %d labels, %d annotated records, %d skipped",
        len(dataset.taxonomy),
        len(dataset.items),
        len(dataset.skipped),
    )


def cmd_train(config: PipelineConfig, force: bool = False) -> None:
    started = time.time()
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    _refuse_overwrite([workdir / "checkpoint.json"], force)
    corpus, features = _load_corpus_and_features(config)
    _, dataset = _load_stage1(config, corpus)
    t = config.train
    classifier_mod.train(
        dataset,
        features,
        classifier_mod.TrainConfig(
            learning_rate=float(t.learning_rate),
            epochs=int(t.epochs),
            batch_size=int(t.batch_size),
            seed=int(t.seed),
            tau=float(t.tau),
            adjustment=str(t.adjustment),
        ),
        checkpoint_path=workdir / "checkpoint.json",
    )
    _write_meta(workdir, "train", config, started)
    logger.info("train: checkpoint written to %s", workdir / "checkpoint.json")


def _load_checkpoint_bound(config: PipelineConfig, corpus: Corpus):
    """Load the checkpoint and verify it matches the stored taxonomy."""
    workdir = Path(config.paths.workdir)
    params = classifier_mod.load_checkpoint(_require(workdir / "checkpoint.json", "train"))
    taxonomy, dataset = _load_stage1(config, corpus)
    if params.taxonomy_hash != bootstrap_mod.taxonomy_fingerprint(taxonomy):
        raise DataError(
            "checkpoint was trained against a different taxonomy than the one "
            "in the workdir; re-run the train stage"
        )
    return params, taxonomy, dataset


def cmd_predict(config: PipelineConfig, force: bool = False) -> None:
    started = time.time()
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    _refuse_overwrite([workdir / "predictions.jsonl", workdir / "mlc_metrics.json"], force)
    corpus, features = _load_corpus_and_features(config)
    params, _, dataset = _load_checkpoint_bound(config, corpus)
    split = config.guidance.split
    threshold = float(config.guidance.threshold)

    with open(workdir / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for rec in sorted(corpus.split(split), key=lambda r: r.id):
            row = features.row_for_id(rec.id)
            if row is None:
                raise DataError(f"record {rec.id!r} has no feature row")
            pred = classifier_mod.predict(params, row, threshold=threshold)
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "positives": list(pred.positives),
                        "probs": [float(p) for p in pred.probabilities],
                    }
                )
                + "\n"
            )
    split_items = dataset.split_items(split)
    scores = classifier_mod.evaluate_mlc(params, split_items, features, threshold=threshold)
    (workdir / "mlc_metrics.json").write_text(
        json.dumps(scores, indent=2) + "\n", encoding="utf-8"
    )
    _write_meta(workdir, "predict", config, started)
    logger.info(
        "predict: split=%s macro_f1=%.4f micro_f1=%.4f",
        split,
        scores["macro_f1"],
        scores["micro_f1"],
    )


def cmd_generate(config: PipelineConfig, force: bool = False, ablation: bool = False) -> None:
    started = time.time()
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    corpus = _load_corpus(config)
    generator = _generator_config(config)
    threshold = float(config.guidance.threshold)
    split = config.guidance.split

    cells: list[tuple[str, str]]
    if ablation:
        cells = list(guidance_mod.ABLATION_MODES)
    else:
        mode = config.guidance.mode
        source = "none" if mode == "image_only" else config.guidance.label_source
        cells = [(mode, source)]
    _refuse_overwrite(
        [workdir / guidance_mod.generated_filename(m, s) for m, s in cells], force
    )

    needs_pred = any(s == "pred" for _, s in cells)
    params = None
    features = None
    if needs_pred:
        corpus, features = _load_corpus_and_features(config)
        params, _, dataset = _load_checkpoint_bound(config, corpus)
    else:
        _, dataset = _load_stage1(config, corpus)

    for mode, source in cells:
        out_path = workdir / guidance_mod.generated_filename(mode, source)
        guidance_mod.run_generation(
            corpus,
            dataset,
            mode,
            source,
            generator,
            params=params,
            features=features,
            threshold=threshold,
            split=split,
            out_path=out_path,
        )
        logger.info("generate: wrote %s", out_path)
    _write_meta(workdir, "generate", config, started)


def cmd_evaluate(config: PipelineConfig, force: bool = False) -> None:
    started = time.time()
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    _refuse_overwrite([workdir / "metrics.json"], force)
    corpus = _load_corpus(config)
    mode = config.guidance.mode
    source = "none" if mode == "image_only" else config.guidance.label_source
    gen_path = workdir / guidance_mod.generated_filename(mode, source)
    _require(gen_path, "generate")
    rows = guidance_mod.load_generated(gen_path)

    index = corpus.index()
    pairs: list[tuple[str, str, str]] = []
    for row in rows:
        rid = str(row.get("id", ""))
        rec = index.get(rid)
        if rec is None:
            raise DataError(f"generated file references unknown record id {rid!r}")
        pairs.append((rid, str(row.get("report", "")), rec.report))

    report = metrics_mod.evaluate_generation(
        pairs,
        gateway=_gateway_config(config, with_log=True),
        enabled=tuple(config.metrics.enabled),
        config_echo={
            "mode": mode,
            "label_source": source,
            "split": config.guidance.split,
            "threshold": float(config.guidance.threshold),
            "enabled": list(config.metrics.enabled),
        },
    )
    (workdir / "metrics.json").write_text(
        json.dumps(report, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    _write_meta(workdir, "evaluate", config, started)
    logger.info("evaluate: wrote %s", workdir / "metrics.json")


def cmd_pipeline(config: PipelineConfig, force: bool = False) -> None:
    """Run all five stages in order inside one workdir lock."""
    cmd_bootstrap(config, force=force)
    cmd_train(config, force=force)
    cmd_predict(config, force=force)
    cmd_generate(config, force=force)
    cmd_evaluate(config, force=force)


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reportguide",
        description="Bootstrapped finding labels, a long-tail classifier, and "
        "label-guided report generation, staged over plain files.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="path to the JSON config file")
        p.add_argument("--workdir", help="override paths.workdir")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        p.add_argument("--mode", help="override guidance.mode")
        p.add_argument("--label-source", dest="label_source", help="override guidance.label_source")
        p.add_argument("--threshold", type=float, help="override guidance.threshold")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--backend", help="override gateway.backend")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any config field by dotted path, e.g. --set train.epochs=50",
        )

    for name, help_text in (
        ("bootstrap", "extract, merge, annotate, and filter the label taxonomy"),
        ("train", "fit the multi-label classifier head"),
        ("predict", "write label predictions and classifier metrics"),
        ("generate", "generate reports for the configured mode"),
        ("evaluate", "score generated reports against references"),
        ("pipeline", "run all five stages in sequence"),
    ):
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        if name == "generate":
            p.add_argument(
                "--ablation",
                action="store_true",
                help="generate every mode/label-source combination",
            )

    synth = sub.add_parser("synth", help="write the bundled synthetic corpus")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--seed", type=int, default=None, help="generation seed")
    return parser


def _collect_overrides(args: argparse.Namespace, extra: list[str]) -> list[tuple[str, str]]:
    overrides: list[tuple[str, str]] = []
    mapping = {
        "workdir": "paths.workdir",
        "mode": "guidance.mode",
        "label_source": "guidance.label_source",
        "threshold": "guidance.threshold",
        "seed": "train.seed",
        "backend": "gateway.backend",
    }
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append((dotted, json.dumps(value) if not isinstance(value, str) else value))
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides.append((key.strip(), value))
    for item in extra:
        # Arbitrary --section.key=value flags are accepted as overrides.
        if item.startswith("--") and "=" in item:
            key, _, value = item[2:].partition("=")
            overrides.append((key.strip(), value))
        else:
            raise ConfigError(f"unrecognized argument {item!r}")
    return overrides


def main(argv: list[str] | None = None) -> int:
    args, extra = _build_parser().parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "synth":
            if extra:
                raise ConfigError(f"unrecognized argument {extra[0]!r}")
            kwargs = {} if args.seed is None else {"seed": args.seed}
            synth = write_synthetic_corpus(args.out, **kwargs)
            print(
                f"wrote {len(synth.corpus)} records and "
                f"{synth.features.rows}x{synth.features.dim} features to {args.out}"
            )
            return EXIT_OK

        overrides = _collect_overrides(args, extra)
        config = load_config(args.config, overrides)
        workdir = Path(config.paths.workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        handlers = {
            "bootstrap": cmd_bootstrap,
            "train": cmd_train,
            "predict": cmd_predict,
            "generate": cmd_generate,
            "evaluate": cmd_evaluate,
            "pipeline": cmd_pipeline,
        }
        with _WorkdirLock(workdir):
            if args.command == "generate":
                cmd_generate(config, force=args.force, ablation=args.ablation)
            else:
                handlers[args.command](config, force=args.force)
        return EXIT_OK
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (GatewayError, GenerationError) as exc:
        logger.error("gateway error: %s", exc)
        return EXIT_GATEWAY
    except PrerequisiteError as exc:
        logger.error("missing prerequisite: %s", exc)
        return EXIT_PREREQ
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except PipelineError as exc:
        logger.error("error: %s", exc)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
