"""Guidance prompts and report generation.

Predicted (or ground-truth) labels are serialized into a fixed natural
language template that a multimodal generator consumes alongside the images.
Generation itself is pluggable: a deterministic mock for offline runs, an
external command spawned per record, or an OpenAI-compatible HTTP endpoint.
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .bootstrap import LabelTaxonomy, MLCDataset
from .classifier import ClassifierParams, predict
from .corpus import Corpus, FeatureMatrix, ReportRecord
from .errors import ConfigError, ExportError, GenerationError, PrerequisiteError
from .gateway import ChatRequest, GatewayConfig, complete

logger = logging.getLogger(__name__)

MODES = ("image_only", "label_only", "image_and_label")
LABEL_SOURCES = ("gt", "pred")

# The guidance template. Both label-bearing modes share it verbatim; the
# image-only ablation keeps just the instruction sentence.
_FINDINGS_TEMPLATE = (
    "The image shows the following findings: {findings}. "
    "Based on these findings and the image, generate a detailed diagnostic report."
)
_NO_FINDINGS_TEMPLATE = (
    "The image shows no salient findings listed. "
    "Based on the image, generate a detailed diagnostic report."
)
_IMAGE_ONLY_TEMPLATE = "Based on the image, generate a detailed diagnostic report."


@dataclass(frozen=True)
class GuidancePrompt:
    record_id: str
    mode: str
    label_source: str  # "gt", "pred", or "none" for image_only
    label_names: tuple[str, ...]
    text: str
    image_paths: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown guidance mode {self.mode!r}")
        if self.mode == "image_only":
            if self.label_source != "none" or self.label_names:
                raise ConfigError("image_only prompts must not carry label content")
        elif self.label_source not in LABEL_SOURCES:
            raise ConfigError(
                f"label source must be one of {LABEL_SOURCES}, got {self.label_source!r}"
            )


def serialize_labels(
    positives: tuple[int, ...] | list[int],
    taxonomy: LabelTaxonomy,
    mode: str = "image_and_label",
    label_source: str = "pred",
    record: ReportRecord | None = None,
) -> GuidancePrompt:
    """Render a label vector into a guidance prompt.

    Labels appear in ascending taxonomy index order, comma separated. The
    prompt text depends only on the positives, the taxonomy names, and the
    mode; ground-truth and predicted labels share this exact code path.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown guidance mode {mode!r}")
    record_id = record.id if record is not None else ""
    image_paths = tuple(im.path for im in record.images) if record is not None else ()

    if mode == "image_only":
        return GuidancePrompt(
            record_id=record_id,
            mode=mode,
            label_source="none",
            label_names=(),
            text=_IMAGE_ONLY_TEMPLATE,
            image_paths=image_paths,
        )

    ordered = sorted(set(int(j) for j in positives))
    k = len(taxonomy)
    for j in ordered:
        if not 0 <= j < k:
            raise ConfigError(f"label index {j} outside taxonomy of size {k}")
    names = tuple(taxonomy.labels[j].name for j in ordered)
    if names:
        text = _FINDINGS_TEMPLATE.format(findings=", ".join(names))
    else:
        text = _NO_FINDINGS_TEMPLATE
    return GuidancePrompt(
        record_id=record_id,
        mode=mode,
        label_source=label_source,
        label_names=names,
        text=text,
        image_paths=image_paths,
    )


# ---------------------------------------------------------------------------
# Fine-tuning export
# ---------------------------------------------------------------------------


def export_sft(
    dataset: MLCDataset,
    corpus: Corpus,
    mode: str = "image_and_label",
    out_path: str | Path | None = None,
) -> list[dict]:
    """Build instruction-tuning rows for the training split.

    Prompts come from ground-truth labels; targets are the reference
    reports. Rows are ordered by record id so exports are reproducible.
    """
    vectors = dataset.by_id()
    rows: list[dict] = []
    for rec in sorted(corpus.split("train"), key=lambda r: r.id):
        item = vectors.get(rec.id)
        if item is None:
            raise ExportError(f"training record {rec.id!r} has no label vector")
        prompt = serialize_labels(
            item.positives, dataset.taxonomy, mode=mode, label_source="gt", record=rec
        )
        rows.append(
            {
                "id": rec.id,
                "prompt": prompt.text,
                "images": [im.path for im in rec.images],
                "target": rec.report,
            }
        )
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return rows


# ---------------------------------------------------------------------------
# Generation backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    """How reports get generated from guidance prompts.

    backend "mock" expands labels through a fixed phrase rule; "command"
    spawns `command` once per record with a one-line JSON request on stdin;
    "http" forwards the prompt through the chat gateway.
    """

    backend: str = "mock"
    command: str = ""
    gateway: GatewayConfig | None = None

    def __post_init__(self):
        if self.backend not in ("mock", "command", "http"):
            raise ConfigError(f"unknown generator backend {self.backend!r}")
        if self.backend == "command" and not self.command:
            raise ConfigError("command generator backend requires a command line")
        if self.backend == "http" and self.gateway is None:
            raise ConfigError("http generator backend requires a gateway config")


_GENERATION_SYSTEM_PROMPT = (
    "You are a radiology reporting assistant. Write the diagnostic report "
    "requested by the user, using the listed findings when given."
)


def mock_phrase(label_name: str) -> str:
    """Fixed phrase expansion for one label name."""
    return f"{label_name.lower()} is present."


def _mock_generate(prompt: GuidancePrompt) -> str:
    if not prompt.label_names:
        return "Findings: no abnormality described."
    return "Findings: " + " ".join(mock_phrase(name) for name in prompt.label_names)


def _command_generate(prompt: GuidancePrompt, config: GeneratorConfig) -> str:
    request_line = json.dumps(
        {"prompt": prompt.text, "images": list(prompt.image_paths)}, ensure_ascii=False
    )
    try:
        proc = subprocess.run(
            config.command,
            shell=True,
            input=request_line + "\n",
            capture_output=True,
            text=True,
            timeout=300,
        )
    except (OSError, subprocess.SubprocessError) as exc:
        raise GenerationError(f"generator command failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise GenerationError(
            f"generator command exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
        )
    try:
        payload = json.loads(proc.stdout.strip().splitlines()[-1])
        report = payload["report"]
    except (ValueError, LookupError, IndexError) as exc:
        raise GenerationError(
            f"generator command wrote no parseable report line: {exc}"
        ) from exc
    if not isinstance(report, str):
        raise GenerationError("generator command returned a non-string report")
    return report


def _http_generate(prompt: GuidancePrompt, config: GeneratorConfig) -> str:
    user = prompt.text
    if prompt.image_paths:
        user += "\n\nImages: " + ", ".join(prompt.image_paths)
    response = complete(
        ChatRequest(system=_GENERATION_SYSTEM_PROMPT, user=user), config.gateway
    )
    return response.text


def generate_report(
    record: ReportRecord, prompt: GuidancePrompt, config: GeneratorConfig
) -> str:
    """Produce one report for one record through the configured backend."""
    if config.backend == "mock":
        return _mock_generate(prompt)
    if config.backend == "command":
        return _command_generate(prompt, config)
    return _http_generate(prompt, config)


# ---------------------------------------------------------------------------
# Ablation runner
# ---------------------------------------------------------------------------

# The full ablation grid: prompt mode paired with where labels come from.
ABLATION_MODES: tuple[tuple[str, str], ...] = (
    ("image_only", "none"),
    ("label_only", "pred"),
    ("image_and_label", "pred"),
    ("label_only", "gt"),
    ("image_and_label", "gt"),
)


def mode_tag(mode: str, label_source: str) -> str:
    return mode if label_source == "none" else f"{mode}-{label_source}"


def generated_filename(mode: str, label_source: str) -> str:
    return f"generated-{mode_tag(mode, label_source)}.jsonl"


def _labels_for(
    record: ReportRecord,
    mode: str,
    label_source: str,
    dataset: MLCDataset,
    params: ClassifierParams | None,
    features: FeatureMatrix | None,
    threshold: float,
) -> tuple[int, ...]:
    if mode == "image_only":
        return ()
    if label_source == "gt":
        item = dataset.by_id().get(record.id)
        if item is None:
            raise PrerequisiteError(
                f"record {record.id!r} has no bootstrap label vector; run the bootstrap stage"
            )
        return item.positives
    if params is None or features is None:
        raise PrerequisiteError(
            "predicted labels need a trained checkpoint and features; run the train stage"
        )
    row = features.row_for_id(record.id)
    if row is None:
        raise PrerequisiteError(f"record {record.id!r} has no feature row")
    return predict(params, row, threshold=threshold).positives


def run_generation(
    corpus: Corpus,
    dataset: MLCDataset,
    mode: str,
    label_source: str,
    generator: GeneratorConfig,
    params: ClassifierParams | None = None,
    features: FeatureMatrix | None = None,
    threshold: float = 0.5,
    split: str = "test",
    out_path: str | Path | None = None,
) -> list[dict]:
    """Generate reports for one (mode, label source) cell of the ablation.

    Output rows are ordered by record id. Each row carries the prompt that
    produced it so downstream evaluation never has to re-derive prompts.
    """
    rows: list[dict] = []
    for rec in sorted(corpus.split(split), key=lambda r: r.id):
        positives = _labels_for(
            rec, mode, label_source, dataset, params, features, threshold
        )
        prompt = serialize_labels(
            positives,
            dataset.taxonomy,
            mode=mode,
            label_source="pred" if mode == "image_only" else label_source,
            record=rec,
        )
        report = generate_report(rec, prompt, generator)
        rows.append(
            {
                "id": rec.id,
                "mode": mode,
                "label_source": prompt.label_source,
                "prompt": prompt.text,
                "report": report,
            }
        )
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return rows


def run_ablation(
    corpus: Corpus,
    dataset: MLCDataset,
    generator: GeneratorConfig,
    params: ClassifierParams | None = None,
    features: FeatureMatrix | None = None,
    threshold: float = 0.5,
    split: str = "test",
    out_dir: str | Path = ".",
) -> dict[str, str]:
    """Run every (mode, label source) combination over one split.

    Writes one generated-<mode>.jsonl file per combination and returns a
    map from mode tag to file path. All files cover the same records.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, str] = {}
    for mode, source in ABLATION_MODES:
        path = out / generated_filename(mode, source)
        run_generation(
            corpus,
            dataset,
            mode,
            source,
            generator,
            params=params,
            features=features,
            threshold=threshold,
            split=split,
            out_path=path,
        )
        paths[mode_tag(mode, source)] = str(path)
    return paths


def load_generated(path: str | Path) -> list[dict]:
    rows: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GenerationError(
                    f"generated file {path} line {lineno}: invalid JSON: {exc}"
                ) from exc
            rows.append(obj)
    return rows
