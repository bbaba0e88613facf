"""Taxonomy bootstrap: turn raw report text into a multi-label dataset.

Three gateway-backed steps. Batched extraction proposes finding names,
iterative merging consolidates them under a token budget, and closed
vocabulary annotation assigns the merged labels to every report. A final
frequency filter drops labels too rare in the training split to learn.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .corpus import Corpus, ReportRecord
from .errors import (
    BootstrapError,
    ConfigError,
    EmptyTaxonomyError,
    LLMOutputError,
    MergeBudgetError,
    MergeProgressError,
)
from .gateway import (
    ChatRequest,
    GatewayConfig,
    complete,
    estimate_tokens,
    parse_string_groups,
    parse_string_list,
)
from .textnorm import alias_key, collapse_whitespace, match_key

logger = logging.getLogger(__name__)

SYNONYM_SIMILARITY_THRESHOLD = 0.85


def _prompt_text(name: str) -> str:
    return resources.files("reportguide.prompts").joinpath(name).read_text(encoding="utf-8")


@dataclass(frozen=True)
class BootstrapConfig:
    """Batching and filtering knobs for the bootstrap stage."""

    batch_size: int = 200
    merge_budget: int = 200
    min_label_count: int = 15

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.merge_budget < 1:
            raise ConfigError("merge_budget must be >= 1")
        if self.min_label_count < 0:
            raise ConfigError("min_label_count must be >= 0")


@dataclass(frozen=True)
class LabelEntry:
    index: int
    name: str
    aliases: tuple[str, ...] = ()
    count: int = 0


@dataclass(frozen=True)
class LabelTaxonomy:
    """Ordered label vocabulary with merge provenance and training counts."""

    labels: tuple[LabelEntry, ...]
    merge_rounds: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, entry in enumerate(self.labels):
            if entry.index != i:
                raise BootstrapError(
                    f"label {entry.name!r} has index {entry.index}, expected {i}"
                )
        keys = [match_key(e.name) for e in self.labels]
        if len(set(keys)) != len(keys):
            raise BootstrapError("taxonomy contains duplicate label names")

    def __len__(self) -> int:
        return len(self.labels)

    def names(self) -> list[str]:
        return [e.name for e in self.labels]

    def index_of(self, surface: str) -> int | None:
        """Resolve a name or alias, case-insensitively, to a label index."""
        key = match_key(surface)
        table = getattr(self, "_lookup", None)
        if table is None:
            table = {}
            for e in self.labels:
                table[match_key(e.name)] = e.index
                for a in e.aliases:
                    table.setdefault(match_key(a), e.index)
            object.__setattr__(self, "_lookup", table)
        return table.get(key)


@dataclass(frozen=True)
class AnnotatedItem:
    record_id: str
    split: str
    positives: tuple[int, ...]


@dataclass(frozen=True)
class MLCDataset:
    """Taxonomy plus one positive-index vector per annotated record."""

    taxonomy: LabelTaxonomy
    items: tuple[AnnotatedItem, ...]
    skipped: tuple[str, ...] = ()

    def __post_init__(self):
        k = len(self.taxonomy)
        for item in self.items:
            for j in item.positives:
                if not 0 <= j < k:
                    raise BootstrapError(
                        f"record {item.record_id!r} has label index {j} outside 0..{k - 1}"
                    )
            if list(item.positives) != sorted(set(item.positives)):
                raise BootstrapError(
                    f"record {item.record_id!r} has unsorted or duplicate positives"
                )

    def by_id(self) -> dict[str, AnnotatedItem]:
        return {item.record_id: item for item in self.items}

    def split_items(self, split: str) -> list[AnnotatedItem]:
        return [item for item in self.items if item.split == split]


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def _dedupe_surfaces(surfaces: list[str]) -> list[str]:
    """Trim and drop case-fold duplicates, keeping first-seen casing."""
    out: list[str] = []
    seen: set[str] = set()
    for s in surfaces:
        surface = collapse_whitespace(s)
        if not surface:
            continue
        key = match_key(surface)
        if key not in seen:
            seen.add(key)
            out.append(surface)
    return out


def _complete_with_reprompt(request: ChatRequest, config: GatewayConfig, parser):
    """Run a call and parse it; on a parse failure, reprompt exactly once."""
    text = complete(request, config).text
    try:
        return parser(text)
    except LLMOutputError:
        nudged = ChatRequest(
            system=request.system,
            user=request.user + "\n\nReturn only the JSON array. No prose, no code fences.",
            temperature=request.temperature,
            max_tokens=request.max_tokens,
        )
        text = complete(nudged, config).text
        return parser(text)  # second failure propagates with raw text attached


def extract_batch_labels(reports: list[str], config: GatewayConfig) -> list[str]:
    """Propose finding names for one batch of report texts."""
    request = ChatRequest(
        system=_prompt_text("extraction.txt"),
        user=json.dumps(reports, ensure_ascii=False),
    )
    surfaces = _complete_with_reprompt(request, config, parse_string_list)
    return _dedupe_surfaces(surfaces)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def _set_cost(labels: list[str]) -> int:
    return estimate_tokens(json.dumps(labels, ensure_ascii=False))


def _group_consecutive(sets: list[list[str]], budget: int) -> list[list[list[str]]]:
    """Greedily pack consecutive sets while their summed cost fits the budget."""
    groups: list[list[list[str]]] = []
    current: list[list[str]] = []
    current_cost = 0
    for label_set in sets:
        cost = _set_cost(label_set)
        if cost > budget:
            raise MergeBudgetError(
                f"label set of {len(label_set)} names costs {cost} tokens, "
                f"over the merge budget of {budget}"
            )
        if current and current_cost + cost > budget:
            groups.append(current)
            current = []
            current_cost = 0
        current.append(label_set)
        current_cost += cost
    if current:
        groups.append(current)
    return groups


class _AliasTracker:
    """Accumulates which surface forms folded into which canonical name."""

    def __init__(self):
        self.aliases: dict[str, list[str]] = {}

    def absorb(self, canonical: str, variants: list[str]) -> None:
        bucket = self.aliases.setdefault(match_key(canonical), [])
        known = {match_key(canonical)} | {match_key(a) for a in bucket}
        for v in variants:
            if match_key(v) not in known:
                known.add(match_key(v))
                bucket.append(v)

    def rename(self, old: str, new: str) -> None:
        if match_key(old) == match_key(new):
            return
        bucket = self.aliases.pop(match_key(old), [])
        self.absorb(new, [old] + bucket)

    def for_name(self, name: str) -> tuple[str, ...]:
        return tuple(self.aliases.get(match_key(name), ()))


def _merge_group(
    group: list[list[str]], config: GatewayConfig, tracker: _AliasTracker
) -> list[str]:
    request = ChatRequest(
        system=_prompt_text("merge.txt"),
        user=json.dumps(group, ensure_ascii=False),
    )
    groups = _complete_with_reprompt(request, config, parse_string_groups)

    offered = {match_key(s) for labels in group for s in labels}
    merged: list[str] = []
    seen: set[str] = set()
    covered: set[str] = set()
    for g in groups:
        canonical, variants = g[0], g[1:]
        if match_key(canonical) not in offered:
            # Invented names are dropped rather than trusted.
            logger.warning("merge output invented label %r; dropping", canonical)
            continue
        for prior in variants:
            tracker.rename(prior, canonical)
        covered.add(match_key(canonical))
        covered.update(match_key(v) for v in variants)
        if match_key(canonical) not in seen:
            seen.add(match_key(canonical))
            merged.append(canonical)
    # Labels the model failed to place are kept, not silently lost.
    for labels in group:
        for s in labels:
            if match_key(s) not in covered and match_key(s) not in seen:
                logger.warning("merge output dropped label %r; keeping it", s)
                seen.add(match_key(s))
                merged.append(s)
    return merged


def merge_label_sets(
    sets: list[list[str]], config: GatewayConfig, merge_budget: int
) -> tuple[list[str], dict[str, tuple[str, ...]], int]:
    """Merge per-batch label sets into one deduplicated list.

    Returns (labels, aliases keyed by match_key of the label, rounds run).
    A single input set passes through unchanged with zero rounds.
    """
    working = [_dedupe_surfaces(s) for s in sets]
    if not working:
        raise BootstrapError("no label sets to merge")
    if len(working) == 1:
        return list(working[0]), {match_key(s): () for s in working[0]}, 0

    tracker = _AliasTracker()
    rounds = 0
    while len(working) > 1:
        groups = _group_consecutive(working, merge_budget)
        if len(groups) == len(working):
            raise MergeProgressError(
                f"merge budget {merge_budget} cannot fit two sets in one call; "
                f"{len(working)} sets remain after {rounds} rounds"
            )
        next_sets: list[list[str]] = []
        for g in groups:
            if len(g) == 1:
                next_sets.append(g[0])
            else:
                next_sets.append(_merge_group(g, config, tracker))
        if len(next_sets) >= len(working):
            raise MergeProgressError(
                f"merge round {rounds + 1} did not reduce {len(working)} sets"
            )
        working = next_sets
        rounds += 1
    final = working[0]
    aliases = {match_key(s): tracker.for_name(s) for s in final}
    return list(final), aliases, rounds


# ---------------------------------------------------------------------------
# Annotation
# ---------------------------------------------------------------------------


def annotate_report(
    record: ReportRecord, taxonomy: LabelTaxonomy, config: GatewayConfig
) -> tuple[int, ...]:
    """Assign taxonomy label indices to one report via the gateway.

    Returned strings are matched to canonical names or aliases case
    insensitively; anything unmatched is dropped with a log line, never
    invented into the vocabulary.
    """
    alias_map = {a: e.name for e in taxonomy.labels for a in e.aliases}
    payload = {
        "report": record.report,
        "labels": taxonomy.names(),
        "aliases": alias_map,
    }
    request = ChatRequest(
        system=_prompt_text("annotate.txt"),
        user=json.dumps(payload, ensure_ascii=False),
    )
    surfaces = _complete_with_reprompt(request, config, parse_string_list)
    positives: set[int] = set()
    for s in surfaces:
        idx = taxonomy.index_of(s)
        if idx is None:
            logger.warning(
                "annotation for record %s returned unknown label %r; dropped", record.id, s
            )
            continue
        positives.add(idx)
    return tuple(sorted(positives))


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def filter_labels(dataset: MLCDataset, min_label_count: int) -> MLCDataset:
    """Drop labels below the training-split frequency threshold.

    Survivors are re-indexed densely in their original order and every
    vector is re-projected. Counts are taken over the training split only.
    """
    k = len(dataset.taxonomy)
    counts = [0] * k
    for item in dataset.items:
        if item.split == "train":
            for j in item.positives:
                counts[j] += 1

    survivors = [e for e in dataset.taxonomy.labels if counts[e.index] >= min_label_count]
    if not survivors:
        raise EmptyTaxonomyError(
            f"no label reaches the frequency threshold {min_label_count} "
            f"on the training split"
        )
    remap = {e.index: new for new, e in enumerate(survivors)}
    new_labels = tuple(
        LabelEntry(index=new, name=e.name, aliases=e.aliases, count=counts[e.index])
        for new, e in enumerate(survivors)
    )
    new_taxonomy = LabelTaxonomy(
        labels=new_labels,
        merge_rounds=dataset.taxonomy.merge_rounds,
        params=dict(dataset.taxonomy.params),
    )
    new_items = tuple(
        AnnotatedItem(
            record_id=item.record_id,
            split=item.split,
            positives=tuple(sorted(remap[j] for j in item.positives if j in remap)),
        )
        for item in dataset.items
    )
    return MLCDataset(taxonomy=new_taxonomy, items=new_items, skipped=dataset.skipped)


# ---------------------------------------------------------------------------
# Full stage
# ---------------------------------------------------------------------------


def bootstrap_dataset(
    corpus: Corpus,
    config: BootstrapConfig,
    gateway: GatewayConfig,
    out_dir: str | Path | None = None,
) -> MLCDataset:
    """Run extraction, merging, annotation, and filtering over a corpus.

    Persists taxonomy.json and labels.jsonl into out_dir when given. With
    the mock backend the whole stage is deterministic, so repeated runs
    write byte-identical artifacts.
    """
    train = corpus.split("train")
    if not train:
        raise BootstrapError("corpus has no training records; nothing to bootstrap from")

    batches = [
        [rec.report for rec in train[i : i + config.batch_size]]
        for i in range(0, len(train), config.batch_size)
    ]
    with ThreadPoolExecutor(max_workers=gateway.parallelism) as pool:
        batch_sets = list(
            pool.map(lambda reports: extract_batch_labels(reports, gateway), batches)
        )
    logger.info(
        "extracted %d label sets from %d training reports (batch size %d)",
        len(batch_sets),
        len(train),
        config.batch_size,
    )

    names, aliases, merge_rounds = merge_label_sets(batch_sets, gateway, config.merge_budget)
    draft = LabelTaxonomy(
        labels=tuple(
            LabelEntry(index=i, name=n, aliases=aliases.get(match_key(n), ()))
            for i, n in enumerate(names)
        ),
        merge_rounds=merge_rounds,
        params={
            "b": config.batch_size,
            "kappa": config.merge_budget,
            "theta": config.min_label_count,
        },
    )
    logger.info("merged to %d draft labels in %d rounds", len(draft), merge_rounds)

    def annotate_one(record: ReportRecord):
        try:
            return AnnotatedItem(
                record_id=record.id,
                split=record.split,
                positives=annotate_report(record, draft, gateway),
            )
        except LLMOutputError as exc:
            logger.warning("skipping record %s: annotation unparseable: %s", record.id, exc)
            return record.id

    with ThreadPoolExecutor(max_workers=gateway.parallelism) as pool:
        results = list(pool.map(annotate_one, corpus.records))
    items = tuple(r for r in results if isinstance(r, AnnotatedItem))
    skipped = tuple(r for r in results if isinstance(r, str))
    if skipped:
        logger.warning("annotation skipped %d records", len(skipped))

    dataset = MLCDataset(taxonomy=draft, items=items, skipped=skipped)
    dataset = filter_labels(dataset, config.min_label_count)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_taxonomy(dataset.taxonomy, out / "taxonomy.json")
        save_labels(dataset, out / "labels.jsonl")
    return dataset


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def taxonomy_to_json(taxonomy: LabelTaxonomy) -> str:
    doc = {
        "version": 1,
        "params": taxonomy.params,
        "merge_rounds": taxonomy.merge_rounds,
        "labels": [
            {"index": e.index, "name": e.name, "aliases": list(e.aliases), "count": e.count}
            for e in taxonomy.labels
        ],
    }
    return json.dumps(doc, ensure_ascii=False, indent=2) + "\n"


def save_taxonomy(taxonomy: LabelTaxonomy, path: str | Path) -> None:
    Path(path).write_text(taxonomy_to_json(taxonomy), encoding="utf-8")


def load_taxonomy(path: str | Path) -> LabelTaxonomy:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BootstrapError(f"taxonomy file {path} is not valid JSON: {exc}") from exc
    if doc.get("version") != 1:
        raise BootstrapError(f"taxonomy file {path} has unsupported version {doc.get('version')!r}")
    labels = tuple(
        LabelEntry(
            index=int(e["index"]),
            name=str(e["name"]),
            aliases=tuple(str(a) for a in e.get("aliases", [])),
            count=int(e.get("count", 0)),
        )
        for e in doc.get("labels", [])
    )
    return LabelTaxonomy(
        labels=labels,
        merge_rounds=int(doc.get("merge_rounds", 0)),
        params=dict(doc.get("params", {})),
    )


def taxonomy_fingerprint(taxonomy: LabelTaxonomy) -> str:
    """Stable digest binding downstream artifacts to a taxonomy."""
    return hashlib.sha256(taxonomy_to_json(taxonomy).encode("utf-8")).hexdigest()


def save_labels(dataset: MLCDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in dataset.items:
            fh.write(
                json.dumps({"id": item.record_id, "positives": list(item.positives)})
                + "\n"
            )


def load_labels(path: str | Path, corpus: Corpus, taxonomy: LabelTaxonomy) -> MLCDataset:
    items: list[AnnotatedItem] = []
    index = corpus.index()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BootstrapError(f"labels line {lineno}: invalid JSON: {exc}") from exc
            rid = str(obj.get("id", ""))
            rec = index.get(rid)
            if rec is None:
                raise BootstrapError(f"labels line {lineno}: unknown record id {rid!r}")
            items.append(
                AnnotatedItem(
                    record_id=rid,
                    split=rec.split,
                    positives=tuple(int(j) for j in obj.get("positives", [])),
                )
            )
    return MLCDataset(taxonomy=taxonomy, items=tuple(items))


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


def audit_taxonomy(dataset: MLCDataset) -> dict:
    """Quality proxies for human review of a bootstrapped taxonomy.

    Coverage is the fraction of annotated reports with at least one positive
    label. Synonym candidates are label pairs whose normalized surfaces are
    nearly identical, which usually means the merge step missed a variant.
    """
    n = len(dataset.items)
    covered = sum(1 for item in dataset.items if item.positives)
    histogram = [
        {"index": e.index, "name": e.name, "count": e.count} for e in dataset.taxonomy.labels
    ]
    candidates: list[dict] = []
    labels = dataset.taxonomy.labels
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            a, b = alias_key(labels[i].name), alias_key(labels[j].name)
            ratio = difflib.SequenceMatcher(None, a, b).ratio()
            if ratio >= SYNONYM_SIMILARITY_THRESHOLD:
                candidates.append(
                    {
                        "a": labels[i].name,
                        "b": labels[j].name,
                        "similarity": round(ratio, 4),
                    }
                )
    return {
        "reports": n,
        "coverage": (covered / n) if n else 0.0,
        "label_histogram": histogram,
        "synonym_candidates": candidates,
    }
