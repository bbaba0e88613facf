"""Text-overlap and entity metrics for generated reports.

Every metric here is computed from first principles over a shared tokenizer
so scores are reproducible bit for bit: corpus-level BLEU-1..4 without
smoothing, LCS-based ROUGE-L, a tf-idf consensus score with length penalty,
a compact alignment-based METEOR variant, and LLM-extracted entity overlap.
One candidate is scored against exactly one reference.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

from .errors import ConfigError, LLMOutputError
from .gateway import ChatRequest, GatewayConfig, complete, parse_string_list
from .textnorm import is_cjk

logger = logging.getLogger(__name__)

METRIC_NAMES = ("bleu", "rouge_l", "cider_d", "meteor_simple", "entity_f1")

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
METEOR_CHUNK_WEIGHT = 0.5
METEOR_CHUNK_POWER = 3
METEOR_RECALL_WEIGHT = 9.0  # F_mean = 10PR / (R + 9P)


def tokenize(text: str) -> list[str]:
    """Lowercase and split: CJK ideographs become single-character tokens,
    anything alphanumeric groups into runs, punctuation separates and is
    dropped. Idempotent: re-tokenizing a space-joined token list is a no-op.
    """
    tokens: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if is_cjk(ch):
            if current:
                tokens.append("".join(current))
                current = []
            tokens.append(ch)
        elif ch.isalnum():
            current.append(ch)
        else:
            if current:
                tokens.append("".join(current))
                current = []
    if current:
        tokens.append("".join(current))
    return tokens


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu_scores(
    candidates: list[list[str]], references: list[list[str]], max_n: int = 4
) -> list[float]:
    """Corpus-level BLEU-1..max_n with clipped n-gram counts pooled over the
    corpus, a plain geometric mean (no smoothing: a zero precision zeroes
    every order it appears in), and the standard brevity penalty.
    """
    if len(candidates) != len(references):
        raise ConfigError(
            f"{len(candidates)} candidates but {len(references)} references"
        )
    if not candidates:
        raise ConfigError("cannot score an empty corpus")
    clipped = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c_counts = ngram_counts(cand, n)
            r_counts = ngram_counts(ref, n)
            total[n - 1] += sum(c_counts.values())
            clipped[n - 1] += sum(
                min(count, r_counts.get(gram, 0)) for gram, count in c_counts.items()
            )
    precisions = [
        (clipped[i] / total[i]) if total[i] else 0.0 for i in range(max_n)
    ]
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores: list[float] = []
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(p) for p in precisions[:n]) / n
        scores.append(bp * math.exp(log_mean))
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    # One rolling row keeps memory linear in the shorter sequence.
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        row = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                row.append(prev[j - 1] + 1)
            else:
                row.append(max(prev[j], row[j - 1]))
        prev = row
    return prev[-1]


def rouge_l_sample(candidate: list[str], reference: list[str]) -> float:
    """F-measure over the longest common subsequence, recall-weighted with
    beta = 1.2. An empty reference scores zero (with a warning upstream)."""
    if not reference or not candidate:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    recall = lcs / len(reference)
    precision = lcs / len(candidate)
    beta_sq = ROUGE_BETA * ROUGE_BETA
    return ((1 + beta_sq) * recall * precision) / (recall + beta_sq * precision)


# ---------------------------------------------------------------------------
# CIDEr-D style consensus
# ---------------------------------------------------------------------------


def _document_frequencies(references: list[list[str]], max_n: int) -> list[Counter]:
    df: list[Counter] = [Counter() for _ in range(max_n)]
    for ref in references:
        for n in range(1, max_n + 1):
            for gram in set(ngram_counts(ref, n)):
                df[n - 1][gram] += 1
    return df


def _tfidf_vector(tokens: list[str], n: int, df: Counter, corpus_size: int) -> dict:
    counts = ngram_counts(tokens, n)
    vec = {}
    for gram, count in counts.items():
        # df is clamped to 1 so n-grams unseen in the reference corpus keep a
        # finite idf of log(corpus_size).
        idf = math.log(corpus_size / max(1, df.get(gram, 0)))
        vec[gram] = count * idf
    return vec


def _clipped_cosine(cand_vec: dict, ref_vec: dict) -> float:
    cand_norm = math.sqrt(sum(v * v for v in cand_vec.values()))
    ref_norm = math.sqrt(sum(v * v for v in ref_vec.values()))
    if cand_norm == 0.0 or ref_norm == 0.0:
        return 0.0
    dot = sum(
        min(v, ref_vec.get(gram, 0.0)) * ref_vec.get(gram, 0.0)
        for gram, v in cand_vec.items()
    )
    return dot / (cand_norm * ref_norm)


def cider_d_scores(
    candidates: list[list[str]], references: list[list[str]], max_n: int = 4
) -> list[float]:
    """Per-sample consensus scores in [0, 10].

    Vectors are raw n-gram counts weighted by log(|corpus| / df) with df
    clamped to at least 1 and taken over the reference corpus. Similarity is
    a reference-clipped cosine per n-gram order, scaled by a Gaussian length
    penalty (sigma = 6), averaged over n = 1..4, and multiplied by 10. A
    single-document corpus makes every idf zero and the score degenerates.
    """
    if len(candidates) != len(references):
        raise ConfigError(
            f"{len(candidates)} candidates but {len(references)} references"
        )
    if not candidates:
        raise ConfigError("cannot score an empty corpus")
    corpus_size = len(references)
    if corpus_size == 1:
        logger.warning(
            "consensus scoring over a single-document corpus: all idf weights "
            "are zero, scores degenerate to 0"
        )
    df = _document_frequencies(references, max_n)
    scores: list[float] = []
    for cand, ref in zip(candidates, references):
        penalty = math.exp(
            -((len(cand) - len(ref)) ** 2) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)
        )
        per_n = []
        for n in range(1, max_n + 1):
            cand_vec = _tfidf_vector(cand, n, df[n - 1], corpus_size)
            ref_vec = _tfidf_vector(ref, n, df[n - 1], corpus_size)
            per_n.append(_clipped_cosine(cand_vec, ref_vec) * penalty)
        scores.append(10.0 * sum(per_n) / max_n)
    return scores


# ---------------------------------------------------------------------------
# METEOR (exact-match variant)
# ---------------------------------------------------------------------------


def _align(candidate: list[str], reference: list[str]) -> tuple[int, int]:
    """Greedy left-to-right exact alignment; returns (matches, chunks).

    Each candidate token takes an unused reference occurrence of itself,
    preferring the one that continues the current chunk (previous reference
    position + 1), then the earliest unused occurrence. Chunks count maximal
    runs contiguous in both sequences.
    """
    unused: dict[str, list[int]] = {}
    for j, tok in enumerate(reference):
        unused.setdefault(tok, []).append(j)

    matches = 0
    chunks = 0
    prev_cand = -2
    prev_ref = -2
    for i, tok in enumerate(candidate):
        positions = unused.get(tok)
        if not positions:
            continue
        if prev_ref + 1 in positions:
            j = prev_ref + 1
        else:
            j = positions[0]
        positions.remove(j)
        matches += 1
        if not (i == prev_cand + 1 and j == prev_ref + 1):
            chunks += 1
        prev_cand, prev_ref = i, j
    return matches, chunks


def meteor_sample(candidate: list[str], reference: list[str]) -> float:
    """Harmonic precision/recall mean (recall-heavy) discounted by a
    fragmentation penalty of 0.5 * (chunks / matches)^3. No matches: 0."""
    if not candidate or not reference:
        return 0.0
    matches, chunks = _align(candidate, reference)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    f_mean = (
        10.0 * precision * recall / (recall + METEOR_RECALL_WEIGHT * precision)
    )
    penalty = METEOR_CHUNK_WEIGHT * (chunks / matches) ** METEOR_CHUNK_POWER
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# Entity overlap
# ---------------------------------------------------------------------------

_ENTITY_PROMPT = """[task:entities]
You extract clinical entities from one diagnostic report: diseases, findings,
anatomical sites, and devices. Respond with a single JSON array of strings,
one entity per element, and no other text.
"""


def _normalize_entity(entity: str) -> str:
    return " ".join(tokenize(entity))


def extract_entities(text: str, config: GatewayConfig) -> set[str]:
    """LLM entity extraction for one report, normalized for exact matching."""
    request = ChatRequest(system=_ENTITY_PROMPT, user=text)
    raw = complete(request, config).text
    try:
        entities = parse_string_list(raw)
    except LLMOutputError:
        nudged = ChatRequest(
            system=_ENTITY_PROMPT,
            user=text + "\n\nReturn only the JSON array. No prose, no code fences.",
        )
        entities = parse_string_list(complete(nudged, config).text)
    return {e for e in (_normalize_entity(x) for x in entities) if e}


@dataclass(frozen=True)
class EntityScores:
    precision: float
    recall: float
    f1: float


def entity_overlap(generated: set[str], reference: set[str]) -> EntityScores:
    """Set precision/recall/F1 with the empty-set conventions: both empty
    scores 1.0 across the board, exactly one empty scores 0.0."""
    if not generated and not reference:
        return EntityScores(1.0, 1.0, 1.0)
    if not generated or not reference:
        return EntityScores(0.0, 0.0, 0.0)
    hit = len(generated & reference)
    precision = hit / len(generated)
    recall = hit / len(reference)
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
    return EntityScores(precision, recall, f1)


def entity_f1_scores(
    generated_texts: list[str],
    reference_texts: list[str],
    config: GatewayConfig,
) -> tuple[list[EntityScores | None], int]:
    """Per-sample entity overlap; a sample whose extraction stays unparseable
    after the reprompt is excluded (None) and counted, not scored."""
    out: list[EntityScores | None] = []
    failures = 0
    for gen, ref in zip(generated_texts, reference_texts):
        try:
            gen_entities = extract_entities(gen, config)
            ref_entities = extract_entities(ref, config)
        except LLMOutputError as exc:
            logger.warning("entity extraction failed, excluding sample: %s", exc)
            out.append(None)
            failures += 1
            continue
        out.append(entity_overlap(gen_entities, ref_entities))
    return out, failures


# ---------------------------------------------------------------------------
# Corpus evaluation
# ---------------------------------------------------------------------------


def evaluate_generation(
    pairs: list[tuple[str, str, str]],
    gateway: GatewayConfig | None = None,
    enabled: tuple[str, ...] = METRIC_NAMES,
    config_echo: dict | None = None,
) -> dict:
    """Score (id, generated, reference) triples and build the report document.

    Corpus values are pooled for BLEU and averaged per sample for the rest.
    Requires a gateway config when entity_f1 is enabled.
    """
    for name in enabled:
        if name not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {name!r}")
    if "entity_f1" in enabled and gateway is None:
        raise ConfigError("entity_f1 needs a gateway config for extraction")
    if not pairs:
        raise ConfigError("no generated/reference pairs to evaluate")

    ids = [p[0] for p in pairs]
    gen_texts = [p[1] for p in pairs]
    ref_texts = [p[2] for p in pairs]
    gen_tokens = [tokenize(t) for t in gen_texts]
    ref_tokens = [tokenize(t) for t in ref_texts]
    for rid, ref in zip(ids, ref_tokens):
        if not ref:
            logger.warning("record %s has an empty reference after tokenization", rid)

    per_sample: list[dict] = [{"id": rid} for rid in ids]
    corpus: dict = {}
    n = len(pairs)

    if "bleu" in enabled:
        corpus_bleu = bleu_scores(gen_tokens, ref_tokens)
        for i, name in enumerate(("bleu1", "bleu2", "bleu3", "bleu4")):
            corpus[name] = corpus_bleu[i]
        for row, cand, ref in zip(per_sample, gen_tokens, ref_tokens):
            sample = bleu_scores([cand], [ref])
            for i, name in enumerate(("bleu1", "bleu2", "bleu3", "bleu4")):
                row[name] = sample[i]

    if "rouge_l" in enabled:
        values = [rouge_l_sample(c, r) for c, r in zip(gen_tokens, ref_tokens)]
        corpus["rouge_l"] = (sum(values) / n) if n else 0.0
        for row, v in zip(per_sample, values):
            row["rouge_l"] = v

    if "cider_d" in enabled:
        values = cider_d_scores(gen_tokens, ref_tokens)
        corpus["cider_d"] = (sum(values) / n) if n else 0.0
        for row, v in zip(per_sample, values):
            row["cider_d"] = v

    if "meteor_simple" in enabled:
        values = [meteor_sample(c, r) for c, r in zip(gen_tokens, ref_tokens)]
        corpus["meteor_simple"] = (sum(values) / n) if n else 0.0
        for row, v in zip(per_sample, values):
            row["meteor_simple"] = v

    if "entity_f1" in enabled:
        scores, failures = entity_f1_scores(gen_texts, ref_texts, gateway)
        kept = [s for s in scores if s is not None]
        m = len(kept)
        corpus["entity_p"] = (sum(s.precision for s in kept) / m) if m else 0.0
        corpus["entity_r"] = (sum(s.recall for s in kept) / m) if m else 0.0
        corpus["entity_f1"] = (sum(s.f1 for s in kept) / m) if m else 0.0
        if failures:
            corpus["entity_excluded"] = failures
        for row, s in zip(per_sample, scores):
            if s is not None:
                row["entity_p"] = s.precision
                row["entity_r"] = s.recall
                row["entity_f1"] = s.f1

    _validate_ranges(corpus)
    return {"config": dict(config_echo or {}), "corpus": corpus, "per_sample": per_sample}


def _validate_ranges(corpus: dict) -> None:
    unit = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor_simple",
            "entity_p", "entity_r", "entity_f1")
    for name in unit:
        if name in corpus and not -1e-12 <= corpus[name] <= 1.0 + 1e-12:
            raise ConfigError(f"metric {name} out of range: {corpus[name]}")
    if "cider_d" in corpus and not -1e-12 <= corpus["cider_d"] <= 10.0 + 1e-9:
        raise ConfigError(f"metric cider_d out of range: {corpus['cider_d']}")
