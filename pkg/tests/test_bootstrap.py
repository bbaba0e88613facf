"""Taxonomy bootstrap: extraction, budgeted merging, closed-vocabulary
annotation, frequency filtering, persistence, and the audit report."""

from __future__ import annotations

import json

import pytest

from reportguide.bootstrap import (
    AnnotatedItem,
    BootstrapConfig,
    LabelEntry,
    LabelTaxonomy,
    MLCDataset,
    annotate_report,
    audit_taxonomy,
    bootstrap_dataset,
    extract_batch_labels,
    filter_labels,
    load_labels,
    load_taxonomy,
    merge_label_sets,
    save_labels,
    save_taxonomy,
    taxonomy_fingerprint,
)
from reportguide.corpus import Corpus, ReportRecord
from reportguide.errors import (
    BootstrapError,
    ConfigError,
    EmptyTaxonomyError,
    LLMOutputError,
    MergeBudgetError,
    MergeProgressError,
)
from reportguide.gateway import ChatResponse, estimate_tokens

from reportguide import bootstrap as bootstrap_mod


def _taxonomy(names, aliases=None):
    aliases = aliases or {}
    return LabelTaxonomy(
        labels=tuple(
            LabelEntry(index=i, name=n, aliases=tuple(aliases.get(n, ())))
            for i, n in enumerate(names)
        )
    )


# ---------------------------------------------------------------------------
# Type invariants
# ---------------------------------------------------------------------------


def test_bootstrap_config_validation():
    with pytest.raises(ConfigError):
        BootstrapConfig(batch_size=0)
    with pytest.raises(ConfigError):
        BootstrapConfig(merge_budget=0)
    with pytest.raises(ConfigError):
        BootstrapConfig(min_label_count=-1)


def test_taxonomy_requires_dense_indices():
    with pytest.raises(BootstrapError):
        LabelTaxonomy(labels=(LabelEntry(index=1, name="A"),))


def test_taxonomy_rejects_case_insensitive_duplicate_names():
    with pytest.raises(BootstrapError):
        _taxonomy(["Effusion", "effusion"])


def test_taxonomy_index_of_resolves_names_and_aliases():
    tax = _taxonomy(["Pulmonary tuberculosis"], {"Pulmonary tuberculosis": ("TB",)})
    assert tax.index_of("pulmonary TUBERCULOSIS") == 0
    assert tax.index_of("tb") == 0
    assert tax.index_of("unknown thing") is None


def test_dataset_rejects_out_of_range_positives():
    tax = _taxonomy(["A"])
    with pytest.raises(BootstrapError):
        MLCDataset(taxonomy=tax, items=(AnnotatedItem("r", "train", (1,)),))


def test_dataset_rejects_unsorted_positives():
    tax = _taxonomy(["A", "B"])
    with pytest.raises(BootstrapError):
        MLCDataset(taxonomy=tax, items=(AnnotatedItem("r", "train", (1, 0)),))


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def test_extract_batch_labels_maps_mock_lexicon(mock_gateway):
    reports = [
        "A thick-walled cavity is present in the left apex.",
        "Patchy infiltrates are scattered in both bases.",
    ]
    labels = extract_batch_labels(reports, mock_gateway)
    assert labels == ["Pulmonary cavitation", "Pulmonary infiltrates"]


def test_extract_batch_labels_no_hits_is_empty(mock_gateway):
    assert extract_batch_labels(["Entirely normal study."], mock_gateway) == []


def test_extract_batch_labels_dedupes_within_batch(mock_gateway):
    reports = ["A cavity here.", "Another cavity there."]
    assert extract_batch_labels(reports, mock_gateway) == ["Pulmonary cavitation"]


def test_extraction_reprompts_once_then_succeeds(monkeypatch, mock_gateway):
    calls = []

    def fake_complete(request, config):
        calls.append(request)
        if len(calls) == 1:
            return ChatResponse(text="sorry, here you go", input_tokens=0, output_tokens=0)
        return ChatResponse(text='["Pulmonary cavitation"]', input_tokens=0, output_tokens=0)

    monkeypatch.setattr(bootstrap_mod, "complete", fake_complete)
    labels = extract_batch_labels(["whatever"], mock_gateway)
    assert labels == ["Pulmonary cavitation"]
    assert len(calls) == 2
    assert "Return only the JSON array" in calls[1].user


def test_extraction_failure_after_reprompt_carries_raw_text(monkeypatch, mock_gateway):
    def fake_complete(request, config):
        return ChatResponse(text="still not json", input_tokens=0, output_tokens=0)

    monkeypatch.setattr(bootstrap_mod, "complete", fake_complete)
    with pytest.raises(LLMOutputError) as excinfo:
        extract_batch_labels(["whatever"], mock_gateway)
    assert excinfo.value.raw_text == "still not json"


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def test_merge_single_set_passes_through_with_zero_rounds(mock_gateway):
    labels, aliases, rounds = merge_label_sets([["A", "B"]], mock_gateway, merge_budget=200)
    assert labels == ["A", "B"]
    assert rounds == 0
    assert aliases == {"a": (), "b": ()}


def test_merge_twelve_sets_with_four_per_group_takes_two_rounds(mock_gateway):
    # Each set ["A", "B"] serializes to 10 characters = 3 estimated tokens,
    # so a budget of 12 admits exactly four sets per merge call:
    # 12 sets -> 3 merged sets -> 1 set, i.e. exactly two rounds.
    one_set = ["A", "B"]
    assert estimate_tokens(json.dumps(one_set)) == 3
    labels, _, rounds = merge_label_sets([list(one_set) for _ in range(12)], mock_gateway, 12)
    assert rounds == 2
    assert labels == ["A", "B"]


def test_merge_without_progress_raises(mock_gateway):
    # Each set alone fits the budget but no two fit together, so a round
    # cannot reduce the set count.
    sets = [["AAAAAAAAAA"], ["BBBBBBBBBB"]]
    assert all(estimate_tokens(json.dumps(s)) <= 5 for s in sets)
    with pytest.raises(MergeProgressError):
        merge_label_sets(sets, mock_gateway, merge_budget=5)


def test_merge_oversized_single_set_raises_budget_error(mock_gateway):
    oversized = ["X" * 100]
    with pytest.raises(MergeBudgetError):
        merge_label_sets([["A"], oversized], mock_gateway, merge_budget=10)


def test_merge_empty_input_raises(mock_gateway):
    with pytest.raises(BootstrapError):
        merge_label_sets([], mock_gateway, merge_budget=10)


def test_merge_folds_synonyms_and_keeps_alias_provenance(mock_gateway):
    labels, aliases, rounds = merge_label_sets(
        [["TB", "tuberculosis"], ["Pulmonary tuberculosis"]], mock_gateway, merge_budget=200
    )
    assert labels == ["Pulmonary tuberculosis"]
    assert rounds == 1
    assert set(aliases["pulmonary tuberculosis"]) == {"TB", "tuberculosis"}


def test_merge_output_stays_within_offered_labels(mock_gateway):
    sets = [["Pleural effusion", "effusion of the pleura"], ["Consolidation"]]
    labels, _, _ = merge_label_sets(sets, mock_gateway, merge_budget=200)
    offered = {s.casefold() for group in sets for s in group}
    assert all(label.casefold() in offered for label in labels)


def test_merge_drops_invented_canonical_but_keeps_its_members(monkeypatch, mock_gateway, caplog):
    # The model proposes a canonical name that was never offered; the merge
    # must not adopt it, and the original labels must survive.
    def fake_complete(request, config):
        return ChatResponse(
            text='[["Invented disease", "A"], ["B"]]', input_tokens=0, output_tokens=0
        )

    monkeypatch.setattr(bootstrap_mod, "complete", fake_complete)
    with caplog.at_level("WARNING"):
        labels, _, rounds = merge_label_sets([["A"], ["B"]], mock_gateway, merge_budget=200)
    assert labels == ["B", "A"]  # B placed by the model, A recovered afterwards
    assert rounds == 1
    assert any("invented" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# Annotation
# ---------------------------------------------------------------------------


def test_annotate_report_sets_exactly_the_mentioned_labels(mock_gateway):
    tax = _taxonomy(["Pulmonary cavitation", "Pleural effusion", "Consolidation"])
    record = ReportRecord(
        id="r1", split="train", report="A cavity is seen. Small pleural effusion."
    )
    assert annotate_report(record, tax, mock_gateway) == (0, 1)


def test_annotate_report_with_no_mentions_is_empty(mock_gateway):
    tax = _taxonomy(["Pulmonary cavitation"])
    record = ReportRecord(id="r1", split="train", report="Normal study.")
    assert annotate_report(record, tax, mock_gateway) == ()


def test_annotate_drops_labels_outside_taxonomy(monkeypatch, mock_gateway, caplog):
    def fake_complete(request, config):
        return ChatResponse(
            text='["XYZ", "Pulmonary cavitation"]', input_tokens=0, output_tokens=0
        )

    monkeypatch.setattr(bootstrap_mod, "complete", fake_complete)
    tax = _taxonomy(["Pulmonary cavitation"])
    record = ReportRecord(id="r1", split="train", report="whatever")
    with caplog.at_level("WARNING"):
        positives = annotate_report(record, tax, mock_gateway)
    assert positives == (0,)
    assert any("XYZ" in r.message for r in caplog.records)


def test_annotate_matches_aliases_case_insensitively(monkeypatch, mock_gateway):
    def fake_complete(request, config):
        return ChatResponse(text='["tb"]', input_tokens=0, output_tokens=0)

    monkeypatch.setattr(bootstrap_mod, "complete", fake_complete)
    tax = _taxonomy(["Pulmonary tuberculosis"], {"Pulmonary tuberculosis": ("TB",)})
    record = ReportRecord(id="r1", split="train", report="whatever")
    assert annotate_report(record, tax, mock_gateway) == (0,)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def _counted_dataset():
    """Three labels with training counts [20, 14, 15]."""
    tax = _taxonomy(["L0", "L1", "L2"])
    items = []
    for i in range(20):
        positives = [0]
        if i < 14:
            positives.append(1)
        if i < 15:
            positives.append(2)
        items.append(AnnotatedItem(f"t{i:02d}", "train", tuple(sorted(positives))))
    # A non-training item must not affect the counts.
    items.append(AnnotatedItem("v00", "val", (0, 1, 2)))
    return MLCDataset(taxonomy=tax, items=tuple(items))


def test_filter_labels_drops_below_threshold_and_reindexes():
    filtered = filter_labels(_counted_dataset(), min_label_count=15)
    assert filtered.taxonomy.names() == ["L0", "L2"]
    assert [e.index for e in filtered.taxonomy.labels] == [0, 1]
    assert [e.count for e in filtered.taxonomy.labels] == [20, 15]


def test_filter_labels_counts_training_split_only():
    # L1 occurs 14 times in train plus once in val; 15 total must not save it.
    filtered = filter_labels(_counted_dataset(), min_label_count=15)
    assert "L1" not in filtered.taxonomy.names()


def test_filter_labels_reprojects_vectors_by_name():
    dataset = _counted_dataset()
    filtered = filter_labels(dataset, min_label_count=15)
    before = {i.record_id: i for i in dataset.items}
    for item in filtered.items:
        old_names = {
            dataset.taxonomy.labels[j].name for j in before[item.record_id].positives
        }
        new_names = {filtered.taxonomy.labels[j].name for j in item.positives}
        assert new_names == old_names - {"L1"}


def test_filter_labels_theta_one_is_identity_on_present_labels():
    dataset = _counted_dataset()
    filtered = filter_labels(dataset, min_label_count=1)
    assert filtered.taxonomy.names() == ["L0", "L1", "L2"]
    assert {i.record_id: i.positives for i in filtered.items} == {
        i.record_id: i.positives for i in dataset.items
    }


def test_filter_labels_post_condition_min_count_at_threshold():
    filtered = filter_labels(_counted_dataset(), min_label_count=15)
    assert min(e.count for e in filtered.taxonomy.labels) >= 15


def test_filter_labels_all_removed_raises():
    with pytest.raises(EmptyTaxonomyError):
        filter_labels(_counted_dataset(), min_label_count=1000)


# ---------------------------------------------------------------------------
# Full stage on the synthetic corpus
# ---------------------------------------------------------------------------


def test_bootstrap_recovers_generator_labels(synth, mock_gateway):
    dataset = bootstrap_dataset(synth.corpus, BootstrapConfig(), mock_gateway)
    assert set(dataset.taxonomy.names()) == set(synth.primary_names)
    assert len(dataset.taxonomy) == 10
    assert dataset.skipped == ()
    # One batch of 140 training reports under the default batch size of 200.
    assert dataset.taxonomy.merge_rounds == 0


def test_bootstrap_filters_injected_rare_labels(synth, mock_gateway):
    dataset = bootstrap_dataset(synth.corpus, BootstrapConfig(), mock_gateway)
    for rare in synth.rare_names:
        assert rare not in dataset.taxonomy.names()


def test_bootstrap_multiple_batches_still_recover_labels(synth, mock_gateway):
    dataset = bootstrap_dataset(
        synth.corpus, BootstrapConfig(batch_size=40), mock_gateway
    )
    assert set(dataset.taxonomy.names()) == set(synth.primary_names)
    assert dataset.taxonomy.merge_rounds >= 1


def test_bootstrap_requires_training_records(mock_gateway):
    corpus = Corpus(records=[ReportRecord(id="a", split="test", report="t")])
    with pytest.raises(BootstrapError):
        bootstrap_dataset(corpus, BootstrapConfig(), mock_gateway)


def test_bootstrap_reruns_write_byte_identical_artifacts(synth, mock_gateway, tmp_path):
    dir_a = tmp_path / "a"
    dir_b = tmp_path / "b"
    bootstrap_dataset(synth.corpus, BootstrapConfig(), mock_gateway, out_dir=dir_a)
    bootstrap_dataset(synth.corpus, BootstrapConfig(), mock_gateway, out_dir=dir_b)
    for name in ("taxonomy.json", "labels.jsonl"):
        assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()


def test_bootstrap_skips_records_with_unparseable_annotation(monkeypatch, mock_gateway):
    corpus = Corpus(
        records=[
            ReportRecord(id="good", split="train", report="A cavity is seen."),
            ReportRecord(id="bad", split="train", report="A cavity too."),
        ]
    )
    real_complete = bootstrap_mod.complete

    def flaky_complete(request, config):
        if "[task:annotate]" in request.system and "A cavity too." in request.user:
            return ChatResponse(text="garbage", input_tokens=0, output_tokens=0)
        return real_complete(request, config)

    monkeypatch.setattr(bootstrap_mod, "complete", flaky_complete)
    dataset = bootstrap_dataset(
        corpus, BootstrapConfig(min_label_count=1), mock_gateway
    )
    assert dataset.skipped == ("bad",)
    assert [i.record_id for i in dataset.items] == ["good"]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_taxonomy_save_load_round_trip(tmp_path):
    tax = LabelTaxonomy(
        labels=(
            LabelEntry(index=0, name="A", aliases=("a1", "a2"), count=20),
            LabelEntry(index=1, name="B", aliases=(), count=15),
        ),
        merge_rounds=2,
        params={"b": 200, "kappa": 200, "theta": 15},
    )
    path = tmp_path / "taxonomy.json"
    save_taxonomy(tax, path)
    loaded = load_taxonomy(path)
    assert loaded == tax


def test_taxonomy_fingerprint_is_stable_and_sensitive(tmp_path):
    tax_a = _taxonomy(["A", "B"])
    tax_b = _taxonomy(["A", "C"])
    assert taxonomy_fingerprint(tax_a) == taxonomy_fingerprint(_taxonomy(["A", "B"]))
    assert taxonomy_fingerprint(tax_a) != taxonomy_fingerprint(tax_b)


def test_load_taxonomy_rejects_unknown_version(tmp_path):
    path = tmp_path / "taxonomy.json"
    path.write_text('{"version": 99, "labels": []}', encoding="utf-8")
    with pytest.raises(BootstrapError, match="version"):
        load_taxonomy(path)


def test_labels_save_load_round_trip(tmp_path):
    tax = _taxonomy(["A", "B"])
    corpus = Corpus(
        records=[
            ReportRecord(id="r1", split="train", report="t"),
            ReportRecord(id="r2", split="test", report="t"),
        ]
    )
    dataset = MLCDataset(
        taxonomy=tax,
        items=(AnnotatedItem("r1", "train", (0, 1)), AnnotatedItem("r2", "test", ())),
    )
    path = tmp_path / "labels.jsonl"
    save_labels(dataset, path)
    loaded = load_labels(path, corpus, tax)
    assert loaded.items == dataset.items


def test_load_labels_rejects_unknown_record(tmp_path):
    tax = _taxonomy(["A"])
    corpus = Corpus(records=[ReportRecord(id="r1", split="train", report="t")])
    path = tmp_path / "labels.jsonl"
    path.write_text('{"id": "ghost", "positives": []}\n', encoding="utf-8")
    with pytest.raises(BootstrapError, match="ghost"):
        load_labels(path, corpus, tax)


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


def test_audit_coverage_is_one_when_every_report_has_a_label():
    tax = _taxonomy(["A"])
    items = tuple(AnnotatedItem(f"r{i}", "train", (0,)) for i in range(4))
    audit = audit_taxonomy(MLCDataset(taxonomy=tax, items=items))
    assert audit["coverage"] == 1.0
    assert audit["reports"] == 4


def test_audit_counts_unlabeled_reports():
    tax = _taxonomy(["A"])
    items = (AnnotatedItem("r0", "train", (0,)), AnnotatedItem("r1", "train", ()))
    audit = audit_taxonomy(MLCDataset(taxonomy=tax, items=items))
    assert audit["coverage"] == 0.5


def test_audit_flags_punctuation_variant_synonyms():
    tax = _taxonomy(["optic disc edema", "optic-disc edema"])
    audit = audit_taxonomy(MLCDataset(taxonomy=tax, items=()))
    pairs = {(c["a"], c["b"]) for c in audit["synonym_candidates"]}
    assert ("optic disc edema", "optic-disc edema") in pairs


def test_audit_does_not_flag_distinct_labels():
    tax = _taxonomy(["Pneumothorax", "Cardiomegaly"])
    audit = audit_taxonomy(MLCDataset(taxonomy=tax, items=()))
    assert audit["synonym_candidates"] == []
