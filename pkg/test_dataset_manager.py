#!/usr/bin/env python3
"""
Tests for manifest loading, histograms, singleton removal, the stratified
split and training-set construction.
"""

import json

import pytest

from dataset_manager import (BoundingBox, DatasetManifest, ImageKind, TrainingStrategy, build_training_set,
                             dataset_summary, load_manifest, remove_singletons, species_histogram,
                             split_stratified, write_histogram_csv, write_manifest)
from pipeline_errors import ManifestError
from synthetic_data import count_manifest, long_tail_eco_counts, long_tail_pattern_counts


def _row(image_id, kind='ecological', width=64, height=48, boxes=None, **extra):
    if boxes is None:
        boxes = [{'species': 'a', 'x_min': 1, 'y_min': 2, 'x_max': 30, 'y_max': 40}]
    return dict(image_id=image_id, path=f"{image_id}.jpg", kind=kind, width=width, height=height,
                boxes=boxes, **extra)


@pytest.fixture
def long_tail_eco():
    return count_manifest(long_tail_eco_counts(), label='eco')


# ---------------------------------------------------------------------------
# load_manifest
# ---------------------------------------------------------------------------

def test_load_well_formed_manifest(write_jsonl):
    """Three well-formed records load in file order."""
    path = write_jsonl([_row('img1'), _row('img2'), _row('img3')])
    manifest = load_manifest(path)
    assert len(manifest) == 3
    assert [r.image_id for r in manifest] == ['img1', 'img2', 'img3']
    assert manifest.records[0].boxes[0].box == BoundingBox(1, 2, 30, 40)


def test_pattern_record_gets_full_image_box(write_jsonl):
    path = write_jsonl([_row('p1', kind='pattern', width=200, height=100, boxes=[], species='papilio')])
    record = load_manifest(path).records[0]
    assert record.kind is ImageKind.PATTERN
    assert len(record.boxes) == 1
    assert record.boxes[0].species == 'papilio'
    assert record.boxes[0].box == BoundingBox(0, 0, 200, 100)


def test_pattern_record_species_field_without_boxes_key(write_jsonl):
    row = _row('p2', kind='pattern', width=50, height=40, species='troides')
    del row['boxes']
    unlabeled = _row('p3', kind='pattern', boxes=[])
    record = load_manifest(write_jsonl([row])).records[0]
    assert [(b.species, b.box) for b in record.boxes] == [('troides', BoundingBox(0, 0, 50, 40))]
    with pytest.raises(ManifestError, match="species") as info:
        load_manifest(write_jsonl([unlabeled]))
    assert 'p3' in str(info.value)


def test_inverted_box_names_image_id(write_jsonl):
    bad = _row('broken', boxes=[{'species': 'a', 'x_min': 20, 'y_min': 0, 'x_max': 20, 'y_max': 10}])
    path = write_jsonl([_row('ok'), bad])
    with pytest.raises(ManifestError) as info:
        load_manifest(path)
    assert 'broken' in str(info.value)
    assert info.value.line == 2


def test_parse_error_reports_line_number(write_jsonl):
    path = write_jsonl([_row('ok'), '{"image_id": "x", '])
    with pytest.raises(ManifestError) as info:
        load_manifest(path)
    assert info.value.line == 2
    assert 'line 2' in str(info.value)


def test_duplicate_image_id_rejected(write_jsonl):
    path = write_jsonl([_row('same'), _row('same')])
    with pytest.raises(ManifestError, match='duplicate'):
        load_manifest(path)


def test_ecological_record_without_boxes_rejected(write_jsonl):
    path = write_jsonl([_row('empty', boxes=[])])
    with pytest.raises(ManifestError, match='no boxes'):
        load_manifest(path)


def test_missing_manifest_file(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / 'nope.jsonl')


def test_write_manifest_keeps_label_seed_and_metadata(tmp_path, make_eco_record):
    manifest = DatasetManifest((make_eco_record('a1', ['a']), make_eco_record('b1', ['b', 'a'])),
                               label='Data_2', seed=11, metadata={'strategy': 'MatchedPatterns'})
    path = write_manifest(manifest, tmp_path / 'out.jsonl')
    loaded = load_manifest(path)
    assert loaded == manifest
    assert (tmp_path / 'out.jsonl.meta.json').exists()


# ---------------------------------------------------------------------------
# species_histogram / dataset_summary
# ---------------------------------------------------------------------------

def test_histogram_single_species(make_eco_record):
    manifest = DatasetManifest(tuple(make_eco_record(f"i{k}", ['a']) for k in range(3)))
    assert species_histogram(manifest).as_dict() == {'a': 3}


def test_histogram_counts_each_image_species_pair_once(make_eco_record):
    manifest = DatasetManifest((make_eco_record('1', ['a']), make_eco_record('2', ['a', 'b']),
                                make_eco_record('3', ['b']), make_eco_record('4', ['b', 'b'])))
    histogram = species_histogram(manifest)
    assert histogram.as_dict() == {'b': 3, 'a': 2}
    assert [s for s, _ in histogram.entries] == ['b', 'a']


def test_histogram_long_tail_fixture(long_tail_eco):
    histogram = species_histogram(long_tail_eco)
    assert len(histogram.entries) == 111
    assert len(histogram.singletons()) == 17
    assert histogram.entries[0][1] == 121
    assert histogram.total == 1425


def test_histogram_csv(tmp_path, make_eco_record):
    manifest = DatasetManifest((make_eco_record('1', ['a']), make_eco_record('2', ['a', 'b'])))
    path = write_histogram_csv(species_histogram(manifest), tmp_path / 'hist.csv')
    assert path.read_text(encoding='utf-8').splitlines() == ['species,count', 'a,2', 'b,1']


def test_dataset_summary_long_tail(long_tail_eco):
    summary = dataset_summary(long_tail_eco)
    assert summary['images'] == 1425
    assert summary['ecological'] == 1425
    assert summary['pattern'] == 0
    assert summary['species'] == 111
    assert summary['singleton_species'] == 17
    assert summary['min_count'] == 1
    assert summary['max_count'] == 121


# ---------------------------------------------------------------------------
# remove_singletons
# ---------------------------------------------------------------------------

def test_remove_singletons_reproduces_eco_counts(long_tail_eco):
    cleaned = remove_singletons(long_tail_eco)
    assert len(cleaned) == 1408
    assert len(cleaned.species_set()) == 94
    assert all(count >= 2 for _, count in species_histogram(cleaned).entries)


def test_remove_singletons_is_idempotent(long_tail_eco):
    once = remove_singletons(long_tail_eco)
    assert remove_singletons(once) == once


def test_remove_singletons_without_singletons_is_identity(make_eco_record):
    manifest = DatasetManifest((make_eco_record('1', ['a']), make_eco_record('2', ['a'])))
    assert remove_singletons(manifest) == manifest


def test_remove_singletons_all_singletons(make_eco_record):
    manifest = DatasetManifest((make_eco_record('1', ['a']), make_eco_record('2', ['b'])))
    assert len(remove_singletons(manifest)) == 0


def test_remove_singletons_strips_boxes_from_mixed_images(make_eco_record):
    manifest = DatasetManifest((make_eco_record('1', ['a', 'rare']), make_eco_record('2', ['a'])))
    cleaned = remove_singletons(manifest)
    assert len(cleaned) == 2
    assert cleaned.species_set() == {'a'}
    assert cleaned.metadata['singletons_removed'] == ['rare']


# ---------------------------------------------------------------------------
# split_stratified
# ---------------------------------------------------------------------------

def test_split_reproduces_train_test_counts(long_tail_eco):
    train, test = split_stratified(remove_singletons(long_tail_eco), seed=7)
    assert len(train) == 721
    assert len(test) == 687


@pytest.mark.parametrize('n, expected', [(5, (3, 2)), (4, (2, 2)), (1, (1, 0))])
def test_split_ceil_rule(make_eco_record, n, expected):
    manifest = DatasetManifest(tuple(make_eco_record(f"i{k}", ['a']) for k in range(n)))
    train, test = split_stratified(manifest, seed=3)
    assert (len(train), len(test)) == expected


def test_split_properties(long_tail_eco):
    cleaned = remove_singletons(long_tail_eco)
    train, test = split_stratified(cleaned, seed=42)
    train_ids = {r.image_id for r in train}
    test_ids = {r.image_id for r in test}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {r.image_id for r in cleaned}

    train_hist = species_histogram(train).as_dict()
    test_hist = species_histogram(test).as_dict()
    for species in cleaned.species_set():
        assert train_hist.get(species, 0) - test_hist.get(species, 0) in (0, 1)


def test_split_is_seeded(long_tail_eco):
    cleaned = remove_singletons(long_tail_eco)
    first, _ = split_stratified(cleaned, seed=5)
    again, _ = split_stratified(cleaned, seed=5)
    other, _ = split_stratified(cleaned, seed=6)
    assert first == again
    assert {r.image_id for r in first} != {r.image_id for r in other}
    assert len(first) == len(other)


def test_split_uses_first_listed_species(make_eco_record):
    manifest = DatasetManifest((make_eco_record('1', ['a', 'b']), make_eco_record('2', ['a']),
                                make_eco_record('3', ['b'])))
    train, test = split_stratified(manifest, seed=0)
    # 'a' group holds images 1 and 2, 'b' group holds image 3.
    assert len(train) == 2 and len(test) == 1
    assert '3' in {r.image_id for r in train}
    assert train.metadata['split_rule'] == 'first-listed species'


# ---------------------------------------------------------------------------
# build_training_set
# ---------------------------------------------------------------------------

@pytest.fixture
def eco_train_and_patterns(long_tail_eco):
    train, _ = split_stratified(remove_singletons(long_tail_eco), seed=1)
    patterns = count_manifest(long_tail_pattern_counts(sorted(train.species_set())),
                              kind=ImageKind.PATTERN, label='patterns')
    return train, patterns


def test_all_patterns_reproduces_data_1_base(eco_train_and_patterns):
    train, patterns = eco_train_and_patterns
    assert len(patterns) == 4270
    data_1 = build_training_set(train, patterns, TrainingStrategy.ALL_PATTERNS)
    assert len(data_1) == 4991
    assert data_1.label == 'Data_1'


def test_matched_patterns_reproduces_data_2_base(eco_train_and_patterns):
    train, patterns = eco_train_and_patterns
    data_2 = build_training_set(train, patterns, 'MatchedPatterns')
    assert len(data_2) == 1306
    assert data_2.label == 'Data_2'
    assert data_2.species_set() <= train.species_set()


def test_empty_patterns_returns_eco_train(eco_train_and_patterns):
    train, _ = eco_train_and_patterns
    for strategy in TrainingStrategy:
        assert build_training_set(train, DatasetManifest(()), strategy).records == train.records


def test_patterns_manifest_must_hold_pattern_records(make_eco_record):
    eco = DatasetManifest((make_eco_record('1', ['a']),))
    with pytest.raises(ManifestError):
        build_training_set(eco, DatasetManifest((make_eco_record('2', ['a']),)), TrainingStrategy.ALL_PATTERNS)


def test_written_manifest_is_json_lines(tmp_path, make_pattern_record):
    manifest = DatasetManifest((make_pattern_record('p', 'x'),))
    path = write_manifest(manifest, tmp_path / 'p.jsonl')
    rows = [json.loads(line) for line in path.read_text(encoding='utf-8').splitlines()]
    assert rows == [{'image_id': 'p', 'path': 'p.ppm', 'kind': 'pattern', 'width': 16, 'height': 16,
                     'boxes': [{'species': 'x', 'x_min': 0, 'y_min': 0, 'x_max': 16, 'y_max': 16}]}]
