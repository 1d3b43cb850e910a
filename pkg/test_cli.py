"""
End-to-end tests of the command-line tool on a tiny synthetic dataset.
"""

import json

import pytest

import app
from services.dataset_io import read_boxes
from services.model import PRLTrackModel, save_checkpoint

from conftest import make_tiny_config

SYNTH_YAML = """\
version: 1
sequences:
  - name: alpha
    seed: 3
    frame_width: 160
    frame_height: 120
    frame_count: 5
    object_width: 24.0
    object_height: 18.0
  - name: beta
    seed: 4
    frame_width: 160
    frame_height: 120
    frame_count: 4
    object_width: 20.0
    object_height: 20.0
    occluders:
      - {start: 1, end: 3, coverage: 0.5}
"""


@pytest.fixture
def dataset(tmp_path):
    config = tmp_path / 'synth.yaml'
    config.write_text(SYNTH_YAML, encoding='utf-8')
    assert app.main(['synth', '--config', str(config), '--out', str(tmp_path / 'data')]) == 0
    return tmp_path / 'data'


@pytest.fixture
def checkpoint(tmp_path):
    directory = tmp_path / 'checkpoint'
    save_checkpoint(PRLTrackModel(make_tiny_config()), directory, {'step': 0})
    return directory


def test_shapes_trace(capsys):
    assert app.main(['shapes']) == 0
    out = capsys.readouterr().out
    assert 'F5 6×6 / 26×26 → xcorr 21×21' in out
    assert 'F1 29×29 / 69×69' in out
    assert 'tokens 441 × 384' in out


def test_track_then_eval(dataset, checkpoint, tmp_path, capsys):
    results = tmp_path / 'results'
    assert app.main(['track', '--checkpoint', str(checkpoint), '--data', str(dataset), '--out', str(results)]) == 0
    assert len(read_boxes(results / 'alpha.txt')) == 5
    assert len(read_boxes(results / 'beta.txt')) == 4

    report_dir = tmp_path / 'report'
    assert app.main(['eval', '--data', str(dataset), '--results', str(results), '--out', str(report_dir),
                     '--markdown']) == 0
    assert 'precision@20=' in capsys.readouterr().out
    report = json.loads((report_dir / 'report.json').read_text(encoding='utf-8'))
    assert report['evaluated_sequences'] == 2
    assert 'POC' in report['attributes']
    assert (report_dir / 'report.md').exists()


def test_eval_frame_mismatch_exits_one(dataset, tmp_path, capsys):
    results = tmp_path / 'results'
    results.mkdir()
    (results / 'alpha.txt').write_text('1,1,5,5\n', encoding='utf-8')
    assert app.main(['eval', '--data', str(dataset), '--results', str(results), '--out', str(tmp_path / 'r')]) == 1
    assert 'alpha' in capsys.readouterr().err


def test_eval_without_results_exits_one(dataset, tmp_path):
    empty = tmp_path / 'empty'
    empty.mkdir()
    assert app.main(['eval', '--data', str(dataset), '--results', str(empty), '--out', str(tmp_path / 'r')]) == 1


def test_invalid_config_exits_one(tmp_path, capsys):
    config = tmp_path / 'synth.yaml'
    config.write_text('version: 1\nsequences:\n  - name: a\n    colour: red\n', encoding='utf-8')
    assert app.main(['synth', '--config', str(config), '--out', str(tmp_path / 'data')]) == 1
    assert capsys.readouterr().err.startswith('error:')


def test_missing_checkpoint_exits_two(dataset, tmp_path):
    assert app.main(['track', '--checkpoint', str(tmp_path / 'nowhere'), '--data', str(dataset),
                     '--out', str(tmp_path / 'results')]) == 2


def test_bench_reports_attention_cost(checkpoint, capsys):
    assert app.main(['bench', '--checkpoint', str(checkpoint), '--iterations', '1']) == 0
    assert 'attention score entries at T=36: tiered 7776 vs all-pairs 11664' in capsys.readouterr().out


def test_gradcheck_passes(capsys):
    assert app.main(['gradcheck']) == 0
    out = capsys.readouterr().out
    assert 'backbone' in out and 'FAIL' not in out


TRAIN_YAML = """\
version: 1
model_preset: desk
variant: full
epochs: 1
steps_per_epoch: 2
batch_size: 2
warmup_epochs: 1.0
log_every: 1
seed: 7
"""


def test_train_track_eval_round_trip(dataset, tmp_path, capsys):
    config = tmp_path / 'train.yaml'
    config.write_text(TRAIN_YAML, encoding='utf-8')
    run = tmp_path / 'run'
    assert app.main(['train', '--config', str(config), '--data', str(dataset), '--out', str(run)]) == 0
    assert 'Trained 2 steps' in capsys.readouterr().out
    assert (run / 'weights.prlw').exists() and (run / 'model.yaml').exists()

    results = tmp_path / 'results'
    assert app.main(['track', '--checkpoint', str(run), '--data', str(dataset), '--out', str(results)]) == 0
    assert len(read_boxes(results / 'alpha.txt')) == 5
    assert app.main(['eval', '--data', str(dataset), '--results', str(results), '--out', str(tmp_path / 'report'),
                     '--pdf']) == 0
    report = json.loads((tmp_path / 'report' / 'report.json').read_text(encoding='utf-8'))
    assert report['evaluated_sequences'] == 2
    assert (tmp_path / 'report' / 'report.pdf').exists()
