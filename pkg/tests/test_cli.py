import os
import warnings

import pandas as pd
import xarray as xr
import yaml

from densa_common import *

from densa.cli import build_parser, main, scene_id
from densa.io import load_coco, read_fingerprint
from densa.scenes import SceneArchive
from densa.training import Checkpoint

SMALL_RUN = ['n_objects=4', 'width=64', 'height=64', 'patch_size=8', 'token_channels=8', 'feature_channels=8',
             'native_mask_resolution=64', 'n_train_scenes=2', 'n_eval_scenes=2', 'iterations=5',
             'pos_points_per_image=8', 'neg_points_per_image=8', 'log_every=1', 'grid_size=16', 'batch_size=16',
             'budget=64', 'bench_grids=[4, 8]', 'bench_budgets=[16]', 'bench_seeds=2', 'bench_n_objects=4',
             'bench_object_scale=1']
UNTRAINED = ['use_pwdnet=false', 'use_fg_location=false']


def cli_args(command, out_dir, *extra, assignments=()):
    argv = [command, '--out-dir', str(out_dir)]
    for assignment in list(SMALL_RUN) + list(assignments):
        argv += ['--set', assignment]
    return argv + list(extra)


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("train")
    assert main(cli_args('train', out_dir)) == 0
    return out_dir


def test_parser():
    args = build_parser().parse_args(['annotate', 'a.png', 'b.png', '--no-overlays', '--seed', '3'])
    assert args.command == 'annotate'
    assert args.images == ['a.png', 'b.png']
    assert args.no_overlays
    assert args.seed == 3
    with pytest.raises(SystemExit):
        build_parser().parse_args(['paint'])


def test_train(trained_dir):
    checkpoint = Checkpoint.load(str(trained_dir / "heads.ckpt"))
    with open(trained_dir / "config.yaml") as f:
        settings = yaml.safe_load(f)
    assert settings['iterations'] == 5
    assert settings['out_dir'] == str(trained_dir)
    assert checkpoint.caps == BackendCaps(8, 8, 8, 64)
    assert len(checkpoint.fingerprint) == 64
    loss = pd.read_csv(trained_dir / "train_loss.csv", comment='#')
    assert len(loss) == 5
    assert np.isfinite(loss['L']).all()


def test_annotate_and_eval(tmp_path, trained_dir):
    checkpoint = f"checkpoint={trained_dir / 'heads.ckpt'}"
    assert main(cli_args('annotate', tmp_path, '--no-overlays', assignments=[checkpoint])) == 0
    annotations = str(tmp_path / "annotations.json")
    records = load_coco(annotations)
    assert [record.image_id for record in records] == [scene_id(10000), scene_id(10001)]
    assert read_fingerprint(annotations) is not None
    assert not (tmp_path / "overlays").exists()

    with warnings.catch_warnings(record=True) as record:
        warnings.simplefilter('always')
        assert main(cli_args('eval', tmp_path, '--detections', annotations, assignments=[checkpoint])) == 0
    assert not [w for w in record if "configuration" in str(w.message)]
    with open(tmp_path / "metrics.yaml") as f:
        metrics = yaml.safe_load(f)
    assert metrics['n_images'] == 2
    assert 0. <= metrics['ap50'] <= 1.
    assert 0. <= metrics['recall'] <= 1.

    # other settings than those the detections were written with
    other = [checkpoint, 'eval_iou=0.6']
    with pytest.warns(UserWarning, match="was written with configuration"):
        assert main(cli_args('eval', tmp_path, '--detections', annotations, assignments=other)) == 0


def test_eval_untrained(tmp_path):
    assert main(cli_args('eval', tmp_path, assignments=UNTRAINED + ['score_threshold=0.5', 'sampler=full'])) == 0
    with open(tmp_path / "metrics.yaml") as f:
        metrics = yaml.safe_load(f)
    assert metrics['recall'] >= 0.5


def test_annotate_with_overlays(tmp_path):
    pytest.importorskip('osgeo.gdal')
    assert main(cli_args('annotate', tmp_path, assignments=UNTRAINED)) == 0
    assert sorted(os.listdir(tmp_path / "overlays")) == [f"{scene_id(10000)}.png", f"{scene_id(10001)}.png"]


def test_bench(tmp_path):
    assert main(cli_args('bench', tmp_path, '--no-plot')) == 0
    table = pd.read_csv(tmp_path / "bench_samplers.csv", comment='#')
    assert list(table['sampler']) == ['full', 'eps', 'random', 'full', 'eps', 'random', 'oracle']
    assert (tmp_path / "bench_timing.csv").exists()
    assert (tmp_path / "bench_per_scene.csv").exists()
    assert not (tmp_path / "bench_samplers.png").exists()


def test_scenes(tmp_path):
    assert main(cli_args('scenes', tmp_path)) == 0
    with SceneArchive(str(tmp_path / "scenes.nc")) as archive:
        scenes = archive.read()
    assert [scene.seed for scene in scenes] == [0, 1, 10000, 10001]


def test_flags_override_settings(tmp_path):
    assert main(cli_args('scenes', tmp_path, '--seed', '5', '--workers', '1', assignments=['seed=3'])) == 0
    with open(tmp_path / "config.yaml") as f:
        settings = yaml.safe_load(f)
    assert settings['seed'] == 5
    assert settings['workers'] == 1
    with SceneArchive(str(tmp_path / "scenes.nc")) as archive:
        assert [scene.seed for scene in archive.read()] == [5, 6, 10005, 10006]


RERUN_FILES = ['annotations.json', 'metrics.yaml', 'bench_samplers.csv', 'bench_per_scene.csv', 'train_loss.csv']


def test_rerun_is_identical(tmp_path, trained_dir):
    checkpoint = f"checkpoint={trained_dir / 'heads.ckpt'}"
    runs = [tmp_path / "first", tmp_path / "second"]
    for out_dir, workers in zip(runs, ['1', '2']):
        assert main(cli_args('scenes', out_dir, '--workers', workers)) == 0
        assert main(cli_args('train', out_dir)) == 0
        assert main(cli_args('annotate', out_dir, '--no-overlays', assignments=[checkpoint])) == 0
        assert main(cli_args('eval', out_dir, assignments=[checkpoint])) == 0
        assert main(cli_args('bench', out_dir, '--no-plot')) == 0

    for name in RERUN_FILES:
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name
    assert xr.load_dataset(runs[0] / "scenes.nc").identical(xr.load_dataset(runs[1] / "scenes.nc"))


def test_errors(tmp_path, capsys):
    # heads are needed for the heatmap and the joint score
    assert main(cli_args('annotate', tmp_path, '--no-overlays')) == 1
    assert "checkpoint" in capsys.readouterr().err
    assert main(cli_args('train', tmp_path, assignments=['grid_sise=4'])) == 1
    assert "grid_sise" in capsys.readouterr().err
    assert main(['eval', '--config', str(tmp_path / "missing.yaml"), '--out-dir', str(tmp_path)]) == 1
    assert main(cli_args('eval', tmp_path, '--detections', str(tmp_path / "missing.json"))) == 1
