import numpy as np
import pytest

from cdiffset.data import SceneSpec, read_manifest, write_dataset
from cdiffset.denoiser import init_denoiser
from cdiffset.diffusion import make_schedule
from cdiffset.evaluation import (REPORT_HEADER, MetricReport, MissingFilesError, evaluate_manifest,
                                 load_split, mean_image_baseline, score_images, write_report)
from cdiffset.metrics import psnr


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalset")
    manifest, _ = write_dataset(SceneSpec(image_size=16, misalign_max=1.0, discrepancy_prob=0.5), 10, root, workers=1)
    return read_manifest(manifest)


def test_report_layout_and_all_row_is_mean(dataset, tiny_vae, tmp_path):
    model = init_denoiser(8, seed=1, levels=2, cond_dim=16)
    report = evaluate_manifest(dataset, model, tiny_vae, make_schedule(), steps=3, with_auroc=True)
    path = write_report(report, tmp_path / "report.tsv")
    lines = path.read_text().splitlines()
    assert lines[0] == REPORT_HEADER
    test_ids = [e.id for e in dataset.split("test")]
    assert [ln.split("\t")[0] for ln in lines[1:1 + len(test_ids)]] == test_ids
    all_row = lines[1 + len(test_ids)].split("\t")
    assert all_row[0] == "ALL"
    body = np.array([[float(v) for v in ln.split("\t")[1:]] for ln in lines[1:1 + len(test_ids)]])
    np.testing.assert_allclose([float(v) for v in all_row[1:]], body.mean(axis=0), atol=2e-6)
    assert lines[-1].startswith("# confidence_auroc\t")

    again = evaluate_manifest(dataset, model, tiny_vae, make_schedule(), steps=3, with_auroc=True)
    assert again.to_tsv() == report.to_tsv()


def test_score_images_clips_predictions():
    rng = np.random.default_rng(0)
    y = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    pred = y + 5.0
    rows = score_images(["a", "b"], pred, y)
    assert rows[0].psnr == pytest.approx(psnr(np.ones_like(y[0]), y[0]))


def test_mean_image_baseline_predicts_training_mean():
    train = np.stack([np.full((3, 16, 16), v, np.float32) for v in (0.2, 0.4, 0.6)])
    test = np.full((1, 3, 16, 16), 0.5, np.float32)
    # mean image is 0.4 everywhere, so mse is 0.01 and psnr is 20 dB
    assert mean_image_baseline(train, test)[0] == pytest.approx(20.0, abs=1e-5)
    assert mean_image_baseline(train, train[1:2])[0] == 100.0


def test_missing_files_are_listed(dataset, tmp_path):
    import shutil
    root = tmp_path / "copy"
    shutil.copytree(dataset.root, root)
    broken = read_manifest(root / "manifest.tsv")
    victim = broken.split("test")[0]
    (root / victim.eo_path).unlink()
    with pytest.raises(MissingFilesError, match=victim.id):
        load_split(broken)


def test_empty_split_rejected(dataset):
    with pytest.raises(ValueError):
        load_split(dataset, "validation")


def test_report_without_auroc_has_no_comment_line():
    report = MetricReport([])
    report.rows = score_images(["x"], np.zeros((1, 3, 16, 16)), np.full((1, 3, 16, 16), 0.5))
    assert not any(ln.startswith("#") for ln in report.to_tsv().splitlines())


def test_sar_gain_rescales_and_clips(dataset):
    _, plain = load_split(dataset)
    _, scaled = load_split(dataset, sar_gain=2.0)
    np.testing.assert_allclose(scaled[0].sar, np.clip(plain[0].sar * 2.0, 0.0, 1.0))
    np.testing.assert_array_equal(scaled[0].eo, plain[0].eo)
