import numpy as np
import pytest

from ssr import evaluation, superpixel, tensor_io
from ssr.fixture import FixtureConfig, make_fixture


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    """Seed-0 synthetic dataset shared by the slower tests."""
    root = tmp_path_factory.mktemp("fixture0")
    images, manifest = make_fixture(FixtureConfig(seed=0), root)
    return root, images, manifest


@pytest.fixture(scope="session")
def fixture_bundles(fixture_dataset):
    _, _, manifest = fixture_dataset
    return [tensor_io.load_bundle(manifest, e) for e in manifest.entries]


def pseudo_label_miou(root, manifest, bundles, cams, bg_thresh=0.45):
    """mIoU of CAM-derived pseudo-labels against the fixture ground truth."""
    acc = evaluation.ConfusionAccumulator(manifest.num_foreground)
    for bundle, cam in zip(bundles, cams):
        pred = evaluation.cam_to_pseudo_label(cam, bundle.labels, bg_thresh)
        gt = np.asarray(tensor_io.load_tensor(root / "gt" / f"{bundle.image_id}.npy"))
        evaluation.accumulate(acc, superpixel.upsample_nearest(pred, gt.shape), gt)
    return evaluation.metrics(acc).miou
