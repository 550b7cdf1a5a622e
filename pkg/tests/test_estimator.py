import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gesplat.errors import DataError, ShapeMismatch
from gesplat.estimator import FlowDepthEstimator, SplatReconstructor, check_image
from gesplat.harness.bundle import import_init
from gesplat.harness.synth import SyntheticSceneSpec, synth_scene


@pytest.fixture(scope="module")
def tiny_bundle():
    spec = SyntheticSceneSpec(seed=2, n_gaussians=40, n_matches=6, n_train=3, n_test=1, width=32, height=24, pose_sigma_deg=1.0)
    return import_init(synth_scene(spec).bundle)


def test_params_roundtrip():
    est = SplatReconstructor(total_iters=10, phase1_iters=4, refiner_iters=2, config={"test_pose_iters": 3})
    assert est.get_params()["total_iters"] == 10
    c = clone(est)
    assert c.get_params() == est.get_params()
    est.set_params(lambda_rg=0.5)
    assert est._train_config().lambda_rg == 0.5
    assert est._train_config().test_pose_iters == 3


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SplatReconstructor().predict([])
    with pytest.raises(NotFittedError):
        FlowDepthEstimator().transform({})


def test_fit_predict_score(tiny_bundle):
    est = SplatReconstructor(total_iters=10, phase1_iters=4, refiner_iters=2, config={"test_pose_iters": 3})
    assert est.fit(tiny_bundle) is est
    out = est.predict(est.cameras_)
    assert out[0].shape == (24, 32, 3)
    assert np.isfinite(est.score(tiny_bundle))
    cam = est.refine_pose(tiny_bundle.images[tiny_bundle.test_views[0]], tiny_bundle.cameras[tiny_bundle.test_views[0]])
    assert cam.id == tiny_bundle.test_views[0]


def test_input_validation(tiny_bundle):
    with pytest.raises(ShapeMismatch):
        check_image(np.zeros((4, 4)))
    with pytest.raises(DataError):
        check_image(np.full((2, 2, 3), np.nan))
    with pytest.raises(DataError):
        SplatReconstructor().fit(object())


def test_flow_depth_estimator(tiny_bundle):
    cams = tiny_bundle.gt_cameras
    est = FlowDepthEstimator(view=0).fit(cams)
    flows = {j: f for (i, j), f in tiny_bundle.flows.items() if i == 0}
    depth = est.transform(flows)
    gt = tiny_bundle.gt_depths[0]
    ok = depth > 0
    assert ok.mean() > 0.9
    np.testing.assert_allclose(depth[ok], gt[ok], rtol=1e-6)
    with pytest.raises(ShapeMismatch):
        est.transform({2: np.zeros((3, 3, 2))})
    with pytest.raises(DataError):
        FlowDepthEstimator(view=42).fit(cams)
