import math

import numpy as np

from surfseg.classifier import ForestModel, ModelParams, leaf_tree, train
from surfseg.cloud import SemanticClass
from surfseg.features import stack
from surfseg.pipeline import STAGES, PipelineParams, run_cloud, semantic_classes, training_features
from surfseg.scene import ShapeSpec
from surfseg.segment import LabelMap

from conftest import ground, scan

S = SemanticClass

SHAPES = [ground(), ShapeSpec(S.SPHERE, 2, (6.0, 1.0, 0.0), params=(1.5,)),
          ShapeSpec(S.CYLINDER, 3, (-5.0, 3.0, -1.8), params=(1.0, 3.0)),
          ShapeSpec(S.CONE, 4, (2.0, -7.0, -1.8), params=(1.5, 3.0)),
          ShapeSpec(S.PLANE, 5, (-8.0, -4.0, 0.0), (math.pi / 2, 0, 0.7), (3.0, 1.8))]


def test_run_cloud_end_to_end():
    cloud = scan(SHAPES, noise=0.1, step_deg=0.2, seed=1)
    feats = training_features(cloud)
    X, y = stack(feats)
    model = train(X, y, "ert", ModelParams(n_trees=10))
    res = run_cloud(cloud, PipelineParams(), model)
    assert set(res.timings) == set(STAGES) | {"total"}
    assert res.timings["total"] == sum(res.timings[s] for s in STAGES)
    assert res.sub.shape == (32, 360)
    assert res.dense.labels.shape == cloud.shape
    assert (res.dense.labels[~cloud.valid] == 0).all()
    assert res.classes.shape == cloud.shape
    assert set(np.unique(res.classes[cloud.valid])) <= set(range(5))
    # fitting and applying on the same cloud: the ground is recovered
    g = cloud.gt_class[cloud.valid] == S.GROUND_PLANE
    assert (res.classes[cloud.valid][g] == S.GROUND_PLANE).mean() > 0.9


def test_segments_take_their_predicted_class():
    cloud = scan(SHAPES, noise=0.1, step_deg=0.4, seed=1)
    res = run_cloud(cloud, PipelineParams(), with_gt=True)
    model = ForestModel("dt", 49, ModelParams(n_trees=1), (leaf_tree([0, 0, 0, 0, 7]),))
    classes = semantic_classes(res.dense, res.features, model, cloud.valid)
    assert (classes[cloud.valid] == S.CONE).all()
    assert (classes[~cloud.valid] == 0).all()


def test_unlabelled_cells_get_dominant_class():
    dense = LabelMap(np.array([[1, 1, 2, 0]], dtype=np.int32), 2)
    X = np.eye(49)[:2]
    y = np.array([2, 3])
    model = train(X, y, "dt", ModelParams(n_trees=1, min_leaf=1))
    from surfseg.features import LabeledFeature, SegmentFeature
    feats = [LabeledFeature(SegmentFeature.from_vector(X[0]), 1, None, 5),
             LabeledFeature(SegmentFeature.from_vector(X[1]), 2, None, 2)]
    out = semantic_classes(dense, feats, model, np.ones((1, 4), bool))
    assert out.tolist() == [[2, 2, 3, 2]]
