import numpy as np
import pytest

from spotfusion.model import Batch, ModelParams, ModelSpec, model_forward
from spotfusion.training import FeatureCache, TrainConfig, build_model_spec


def make_spec(**overrides):
    base = dict(n_classes=3, n_genes=20, class_names=["a", "b", "c"],
                gene_names=[f"G{i}" for i in range(20)],
                learnable_pathways=6, select_frac=0.1,
                clinical_names=["PW0", "PW1"],
                clinical_gene_indices=[[0, 1, 2], [3, 4]])
    base.update(overrides)
    return ModelSpec(**base)


def random_batch(spec, b=4, with_graph=True, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(
        morph=rng.normal(size=(b, 1024)),
        expr=np.abs(rng.normal(size=(b, spec.n_genes))),
        gcn_feats=rng.normal(size=(b, 9, 1024)) if with_graph else None,
        gcn_ehat=np.abs(rng.dirichlet(np.ones(9), size=b)) if with_graph else None,
    )


@pytest.mark.parametrize("image_mode,pathway_mode,st_branch", [
    ("graph", "both", True),
    ("graph", "clinic", True),
    ("graph", "learnable", True),
    ("graph", "none", True),
    ("seq", "none", True),
    ("seq", "none", False),
    ("none", "none", True),
    ("seq", "both", True),
])
def test_forward_shapes_across_ablations(image_mode, pathway_mode, st_branch):
    spec = make_spec(image_mode=image_mode, pathway_mode=pathway_mode,
                     st_branch=st_branch)
    model = ModelParams(spec, np.random.default_rng(1))
    batch = random_batch(spec, with_graph=image_mode == "graph")
    logits = model_forward(model, batch, mode="eval")
    assert logits.data.shape == (4, 3)
    assert np.all(np.isfinite(logits.data))


def test_spec_validation_errors():
    with pytest.raises(ValueError, match="image_mode"):
        make_spec(image_mode="voxel").validate()
    with pytest.raises(ValueError, match="pathway_mode"):
        make_spec(pathway_mode="prior").validate()
    with pytest.raises(ValueError, match="morphology"):
        make_spec(image_mode="none", pathway_mode="both").validate()
    with pytest.raises(ValueError, match="all branches"):
        make_spec(image_mode="none", pathway_mode="none", st_branch=False).validate()
    with pytest.raises(ValueError, match="mask"):
        make_spec(clinical_names=[], clinical_gene_indices=[]).validate()


def test_spec_roundtrip_dict():
    spec = make_spec(image_mode="seq", pathway_mode="learnable")
    again = ModelSpec.from_dict(spec.to_dict())
    assert again.to_dict() == spec.to_dict()


def test_all_parameters_present_even_when_frozen():
    spec = make_spec(image_mode="graph", pathway_mode="none", st_branch=False)
    model = ModelParams(spec, np.random.default_rng(2))
    names = {p.name for p in model.parameters()}
    assert "st_mlp.w" in names
    assert "pathway.w" in names
    assert "xattn_learn.b1.wm2" in names
    trainable = {p.name for p in model.trainable_parameters()}
    assert "st_mlp.w" not in trainable
    assert "late_gate.wc" in trainable


def test_parameter_names_unique_and_ordered():
    spec = make_spec()
    model = ModelParams(spec, np.random.default_rng(3))
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))
    model2 = ModelParams(spec, np.random.default_rng(4))
    assert names == [p.name for p in model2.parameters()]


def test_train_mode_dropout_changes_with_step(tiny_prep):
    from spotfusion.fusion import RngPlan
    ds, db, _ = tiny_prep
    cfg = TrainConfig(epochs=1, seed=0, learnable_pathways=4)
    spec = build_model_spec(ds, db, cfg)
    model = ModelParams(spec, np.random.default_rng(0))
    cache = FeatureCache(ds, cfg, need_graph=True)
    idx = ds.split_indices("train")[:4]
    batch = cache.batch(idx)
    a = model_forward(model, batch, mode="train", plan=RngPlan(1, step=0)).data
    b = model_forward(model, batch, mode="train", plan=RngPlan(1, step=1)).data
    c = model_forward(model, batch, mode="train", plan=RngPlan(1, step=0)).data
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)
