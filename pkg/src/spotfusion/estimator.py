"""Estimator-style wrapper so the pipeline composes with the wider ecosystem.

``TissueClassifier`` follows the scikit-learn parameter conventions
(constructor arguments stored verbatim, ``get_params`` / ``set_params``,
trailing-underscore fitted attributes) while accepting the rich ``Dataset``
container as its X.
"""

from __future__ import annotations

import inspect

import numpy as np

from .data import Dataset, GenePanel, PathwayDb, SpotRecord, preprocess_expression
from .model import ModelParams
from .training import TrainConfig, evaluate, predict_proba_dataset, train
from .validation import check_fitted


class ParamsMixin:
    """get_params / set_params over the constructor signature."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [name for name, p in sig.parameters.items()
                if name != "self" and p.kind == p.POSITIONAL_OR_KEYWORD]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for {type(self).__name__}"
                )
            setattr(self, key, value)
        return self


class TissueClassifier(ParamsMixin):
    """Multimodal spot classifier with a fit/predict interface.

    Parameters mirror the training configuration; ``fit`` expects a
    ``Dataset`` (raw counts are preprocessed automatically) plus, when
    clinical pathways are enabled, a ``PathwayDb``.
    """

    def __init__(self, lr=1e-4, weight_decay=1e-4, epochs=60, batch_size=32,
                 seed=0, learnable_pathways=200, select_frac=0.05,
                 overlap_threshold=0.9, image_mode="graph", pathway_mode="both",
                 st_branch=True, neighbors=8, edge_eps=1e-6, init_scale=0.02,
                 token_mode=False, literal_masked_softmax=False):
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.learnable_pathways = learnable_pathways
        self.select_frac = select_frac
        self.overlap_threshold = overlap_threshold
        self.image_mode = image_mode
        self.pathway_mode = pathway_mode
        self.st_branch = st_branch
        self.neighbors = neighbors
        self.edge_eps = edge_eps
        self.init_scale = init_scale
        self.token_mode = token_mode
        self.literal_masked_softmax = literal_masked_softmax

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed,
            learnable_pathways=self.learnable_pathways,
            select_frac=self.select_frac,
            overlap_threshold=self.overlap_threshold,
            image_mode=self.image_mode, pathway_mode=self.pathway_mode,
            st_branch=self.st_branch, neighbors=self.neighbors,
            edge_eps=self.edge_eps, init_scale=self.init_scale,
            token_mode=self.token_mode,
            literal_masked_softmax=self.literal_masked_softmax,
        )

    def fit(self, dataset: Dataset, pathways: PathwayDb | None = None):
        ds = preprocess_expression(dataset)
        cfg = self._config()
        self.model_, self.history_ = train(ds, pathways, cfg)
        self.classes_ = np.asarray(ds.class_names, dtype=object)
        self.gene_names_ = list(ds.panel.gene_names)
        self.train_dataset_ = ds
        return self

    def _align(self, dataset: Dataset) -> Dataset:
        """Preprocess and restrict a dataset to the fitted gene panel."""
        ds = preprocess_expression(dataset)
        if list(ds.panel.gene_names) == self.gene_names_:
            return ds
        index = ds.panel.index()
        missing = [g for g in self.gene_names_ if g not in index]
        if missing:
            raise ValueError(
                f"dataset is missing {len(missing)} fitted genes "
                f"(first: {missing[0]!r})"
            )
        cols = [index[g] for g in self.gene_names_]
        panel = GenePanel(tuple(self.gene_names_))
        spots = []
        for i in range(len(ds)):
            label = int(ds.labels[i]) if ds.labels[i] >= 0 else None
            spots.append(SpotRecord(ds.spot_ids[i], ds.sample_ids[i],
                                    float(ds.xy[i, 0]), float(ds.xy[i, 1]),
                                    ds.morph[i], ds.expr[i, cols], label))
        return Dataset(panel, spots, ds.class_names, ds.sample_splits, normalized=True)

    def predict_proba(self, dataset: Dataset | None = None,
                      split: str | None = None) -> np.ndarray:
        """Class probabilities; defaults to the fitted dataset's spots."""
        check_fitted(self, "model_")
        ds = self.train_dataset_ if dataset is None else self._align(dataset)
        idx = np.arange(len(ds)) if split is None else ds.split_indices(split)
        _, probs = predict_proba_dataset(ds, self.model_, self._config(), idx)
        return probs

    def predict(self, dataset: Dataset | None = None,
                split: str | None = None) -> np.ndarray:
        return self.predict_proba(dataset, split).argmax(axis=1)

    def score(self, dataset: Dataset | None = None, split: str = "test") -> float:
        """Balanced accuracy on one split (the headline selection metric)."""
        check_fitted(self, "model_")
        ds = self.train_dataset_ if dataset is None else self._align(dataset)
        metrics, _, _, _ = evaluate(ds, split, self.model_, self._config())
        return metrics.bal_acc

    def evaluate(self, dataset: Dataset | None = None, split: str = "test"):
        check_fitted(self, "model_")
        ds = self.train_dataset_ if dataset is None else self._align(dataset)
        return evaluate(ds, split, self.model_, self._config())

    @property
    def model(self) -> ModelParams:
        check_fitted(self, "model_")
        return self.model_
