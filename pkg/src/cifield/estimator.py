"""Estimator-style façade over the training and rendering modules."""

from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import load_checkpoint, save_checkpoint
from .data import SceneDataset, load_scene
from .errors import UsageError
from .metrics import panoptic_map
from .splat import render
from .train import TrainConfig, TrainLog, evaluate_state, fit


def check_scene(scene) -> SceneDataset:
    """Accept a loaded scene or a scene directory; validate it."""
    if isinstance(scene, (str, Path)):
        return load_scene(scene)
    if not isinstance(scene, SceneDataset):
        raise UsageError(f"expected a SceneDataset or directory, got {type(scene).__name__}")
    scene.validate()
    return scene


class InstanceFieldModel(BaseEstimator):
    """Fits a deformable instance field to a scene and predicts panoptic maps.

    Hyperparameters mirror :class:`~cifield.train.TrainConfig`; ``fit`` runs
    both training stages and stores the result in ``state_``.
    """

    def __init__(self, iters_recon=10_000, iters_inst=3_000, lambda_inst=0.01, num_gaussians=2_000,
                 resample_rate=0.01, resample_every=500, calibrate=True, resample=True, seed=0):
        self.iters_recon = iters_recon
        self.iters_inst = iters_inst
        self.lambda_inst = lambda_inst
        self.num_gaussians = num_gaussians
        self.resample_rate = resample_rate
        self.resample_every = resample_every
        self.calibrate = calibrate
        self.resample = resample
        self.seed = seed

    def config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, scene, y=None, stage: str = "full"):
        scene = check_scene(scene)
        self.log_ = TrainLog()
        self.state_ = fit(scene, self.config(), stage, None, self.log_)
        self.n_instances_ = scene.k
        return self

    def _indices(self, scene, indices):
        return scene.test_indices if indices is None else list(indices)

    def predict(self, scene, indices=None) -> list:
        """Panoptic label maps for the given frames (default: test split)."""
        check_is_fitted(self, "state_")
        scene = check_scene(scene)
        out = []
        for i in self._indices(scene, indices):
            fr = scene.frames[i]
            buf = render(self.state_.gaussians, self.state_.deform, scene.cameras[fr.camera], fr.time)
            out.append(panoptic_map(buf))
        return out

    def render(self, camera, t: float):
        check_is_fitted(self, "state_")
        return render(self.state_.gaussians, self.state_.deform, camera, t)

    def evaluate(self, scene, indices=None):
        check_is_fitted(self, "state_")
        scene = check_scene(scene)
        return evaluate_state(self.state_, scene, self._indices(scene, indices))

    def score(self, scene, y=None, indices=None) -> float:
        """Held-out mIoU."""
        return self.evaluate(scene, indices)[1].miou

    def save(self, path) -> None:
        check_is_fitted(self, "state_")
        save_checkpoint(path, self.state_)

    @classmethod
    def load(cls, path, **params) -> "InstanceFieldModel":
        model = cls(**params)
        model.state_ = load_checkpoint(path)
        model.n_instances_ = model.state_.gaussians.k
        return model
