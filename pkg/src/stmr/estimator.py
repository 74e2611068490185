"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .hierarchy import build_hierarchy
from .metrics import point_errors
from .synthetic import generate_template, project
from .training import RunConfig, Setup, face_normals_batch, predict_meshes, train


class STMRRegressor(RegressorMixin, BaseEstimator):
    """Image-to-hand-mesh regressor.

    ``X`` holds images shaped [n, 3, H, W] with values in [0, 1]; ``y`` holds
    meshes [n, 778, 3] in millimeters posed on the synthetic template's
    topology. ``predict`` returns meshes in the same layout.
    """

    def __init__(self, epochs=40, batch_size=32, lr=1e-3, decay_epoch=None, normal_weight=0.05,
                 edge_weight=0.5, decoder="sw_msa", use_mspfe=True, use_ppvl=True, image_size=32, toy=True,
                 template_seed=0, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.decay_epoch = decay_epoch
        self.normal_weight = normal_weight
        self.edge_weight = edge_weight
        self.decoder = decoder
        self.use_mspfe = use_mspfe
        self.use_ppvl = use_ppvl
        self.image_size = image_size
        self.toy = toy
        self.template_seed = template_seed
        self.random_state = random_state

    def _check_images(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_features=1)
        if X.ndim != 4 or X.shape[1] != 3 or X.shape[2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected images [n, 3, {self.image_size}, {self.image_size}], got {X.shape}")
        return X

    def _run_config(self, n: int) -> RunConfig:
        model = {"image_size": self.image_size, "decoder": self.decoder, "use_mspfe": self.use_mspfe,
                 "use_ppvl": self.use_ppvl}
        return RunConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, decay_epoch=self.decay_epoch,
                         normal_weight=self.normal_weight, edge_weight=self.edge_weight, n_train=n, n_val=0,
                         seed=int(self.random_state), template_seed=self.template_seed, toy=self.toy,
                         model=model, eval_every=0)

    def fit(self, X, y, pose2d=None):
        """Train on images and meshes; 2-D joints default to projections of the regressed joints."""
        X = self._check_images(X)
        y = check_array(y, allow_nd=True, dtype=np.float64)
        template = generate_template(self.template_seed)
        if y.shape != (len(X), template.mesh.n_vertices, 3):
            raise ValueError(f"expected meshes [{len(X)}, {template.mesh.n_vertices}, 3], got {y.shape}")
        if pose2d is None:
            pose2d = project(np.einsum("jv,nvc->njc", template.joint_regressor, y))
        pose2d = check_array(pose2d, allow_nd=True, dtype=np.float32)
        run = self._run_config(len(X))
        cfg = run.model_config()
        hierarchy = build_hierarchy(template.mesh, K=cfg.K)
        meshes = (y / cfg.coord_scale).astype(np.float32)
        data = {"images": X, "meshes": meshes, "pose2d": pose2d,
                "normals": face_normals_batch(template.mesh.faces, meshes)}
        init_seed, _, _, shuffle_seed = np.random.SeedSequence(run.seed).spawn(4)
        setup = Setup(run, cfg, template, hierarchy, data, {}, init_seed, shuffle_seed)
        result = train(run, setup=setup)
        self.model_ = result.model
        self.template_ = template
        self.training_log_ = result.log
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_meshes(self.model_, self._check_images(X))[0]

    def predict_pose2d(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_meshes(self.model_, self._check_images(X))[1]

    def score(self, X, y, sample_weight=None) -> float:
        """Negative PA-MPVPE in millimeters (higher is better)."""
        err = point_errors(self.predict(X), np.asarray(y, dtype=np.float64), aligned=True).mean(axis=1)
        return -float(np.average(err, weights=sample_weight))
