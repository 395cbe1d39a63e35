"""scikit-learn style wrappers around the refinement network and the thinner.

Inputs are image stacks rather than feature matrices, so the estimators
validate with their own helpers (:func:`check_images`, :func:`check_labels`)
instead of ``check_X_y``.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bench import DEFAULT_MAX_DIST, benchmark, nms_thin
from .graph import build_rcn, desk_spec, normalize_image
from .training import AugmentConfig, LossConfig, TrainStage, expand_annotators, run_stage


def check_images(X) -> list[np.ndarray]:
    """Return a list of uint8 (H, W, 3) arrays.

    Accepts an (N, H, W, 3) or (N, H, W) array, or a sequence of (H, W, 3)
    or (H, W) arrays.  Float input must lie in [0, 1].
    """
    if isinstance(X, np.ndarray):
        if X.ndim not in (3, 4):
            raise ValueError(f"expected an image stack of rank 3 or 4, got shape {X.shape}")
        items = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError("no images given")
    out = []
    for i, img in enumerate(items):
        img = np.asarray(img)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image {i}: expected (H, W, 3) or (H, W), got {img.shape}")
        if img.dtype != np.uint8:
            if not np.issubdtype(img.dtype, np.floating):
                raise ValueError(f"image {i}: dtype {img.dtype} is neither uint8 nor float")
            if not np.isfinite(img).all() or img.min() < 0 or img.max() > 1:
                raise ValueError(f"image {i}: float pixels must be finite and within [0, 1]")
            img = np.rint(img * 255).astype(np.uint8)
        out.append(img)
    return out


def check_labels(y, images: Sequence[np.ndarray]) -> list[list[np.ndarray]]:
    """Per image, a list of binary annotator maps matching the image extent.

    Each element of ``y`` may be one (H, W) map or a sequence of them.
    """
    y = list(y)
    if len(y) != len(images):
        raise ValueError(f"{len(images)} images but {len(y)} label entries")
    out = []
    for i, (entry, img) in enumerate(zip(y, images)):
        arr = np.asarray(entry) if not isinstance(entry, (list, tuple)) else None
        maps = [arr] if arr is not None and arr.ndim == 2 else [np.asarray(m) for m in entry]
        if not maps:
            raise ValueError(f"image {i} has no annotator labels")
        for m in maps:
            if m.shape != img.shape[:2]:
                raise ValueError(f"image {i}: label {m.shape} does not match image {img.shape[:2]}")
        out.append([(m > 0).astype(np.uint8) for m in maps])
    return out


class RefineContourNet(BaseEstimator):
    """Desk-scale refinement network as an estimator.

    ``fit`` trains from scratch (or continues with ``warm_start``) on images
    and contour labels; ``predict_proba`` returns soft maps at input
    resolution; ``predict`` thins and binarises them; ``score`` is ODS.

    Parameters
    ----------
    widths : tuple of int
        Backbone stage widths.
    fused_channels : int
        Width of every refinement level.
    output_scale : {"half", "full"}
        Resolution the head predicts at.
    beta : float
        Positive-class weight of the loss.
    epochs, images_per_epoch, batch_size, lr, momentum, weight_decay
        Training schedule for the single stage ``fit`` runs.
    crop : int
        Square training crop side.
    annotators : str
        ``"all"`` or ``"single:<id>"``.
    threshold : float
        Binarisation threshold used by ``predict``.
    random_state : int
        Seeds initialisation, sampling and augmentation.
    warm_start : bool
        Reuse the fitted parameters on the next ``fit`` call.
    """

    def __init__(
        self,
        widths=(16, 32, 64, 128),
        fused_channels=32,
        output_scale="half",
        beta=10.0,
        epochs=30,
        images_per_epoch=64,
        batch_size=4,
        lr=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        crop=64,
        vflip_prob=0.5,
        scale_range=(0.7, 1.3),
        annotators="all",
        threshold=0.5,
        random_state=0,
        warm_start=False,
    ):
        self.widths = widths
        self.fused_channels = fused_channels
        self.output_scale = output_scale
        self.beta = beta
        self.epochs = epochs
        self.images_per_epoch = images_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.crop = crop
        self.vflip_prob = vflip_prob
        self.scale_range = scale_range
        self.annotators = annotators
        self.threshold = threshold
        self.random_state = random_state
        self.warm_start = warm_start

    def _stage(self) -> TrainStage:
        return TrainStage(
            epochs=self.epochs,
            images_per_epoch=self.images_per_epoch,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            annotators=self.annotators,
        )

    def fit(self, X, y):
        images = check_images(X)
        labels = check_labels(y, images)
        stage = self._stage()
        stage.validate()
        seeds = np.random.SeedSequence(self.random_state).spawn(2)
        if not (self.warm_start and hasattr(self, "store_")):
            self.spec_ = desk_spec(tuple(self.widths), self.fused_channels, output_scale=self.output_scale)
            init_seed = int(seeds[0].generate_state(1)[0])
            self.store_, self.graph_ = build_rcn(self.spec_, seed=init_seed)
        if self.annotators == "all":
            corpus = expand_annotators(list(zip(images, labels)), "all")
        else:
            corpus = expand_annotators(list(zip(images, labels)), "single", int(self.annotators.split(":")[1]))
        aug = AugmentConfig((self.crop, self.crop), self.vflip_prob, 0.0, tuple(self.scale_range))
        self.history_ = run_stage(
            stage, self.graph_, self.store_, corpus, np.random.default_rng(seeds[1]), LossConfig(self.beta), aug
        )
        self.n_images_ = len(images)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Soft contour maps (N, H, W) in [0, 1]."""
        check_is_fitted(self, "store_")
        images = check_images(X)
        return np.stack([self.graph_.predict(self.store_, normalize_image(img))[0] for img in images])

    def predict(self, X) -> np.ndarray:
        """Thinned binary contour maps (N, H, W)."""
        probs = self.predict_proba(X)
        return np.stack([(nms_thin(p) >= self.threshold).astype(np.uint8) for p in probs])

    def score(self, X, y, max_dist: float = DEFAULT_MAX_DIST) -> float:
        """Dataset-optimal F-measure (ODS) of the thinned predictions."""
        images = check_images(X)
        labels = check_labels(y, images)
        probs = self.predict_proba(images)
        return benchmark([nms_thin(p) for p in probs], labels, max_dist=max_dist).ods


class ContourThinner(TransformerMixin, BaseEstimator):
    """Stateless NMS thinning of soft contour maps.

    Parameters
    ----------
    sigma : float
        Gaussian smoothing used for the orientation estimate.
    """

    def __init__(self, sigma=1.0):
        self.sigma = sigma

    def fit(self, X, y=None):
        self.n_features_in_ = int(np.prod(np.shape(X)[1:])) if np.ndim(X) == 3 else 0
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (2, 3):
            raise ValueError(f"expected (H, W) or (N, H, W) maps, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("maps contain non-finite values")
        if X.ndim == 2:
            return nms_thin(X, self.sigma)
        return np.stack([nms_thin(m, self.sigma) for m in X])
