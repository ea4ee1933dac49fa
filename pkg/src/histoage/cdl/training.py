"""
training.py
Stop-gradient siamese training and feature extraction.

loss = mean_i  -cos(predictor(encoder(v1_i)), stop_gradient(encoder(v2_i)))

Only the v1 branch is differentiated; the v2 branch is evaluated without a
tape, so the encoder weights receive gradient through v1 alone.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from histoage.autodiff import ops
from histoage.autodiff.checkpoint import load_checkpoint, save_checkpoint
from histoage.autodiff.optim import SGD, cosine_lr
from histoage.autodiff.tensor import Tensor, backward, no_grad, stop_gradient
from histoage.cdl.networks import CDLModel
from histoage.imaging.augment import AugmentPolicy, augment_pair, center_crop
from histoage.utils.container import read_container, write_container
from histoage.utils.errors import DataError, NonFiniteLossError, NumericFailure
from histoage.utils.parallel import ordered_map
from histoage.utils.rng import derive_seed, numpy_rng

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"EMB1"
FLOAT_FORMAT = "%.9g"


# ---------------------- Loss ----------------------

def cosine_loss(p: Tensor, z: Tensor) -> Tensor:
    """Mean negative cosine similarity over the batch; p and z are (N, D) or (D,)."""
    if p.data.ndim == 1:
        p = ops.reshape(p, (1, p.shape[0]))
        z = ops.reshape(z, (1, z.shape[0]))
    similarity = ops.sum(ops.mul(ops.l2_normalize(p), ops.l2_normalize(z)), axis=1)
    return ops.scale(ops.mean(similarity), -1.0)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def embedding_std(z: np.ndarray) -> np.ndarray:
    """Per-dimension std of l2-normalised rows."""
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return (z / np.where(norms > 0, norms, 1.0)).std(axis=0)


def cdl_loss(model: CDLModel, v1: np.ndarray, v2: np.ndarray, training: bool = True) -> tuple[Tensor, np.ndarray]:
    """Returns (loss, v2-branch encoder outputs)."""
    dtype = model.dtype
    with no_grad():
        z2 = model.encoder(Tensor(np.asarray(v2, dtype=dtype)))
    p1 = model.predictor(model.encoder(Tensor(np.asarray(v1, dtype=dtype))), training=training)
    return cosine_loss(p1, stop_gradient(z2)), z2.data


def cdl_step(model: CDLModel, optimizer: SGD, v1: np.ndarray, v2: np.ndarray, lr: float | None = None,
             epoch: int = -1, batch: int = -1) -> tuple[float, np.ndarray]:
    """One optimizer step on a batch of view pairs. Returns (loss, v2 encoder outputs)."""
    if len(v1) == 0:
        raise DataError("cdl_step needs a non-empty batch")
    try:
        loss, z2 = cdl_loss(model, v1, v2, training=True)
    except NumericFailure as e:
        with no_grad():
            z = model.encoder(Tensor(np.asarray(v2, dtype=model.dtype))).data
        raise NonFiniteLossError(epoch, batch, embedding_std(z).tolist()) from e
    grads = backward(loss, model.parameters())
    optimizer.step(grads, lr=lr, epoch=epoch, batch=batch)
    return loss.item(), z2


# ---------------------- Collapse monitor ----------------------

class CollapseMonitor:
    """Flags collapse when the mean per-dim std of normalised embeddings stays under 0.01/sqrt(D)."""

    def __init__(self, dim: int, patience: int = 5):
        self.threshold = 0.01 / np.sqrt(dim)
        self.patience = patience
        self.streak = 0
        self.fired = False

    def update(self, z: np.ndarray) -> float:
        std = float(embedding_std(z).mean())
        self.streak = self.streak + 1 if std < self.threshold else 0
        if self.streak >= self.patience:
            self.fired = True
        return std


@dataclass
class TrainResult:
    scale_tag: str
    losses: list = field(default_factory=list)
    collapse_std: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    aborted_epochs: list = field(default_factory=list)
    collapsed: bool = False


# ---------------------- Training ----------------------

def _as_float_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    return images.astype(np.float32, copy=False)


def make_views(images: np.ndarray, patch_ids: list, policy: AugmentPolicy, seed: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = ordered_map(lambda i: augment_pair(images[i], policy, seed, patch_ids[i]), range(len(patch_ids)))
    return np.stack([p.v1 for p in pairs]), np.stack([p.v2 for p in pairs])


def train_cdl(model: CDLModel, images: np.ndarray, patch_ids: list, epochs: int = 100, batch_size: int = 32,
              lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 1e-4,
              policy: AugmentPolicy | None = None, seed: int = 0, collapse_patience: int = 5) -> TrainResult:
    """
    Train one scale's model in place on stored patch images (n, 256, 256, 3).
    Shuffling and augmentation draws derive from (seed, epoch, patch id).
    """
    if len(patch_ids) == 0:
        raise DataError(f"no foreground patches to train the {model.scale_tag} model on")
    if len(images) != len(patch_ids):
        raise DataError(f"{len(images)} images but {len(patch_ids)} patch ids")
    policy = policy or AugmentPolicy()
    images = _as_float_images(images)
    optimizer = SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    monitor = CollapseMonitor(model.dim, collapse_patience)
    result = TrainResult(scale_tag=model.scale_tag)
    n = len(patch_ids)

    for epoch in range(epochs):
        start = time.time()
        epoch_lr = cosine_lr(lr, epoch, epochs)
        order = numpy_rng(seed, model.scale_tag, "shuffle", epoch).permutation(n)
        epoch_seed = derive_seed(seed, model.scale_tag, "augment", epoch)
        batch_losses, batch_sizes, z_seen = [], [], []
        aborted = False
        for b, first in enumerate(range(0, n, batch_size)):
            idx = order[first:first + batch_size]
            v1, v2 = make_views(images[idx], [patch_ids[i] for i in idx], policy, epoch_seed)
            try:
                loss, z2 = cdl_step(model, optimizer, v1, v2, lr=epoch_lr, epoch=epoch, batch=b)
            except NonFiniteLossError as e:
                logger.error(f"EPOCH ABORTED - {model.scale_tag} epoch {epoch + 1}/{epochs} - {e}")
                result.aborted_epochs.append(epoch)
                result.warnings.append(str(e))
                aborted = True
                break
            batch_losses.append(loss)
            batch_sizes.append(len(idx))
            z_seen.append(z2)

        if aborted or not batch_losses:
            continue
        epoch_loss = float(np.average(batch_losses, weights=batch_sizes))
        std = monitor.update(np.concatenate(z_seen))
        result.losses.append(epoch_loss)
        result.collapse_std.append(std)
        result.lrs.append(epoch_lr)
        logger.info(
            f"TRAINING EPOCH {epoch + 1}/{epochs} - {model.scale_tag} - loss={epoch_loss:.4f} - "
            f"lr={epoch_lr:.4f} - embedding std={std:.4g} - {int((time.time() - start) * 1000)}ms"
        )
        if monitor.fired and not result.collapsed:
            message = (
                f"embedding collapse: mean per-dim std below {monitor.threshold:.3g} "
                f"for {monitor.patience} consecutive epochs (epoch {epoch + 1})"
            )
            logger.warning(f"COLLAPSE DETECTED - {model.scale_tag} - {message}")
            result.warnings.append(message)
            result.collapsed = True
    return result


# ---------------------- Checkpoints ----------------------

def save_model(path, model: CDLModel, result: TrainResult | None = None) -> Path:
    meta = model.describe()
    if result is not None:
        meta["losses"] = [float(x) for x in result.losses]
        meta["collapsed"] = result.collapsed
    return save_checkpoint(path, model.state_dict(), meta)


def load_model(path, scale_tag: str | None = None, dtype=np.float32) -> CDLModel:
    state, meta = load_checkpoint(path)
    if scale_tag is not None and meta.get("scale_tag") != scale_tag:
        raise DataError(f"checkpoint {path} was trained for scale {meta.get('scale_tag')}, not {scale_tag}")
    model = CDLModel.from_description(meta, dtype=dtype)
    model.load_state_dict(state)
    return model


# ---------------------- Feature extraction ----------------------

def extract_features(model: CDLModel, images: np.ndarray, batch_size: int = 64, crop_size: int = 224) -> np.ndarray:
    """One embedding per image from its center crop, batch norm in eval mode; input order kept."""
    images = _as_float_images(images)
    if len(images) == 0:
        return np.zeros((0, model.dim), dtype=model.dtype)
    starts = list(range(0, len(images), batch_size))

    def run(first):
        batch = np.stack([center_crop(img, crop_size) for img in images[first:first + batch_size]])
        return model.embed(Tensor(batch.astype(model.dtype)), training=False).data

    with no_grad():
        chunks = ordered_map(run, starts)
    return np.concatenate(chunks).astype(model.dtype, copy=False)


def embeddings_frame(features: np.ndarray, patch_ids: list, slide_ids: list, scale_tag: str) -> pd.DataFrame:
    columns = [f"f{i}" for i in range(features.shape[1])]
    frame = pd.DataFrame(features.astype(np.float64), columns=columns)
    frame.insert(0, "scale_tag", scale_tag)
    frame.insert(0, "slide_id", list(slide_ids))
    frame.insert(0, "patch_id", list(patch_ids))
    return frame


def write_embeddings(csv_path, features: np.ndarray, patch_ids: list, slide_ids: list, scale_tag: str) -> list:
    """CSV `patch_id,slide_id,scale_tag,f0..` plus an EMB1 binary twin next to it."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    embeddings_frame(features, patch_ids, slide_ids, scale_tag).to_csv(csv_path, index=False, float_format=FLOAT_FORMAT)
    twin = write_container(
        csv_path.with_suffix(".emb"),
        EMBEDDING_MAGIC,
        {"features": np.asarray(features, dtype=np.float32)},
        {"patch_ids": list(patch_ids), "slide_ids": list(slide_ids), "scale_tag": scale_tag},
    )
    return [csv_path, twin]


def read_embeddings(path) -> tuple[np.ndarray, pd.DataFrame, str]:
    """Read the binary twin when given (or found next to) an embeddings file."""
    path = Path(path)
    twin = path.with_suffix(".emb")
    if twin.exists():
        arrays, meta = read_container(twin, EMBEDDING_MAGIC)
        index = pd.DataFrame({"patch_id": meta["patch_ids"], "slide_id": meta["slide_ids"]})
        return arrays["features"], index, meta["scale_tag"]
    frame = pd.read_csv(path)
    feature_cols = [c for c in frame.columns if c.startswith("f") and c[1:].isdigit()]
    scale = str(frame["scale_tag"].iloc[0]) if len(frame) else ""
    return frame[feature_cols].to_numpy(np.float32), frame[["patch_id", "slide_id"]].copy(), scale
