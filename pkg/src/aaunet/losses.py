"""Class-weighted focal loss and the inverse-frequency weight heuristic."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, DimensionError


def as_class_weights(weights, num_classes):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (num_classes,):
        raise DimensionError(f"class weights: expected shape ({num_classes},), got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ConfigError("class weights must be finite and > 0")
    return w


def focal_loss(logits, target, weights, gamma=2.0):
    """Mean over batch and pixels of -w_y * (1 - p_y)^gamma * log(p_y).

    ``logits`` is N x C x H x W, ``target`` an integer N x H x W map.
    Reduces to class-weighted cross-entropy at gamma = 0.
    """
    if gamma < 0:
        raise ConfigError(f"focal_loss: gamma must be >= 0, got {gamma}")
    if logits.dim() != 4:
        raise DimensionError(f"focal_loss: expected NCHW logits, got rank {logits.dim()}")
    if not isinstance(target, torch.Tensor):
        target = torch.from_numpy(np.asarray(target))
    target = target.long()
    if target.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise DimensionError(
            f"focal_loss: target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}"
        )
    num_classes = logits.shape[1]
    bad = (target < 0) | (target >= num_classes)
    if bool(bad.any()):
        n, h, w = [int(v) for v in bad.nonzero()[0]]
        raise DataError(
            f"focal_loss: target class {int(target[n, h, w])} out of range "
            f"[0, {num_classes}) at pixel (n={n}, h={h}, w={w})"
        )
    w = torch.as_tensor(as_class_weights(weights, num_classes), dtype=logits.dtype,
                        device=logits.device)
    logp = F.log_softmax(logits, dim=1)
    logp_y = logp.gather(1, target.unsqueeze(1)).squeeze(1)
    p_y = logp_y.exp()
    w_y = w[target]
    return (-w_y * (1.0 - p_y) ** gamma * logp_y).mean()


def inverse_frequency_weights(masks, num_classes, clip=10.0):
    """median(freq) / freq_c per class, clipped to [1/clip, clip].

    ``masks`` is an iterable of integer mask arrays.  Classes absent from
    the split get the maximum weight ``clip``.
    """
    if clip < 1:
        raise ConfigError(f"inverse_frequency_weights: clip must be >= 1, got {clip}")
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise DataError("inverse_frequency_weights: empty split")
    freq = counts / total
    present = freq > 0
    med = float(np.median(freq[present]))
    weights = np.full(num_classes, float(clip))
    weights[present] = np.clip(med / freq[present], 1.0 / clip, clip)
    return weights
