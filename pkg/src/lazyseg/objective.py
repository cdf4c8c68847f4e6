"""Masked multi-task cross entropy.

    L = - sum_I sum_k alpha_k * 1[I in I_k] * sum_i sum_c s^(k)_{i,c} log(p^(k)_{i,c} + eps)

Images outside ``I_k`` are dropped from task k before anything is computed,
so their stored label content cannot influence the loss or its gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .data_model import TASKS, LazyLabelSet, OneHotMask

__all__ = ["LossConfig", "LabelBatch", "DegenerateBatchError", "collate_labels", "task_log_likelihood", "multitask_loss"]


class DegenerateBatchError(ValueError):
    """No image in the batch carries any label."""


@dataclass(frozen=True)
class LossConfig:
    alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    eps: float = 1e-8
    reduction: str = "mean"  # "mean" over labelled pixels per task, or "sum"

    def __post_init__(self) -> None:
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if len(self.alphas) != 3 or min(self.alphas) < 0:
            raise ValueError(f"alphas must be three non-negative numbers, got {self.alphas}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


class LabelBatch(NamedTuple):
    """Collated labels: channel-last one-hot tensors plus a ``(B, 3)`` membership mask.

    Slots of non-member images may hold anything; the loss never reads them.
    """

    detection: torch.Tensor
    separation: torch.Tensor
    segmentation: torch.Tensor
    membership: torch.Tensor

    def task(self, k: int) -> torch.Tensor:
        return self[k]


def collate_labels(
    labels: Sequence[LazyLabelSet],
    num_classes: Sequence[int],
    shape: tuple[int, int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> LabelBatch:
    if shape is None:
        shapes = {ls.shape for ls in labels if ls.shape is not None}
        if len(shapes) != 1:
            raise ValueError(f"cannot infer a single label shape from {shapes}")
        shape = shapes.pop()
    B = len(labels)
    tensors = []
    for k, task in enumerate(TASKS):
        arr = np.zeros((B, *shape, num_classes[k]), dtype=np.float32)
        for b, ls in enumerate(labels):
            m = ls.get(task)
            if m is not None:
                if m.shape != tuple(shape) or m.num_classes != num_classes[k]:
                    raise ValueError(f"{task} label of image {b} has shape {m.values.shape}")
                arr[b] = m.values
        tensors.append(torch.from_numpy(arr).to(dtype))
    membership = torch.tensor([ls.membership for ls in labels], dtype=torch.bool).reshape(B, 3)
    return LabelBatch(*tensors, membership)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, OneHotMask):
        x = x.values
    t = torch.as_tensor(np.asarray(x)) if not isinstance(x, torch.Tensor) else x
    if like is not None:
        t = t.to(like.dtype)
    return t


def task_log_likelihood(pred, label, eps: float = 1e-8) -> torch.Tensor:
    """``sum_i sum_c label[i, c] * log(pred[i, c] + eps)`` for one task.

    ``pred`` and ``label`` are channel-last and must have identical shapes
    (a leading batch axis is allowed on both).
    """
    p = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(np.asarray(pred, dtype=np.float64))
    s = _as_tensor(label, like=p)
    if p.shape != s.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} does not match label shape {tuple(s.shape)}")
    return (s * torch.log(p + eps)).sum()


def multitask_loss(preds, labels, cfg: LossConfig = LossConfig()) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted, membership-masked cross entropy over the three tasks.

    ``preds`` is a :class:`~lazyseg.network.TaskProbabilityMaps` (or any
    3-sequence of ``(B, H, W, C_k)`` tensors); ``labels`` a :class:`LabelBatch`
    or a sequence of :class:`LazyLabelSet`. Returns the total loss and the
    alpha-weighted per-task components.
    """
    ref = next(p for p in preds if p is not None)
    if not isinstance(labels, LabelBatch):
        labels = list(labels)
        ncls = [p.shape[-1] if p is not None else 1 for p in preds]
        labels = collate_labels(labels, ncls, tuple(ref.shape[1:3]), dtype=ref.dtype)
    membership = labels.membership.to(torch.bool)
    B = ref.shape[0]
    if membership.shape != (B, 3):
        raise ValueError(f"membership must be ({B}, 3), got {tuple(membership.shape)}")
    if not membership.any():
        raise DegenerateBatchError("no image in the batch is labelled for any task")
    total = ref.new_zeros(())
    components: dict[str, torch.Tensor] = {}
    for k, task in enumerate(TASKS):
        idx = membership[:, k].nonzero(as_tuple=True)[0]
        if idx.numel() == 0:
            components[task] = ref.new_zeros(())
            continue
        if preds[k] is None:
            raise ValueError(f"batch has {task} labels but the model gives no {task} map")
        p = preds[k].index_select(0, idx)
        s = labels[k].index_select(0, idx).to(p.dtype)
        ll = task_log_likelihood(p, s, cfg.eps)
        if cfg.reduction == "mean":
            ll = ll / s.sum().clamp_min(1.0)
        comp = -cfg.alphas[k] * ll
        components[task] = comp
        total = total + comp
    return total, components
