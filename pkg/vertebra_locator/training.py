"""Plain stochastic gradient descent for the heatmap regression network."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DivergenceError
from .network import gradients, init_params
from .volume import make_target_stack

logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    params: object
    losses: list = field(default_factory=list)

    def log_frame(self):
        return pd.DataFrame({"epoch": range(1, len(self.losses) + 1), "loss": self.losses})


def build_targets(dataset, sigma, scale=1.0):
    """Gaussian target stacks for (volume, landmarks) pairs, multiplied by `scale`."""
    pairs = []
    for volume, landmarks in dataset:
        target = make_target_stack(landmarks, sigma, volume)
        pairs.append((volume, target.with_data(target.data * scale)))
    return pairs


def _batches(count, batch_size, rng):
    """Sample indices per update; a full batch keeps the dataset order."""
    if batch_size is None or batch_size >= count:
        return [list(range(count))]
    order = rng.permutation(count)
    return [order[k:k + batch_size].tolist() for k in range(0, count, batch_size)]


def train(spec, dataset, epochs, sigma, params=None, target_scale=1.0, batch_size=None):
    """Plain SGD; `batch_size` None means one full-batch step per epoch.

    `dataset` holds (Volume3D, LandmarkSet) pairs. Gradients inside a batch
    accumulate in sample order and each batch takes one step of size
    learning_rate on the batch-averaged gradient. Batches are drawn from a
    permutation seeded by spec.seed. Each epoch's logged loss is the average
    of the per-sample loss_total values seen during that epoch, each taken
    before its own batch's update.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("training needs at least one sample")
    if batch_size is not None and batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    params = (params or init_params(spec)).copy()
    result = TrainingResult(params)
    if epochs <= 0:
        return result
    pairs = build_targets(samples, sigma, target_scale)
    lr = spec.learning_rate
    rng = np.random.default_rng(spec.seed)
    for epoch in range(1, epochs + 1):
        total = 0.0
        for batch in _batches(len(pairs), batch_size, rng):
            sum_k = {name: 0.0 for name in params.kernels}
            sum_b = {name: 0.0 for name in params.biases}
            for index in batch:
                volume, target = pairs[index]
                loss, gk, gb = gradients(params, volume, target)
                if not math.isfinite(loss):
                    last = result.losses[-1] if result.losses else None
                    raise DivergenceError(
                        f"training diverged at epoch {epoch}: loss {loss} (last finite loss {last}, learning rate {lr})",
                        epoch=epoch,
                        last_loss=last,
                    )
                total += loss
                for name in sum_k:
                    sum_k[name] = sum_k[name] + gk[name]
                    sum_b[name] = sum_b[name] + gb[name]
            step = lr / len(batch)
            for name in params.kernels:
                params.kernels[name] -= step * sum_k[name]
                params.biases[name] -= step * sum_b[name]
        loss = total / len(pairs)
        result.losses.append(loss)
        logger.debug("epoch %d loss %.6g", epoch, loss)
    if not params.all_finite():
        raise DivergenceError(f"parameters became non-finite after {epochs} epochs", epoch=epochs)
    logger.info("trained %d epochs on %d samples, loss %.6g -> %.6g", epochs, len(pairs), result.losses[0], result.losses[-1])
    return result


def write_training_log(result, path):
    result.log_frame().to_csv(path, index=False, float_format="%.17g")
