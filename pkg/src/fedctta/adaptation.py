"""Client-side continual test-time adaptation.

Every incoming batch is handled predict-then-adapt: the recorded
predictions come from the model as it was when the batch arrived, and only
afterwards does the model adapt to that batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, UsageError

TTA_MODES = ("bn", "grad", "none")
GRAD_SCOPES = {"all": nn.TRAINABLE_ROLES, "bn_affine": nn.BN_AFFINE_ROLES}
BN_PREDICT = ("running", "batch")


@dataclass
class ClientState:
    client_id: int
    model: nn.Model
    tta_mode: str = "bn"
    lr: float = 1e-5
    steps_per_batch: int = 1
    grad_scope: str = "all"
    bn_predict: str = "running"

    def __post_init__(self):
        if self.tta_mode not in TTA_MODES:
            raise ConfigurationError(f"unknown mode {self.tta_mode!r}", key="tta_mode")
        if self.tta_mode == "grad" and not self.lr > 0:
            raise ConfigurationError("must be positive in grad mode", key="lr")
        if self.lr < 0:
            raise ConfigurationError("must be non-negative", key="lr")
        if self.steps_per_batch < 1:
            raise ConfigurationError("must be at least 1", key="steps_per_batch")
        if self.grad_scope not in GRAD_SCOPES:
            raise ConfigurationError(f"unknown scope {self.grad_scope!r}", key="grad_scope")
        if self.bn_predict not in BN_PREDICT:
            raise ConfigurationError(f"unknown value {self.bn_predict!r}", key="bn_predict")


@dataclass
class AdaptOutcome:
    predictions: np.ndarray
    mean_entropy_before: float
    mean_entropy_after: float
    accuracy: float


def _mean_entropy(logits) -> float:
    return float(nn.entropy(nn.softmax(logits)).mean())


def _accuracy(predictions, batch: nn.Batch) -> float:
    if batch.labels is None:
        return float("nan")
    return float(np.mean(predictions == batch.labels))


def _online_logits(client: ClientState, batch: nn.Batch) -> np.ndarray:
    # "running": stored statistics as of arrival; "batch": the batch's own statistics
    mode = "eval" if client.bn_predict == "running" else "batch_stats"
    return nn.forward(client.model, batch, mode)


def predict(client: ClientState, batch: nn.Batch) -> np.ndarray:
    """Eval-mode argmax; ties go to the lowest class index. The model is not touched."""
    return np.argmax(nn.forward(client.model, batch, "eval"), axis=1)


def adapt_step_bn(client: ClientState, batch: nn.Batch) -> AdaptOutcome:
    """Predict, then fold the batch statistics into every BN layer's running statistics.

    Weights, biases and the BN affine parameters stay bit-identical.
    """
    if client.tta_mode != "bn":
        raise UsageError(f"client {client.client_id} is in {client.tta_mode!r} mode, not 'bn'")
    before = _online_logits(client, batch)
    predictions = np.argmax(before, axis=1)
    nn.forward(client.model, batch, "adapt_stats")
    after = _online_logits(client, batch)
    return AdaptOutcome(predictions, _mean_entropy(before), _mean_entropy(after),
                        _accuracy(predictions, batch))


def adapt_step_grad(client: ClientState, batch: nn.Batch) -> AdaptOutcome:
    """Predict, then take ``steps_per_batch`` SGD steps on the batch's mean entropy.

    Each step runs an ``adapt_stats`` forward, so the running statistics move
    as well; the gradient flows through the batch statistics.
    """
    if client.tta_mode != "grad":
        raise UsageError(f"client {client.client_id} is in {client.tta_mode!r} mode, not 'grad'")
    before = _online_logits(client, batch)
    predictions = np.argmax(before, axis=1)
    roles = GRAD_SCOPES[client.grad_scope]
    model = client.model
    for _ in range(client.steps_per_batch):
        _, record = nn.forward(model, batch, "adapt_stats", cache=True)
        grads = nn.backward_entropy(model, record)
        model = nn.unflatten(model.spec, nn.sgd_step(nn.flatten(model), grads, client.lr, roles))
    client.model = model
    after = _online_logits(client, batch)
    return AdaptOutcome(predictions, _mean_entropy(before), _mean_entropy(after),
                        _accuracy(predictions, batch))


def adapt_step(client: ClientState, batch: nn.Batch) -> AdaptOutcome:
    """Dispatch on ``client.tta_mode``; mode ``none`` only predicts."""
    if client.tta_mode == "bn":
        return adapt_step_bn(client, batch)
    if client.tta_mode == "grad":
        return adapt_step_grad(client, batch)
    logits = nn.forward(client.model, batch, "eval")
    predictions = np.argmax(logits, axis=1)
    h = _mean_entropy(logits)
    return AdaptOutcome(predictions, h, h, _accuracy(predictions, batch))
