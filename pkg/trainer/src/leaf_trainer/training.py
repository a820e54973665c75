"""Transfer-learning fine-tune: pretrained residual backbone, fresh 4-way head.

Runs on CPU when no accelerator is present. Training is deterministic under
the fixed internal seed: identical requests reproduce identical loss
sequences. The checkpoint with the best validation accuracy is the one
retained; an external prune request stops after the current epoch and keeps
that best checkpoint.
"""

from __future__ import annotations

import os
import socket
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
from torch import nn
from torch.utils.data import DataLoader
from torchvision import models

from .data import ManifestDataset, build_transform

SEED = 1234
PRETRAINED_ENV = "LEAF_TRAINER_PRETRAINED"

ARCHITECTURES = {
    "resnet50": models.resnet50,
    "resnet18": models.resnet18,
    "resnet34": models.resnet34,
}
DEFAULT_ARCHITECTURE = "resnet50"
DEFAULT_LEARNING_RATE = 0.01
MOMENTUM = 0.9


@dataclass
class TrainRequest:
    train_csv: str
    val_csv: str
    epochs: int
    batch_size: int
    learning_rate: float | None = None
    resume_from: str | None = None
    architecture: str = DEFAULT_ARCHITECTURE

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def build_model(architecture: str, n_classes: int) -> nn.Module:
    """Backbone with a fresh classification head.

    Pretrained weights are attempted unless LEAF_TRAINER_PRETRAINED=0; a
    failed download (offline environments) falls back to random init with a
    warning, never an error.
    """
    ctor = ARCHITECTURES[architecture]
    model = None
    if os.environ.get(PRETRAINED_ENV, "1") != "0":
        previous_timeout = socket.getdefaulttimeout()
        socket.setdefaulttimeout(15)
        try:
            model = ctor(weights="IMAGENET1K_V1")
        except Exception as exc:
            _log(f"warning: pretrained weights unavailable ({exc}); using random init")
        finally:
            socket.setdefaulttimeout(previous_timeout)
    if model is None:
        model = ctor(weights=None)
    model.fc = nn.Linear(model.fc.in_features, n_classes)
    return model


def load_checkpoint(path: str) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("state_dict", "architecture", "classes"):
        if key not in payload:
            raise ValueError(f"{path}: not a trainer checkpoint (missing {key})")
    return payload


def model_from_checkpoint(payload: dict) -> nn.Module:
    model = ARCHITECTURES[payload["architecture"]](weights=None)
    model.fc = nn.Linear(model.fc.in_features, len(payload["classes"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def _evaluate(model: nn.Module, loader: DataLoader, criterion, device) -> tuple[float, float]:
    model.eval()
    total_loss = 0.0
    correct = 0
    count = 0
    with torch.no_grad():
        for inputs, targets in loader:
            inputs, targets = inputs.to(device), targets.to(device)
            outputs = model(inputs)
            total_loss += criterion(outputs, targets).item() * len(targets)
            correct += int((outputs.argmax(dim=1) == targets).sum())
            count += len(targets)
    return total_loss / count, correct / count


def train(
    request: TrainRequest,
    checkpoint_dir: Path | str,
    on_epoch: Callable[[EpochReport], None] | None = None,
    should_stop: Callable[[], bool] | None = None,
    on_warning: Callable[[str], None] | None = None,
) -> tuple[str, float]:
    """Fine-tune per the request; returns (checkpoint path, duration seconds).

    ``should_stop`` is polled after each epoch (the prune hook); stopping
    early still returns the best checkpoint seen so far.
    """
    request.validate()
    started = time.monotonic()
    torch.manual_seed(SEED)
    device = torch.device("cuda" if torch.cuda.is_available() else "cpu")

    warn = on_warning or (lambda message: _log(f"warning: {message}"))
    bad_image = lambda path, reason: warn(f"skipping unreadable image {path}: {reason}")

    if request.resume_from:
        payload = load_checkpoint(request.resume_from)
        classes = list(payload["classes"])
        architecture = payload["architecture"]
        train_set = ManifestDataset(request.train_csv, classes=classes, on_bad_image=bad_image)
        model = model_from_checkpoint(payload)
    else:
        train_set = ManifestDataset(request.train_csv, on_bad_image=bad_image)
        classes = train_set.classes
        architecture = request.architecture
        model = build_model(architecture, len(classes))
    val_set = ManifestDataset(request.val_csv, classes=classes, on_bad_image=bad_image)
    model.to(device)

    generator = torch.Generator().manual_seed(SEED)
    train_loader = DataLoader(
        train_set, batch_size=request.batch_size, shuffle=True, generator=generator, num_workers=0
    )
    val_loader = DataLoader(val_set, batch_size=max(16, request.batch_size), num_workers=0)

    criterion = nn.CrossEntropyLoss()
    learning_rate = request.learning_rate if request.learning_rate is not None else DEFAULT_LEARNING_RATE
    optimizer = torch.optim.SGD(model.parameters(), lr=learning_rate, momentum=MOMENTUM)

    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = checkpoint_dir / f"model-{os.getpid()}-{int(started * 1000) % 1_000_000}.pth"

    best_accuracy = -1.0
    for epoch in range(request.epochs):
        model.train()
        running = 0.0
        seen = 0
        for inputs, targets in train_loader:
            inputs, targets = inputs.to(device), targets.to(device)
            optimizer.zero_grad()
            loss = criterion(model(inputs), targets)
            loss.backward()
            optimizer.step()
            running += loss.item() * len(targets)
            seen += len(targets)
        val_loss, val_accuracy = _evaluate(model, val_loader, criterion, device)
        if val_accuracy > best_accuracy:
            best_accuracy = val_accuracy
            torch.save(
                {
                    "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
                    "architecture": architecture,
                    "classes": classes,
                },
                checkpoint_path,
            )
        report = EpochReport(
            epoch=epoch,
            train_loss=running / seen,
            val_loss=val_loss,
            val_accuracy=val_accuracy,
        )
        if on_epoch:
            on_epoch(report)
        if should_stop and should_stop():
            _log(f"prune requested; stopping after epoch {epoch}")
            break
    return str(checkpoint_path), time.monotonic() - started


class Predictor:
    """Checkpoint-addressed classification with a one-entry model cache."""

    def __init__(self):
        self._path: str | None = None
        self._model: nn.Module | None = None
        self._classes: list[str] = []

    def predict(self, checkpoint: str, image_path: str) -> str:
        from PIL import Image

        if checkpoint != self._path:
            payload = load_checkpoint(checkpoint)
            self._model = model_from_checkpoint(payload)
            self._classes = list(payload["classes"])
            self._path = checkpoint
        transform = build_transform(image_path)
        with Image.open(image_path) as image:
            tensor = transform(image.convert("RGB")).unsqueeze(0)
        with torch.no_grad():
            index = int(self._model(tensor).argmax(dim=1))
        return self._classes[index]
