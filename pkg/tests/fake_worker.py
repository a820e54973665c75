"""Instant fake trainer speaking the line-delimited JSON worker protocol.

Used to exercise the SubprocessBackend without any ML stack: training runs
in microseconds, the "checkpoint" is a JSON file, and predict answers with
the label folder embedded in the image path.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def handle_train(msg: dict) -> None:
    started = time.monotonic()
    epochs = int(msg["epochs"])
    if epochs < 1:
        emit({"event": "error", "message": "epochs must be >= 1"})
        return
    with open(msg["train_csv"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    for epoch in range(epochs):
        emit({
            "event": "epoch", "epoch": epoch,
            "train_loss": round(1.0 / (epoch + 1), 4),
            "val_loss": round(1.2 / (epoch + 1), 4),
            "val_acc": round(1.0 - 0.5 / (epoch + 1), 4),
        })
    checkpoint = Path(msg["train_csv"]).parent / f"fake-ckpt-{abs(hash(msg['train_csv'])) % 10_000}.json"
    checkpoint.write_text(json.dumps({"trained_on": msg["train_csv"], "rows": len(rows)}))
    emit({"event": "done", "checkpoint": str(checkpoint), "duration_s": time.monotonic() - started})


def handle_predict(msg: dict) -> None:
    image = msg.get("image", "")
    label = Path(image).parent.name or "unknown"
    emit({"category": label})


def main() -> None:
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except ValueError:
            emit({"event": "error", "message": f"malformed JSON line: {line[:80]!r}"})
            continue
        cmd = msg.get("cmd")
        if cmd == "hello":
            emit({"ok": True, "proto": 1})
        elif cmd == "train":
            handle_train(msg)
        elif cmd == "predict":
            handle_predict(msg)
        elif cmd == "prune":
            pass  # nothing in flight to stop
        else:
            emit({"event": "error", "message": f"unknown command {cmd!r}"})


if __name__ == "__main__":
    main()
