"""Protocol loop: line-delimited JSON over stdin/stdout (version 1).

stdout carries protocol lines only; every log goes to stderr. The loop keeps
serving after errors, reporting them as ``{"event": "error", ...}`` lines.
A ``prune`` command received while a training run is in flight stops it
after the current epoch.
"""

from __future__ import annotations

import json
import queue
import sys
import tempfile
import threading

from . import PROTO_VERSION
from .training import Predictor, TrainRequest, train

_MALFORMED = object()


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _reader(messages: "queue.Queue") -> None:
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            messages.put(json.loads(line))
        except ValueError:
            messages.put((_MALFORMED, line))
    messages.put(None)  # EOF


class Worker:
    def __init__(self, checkpoint_dir: str | None = None):
        self.checkpoint_dir = checkpoint_dir or tempfile.mkdtemp(prefix="leaf-trainer-")
        self.predictor = Predictor()
        self.messages: "queue.Queue" = queue.Queue()

    def serve(self) -> None:
        threading.Thread(target=_reader, args=(self.messages,), daemon=True).start()
        while True:
            message = self.messages.get()
            if message is None:
                return
            if isinstance(message, tuple) and message[0] is _MALFORMED:
                _emit({"event": "error", "message": f"malformed JSON line: {message[1][:200]!r}"})
                continue
            self.dispatch(message)

    def dispatch(self, message: dict) -> None:
        cmd = message.get("cmd")
        if cmd == "hello":
            _emit({"ok": True, "proto": PROTO_VERSION})
        elif cmd == "train":
            self.handle_train(message)
        elif cmd == "predict":
            self.handle_predict(message)
        elif cmd == "prune":
            pass  # nothing in flight; harmless
        else:
            _emit({"event": "error", "message": f"unknown command {cmd!r}"})

    def _drain_for_prune(self) -> bool:
        """Poll queued messages mid-training; only prune is meaningful."""
        pruned = False
        while True:
            try:
                message = self.messages.get_nowait()
            except queue.Empty:
                return pruned
            if message is None:
                return True  # stdin closed: stop training, keep best checkpoint
            if isinstance(message, tuple) and message[0] is _MALFORMED:
                _emit({"event": "error", "message": f"malformed JSON line: {message[1][:200]!r}"})
            elif message.get("cmd") == "prune":
                pruned = True
            else:
                _emit({"event": "error", "message": "busy training; request ignored"})

    def handle_train(self, message: dict) -> None:
        try:
            request = TrainRequest(
                train_csv=message["train_csv"],
                val_csv=message["val_csv"],
                epochs=int(message["epochs"]),
                batch_size=int(message["batch_size"]),
                learning_rate=message.get("learning_rate"),
                resume_from=message.get("resume_from"),
                architecture=message.get("architecture") or "resnet50",
            )
            request.validate()
        except (KeyError, TypeError, ValueError) as exc:
            _emit({"event": "error", "message": f"bad train request: {exc}"})
            return
        stop_flag = {"stop": False}

        def should_stop() -> bool:
            if self._drain_for_prune():
                stop_flag["stop"] = True
            return stop_flag["stop"]

        try:
            checkpoint, duration = train(
                request,
                self.checkpoint_dir,
                on_epoch=lambda r: _emit(
                    {
                        "event": "epoch",
                        "epoch": r.epoch,
                        "train_loss": round(r.train_loss, 6),
                        "val_loss": round(r.val_loss, 6),
                        "val_acc": round(r.val_accuracy, 6),
                    }
                ),
                should_stop=should_stop,
                on_warning=lambda msg: _emit({"event": "warning", "message": msg}),
            )
        except Exception as exc:
            _emit({"event": "error", "message": f"training failed: {exc}"})
            return
        _emit({"event": "done", "checkpoint": checkpoint, "duration_s": round(duration, 3)})

    def handle_predict(self, message: dict) -> None:
        try:
            category = self.predictor.predict(message["checkpoint"], message["image"])
        except (KeyError, OSError, ValueError) as exc:
            _emit({"event": "error", "message": f"predict failed: {exc}"})
            return
        _emit({"category": category})


def main() -> None:
    Worker().serve()


if __name__ == "__main__":
    main()
