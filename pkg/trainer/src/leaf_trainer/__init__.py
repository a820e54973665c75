"""Local fine-tuning worker: residual classifier training behind a JSON line protocol."""

__version__ = "0.1.0"

PROTO_VERSION = 1
