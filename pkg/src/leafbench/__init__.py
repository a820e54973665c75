"""Benchmark harness for comparing fine-tuned multimodal-LLM and CNN leaf-disease classifiers.

The pipeline: curate a class-per-folder image corpus into balanced, split,
multi-resolution manifests; search hyperparameters with a Tree-structured
Parzen Estimator; fine-tune through pluggable backends (remote REST,
subprocess trainer, deterministic mock); sweep predictions over test sets;
and emit confusion matrices, macro metrics and report tables.
"""

__version__ = "0.1.0"
