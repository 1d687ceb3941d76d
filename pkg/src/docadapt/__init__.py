"""docadapt: source-free domain adaptation for document layout detection.

The package wires a tiny two-stage detector, dual EMA teachers, consensus
pseudo-labeling, and a six-term weighted self-training loss into a fully
deterministic CPU pipeline, with a synthetic document generator providing a
paired source/target benchmark.
"""

__version__ = "0.1.0"
