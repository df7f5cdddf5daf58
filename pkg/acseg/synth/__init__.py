# Synthetic facades with known ground truth
from acseg.synth.facade import (
    facade_layout,
    facade_palette,
    generate_cloud,
    generate_facade,
    label_histogram,
    write_corpus,
)

__all__ = [
    "facade_layout",
    "facade_palette",
    "generate_cloud",
    "generate_facade",
    "label_histogram",
    "write_corpus",
]
