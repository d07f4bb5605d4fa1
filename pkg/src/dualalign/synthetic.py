"""Synthetic class-clustered feature/caption datasets for smoke runs and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .alignment import DEFAULT_TEMPLATE
from .dataset import PairRecord, new_rng, write_manifest
from .fvecs import write_fvecs

CLASSES = ("Planet", "Asteroid", "Nebula", "Comet", "Star", "Black Hole", "Galaxy", "Constellation")
SYNTH_STREAM = 7


def make_synthetic(
    out_dir,
    classes=CLASSES,
    per_class: int = 100,
    dim: int = 32,
    sigma: float = 0.3,
    seed: int = 0,
    template: str = DEFAULT_TEMPLATE,
    captioned: bool = True,
) -> Path:
    """Write ``features.fvecs`` and ``manifest.jsonl`` under ``out_dir``.

    Each sample is its class centroid (standard normal) plus Gaussian noise
    of scale ``sigma``. Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = new_rng(seed, SYNTH_STREAM)
    centroids = rng.normal(0.0, 1.0, size=(len(classes), dim))
    labels = np.repeat(np.arange(len(classes)), per_class)
    feats = centroids[labels] + rng.normal(0.0, sigma, size=(len(labels), dim))
    write_fvecs(out / "features.fvecs", feats.astype(np.float32))
    records = [
        PairRecord(
            id=f"s{i:05d}",
            features="features.fvecs",
            index=i,
            label=classes[c],
            caption=template.replace("{CLS}", classes[c]) if captioned else None,
            feature_path=str((out / "features.fvecs").resolve()),
        )
        for i, c in enumerate(labels)
    ]
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
