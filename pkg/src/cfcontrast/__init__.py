"""Counterfactual contrastive learning on synthetic acquisition-shift data.

The package is organised around the pipeline it implements:

- :mod:`cfcontrast.synthdata` -- reproducible multi-scanner synthetic images
- :mod:`cfcontrast.scm` -- conditional hierarchical VAE used as a causal
  generative model, counterfactual inference, and the counterfactual store
- :mod:`cfcontrast.augment` -- stochastic view-generation pipeline
- :mod:`cfcontrast.contrastive` -- NT-Xent loss, pair construction
  strategies and the pretraining loop
- :mod:`cfcontrast.evalharness` -- linear probing, finetuning, AUC metrics,
  label-efficiency sweeps and embedding diagnostics
- :mod:`cfcontrast.pipeline` / :mod:`cfcontrast.cli` -- staged orchestration
  from a single declarative config
"""

__version__ = "0.1.0"

from . import seeding  # noqa: F401

__all__ = ["seeding", "__version__"]
