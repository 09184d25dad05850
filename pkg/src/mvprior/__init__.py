"""Multi-view object templates with cross-view transfer priors.

Submodules: ``model`` (parameter layout and files), ``geometry`` (camera rig,
ray casting, cell pairs), ``priors`` (correlation matrices), ``regularizer``
(``K = I - lambda Sigma`` and its factorizations), ``svm`` (training),
``detection`` (sliding-window detection and metrics), ``synth`` (synthetic
worlds and protocols), ``config`` / ``cli`` / ``plotting`` (front end).
"""

from .model import CellRef, MultiViewModel, TemplateLayout, load_model, save_model

__all__ = ["CellRef", "MultiViewModel", "TemplateLayout", "load_model", "save_model"]
__version__ = "0.1.0"
