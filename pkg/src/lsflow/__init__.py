"""Long-term scene flow: track query points through point-cloud sequences.

Modules, bottom up: ``geometry`` (sampling, neighbors, interpolation, voxels),
``nn`` (layers, parameter storage, gradient checks), ``backbone`` (point
encoder), ``correlation`` (truncated point + voxel correlation), ``sttu``
(spatio-temporal transformer update), ``tracker`` (iterative refinement and
sliding windows), ``data`` (synthetic sequences and their file format),
``metrics``, ``train`` and ``cli``.
"""

from .tracker import AuxiliaryConfig, ModelConfig, SceneFlowTracker, TrackConfig, build_model, track_sequence

__all__ = ["AuxiliaryConfig", "ModelConfig", "SceneFlowTracker", "TrackConfig", "build_model", "track_sequence"]
__version__ = "0.1.0"
