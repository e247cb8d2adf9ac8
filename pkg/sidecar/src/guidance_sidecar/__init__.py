"""Guidance sidecar: an HTTP service hosting the models the training
pipeline consumes remotely — inpainting-residual guidance, reference image
generation, monocular depth, and the latent codec — behind a JSON wire
protocol with base64 float32 tensors.

The service is model-agnostic: a ``ModelRegistry`` maps model ids to
handles.  This build ships fully procedural ``builtin-*`` models that honor
every protocol contract (shapes, determinism, timestep monotonicity, depth
ordinality, codec round-trip fidelity) without pretrained weights; ids of
the form ``hf:<repo>`` are reserved for weight-backed backends and report
what they need when unavailable.
"""

from .app import create_app
from .models import ModelLoadError, ModelRegistry

__all__ = ["create_app", "ModelRegistry", "ModelLoadError"]
