"""M2HVideo: mannequin-to-human video generation at desk scale.

A latent video diffusion framework with pose-aware identity conditioning,
distribution-aligned dual cross-attention, a pixel-space mirror loss, and the
training, inference, dataset, and evaluation tooling around it.
"""

__version__ = "0.1.0"
