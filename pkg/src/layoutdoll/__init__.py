"""Layout-conditioned doll generation: a self-contained latent-diffusion
pipeline with decoupled per-component text/image conditions."""

__version__ = "0.1.0"
