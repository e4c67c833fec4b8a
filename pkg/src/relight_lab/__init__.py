"""relight_lab: desk-scale portrait relighting as lighting-conditioned
re-rendering with a conditional diffusion model."""

__version__ = "0.1.0"
