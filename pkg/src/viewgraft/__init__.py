"""viewgraft: learn a camera-view concept and an object concept as low-rank
adapters on a toy diffusion model, then graft the view onto the object with a
gated, orthogonality-penalized merge."""

__version__ = "0.1.0"
