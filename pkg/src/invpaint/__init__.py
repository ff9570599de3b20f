"""Few-step diffusion inpainting with one-step noise inversion, at desk scale.

Everything runs on a small numpy substrate with reverse-mode autodiff
(:mod:`invpaint.tensor`), optionally accelerated by numba kernels
(:mod:`invpaint.backend`, selected via ``INVPAINT_BACKEND``).
"""

__version__ = "0.1.0"
