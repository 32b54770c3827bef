"""eve: desk-scale unified vision-language pre-training with modality-aware mixture of experts.

Pure numpy autodiff; hot kernels are compiled with numba unless ``EVE_KERNELS=numpy``.
"""
__version__ = "0.1.0"
