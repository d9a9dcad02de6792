"""Pure numpy fallback for the compiled kernels in ``_ckernels``."""
import numpy as np


def convolve_padded(padded, kernel):
    """True 2-D convolution of a pre-padded (H+k-1, W+k-1, C) array."""
    padded = np.ascontiguousarray(padded, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    k = kernel.shape[0]
    height = padded.shape[0] - k + 1
    width = padded.shape[1] - k + 1
    out = np.zeros((height, width, padded.shape[2]), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            r = k - 1 - i
            s = k - 1 - j
            out += kernel[i, j] * padded[r:r + height, s:s + width, :]
    return out
