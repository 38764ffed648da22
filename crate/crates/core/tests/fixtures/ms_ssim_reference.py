# Independent multi-scale SSIM used to freeze the values in
# tests/reference_metrics.rs. Requires numpy and scipy.
import numpy as np
from scipy.ndimage import gaussian_filter

WEIGHTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]
C1, C2 = 0.01 ** 2, 0.03 ** 2


def maps(x, y):
    f = lambda z: gaussian_filter(z, sigma=1.5, truncate=3.5, mode="reflect")
    ux, uy = f(x), f(y)
    vx, vy, vxy = f(x * x) - ux * ux, f(y * y) - uy * uy, f(x * y) - ux * uy
    lum = (2 * ux * uy + C1) / (ux * ux + uy * uy + C1)
    cs = (2 * vxy + C2) / (vx + vy + C2)
    return lum, cs


def crop_mean(m):
    return m[5:-5, 5:-5].mean()


def down(z):
    h, w = z.shape[0] // 2, z.shape[1] // 2
    return z[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))


def ms_ssim(a, b):
    total = 0.0
    for ch in range(3):
        x, y, value = a[ch], b[ch], 1.0
        for s, wgt in enumerate(WEIGHTS):
            lum, cs = maps(x, y)
            term = crop_mean(lum * cs) if s == len(WEIGHTS) - 1 else crop_mean(cs)
            value *= max(term, 0.0) ** wgt
            x, y = down(x), down(y)
        total += value
    return total / 3


H, W = 192, 184
r = np.arange(H)[None, :, None].astype(np.float64)
x = np.arange(W)[None, None, :].astype(np.float64)
c = np.arange(3)[:, None, None].astype(np.float64)
for i in range(3):
    a = 0.5 + 0.3 * np.sin(0.11 * (i + 1) * r + 0.07 * x + 1.1 * c + 0.5 * i) + 0.1 * np.sin(0.9 * x - 0.4 * r)
    b = a + 0.03 * (i + 1) * np.sin(1.7 * r + 0.3 * x * (i + 1) + 0.9 * c)
    print(repr(float(ms_ssim(a, b))))
