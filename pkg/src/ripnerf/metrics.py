"""Image quality metrics on ``[0, 1]`` images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_shapes(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target):
    """``10 log10(1 / MSE)``, capped at 99 dB when MSE < 1e-10."""
    pred, target = _check_shapes(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation of ``(H, W, C)`` with the 1D kernel ``g``."""
    k = len(g)
    h, w = img.shape[:2]
    rows = sum(g[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(g[i] * rows[:, i:w - k + 1 + i] for i in range(k))


def ssim(pred, target, data_range=1.0):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    pred, target = _check_shapes(pred, target)
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    if min(pred.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(pred, g)
    mu_y = _filter_valid(target, g)
    sxx = _filter_valid(pred * pred, g) - mu_x * mu_x
    syy = _filter_valid(target * target, g) - mu_y * mu_y
    sxy = _filter_valid(pred * target, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    smap = num / den
    return float(np.mean(smap.mean(axis=(0, 1))))


def scale_label(s):
    return "Full Res." if s == 1 else f"1/{s} Res."


@dataclass
class MetricReport:
    """Per-image scores grouped by scale; averages are means of the per-scale entries."""

    images: list = field(default_factory=list)  # dicts: name, scale, psnr, ssim
    wall_clock_s: float = 0.0
    model_bytes: int | None = None
    parameter_count: int | None = None

    def add(self, name, scale, pred, target):
        """Score one image; SSIM is ``None`` when the image is smaller than the window."""
        small = min(np.shape(pred)[:2]) < SSIM_WINDOW
        self.images.append({"name": name, "scale": int(scale), "psnr": psnr(pred, target),
                            "ssim": None if small else ssim(pred, target)})

    @staticmethod
    def _mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    @property
    def per_scale(self):
        out = {}
        for s in sorted({im["scale"] for im in self.images}):
            rows = [im for im in self.images if im["scale"] == s]
            out[s] = {"psnr": self._mean([r["psnr"] for r in rows]),
                      "ssim": self._mean([r["ssim"] for r in rows]),
                      "count": len(rows)}
        return out

    @property
    def average(self):
        per = self.per_scale
        return {k: self._mean([v[k] for v in per.values()]) for k in ("psnr", "ssim")}

    def to_dict(self):
        return {
            "per_scale": {str(s): v for s, v in self.per_scale.items()},
            "average": self.average,
            "images": self.images,
            "wall_clock_s": self.wall_clock_s,
            "model_bytes": self.model_bytes,
            "parameter_count": self.parameter_count,
        }

    def table(self):
        """Aligned plain-text table with one column per scale plus the average."""
        per = self.per_scale
        heads = [scale_label(s) for s in per] + ["Avg."]
        width = max(10, *(len(h) for h in heads))
        lines = ["".ljust(6) + "".join(h.rjust(width) for h in heads)]
        avg = self.average
        for key, fmt in (("psnr", "{:.2f}"), ("ssim", "{:.4f}")):
            vals = [v[key] for v in per.values()] + [avg[key]]
            cells = ["n/a" if x is None else fmt.format(x) for x in vals]
            lines.append(key.upper().ljust(6) + "".join(c.rjust(width) for c in cells))
        size = "n/a" if self.model_bytes is None else f"{self.model_bytes / 2**20:.2f} MiB"
        lines.append(f"Size: {size}  Time: {self.wall_clock_s:.1f} s")
        return "\n".join(lines) + "\n"
