"""Toy box-feature provider: one fixed random conv layer + box average pooling.

Stands in for a pretrained backbone at desk scale.  The convolution weights
are frozen at construction (seeded), so features are a deterministic function
of (provider params, image, boxes, scale, flip).  Pooling uses a summed-area
table, so cost is independent of box size.
"""

from __future__ import annotations

import numpy as np


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resize of an (H, W, C) array."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def flip_image(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def flip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    flipped = boxes.copy()
    flipped[:, 0] = width - boxes[:, 2]
    flipped[:, 2] = width - boxes[:, 0]
    return flipped


class ToyFeatureProvider:
    """Fixed conv features pooled over each box and over its surround ring.

    Every filter is a rectified 3x3 (by default) random projection of the RGB
    neighborhood.  A box's feature vector concatenates the average activation
    inside the box with the average over a ring around it (the box inflated by
    half its size per side, minus the box), so feature_dim = 2 * num_filters.
    The ring is what makes extent observable to a linear head: a box tightly
    around an object sees the object inside and background around it, while a
    box strictly inside the object sees the object on both sides.
    """

    def __init__(self, num_filters: int = 8, kernel: int = 3, seed: int = 0,
                 weights: np.ndarray | None = None, bias: np.ndarray | None = None):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.num_filters = num_filters
        self.kernel = kernel
        if weights is not None and bias is not None:
            self.weights = np.asarray(weights, dtype=np.float64)
            self.bias = np.asarray(bias, dtype=np.float64)
            if self.weights.shape != (kernel * kernel * 3, num_filters):
                raise ValueError("weights shape does not match kernel/num_filters")
        else:
            rng = np.random.default_rng([seed, 313])
            fan_in = kernel * kernel * 3
            self.weights = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, num_filters))
            self.bias = rng.normal(0.0, 0.1, size=num_filters)

    @property
    def feature_dim(self) -> int:
        return 2 * self.num_filters

    def feature_map(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) in [0,1] -> (H, W, F) rectified conv activations."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        pad = self.kernel // 2
        padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (self.kernel, self.kernel, 3))
        h, w = image.shape[:2]
        patches = windows.reshape(h, w, -1)
        return np.maximum(patches @ self.weights + self.bias, 0.0)

    def pooled(self, fmap: np.ndarray, boxes: np.ndarray) -> np.ndarray:
        """Per box: average activation inside it and over its surround ring."""
        h, w = fmap.shape[:2]
        depth = fmap.shape[2]
        integral = np.zeros((h + 1, w + 1, depth))
        integral[1:, 1:] = fmap.cumsum(axis=0).cumsum(axis=1)
        image_mean = integral[h, w] / (h * w)

        def region_sum_area(x1, y1, x2, y2):
            c1 = int(np.clip(np.floor(x1), 0, w - 1))
            r1 = int(np.clip(np.floor(y1), 0, h - 1))
            c2 = int(np.clip(np.ceil(x2), c1 + 1, w))
            r2 = int(np.clip(np.ceil(y2), r1 + 1, h))
            total = integral[r2, c2] - integral[r1, c2] - integral[r2, c1] + integral[r1, c1]
            return total, (r2 - r1) * (c2 - c1)

        out = np.empty((len(boxes), 2 * depth))
        for i, (x1, y1, x2, y2) in enumerate(np.asarray(boxes, dtype=np.float64)):
            inner_sum, inner_area = region_sum_area(x1, y1, x2, y2)
            out[i, :depth] = inner_sum / inner_area
            bw, bh = (x2 - x1) / 2.0, (y2 - y1) / 2.0
            outer_sum, outer_area = region_sum_area(x1 - bw, y1 - bh, x2 + bw, y2 + bh)
            ring_area = outer_area - inner_area
            if ring_area > 0:
                out[i, depth:] = (outer_sum - inner_sum) / ring_area
            else:  # box covers the whole image: no surround to look at
                out[i, depth:] = image_mean
        return out

    def extract(self, image: np.ndarray, boxes: np.ndarray, scale: int | None = None,
                flip: bool = False) -> np.ndarray:
        """Features for boxes (given in original image coordinates).

        ``scale`` resizes so the longer side equals it; ``flip`` mirrors left
        to right.  The returned rows stay aligned with the input box order, so
        callers keep using the original boxes for all geometry.
        """
        image = np.asarray(image, dtype=np.float64)
        boxes = np.asarray(boxes, dtype=np.float64)
        h, w = image.shape[:2]
        if flip:
            image = flip_image(image)
            boxes = flip_boxes(boxes, float(w))
        if scale is not None and scale > 0:
            factor = scale / max(h, w)
            image = resize_bilinear(image, max(1, round(h * factor)), max(1, round(w * factor)))
            boxes = boxes * factor
        return self.pooled(self.feature_map(image), boxes)
