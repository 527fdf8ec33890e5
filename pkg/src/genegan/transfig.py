"""Object removal, transplanting, swapping, interpolation and scaling.

Every function works on single 3 x H x W images and encodes/decodes one image
at a time in eval mode, so a panel computed inside a grid is bit-identical
to the same panel computed on its own.
"""
from __future__ import annotations

import numpy as np

from . import model as M
from . import tensor as T


class ImageSizeError(ValueError):
    pass


def _check(params: M.ParamStore, img: np.ndarray, what: str) -> np.ndarray:
    s = params.config.image_size
    if img.shape != (3, s, s):
        raise ImageSizeError(f"{what}: image is {img.shape[-2]}x{img.shape[-1]}, model expects {s}x{s}")
    return img


def encode_one(params: M.ParamStore, img: np.ndarray, what: str = "image") -> M.LatentCode:
    _check(params, img, what)
    x = T.Tensor(np.asarray(img, dtype=params.config.dtype)[None])
    return M.encode(x, params, training=False)


def decode_one(params: M.ParamStore, background: T.Tensor, obj: T.Tensor) -> np.ndarray:
    return M.decode(M.LatentCode(background, obj), params, training=False).data[0]


def _vector_code(v: M.ObjectVector) -> T.Tensor:
    return v.to_tensor()


def reconstruct(params: M.ParamStore, img: np.ndarray) -> np.ndarray:
    code = encode_one(params, img)
    return decode_one(params, code.background, code.object)


def remove(params: M.ParamStore, img: np.ndarray) -> np.ndarray:
    """Decode the image's own background with the zero object code."""
    code = encode_one(params, img)
    return decode_one(params, code.background, code.zero_object().object)


def transplant(params: M.ParamStore, donor: np.ndarray, recipient: np.ndarray) -> np.ndarray:
    """Recipient's background with the donor's object code."""
    u = encode_one(params, donor, "donor").object
    return decode_one(params, encode_one(params, recipient, "recipient").background, u)


def swap_panels(params: M.ParamStore, a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    """Originals a, b; recombined (a's background, b's object) and (b's
    background, a's object); reconstructions of a and b."""
    ca, cb = encode_one(params, a, "a"), encode_one(params, b, "b")
    return [
        np.asarray(a, dtype=params.config.dtype),
        np.asarray(b, dtype=params.config.dtype),
        decode_one(params, ca.background, cb.object),
        decode_one(params, cb.background, ca.object),
        decode_one(params, ca.background, ca.object),
        decode_one(params, cb.background, cb.object),
    ]


def interpolation_weights(n_donors: int, steps: int) -> tuple[list[list[float]], int]:
    """Mixing weights per frame, plus the number of grid columns.

    1 donor: t * u for t = 1/k .. 1.  2 donors: convex path with k frames
    (k >= 2) from the first donor to the second.  3 donors: triangular
    barycentric grid with k rows.  4 donors: k x k bilinear grid over the
    corners (first, second, third, fourth) = (top-left, top-right,
    bottom-left, bottom-right).
    """
    k = steps
    if k < 1:
        raise ValueError("steps must be at least 1")
    if n_donors == 1:
        return [[i / k] for i in range(1, k + 1)], k
    if n_donors == 2:
        if k < 2:
            raise ValueError("two donors need at least 2 steps")
        return [[1 - i / (k - 1), i / (k - 1)] if 0 < i < k - 1 else ([1.0, 0.0] if i == 0 else [0.0, 1.0])
                for i in range(k)], k
    if n_donors == 3:
        if k < 2:
            raise ValueError("three donors need at least 2 steps")
        frames = []
        for r in range(k):
            for c in range(k):
                if c > r:
                    frames.append(None)
                    continue
                w2, w3 = (r - c) / (k - 1), c / (k - 1)
                frames.append([1.0 - w2 - w3, w2, w3])
        return frames, k
    if n_donors == 4:
        if k < 2:
            raise ValueError("four donors need at least 2 steps")
        frames = []
        for r in range(k):
            for c in range(k):
                s, t = c / (k - 1), r / (k - 1)
                frames.append([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t])
        return frames, k
    raise ValueError(f"interpolation takes 1 to 4 donors, got {n_donors}")


def interpolate_frames(params: M.ParamStore, donors: list[np.ndarray], recipient: np.ndarray,
                       steps: int) -> tuple[list[np.ndarray | None], int]:
    """Recipient background decoded with mixtures of the donors' object vectors.

    Returns the frames (None marks an empty cell of a triangular grid) and
    the number of grid columns.
    """
    weights, columns = interpolation_weights(len(donors), steps)
    vecs = [M.object_vector(encode_one(params, d, f"donor {i}"), 0, f"donor{i}") for i, d in enumerate(donors)]
    bg = encode_one(params, recipient, "recipient").background
    frames = []
    for w in weights:
        if w is None:
            frames.append(None)
            continue
        if len(vecs) == 1:
            v = M.scale_vector(vecs[0], w[0]) if w[0] != 1 else vecs[0]
        else:
            v = M.combine_vectors(vecs, w)
        frames.append(decode_one(params, bg, _vector_code(v)))
    return frames, columns


def scale_frames(params: M.ParamStore, img: np.ndarray, factors: list[float]) -> list[np.ndarray]:
    """Own background decoded with t * u for each factor t."""
    code = encode_one(params, img)
    v = M.object_vector(code)
    return [decode_one(params, code.background,
                       _vector_code(v if t == 1 else M.scale_vector(v, t))) for t in factors]
