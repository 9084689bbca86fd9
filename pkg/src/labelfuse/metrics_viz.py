"""Segmentation metrics, PCA projection of concept tensors to RGB, and
portable PPM image output."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor_core import load_tensor, save_tensor


@dataclass
class SegMap:
    """Per-pixel integer class indices with a known class count."""

    classes: np.ndarray  # H x W
    num_classes: int


def make_segmap(classes: np.ndarray, num_classes: int) -> SegMap:
    classes = np.asarray(classes)
    if classes.ndim != 2:
        raise ValueError("segmentation map must be H x W")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if classes.min(initial=0) < 0 or classes.max(initial=0) >= num_classes:
        raise ValueError("class indices must lie in [0, num_classes)")
    return SegMap(classes=classes, num_classes=num_classes)


def _check_pair(pred: SegMap, gt: SegMap) -> None:
    if pred.classes.shape != gt.classes.shape:
        raise ValueError(
            f"segmentation dims differ: {pred.classes.shape} vs {gt.classes.shape}"
        )
    if pred.num_classes != gt.num_classes:
        raise ValueError(
            f"class counts differ: {pred.num_classes} vs {gt.num_classes}"
        )


def mean_iou(pred: SegMap, gt: SegMap) -> float:
    """Mean per-class intersection over union.

    Classes absent from both maps are skipped; the mean runs over the rest.
    """
    _check_pair(pred, gt)
    ious = []
    for c in range(gt.num_classes):
        p = pred.classes == c
        g = gt.classes == c
        union = np.count_nonzero(p | g)
        if union == 0:
            continue
        ious.append(np.count_nonzero(p & g) / union)
    return float(np.mean(ious))


def pixel_accuracy(pred: SegMap, gt: SegMap) -> float:
    """Fraction of pixels on which the two maps agree."""
    _check_pair(pred, gt)
    return float(np.count_nonzero(pred.classes == gt.classes) / gt.classes.size)


def jacobi_eigh(sym: np.ndarray, rel_tol: float = 1e-10, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm drops to rel_tol times
    the trace of the input (its total variance when it is a covariance).
    Returns (eigenvalues, eigenvectors-as-columns), unsorted.
    """
    a = np.array(sym, dtype=np.float64)
    d = a.shape[0]
    if a.shape != (d, d):
        raise ValueError("matrix must be square")
    v = np.eye(d)
    trace = float(np.trace(a))
    threshold = rel_tol * trace
    if trace <= 0.0:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        if _off_norm(a) <= threshold:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                sign = 1.0 if theta >= 0.0 else -1.0
                t = sign / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        if _off_norm(a) > threshold:
            raise RuntimeError("Jacobi sweeps did not converge")
    return np.diag(a).copy(), v


def _off_norm(a: np.ndarray) -> float:
    """Frobenius norm of the off-diagonal part."""
    off = a - np.diag(np.diag(a))
    return float(np.sqrt((off * off).sum()))


@dataclass
class PcaBasis:
    """Top-3 principal directions of a pixel cloud."""

    mean: np.ndarray  # (d,)
    components: np.ndarray  # (3, d), orthonormal rows
    explained_variance: np.ndarray  # (3,)


def pca_project_3(z: np.ndarray):
    """Project an H x W x d concept tensor to a 3-channel image via PCA.

    Pixels are treated as H*W samples; the covariance (divided by H*W - 1)
    is diagonalized with cyclic Jacobi rotations, component signs are fixed
    so each one's largest-magnitude entry is positive, and every output
    channel is min-max rescaled to [0, 1].  Channels whose component carries
    (numerically) no variance map to the constant 0.5.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError("concept tensor must be H x W x d")
    h, w, d = z.shape
    if d < 3:
        raise ValueError(f"need at least 3 channels to project, got d={d}")
    if h * w < 4:
        raise ValueError("need at least 4 pixels")
    x = z.reshape(-1, d)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (h * w - 1)
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(vals)[::-1][:3]
    components = vecs[:, order].T.copy()
    variances = np.maximum(vals[order], 0.0)
    for i in range(3):
        peak = np.argmax(np.abs(components[i]))
        if components[i, peak] < 0.0:
            components[i] = -components[i]
    basis = PcaBasis(mean=mean, components=components, explained_variance=variances)

    proj = xc @ components.T  # (H*W, 3)
    total_var = float(np.trace(cov))
    img = np.empty((h * w, 3))
    for c in range(3):
        lo, hi = proj[:, c].min(), proj[:, c].max()
        degenerate = hi <= lo or variances[c] <= 1e-12 * max(total_var, 1e-300)
        img[:, c] = 0.5 if degenerate else (proj[:, c] - lo) / (hi - lo)
    return basis, img.reshape(h, w, 3)


def write_ppm(img: np.ndarray, dest) -> int:
    """Write an H x W x 3 image in [0, 1] as binary PPM (P6, maxval 255).

    Channel bytes are round(clamp(v, 0, 1) * 255), rounding half up.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be H x W x 3")
    h, w = img.shape[:2]
    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    payload = data.tobytes(order="C")
    written = 0
    for blob in (header, payload):
        try:
            dest.write(blob)
        except OSError as e:
            raise OSError(f"write failed at byte offset {written}: {e}") from e
        written += len(blob)
    return written


def save_ppm(path, img: np.ndarray) -> int:
    with open(path, "wb") as f:
        return write_ppm(img, f)


def save_pca_basis(basis: PcaBasis, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_tensor(os.path.join(dirpath, "mean.tlt"), basis.mean.astype(np.float64))
    save_tensor(os.path.join(dirpath, "components.tlt"), basis.components.astype(np.float64))
    save_tensor(
        os.path.join(dirpath, "explained_variance.tlt"),
        basis.explained_variance.astype(np.float64),
    )
    with open(os.path.join(dirpath, "basis.json"), "w") as f:
        json.dump({"width": int(basis.mean.size), "components": 3}, f, indent=2)
        f.write("\n")


def load_pca_basis(dirpath) -> PcaBasis:
    return PcaBasis(
        mean=load_tensor(os.path.join(dirpath, "mean.tlt")),
        components=load_tensor(os.path.join(dirpath, "components.tlt")),
        explained_variance=load_tensor(os.path.join(dirpath, "explained_variance.tlt")),
    )
