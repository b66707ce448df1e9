"""Equivariance error, logit invariance and deformation-stability sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sren.errors import InvalidArgument
from sren.fourier_argand import BasisConfig
from sren.network import SimBlock, _block_forward, evaluate, forward
from sren.simconv import SimConvLayer
from sren.tensorcore import FeatureMap, Sim2Transform, make_sim2, warp, warp_array

CSV_FIELDS = ["run_id", "layer", "s", "theta", "tx", "ty", "crop", "error"]


@dataclass(frozen=True)
class EquivReport:
    transform: Sim2Transform
    layer_index: int
    error: float  # NaN when undefined
    crop_margin: int

    @property
    def defined(self) -> bool:
        return not math.isnan(self.error)


def default_crop(config: BasisConfig, lambda_max: float = 2.0) -> int:
    """ceil(b * lambda_max) + patch: clear of both warp padding and correlation borders."""
    return int(math.ceil(config.b * lambda_max)) + config.patch


def _crop(x: np.ndarray, crop: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if 2 * crop >= min(h, w):
        raise InvalidArgument(f"crop margin {crop} leaves no interior in a {h}x{w} map")
    return x[..., crop : h - crop, crop : w - crop]


def relative_error(reference: np.ndarray, other: np.ndarray, crop: int) -> float:
    """||ref - other||_F^2 / ||ref||_F^2 on the interior; NaN if the reference vanishes."""
    a = _crop(np.asarray(reference, dtype=np.float64), crop)
    b = _crop(np.asarray(other, dtype=np.float64), crop)
    denom = float(np.sum(a * a))
    if denom == 0.0:
        return float("nan")
    return float(np.sum((a - b) ** 2)) / denom


def equivariance_error(op, f: FeatureMap, T: Sim2Transform, crop: int) -> float:
    """Relative squared discrepancy between L_T[op(f)] and op(L_T[f]).

    ``op`` maps a FeatureMap to a FeatureMap and recomputes whatever geometry
    it needs on each input.  Returns NaN (undefined) for a vanishing reference.
    """
    if T.is_identity:
        ref = op(f)
        return relative_error(ref.data, op(f).data, crop)
    ref = warp(op(f), T)
    return relative_error(ref.data, op(warp(f, T)).data, crop)


def layer_features(blocks, f) -> list[np.ndarray]:
    """Activations after each block of a pool-free stack."""
    x = f.data if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    out = []
    for block in blocks:
        x, _ = _block_forward(x, block)
        out.append(x)
    return out


def random_stack(geometry, n_layers: int = 4, channels: int = 8, in_channels: int = 1, support: int = 3,
                 seed: int = 0) -> list:
    """Single-layer blocks with He-uniform weights; ``geometry=None`` gives plain convolutions."""
    rng = np.random.default_rng([seed, 0xE0])
    blocks = []
    c_in = in_channels
    for _ in range(n_layers):
        layer = SimConvLayer.create(c_in, channels, support, rng)
        blocks.append(SimBlock([layer], geometry))
        c_in = channels
    return blocks


def same_weights(blocks, geometry) -> list:
    """The same layers rebound to another geometry source (e.g. None for the baseline)."""
    return [SimBlock(b.layers, geometry) for b in blocks]


def layer_reports(blocks, f: FeatureMap, T: Sim2Transform, crop: int) -> list[EquivReport]:
    """Equivariance error after every layer of a stack (geometry recomputed on each path)."""
    ref = layer_features(blocks, f)
    moved = layer_features(blocks, warp(f, T)) if not T.is_identity else ref
    reports = []
    for k, (a, b) in enumerate(zip(ref, moved), start=1):
        wa = warp_array(a, T, f.origin) if not T.is_identity else a
        reports.append(EquivReport(T, k, relative_error(wa, b, crop), crop))
    return reports


def report_rows(run_id: str, reports) -> list[dict]:
    rows = []
    for r in reports:
        T = r.transform
        rows.append({"run_id": run_id, "layer": r.layer_index, "s": T.s, "theta": T.theta, "tx": T.t[0],
                     "ty": T.t[1], "crop": r.crop_margin, "error": r.error})
    return rows


def mean_rows(run_id: str, rows: list[dict]) -> list[dict]:
    """Average per (transform, layer) over inputs, ignoring undefined values."""
    groups: dict = {}
    for row in rows:
        key = (row["layer"], row["s"], row["theta"], row["tx"], row["ty"], row["crop"])
        groups.setdefault(key, []).append(row["error"])
    out = []
    for (layer, s, theta, tx, ty, crop), errs in groups.items():
        errs = [e for e in errs if not math.isnan(e)]
        out.append({"run_id": run_id, "layer": layer, "s": s, "theta": theta, "tx": tx, "ty": ty, "crop": crop,
                    "error": float(np.mean(errs)) if errs else float("nan")})
    return out


def write_csv(path, rows, fields=CSV_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


def invariance_check(model, f, T: Sim2Transform) -> float:
    """max |logits(f) - logits(L_T f)| / (max |logits(f)| + 1e-9)."""
    fm = f if isinstance(f, FeatureMap) else FeatureMap(np.asarray(f, dtype=np.float64))
    a = forward(model, fm)
    if T.is_identity:
        return 0.0
    b = forward(model, warp(fm, T))
    return float(np.max(np.abs(a - b)) / (np.max(np.abs(a)) + 1e-9))


def warp_dataset(dataset, T: Sim2Transform):
    from sren.data import LabeledDataset

    if T.is_identity:
        return dataset
    imgs = np.stack([warp_array(img[None], T)[0] for img in dataset.images])
    return LabeledDataset(imgs, dataset.labels, dict(dataset.meta))


def stability_sweep(model, dataset, angles=(), scales=()) -> list[dict]:
    """Accuracy on the set warped by each fixed angle (s=1) and each fixed scale (angle 0)."""
    rows = []
    for a in angles:
        acc, _ = evaluate(model, warp_dataset(dataset, make_sim2(1.0, a)))
        rows.append({"kind": "angle", "angle": float(a), "scale": 1.0, "accuracy": acc})
    for s in scales:
        acc, _ = evaluate(model, warp_dataset(dataset, make_sim2(s, 0.0)))
        rows.append({"kind": "scale", "angle": 0.0, "scale": float(s), "accuracy": acc})
    return rows


def spread(rows, kind: str = "angle") -> float:
    accs = [r["accuracy"] for r in rows if r["kind"] == kind]
    return (max(accs) - min(accs)) if accs else float("nan")


def write_sweep_csv(path, rows) -> None:
    write_csv(path, rows, fields=["kind", "angle", "scale", "accuracy"])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


@dataclass(frozen=True)
class CovarianceReport:
    scale_match: float  # fraction with Lambda_g / Lambda_f within one lambda step of s
    orientation_match: float  # fraction with Gamma_g - Gamma_f within one gamma step of alpha
    joint_match: float
    pixels: int  # jointly confident interior pixels compared


def geometry_covariance(f: FeatureMap, T: Sim2Transform, basis, grid, crop: int, conf_threshold=None):
    """Argmax-level covariance check of the geometry estimator.

    Each interior pixel x of L_T f is compared with the nearest pixel to T^-1 x
    in f; only pixels confident in both fields count.
    """
    from sren.geometry import compute_geometry
    from sren.tensorcore import circular_distance, pixel_offsets

    g = warp(f, T)
    ff = compute_geometry(f, basis, grid, conf_threshold)
    fg = compute_geometry(g, basis, grid, conf_threshold)
    h, w = fg.shape
    dr, dc = pixel_offsets(h, w, f.origin)
    src = T.apply_inverse(np.stack([dr.ravel(), dc.ravel()], axis=1))
    sr = np.rint(src[:, 0] + f.origin[0]).astype(np.int64)
    sc = np.rint(src[:, 1] + f.origin[1]).astype(np.int64)
    inner = np.zeros((h, w), bool)
    inner[crop : h - crop, crop : w - crop] = True
    ok = inner.ravel() & (sr >= crop) & (sr < h - crop) & (sc >= crop) & (sc < w - crop)
    idx = np.flatnonzero(ok)
    sr, sc = sr[idx], sc[idx]
    joint = fg.confidence.ravel()[idx] & ff.confidence[sr, sc]
    idx, sr, sc = idx[joint], sr[joint], sc[joint]
    if len(idx) == 0:
        return CovarianceReport(float("nan"), float("nan"), float("nan"), 0)
    tol_l = grid.log_lambda_step * (1 + 1e-9) + 1e-12
    tol_g = grid.gamma_step * (1 + 1e-9)
    ratio = np.log(fg.scale.ravel()[idx] / ff.scale[sr, sc])
    lam_ok = np.abs(ratio - math.log(T.s)) <= tol_l
    gam_ok = circular_distance(fg.orientation.ravel()[idx], ff.orientation[sr, sc] + T.theta) <= tol_g
    return CovarianceReport(float(lam_ok.mean()), float(gam_ok.mean()), float((lam_ok & gam_ok).mean()), len(idx))
