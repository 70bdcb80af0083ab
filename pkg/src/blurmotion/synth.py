"""Synthetic locally blurred scenes, evaluation metrics and benchmark construction.

A scene pastes a textured object cutout on a background photo and averages
many frames in which object and mask are warped along the affine motion
path. The ground-truth segmentation is the union of the warped masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .blur import as_params, centered_coords, max_displacement, motion_field



@dataclass(frozen=True)
class SceneObject:
    rgb: np.ndarray  # (h, w, 3)
    mask: np.ndarray  # (h, w) in [0, 1]
    name: str = "object"


@dataclass(frozen=True)
class SyntheticScene:
    blurred: np.ndarray
    sharp: np.ndarray
    gt_mask: np.ndarray
    gt_motion: np.ndarray  # (H, W, 2), zero outside the mask
    gt_params: np.ndarray
    frames: int
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.blurred.shape[:2]


def default_frames(a, shape) -> int:
    return 2 * int(math.ceil(max_displacement(a, shape))) + 1


def _affine_parts(a):
    """``u(p) = b + A p`` with ``p = (px, py)``."""
    b = np.array([a[0], a[3]])
    A = np.array([[a[2], a[1]], [a[5], a[4]]])
    return b, A


def place_object(obj: SceneObject, shape, top_left):
    """Object color and mask on a canvas of ``shape``, zero outside."""
    H, W = shape
    h, w = obj.mask.shape
    y0, x0 = top_left
    if y0 < 0 or x0 < 0 or y0 + h > H or x0 + w > W:
        raise ValueError("object does not fit on the background at this position")
    rgb = np.zeros((H, W, 3))
    m = np.zeros((H, W))
    rgb[y0:y0 + h, x0:x0 + w] = obj.rgb
    m[y0:y0 + h, x0:x0 + w] = obj.mask
    return rgb, m


def warp_layer(layer: np.ndarray, a, s: float) -> np.ndarray:
    """Move canvas content by ``s * u(p)``: output at q samples the point p with q = p + s u(p)."""
    H, W = layer.shape[:2]
    b, A = _affine_parts(a)
    M = np.eye(2) + s * A
    Minv = np.linalg.inv(M)
    py, px = centered_coords((H, W))
    q = np.stack([px.ravel(), py.ravel()]) - s * b[:, None]
    p = Minv @ q
    xs = p[0] + (W - 1) / 2.0
    ys = p[1] + (H - 1) / 2.0
    coords = [ys.reshape(H, W), xs.reshape(H, W)]
    if layer.ndim == 2:
        return ndimage.map_coordinates(layer, coords, order=1, mode="constant", cval=0.0)
    return np.stack([ndimage.map_coordinates(layer[..., k], coords, order=1, mode="constant", cval=0.0)
                     for k in range(layer.shape[2])], axis=-1)


def _check_inside(mask, a):
    """Raise if any object pixel would leave the canvas during the exposure."""
    H, W = mask.shape
    ys, xs = np.nonzero(mask > 0)
    if ys.size == 0:
        raise ValueError("object mask is empty")
    b, A = _affine_parts(a)
    p = np.stack([xs - (W - 1) / 2.0, ys - (H - 1) / 2.0])
    for s in (-0.5, 0.5):
        q = p + s * (b[:, None] + A @ p)
        x = q[0] + (W - 1) / 2.0
        y = q[1] + (H - 1) / 2.0
        if x.min() < 0 or y.min() < 0 or x.max() > W - 1 or y.max() > H - 1:
            raise ValueError("object leaves the canvas during the exposure")


def synthesize(obj: SceneObject, background: np.ndarray, a, top_left=None, frames: int | None = None,
               seed: int = 0, noise_std: float = 0.0) -> SyntheticScene:
    """Average ``frames`` warped composites of ``obj`` over ``background``.

    Frame ``t`` displaces the object by ``(t / (frames - 1) - 1/2) * u(p)``.
    ``seed`` drives the optional additive Gaussian noise.
    """
    a = as_params(a)
    bg = np.asarray(background, dtype=np.float64)
    shape = bg.shape[:2]
    if top_left is None:
        h, w = obj.mask.shape
        top_left = ((shape[0] - h) // 2, (shape[1] - w) // 2)
    rgb, m = place_object(obj, shape, top_left)
    _check_inside(m, a)
    if frames is None:
        frames = default_frames(a, shape)
    if frames < 1:
        raise ValueError("frames must be >= 1")
    sharp = m[..., None] * rgb + (1.0 - m[..., None]) * bg
    premult = m[..., None] * rgb
    acc = np.zeros_like(bg)
    union = np.zeros(shape)
    for t in range(frames):
        s = 0.0 if frames == 1 else t / (frames - 1) - 0.5
        if s == 0.0:
            wm, wc = m, premult
        else:
            wm, wc = warp_layer(m, a, s), warp_layer(premult, a, s)
        acc += wc + (1.0 - wm[..., None]) * bg
        union = np.maximum(union, wm)
    blurred = acc / frames
    if noise_std > 0:
        blurred = blurred + noise_std * np.random.default_rng(seed).standard_normal(blurred.shape)
    gt_mask = union >= 0.5
    gt_motion = np.where(gt_mask[..., None], motion_field(a, shape), 0.0)
    meta = dict(object=obj.name, top_left=tuple(int(v) for v in top_left), seed=int(seed),
                noise_std=float(noise_std))
    return SyntheticScene(blurred, sharp, gt_mask, gt_motion, a.copy(), int(frames), meta)


# ---------------------------------------------------------------------------
# metrics


def iou(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def aep(pred_field, gt_field, gt_mask) -> float:
    """Average endpoint error inside ``gt_mask``, scored for the better of the two signs."""
    pred_field = np.asarray(pred_field, dtype=np.float64)
    gt_field = np.asarray(gt_field, dtype=np.float64)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_field.shape != gt_field.shape or pred_field.shape[:2] != gt_mask.shape:
        raise ValueError("field and mask shapes differ")
    if not gt_mask.any():
        raise ValueError("AEP undefined for an empty mask")
    p = pred_field[gt_mask]
    g = gt_field[gt_mask]
    plus = np.linalg.norm(p - g, axis=1).mean()
    minus = np.linalg.norm(p + g, axis=1).mean()
    return float(min(plus, minus))


# ---------------------------------------------------------------------------
# bundled assets


def _asset_dir():
    return resources.files("blurmotion") / "data" / "assets"


def list_assets():
    root = _asset_dir()
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".png"))
    bgs = [n[3:-4] for n in names if n.startswith("bg_")]
    objs = [n[4:-4] for n in names if n.startswith("obj_")]
    return bgs, objs


def _read(name):
    path = _asset_dir() / name
    if not path.is_file():
        raise FileNotFoundError(f"missing asset {path}")
    with PILImage.open(path) as im:
        return np.asarray(im).astype(np.float64) / 255.0


def load_background(name: str) -> np.ndarray:
    return _read(f"bg_{name}.png")[..., :3]


def load_object(name: str) -> SceneObject:
    rgba = _read(f"obj_{name}.png")
    return SceneObject(rgba[..., :3], rgba[..., 3], name)


def check_assets(backgrounds, objects):
    root = _asset_dir()
    missing = [str(root / f"bg_{b}.png") for b in backgrounds if not (root / f"bg_{b}.png").is_file()]
    missing += [str(root / f"obj_{o}.png") for o in objects if not (root / f"obj_{o}.png").is_file()]
    if missing:
        raise FileNotFoundError("missing benchmark assets: " + ", ".join(missing))


# ---------------------------------------------------------------------------
# benchmark and sensitivity scenes


SWEEP_SCENE = dict(background="rocket", object="grass_disk", a=(15.0, 0, 0, 0, 0, 0))


def sweep_scene(noise_std: float = 0.002, seed: int = 0) -> SyntheticScene:
    """Horizontal translation ``a1 = 15`` with a textured object, 192 x 256."""
    bg = load_background(SWEEP_SCENE["background"])
    obj = load_object(SWEEP_SCENE["object"])
    return synthesize(obj, bg, SWEEP_SCENE["a"], seed=seed, noise_std=noise_std)


@dataclass(frozen=True)
class BenchmarkEntry:
    scene_id: str
    kind: str  # "uniform" or "affine"
    background: str
    object: str
    top_left: tuple
    a: np.ndarray
    frames: int
    seed: int

    def tsv(self) -> str:
        return "\t".join([self.scene_id, self.kind] + [repr(float(x)) for x in self.a]
                         + [str(self.frames), str(self.seed), self.background, self.object,
                            f"{self.top_left[0]},{self.top_left[1]}"])


MANIFEST_HEADER = "scene_id\tkind\ta1\ta2\ta3\ta4\ta5\ta6\tframes\tseed\tbackground\tobject\ttop_left"


def _object_points(obj, shape, top_left):
    _, m = place_object(obj, shape, top_left)
    py, px = centered_coords(shape)
    sel = m > 0.5
    return px[sel], py[sel], m


def _sample_motion(rng, kind, obj, shape, top_left, lo=8.0, hi=25.0):
    """Motion whose largest displacement over the object lies in ``[lo, hi]``."""
    px, py, m = _object_points(obj, shape, top_left)
    for _ in range(200):
        target = rng.uniform(lo, hi)
        theta = rng.uniform(0, 2 * np.pi)
        if kind == "uniform":
            a = np.array([math.cos(theta), 0, 0, math.sin(theta), 0, 0])
        else:
            # translation plus rotation, scaling and shear about the image centre
            lin = rng.uniform(-1, 1, 4) * rng.uniform(0.5, 1.5) / 250.0
            a = np.array([math.cos(theta), lin[0], lin[1], math.sin(theta), lin[2], lin[3]])
        ux = a[0] + a[1] * py + a[2] * px
        uy = a[3] + a[4] * py + a[5] * px
        a = a * target / np.max(np.hypot(ux, uy))
        try:
            _check_inside(m, a)
        except ValueError:
            continue
        return a
    raise RuntimeError("could not sample a motion that keeps the object on the canvas")


def build_benchmark(seed: int = 0, n_uniform: int = 16, n_affine: int = 16):
    """Deterministic list of `BenchmarkEntry`; scenes are rendered by `render_entry`."""
    bgs, objs = list_assets()
    if not bgs or not objs:
        raise FileNotFoundError(f"no benchmark assets found in {_asset_dir()}")
    check_assets(bgs, objs)
    rng = np.random.default_rng(seed)
    entries = []
    for idx in range(n_uniform + n_affine):
        kind = "uniform" if idx < n_uniform else "affine"
        bg_name = bgs[int(rng.integers(len(bgs)))]
        obj_name = objs[int(rng.integers(len(objs)))]
        bg = load_background(bg_name)
        obj = load_object(obj_name)
        H, W = bg.shape[:2]
        h, w = obj.mask.shape
        margin = 26
        top_left = (int(rng.integers(margin, H - h - margin + 1)), int(rng.integers(margin, W - w - margin + 1)))
        a = _sample_motion(rng, kind, obj, (H, W), top_left)
        frames = default_frames(a, (H, W))
        scene_seed = int(rng.integers(2 ** 31))
        entries.append(BenchmarkEntry(f"scene{idx:02d}", kind, bg_name, obj_name, top_left, a,
                                      frames, scene_seed))
    return entries


def render_entry(entry: BenchmarkEntry, noise_std: float = 0.002) -> SyntheticScene:
    scene = synthesize(load_object(entry.object), load_background(entry.background), entry.a,
                       top_left=entry.top_left, frames=entry.frames, seed=entry.seed, noise_std=noise_std)
    scene.meta.update(scene_id=entry.scene_id, kind=entry.kind, background=entry.background)
    return scene


def write_manifest(path, entries) -> None:
    with open(path, "w") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for e in entries:
            fh.write(e.tsv() + "\n")


# ---------------------------------------------------------------------------
# reports


REPORT_HEADER = "scene_id\tkind\tiou\taep\ta1\ta2\ta3\ta4\ta5\ta6\tseconds"


@dataclass
class EvalRow:
    scene_id: str
    kind: str
    iou: float
    aep: float
    a: np.ndarray
    seconds: float = float("nan")
    # score charged when the run failed: no mask, and the error of predicting zero motion
    zero_motion_aep: float = float("nan")

    def scores(self):
        if np.isfinite(self.iou) and np.isfinite(self.aep):
            return self.iou, self.aep
        return 0.0, self.zero_motion_aep

    def tsv(self) -> str:
        return "\t".join([self.scene_id, self.kind, f"{self.iou:.4f}", f"{self.aep:.4f}"]
                         + [f"{float(x):.6g}" for x in self.a] + [f"{self.seconds:.1f}"])


def aggregate(rows) -> dict:
    out = {}
    for kind in ("uniform", "affine"):
        sel = [r for r in rows if r.kind == kind]
        scores = np.array([r.scores() for r in sel]).reshape(-1, 2)
        out[f"iou_{kind}"] = float(scores[:, 0].mean()) if sel else float("nan")
        out[f"aep_{kind}"] = float(scores[:, 1].mean()) if sel else float("nan")
    return out


def write_report(path, rows) -> dict:
    """Per-scene rows followed by two aggregate rows (column names, then means).

    Failed scenes are written as NaN and enter the means with IoU 0 and the
    error of predicting zero motion.
    """
    agg = aggregate(rows)
    with open(path, "w") as fh:
        fh.write(REPORT_HEADER + "\n")
        for r in rows:
            fh.write(r.tsv() + "\n")
        fh.write("aggregate\tiou_uniform\tiou_affine\taep_uniform\taep_affine\n")
        fh.write("mean\t" + "\t".join(f"{agg[k]:.4f}" for k in
                                      ("iou_uniform", "iou_affine", "aep_uniform", "aep_affine")) + "\n")
    return agg


SWEEP_INITS = (0.1, 0.5, 1.0, 3.0, 5.0, 7.0)


def write_sweep(path, table, inits=SWEEP_INITS) -> None:
    """Table of AEP with one row per direction and one column per init magnitude; missing runs are NaN."""
    with open(path, "w") as fh:
        fh.write("direction\t" + "\t".join(f"{m:g}" for m in inits) + "\n")
        for direction in ("horizontal", "vertical"):
            vals = [table.get((direction, float(m)), float("nan")) for m in inits]
            fh.write(direction + "\t" + "\t".join(f"{v:.3f}" for v in vals) + "\n")


def read_table(path) -> list:
    return [line.rstrip("\n").split("\t") for line in Path(path).read_text().splitlines()]


# ---------------------------------------------------------------------------
# running the estimator on synthetic scenes


def evaluate_scene(scene: SyntheticScene, cfg, scene_id="scene", kind="uniform") -> EvalRow:
    """Run the estimator on one scene; a failed run gives a NaN row instead of raising."""
    import time

    from .pipeline import estimate

    zero = aep(np.zeros_like(scene.gt_motion), scene.gt_motion, scene.gt_mask)
    t = time.perf_counter()
    try:
        res = estimate(scene.blurred, cfg)
    except Exception as exc:  # recorded, the run continues
        import logging

        logging.getLogger(__name__).warning("%s failed: %s", scene_id, exc)
        return EvalRow(scene_id, kind, float("nan"), float("nan"), np.full(6, np.nan),
                       time.perf_counter() - t, zero)
    return EvalRow(scene_id, kind, iou(res.mask, scene.gt_mask),
                   aep(res.motion_field, scene.gt_motion, scene.gt_mask), res.a,
                   time.perf_counter() - t, zero)


def run_benchmark(cfg, entries, noise_std: float = 0.002, progress=None) -> list:
    rows = []
    for e in entries:
        row = evaluate_scene(render_entry(e, noise_std), cfg, e.scene_id, e.kind)
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def sensitivity_sweep(cfg, scene: SyntheticScene | None = None, inits=SWEEP_INITS,
                      directions=("horizontal", "vertical"), progress=None) -> dict:
    """AEP of the full estimator for each initial translation magnitude and direction."""
    scene = scene if scene is not None else sweep_scene(seed=cfg.seed)
    table = {}
    for d in directions:
        for m in inits:
            row = evaluate_scene(scene, cfg.replace(initial_translation=float(m), initial_direction=d),
                                 f"{d}_{m:g}")
            table[(d, float(m))] = row.aep
            if progress is not None:
                progress(d, m, row)
    return table
