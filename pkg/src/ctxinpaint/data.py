"""Dataset manifests, pair filtering, training-sample drawing, and toy fixtures.

The toy generator renders procedural scenes (colored shapes on a plain
background) as vector geometry, so views, match points, object masks, and
relative poses are all exact by construction. Real datasets plug in through
the same JSON-lines manifest contract.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    ImageCanvas,
    MaskGrid,
    TaskKind,
    derive_seed,
    load_image,
    load_mask,
    pane_concat,
    resize,
    save_image,
    save_mask,
    seeded_rng,
)
from .masks import (
    DEFAULT_MASK_PARAMS,
    MaskParams,
    MatchFallbackError,
    MatchSet,
    gen_irregular_mask,
    gen_matching_mask,
    gen_nvs_mask,
    gen_outpaint_mask,
)
from .pose import RelativePose
from .stitch import (
    PatchBox,
    TrainingSample,
    compose_local_sr,
    compose_nvs,
    compose_plain,
    compose_ref_inpaint,
)

log = logging.getLogger(__name__)

# Training pairs are kept when their shared-content score lies in this band.
COOCCURRENCE_BAND = (0.4, 0.7)

# Source-pixel side range for low-resolution patches during SR training.
LOCAL_SR_SIDE_RANGE = (48, 72)

# Outpainting training masks cover this width fraction; evaluation uses 0.5.
OUTPAINT_TRAIN_FRACTION = (0.25, 0.75)
OUTPAINT_EVAL_FRACTION = 0.5


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    ref_path: str
    tar_path: str
    cooccurrence: Optional[float] = None
    match_path: Optional[str] = None
    pose: Optional[dict] = None
    object_mask_path: Optional[str] = None
    hires_path: Optional[str] = None
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None})


def load_manifest(path) -> list[ManifestRecord]:
    """Read a JSON-lines manifest; iteration order equals file order."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            known = {f for f in ManifestRecord.__dataclass_fields__}
            unknown = set(raw) - known
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            records.append(ManifestRecord(**raw))
    return records


def save_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def filter_cooccurrence(records, low: float = COOCCURRENCE_BAND[0],
                        high: float = COOCCURRENCE_BAND[1]) -> list[ManifestRecord]:
    """Keep pairs whose co-occurrence lies in [low, high]."""
    kept = []
    skipped = 0
    for rec in records:
        if rec.cooccurrence is None:
            log.warning("record %s has no co-occurrence score; skipped", rec.ref_path)
            skipped += 1
            continue
        if low <= rec.cooccurrence <= high:
            kept.append(rec)
    log.info("co-occurrence filter kept %d of %d records (%d unscored)",
             len(kept), len(records), skipped)
    return kept


@dataclass(frozen=True)
class MaskPolicy:
    """Mixture weights over mask generators for one task."""

    weights: dict = field(default_factory=lambda: {"irregular": 0.75, "matching": 0.25})
    params: MaskParams = DEFAULT_MASK_PARAMS

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("mask weights must be >= 0")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError(f"mask weights must sum to 1, got {self.weights}")

    def choose(self, rng) -> str:
        names = sorted(self.weights)
        probs = np.array([self.weights[n] for n in names])
        return names[int(rng.choice(len(names), p=probs))]


DEFAULT_REF_INPAINT_POLICY = MaskPolicy()

_IMAGE_CACHE: dict[str, ImageCanvas] = {}
_MASK_CACHE: dict[str, MaskGrid] = {}
_MATCH_CACHE: dict[str, MatchSet] = {}


def _cached_image(path: str) -> ImageCanvas:
    if path not in _IMAGE_CACHE:
        _IMAGE_CACHE[path] = load_image(path)
    return _IMAGE_CACHE[path]


def _cached_mask(path: str) -> MaskGrid:
    if path not in _MASK_CACHE:
        _MASK_CACHE[path] = load_mask(path)
    return _MASK_CACHE[path]


def _cached_matches(path: str) -> MatchSet:
    if path not in _MATCH_CACHE:
        with open(path) as fh:
            _MATCH_CACHE[path] = MatchSet.from_records(json.load(fh))
    return _MATCH_CACHE[path]


def draw_training_sample(
    records: list[ManifestRecord],
    task: TaskKind,
    policy: MaskPolicy,
    seed: int,
    split: str = "train",
    local_sr_side_range: tuple[int, int] = LOCAL_SR_SIDE_RANGE,
    max_retries: int = 10,
) -> TrainingSample:
    """Draw one composed training sample; pure function of (records, seed)."""
    pool = [r for r in records if r.split == split]
    if not pool:
        raise ManifestError(f"no records in split {split!r}")
    rng = seeded_rng(seed, "draw")
    last_err = None
    for attempt in range(max_retries):
        rec = pool[int(rng.integers(0, len(pool)))]
        try:
            return _compose_record(rec, task, policy, rng, local_sr_side_range)
        except (ManifestError, FileNotFoundError, KeyError) as exc:
            last_err = exc
            log.warning("skipping record %s: %s", rec.ref_path, exc)
    raise ManifestError(f"no usable record after {max_retries} draws: {last_err}")


def _compose_record(rec, task, policy, rng, local_sr_side_range) -> TrainingSample:
    sub = int(rng.integers(0, 2**63))
    if task is TaskKind.REF_INPAINT:
        ref = _cached_image(rec.ref_path)
        tar = _cached_image(rec.tar_path)
        kind = policy.choose(rng)
        if kind == "matching":
            if rec.match_path is None:
                raise ManifestError("matching mask requested but record has no matches")
            try:
                mask = gen_matching_mask(_cached_matches(rec.match_path),
                                         tar.height, tar.width, sub, policy.params)
            except MatchFallbackError:
                kind = "irregular"
                mask = gen_irregular_mask(tar.height, tar.width, sub, policy.params)
        else:
            mask = gen_irregular_mask(tar.height, tar.width, sub, policy.params)
        stitched = compose_ref_inpaint(ref, tar, mask)
        clean = pane_concat(ref, tar)
        return TrainingSample(stitched, clean, {"mask_kind": kind})

    if task in (TaskKind.INPAINT, TaskKind.OUTPAINT):
        img = _cached_image(rec.tar_path)
        if task is TaskKind.INPAINT:
            mask = gen_irregular_mask(img.height, img.width, sub, policy.params)
        else:
            frac = rng.uniform(*OUTPAINT_TRAIN_FRACTION)
            mask = gen_outpaint_mask(img.height, img.width, frac, sub, sides="random")
        stitched = compose_plain(img, mask, task)
        return TrainingSample(stitched, img, {"mask_kind": task.value})

    if task is TaskKind.LOCAL_SR:
        ref = _cached_image(rec.ref_path)
        side = int(rng.integers(local_sr_side_range[0], local_sr_side_range[1] + 1))
        if side > min(ref.height, ref.width):
            raise ManifestError(
                f"patch side {side} exceeds reference {ref.height}x{ref.width}"
            )
        bw = side if ref.width == ref.height else int(round(side * ref.width / ref.height))
        x = int(rng.integers(0, ref.width - bw + 1))
        y = int(rng.integers(0, ref.height - side + 1))
        box = PatchBox(x, y, bw, side)
        stitched = compose_local_sr(ref, box)
        gt = _local_sr_ground_truth(rec, ref, box)
        left = ImageCanvas(stitched.canvas.values[:, : ref.width])
        clean = pane_concat(left, gt)
        return TrainingSample(stitched, clean, {"patch_side": side, "box": box})

    if task is TaskKind.NVS:
        ref = _cached_image(rec.ref_path)
        tar = _cached_image(rec.tar_path)
        if rec.pose is None or rec.object_mask_path is None:
            raise ManifestError("view-synthesis record needs pose and object mask")
        obj = _cached_mask(rec.object_mask_path)
        mask = gen_nvs_mask(obj, sub, policy.params)
        pose = RelativePose.from_dict(rec.pose)
        stitched = compose_nvs(ref, mask, pose)
        clean = pane_concat(ref, tar)
        return TrainingSample(stitched, clean, {"mask_kind": "nvs"})

    raise ValueError(f"unsupported task {task}")


def _local_sr_ground_truth(rec, ref: ImageCanvas, box: PatchBox) -> ImageCanvas:
    """High-resolution patch target: true detail if a hi-res render exists."""
    if rec.hires_path is not None:
        hi = _cached_image(rec.hires_path)
        fy = hi.height // ref.height
        fx = hi.width // ref.width
        crop = hi.values[box.y * fy : (box.y + box.h) * fy,
                         box.x * fx : (box.x + box.w) * fx]
        return ImageCanvas(np.clip(resize(crop, ref.height, ref.width, "bilinear"), 0, 1))
    crop = ref.values[box.y : box.y + box.h, box.x : box.x + box.w]
    return ImageCanvas(np.clip(resize(crop, ref.height, ref.width, "bilinear"), 0, 1))


def compose_with_mask(rec: ManifestRecord, task: TaskKind,
                      mask: Optional[MaskGrid]) -> TrainingSample:
    """Deterministic composition of one record with a fixed mask.

    Used for evaluation against frozen validation masks. Local SR ignores
    the mask and magnifies a centered half-size patch.
    """
    if task is TaskKind.REF_INPAINT:
        ref = _cached_image(rec.ref_path)
        tar = _cached_image(rec.tar_path)
        stitched = compose_ref_inpaint(ref, tar, mask)
        return TrainingSample(stitched, pane_concat(ref, tar), {"mask_kind": "frozen"})
    if task in (TaskKind.INPAINT, TaskKind.OUTPAINT):
        img = _cached_image(rec.tar_path)
        return TrainingSample(compose_plain(img, mask, task), img,
                              {"mask_kind": "frozen"})
    if task is TaskKind.NVS:
        ref = _cached_image(rec.ref_path)
        tar = _cached_image(rec.tar_path)
        stitched = compose_nvs(ref, mask, RelativePose.from_dict(rec.pose))
        return TrainingSample(stitched, pane_concat(ref, tar), {"mask_kind": "frozen"})
    if task is TaskKind.LOCAL_SR:
        ref = _cached_image(rec.ref_path)
        side = min(ref.height, ref.width) // 2
        box = PatchBox((ref.width - side) // 2, (ref.height - side) // 2, side, side)
        stitched = compose_local_sr(ref, box)
        gt = _local_sr_ground_truth(rec, ref, box)
        left = ImageCanvas(stitched.canvas.values[:, : ref.width])
        return TrainingSample(stitched, pane_concat(left, gt), {"box": box})
    raise ValueError(f"unsupported task {task}")


def make_draw_fn(records, task, policy, **kwargs):
    """Adapter for the trainer: (seed, step, i) -> TrainingSample."""

    def draw(seed: int, step: int, i: int) -> TrainingSample:
        return draw_training_sample(
            records, task, policy, derive_seed(seed, f"{step}/{i}"), **kwargs
        )

    return draw


# ---------------------------------------------------------------------------
# Procedural toy scenes.

_WORLD = 64.0
_VIEW = 32
_HIRES_FACTOR = 4
# Edge softness in world units. Soft (anti-aliased) edges keep the scenes
# band-limited relative to the pixel grid, so reconstruction quality
# measures content correctness instead of razor-edge placement.
_SOFT = 2.0


def _shape_sdf(shape: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Signed distance to the shape boundary (negative inside)."""
    if shape["kind"] == "circle":
        return np.sqrt((x - shape["cx"]) ** 2 + (y - shape["cy"]) ** 2) - shape["r"]
    hx, hy = shape["w"] / 2, shape["h"] / 2
    qx = np.abs(x - (shape["x"] + hx)) - hx
    qy = np.abs(y - (shape["y"] + hy)) - hy
    outside = np.sqrt(np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2)
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def _render(scene: dict, x0: float, y0: float, win: float, res: int) -> np.ndarray:
    """Rasterize a square window of the vector scene at the given resolution."""
    coords = (np.arange(res) + 0.5) * (win / res)
    X = x0 + coords[None, :]
    Y = y0 + coords[:, None]
    img = np.ones((res, res, 3), dtype=np.float32) * np.asarray(
        scene["background"], dtype=np.float32
    )
    for shape in scene["shapes"]:
        color = np.asarray(shape["color"], dtype=np.float32)
        alpha = np.clip(0.5 - _shape_sdf(shape, X, Y) / _SOFT, 0.0, 1.0)
        alpha = alpha.astype(np.float32)[:, :, None]
        img = img * (1.0 - alpha) + color * alpha
    return img


def _shape_hit(shape: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if shape["kind"] == "circle":
        return (x - shape["cx"]) ** 2 + (y - shape["cy"]) ** 2 <= shape["r"] ** 2
    return (
        (x >= shape["x"]) & (x < shape["x"] + shape["w"])
        & (y >= shape["y"]) & (y < shape["y"] + shape["h"])
    )


def _random_scene(rng) -> dict:
    background = rng.uniform(0.75, 0.95, size=3).round(3).tolist()
    shapes = []
    # Shape 0 sits near the world center so it shows in every view; it is
    # the "object" for view-synthesis masks.
    shapes.append({
        "kind": "circle",
        "cx": float(rng.uniform(28, 36)), "cy": float(rng.uniform(28, 36)),
        "r": float(rng.uniform(5, 9)),
        "color": rng.uniform(0.0, 0.6, size=3).round(3).tolist(),
    })
    for _ in range(int(rng.integers(2, 4))):
        if rng.random() < 0.5:
            shapes.append({
                "kind": "circle",
                "cx": float(rng.uniform(8, 56)), "cy": float(rng.uniform(8, 56)),
                "r": float(rng.uniform(3, 8)),
                "color": rng.uniform(0.0, 0.8, size=3).round(3).tolist(),
            })
        else:
            shapes.append({
                "kind": "rect",
                "x": float(rng.uniform(4, 48)), "y": float(rng.uniform(4, 48)),
                "w": float(rng.uniform(6, 16)), "h": float(rng.uniform(6, 16)),
                "color": rng.uniform(0.0, 0.8, size=3).round(3).tolist(),
            })
    return {"background": background, "shapes": shapes}


def make_toy_dataset(n: int, seed: int, out_dir, view: int = _VIEW) -> Path:
    """Emit n procedurally rendered pairs with exact ground truth.

    Per pair: reference/target views related by a known shift, a hi-res
    reference render, exact match points, the target-view object mask, and
    the exact relative pose. Returns the manifest path.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        rng = seeded_rng(seed, f"toy/{i}")
        scene = _random_scene(rng)
        # Small shifts keep the views nearly aligned, so cross-pane copying
        # stays within reach of a desk-scale denoiser while the hole content
        # is still only present in the reference pane.
        dx = int(rng.integers(1, 4)) * (1 if rng.random() < 0.5 else -1)
        dy = int(rng.integers(1, 4)) * (1 if rng.random() < 0.5 else -1)
        rx, ry = (_WORLD - view) / 2, (_WORLD - view) / 2
        tx, ty = rx + dx, ry + dy

        ref = _render(scene, rx, ry, view, view)
        tar = _render(scene, tx, ty, view, view)
        hi = _render(scene, rx, ry, view, view * _HIRES_FACTOR)

        pair_dir = out_dir / f"pair_{i:04d}"
        pair_dir.mkdir(exist_ok=True)
        save_image(ImageCanvas(np.clip(ref, 0, 1)), pair_dir / "ref.png")
        save_image(ImageCanvas(np.clip(tar, 0, 1)), pair_dir / "tar.png")
        save_image(ImageCanvas(np.clip(hi, 0, 1)), pair_dir / "hires.png")

        # Exact match points: pixels visible in both views, mapped by the
        # known shift; a minority get low confidence on purpose.
        lo_x, hi_x = max(0, -dx), min(view, view - dx)
        lo_y, hi_y = max(0, -dy), min(view, view - dy)
        matches = []
        for _ in range(40):
            mx = float(rng.uniform(lo_x, hi_x - 1))
            my = float(rng.uniform(lo_y, hi_y - 1))
            conf = float(rng.uniform(0.82, 1.0)) if rng.random() < 0.85 else float(
                rng.uniform(0.0, 0.5)
            )
            matches.append({"ref": [mx, my], "tar": [mx + dx, my + dy],
                            "conf": round(conf, 4)})
        with open(pair_dir / "matches.json", "w") as fh:
            json.dump(matches, fh)

        # Target-view object mask for shape 0 (exact rasterization).
        coords = (np.arange(view) + 0.5) * 1.0
        gx = tx + coords[None, :]
        gy = ty + coords[:, None]
        obj = _shape_hit(scene["shapes"][0], gx, gy).astype(np.uint8)
        if not obj.any():
            obj[view // 2 - 2 : view // 2 + 2, view // 2 - 2 : view // 2 + 2] = 1
        save_mask(MaskGrid(obj), pair_dir / "object_mask.png")

        cooc = (view - abs(dx)) * (view - abs(dy)) / view**2
        pose = RelativePose(theta=dy * np.pi / 48, phi=dx * np.pi / 32, r=0.0)
        split = "val" if seeded_rng(seed, f"toy-split/{i}").random() < 0.15 else "train"
        records.append(ManifestRecord(
            ref_path=str(pair_dir / "ref.png"),
            tar_path=str(pair_dir / "tar.png"),
            hires_path=str(pair_dir / "hires.png"),
            cooccurrence=round(float(cooc), 4),
            match_path=str(pair_dir / "matches.json"),
            pose=pose.to_dict(),
            object_mask_path=str(pair_dir / "object_mask.png"),
            split=split,
        ))

    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(records, manifest_path)
    (out_dir / "VERSION").write_text(
        json.dumps({"format": 1, "n": n, "seed": seed, "view": view}) + "\n"
    )
    return manifest_path


def freeze_validation_masks(records, task: TaskKind, out_dir, seed: int,
                            policy: MaskPolicy = DEFAULT_REF_INPAINT_POLICY) -> Path:
    """Write per-record validation masks to disk so metric runs compare."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, rec in enumerate(records):
        if rec.split != "val":
            continue
        img = _cached_image(rec.tar_path)
        sub = derive_seed(seed, f"valmask/{i}")
        if task is TaskKind.OUTPAINT:
            mask = gen_outpaint_mask(img.height, img.width, OUTPAINT_EVAL_FRACTION, sub)
        elif task is TaskKind.NVS and rec.object_mask_path:
            mask = gen_nvs_mask(_cached_mask(rec.object_mask_path), sub, policy.params)
        else:
            mask = gen_irregular_mask(img.height, img.width, sub, policy.params)
        path = out_dir / f"val_{i:04d}.png"
        save_mask(mask, path)
        index.append({"record_index": i, "mask_path": str(path)})
    index_path = out_dir / "index.jsonl"
    with open(index_path, "w") as fh:
        for rec in index:
            fh.write(json.dumps(rec) + "\n")
    return index_path
