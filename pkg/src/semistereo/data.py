"""Dataset ingestion, the procedural toy stereo scene generator, and the
alternating batch scheduler.

Disparity convention everywhere: left-view, nonnegative; the match of left
pixel (x, y) sits at (x - d, y) in the right image.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError

TEXTURES = ("noise", "gradient", "checker")


def _u8_to_float(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


@dataclass
class StereoSample:
    """A rectified pair with optional ground truth, tagged by domain."""

    id: str
    left: np.ndarray  # H,W,3 float32 in [0,1]
    right: np.ndarray
    domain: str  # 'synthetic' or 'real'
    gt_disparity: np.ndarray | None = None
    gt_valid: np.ndarray | None = None
    gt_occlusion: np.ndarray | None = None

    def __post_init__(self):
        if self.domain not in ("synthetic", "real"):
            raise ConfigError(f"domain must be 'synthetic' or 'real', got {self.domain!r}")
        if self.left.shape != self.right.shape or self.left.ndim != 3:
            raise ConfigError(f"left/right shape mismatch: {self.left.shape} vs {self.right.shape}")
        for name, img in (("left", self.left), ("right", self.right)):
            if img.min() < 0.0 or img.max() > 1.0:
                raise ConfigError(f"{name} image values outside [0,1]")
        if self.gt_disparity is not None:
            if self.gt_disparity.shape != self.left.shape[:2]:
                raise ConfigError("gt_disparity shape does not match images")
            valid = self.gt_valid if self.gt_valid is not None else np.ones_like(self.gt_disparity, bool)
            vals = self.gt_disparity[valid]
            if vals.size and (not np.all(np.isfinite(vals)) or vals.min() < 0):
                raise ConfigError("gt_disparity must be finite and >= 0 where valid")

    @property
    def shape(self):
        return self.left.shape[:2]

    def without_gt(self) -> "StereoSample":
        """Copy with every ground-truth field stripped (the self-supervised
        label guard)."""
        return replace(self, gt_disparity=None, gt_valid=None, gt_occlusion=None)


@dataclass(frozen=True)
class ToySceneSpec:
    """Layered fronto-parallel scene: textured rectangles at integer
    disparities over a full-frame background. Larger disparity is nearer and
    occludes."""

    width: int
    height: int
    n_layers: int = 2
    disparity_range: tuple = (2, 10)
    texture: str = "noise"
    texture_scale: int = 4

    def validate(self):
        d_min, d_max = self.disparity_range
        if self.width < 8 or self.height < 8:
            raise ConfigError("scene must be at least 8x8")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not (0 <= d_min <= d_max):
            raise ConfigError(f"need 0 <= d_min <= d_max, got {self.disparity_range}")
        if d_max >= self.width:
            raise ConfigError(f"d_max={d_max} must be < width={self.width}")
        if d_max - d_min + 1 < self.n_layers:
            # layers carry distinct disparities so occlusion is unambiguous
            raise ConfigError("disparity_range too narrow for n_layers distinct values")
        if self.texture not in TEXTURES:
            raise ConfigError(f"texture must be one of {TEXTURES}")
        if self.texture_scale < 1:
            raise ConfigError("texture_scale must be >= 1")


@dataclass(frozen=True)
class BatchSchedule:
    """Strictly alternating S/R(supervised-synthetic/self-supervised-real)
    schedule with per-entry sample indices."""

    entries: tuple  # ((tag, index), ...)

    @property
    def tags(self):
        return tuple(tag for tag, _ in self.entries)

    def check_invariants(self):
        tags = self.tags
        if tags.count("S") != tags.count("R"):
            raise ConfigError("schedule is unbalanced")
        for a, b in zip(tags, tags[1:]):
            if a == b:
                raise ConfigError("schedule tags must strictly alternate")


# ------------------------------------------------------------------- PFM I/O


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM disparity map.

    Returns rows top-to-bottom (the file stores bottom-to-top) and absolute
    values (some datasets store left disparities negated).
    """
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            raise FormatError("3-channel PFM is not a disparity map")
        if header != b"Pf":
            raise FormatError(f"not a PFM file (header {header!r})")
        dims = f.readline().decode("ascii", errors="replace")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise FormatError(f"malformed PFM dimensions line: {dims!r}")
        width, height = int(m.group(1)), int(m.group(2))
        try:
            scale = float(f.readline().rstrip())
        except ValueError as e:
            raise FormatError(f"malformed PFM scale line: {e}") from e
        endian = "<" if scale < 0 else ">"
        payload = f.read()
    expected = width * height * 4
    if len(payload) != expected:
        raise FormatError(f"PFM payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=endian + "f4").reshape(height, width)
    return np.abs(np.flipud(data)).astype(np.float32)


def write_pfm(path, data: np.ndarray):
    """Write a single-channel float32 PFM (little-endian, bottom-to-top)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise FormatError("write_pfm expects an H x W map")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


# ------------------------------------------------------------ 16-bit PNG I/O


def read_disparity_png16(path):
    """Read a KITTI-style disparity PNG: uint16, value/256, 0 = invalid.

    Returns (disparity float32, valid bool).
    """
    with Image.open(path) as im:
        raw = np.array(im)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise FormatError(
            f"disparity PNG must be 16-bit single channel, got dtype={raw.dtype}, ndim={raw.ndim}"
        )
    disparity = raw.astype(np.float32) / np.float32(256.0)
    return disparity, raw > 0


def write_disparity_png16(path, disparity: np.ndarray, valid: np.ndarray | None = None):
    disparity = np.asarray(disparity)
    raw = np.round(disparity * 256.0)
    if raw.min() < 0 or raw.max() > 65535:
        raise FormatError("disparity out of uint16/256 range")
    raw = raw.astype(np.uint16)
    if valid is not None:
        raw = np.where(valid, raw, 0).astype(np.uint16)
    Image.fromarray(raw).save(path)


# ------------------------------------------------------------- toy generator


@dataclass
class ToyScene:
    """Full render of a layered scene, including the right-view disparity
    needed by the occlusion consistency check."""

    left: np.ndarray
    right: np.ndarray
    disparity_left: np.ndarray
    disparity_right: np.ndarray
    occlusion: np.ndarray  # bool, left view
    layer_id_left: np.ndarray = field(repr=False, default=None)
    layer_id_right: np.ndarray = field(repr=False, default=None)


def render_layered_scene(width, height, rects, disparities, textures) -> ToyScene:
    """Render layers back to front; layer 0 is the background and must cover
    the frame extended by max(disparities) so the right view has no holes.

    rects are (x0, y0, w, h) in left-view pixels; each texture is (h, w, 3)
    float in [0,1], background texture is (height, width + d_max, 3).
    Visibility: larger disparity wins, ties go to the later layer.
    """
    n = len(rects)
    if not (n == len(disparities) == len(textures)):
        raise ConfigError("rects, disparities, textures must align")
    left = np.zeros((height, width, 3), np.float32)
    right = np.zeros((height, width, 3), np.float32)
    id_left = np.full((height, width), -1, np.int32)
    id_right = np.full((height, width), -1, np.int32)
    order = sorted(range(n), key=lambda i: (disparities[i], i))
    for i in order:
        x0, y0, w, h = rects[i]
        d = int(disparities[i])
        tex = np.asarray(textures[i], dtype=np.float32)
        if tex.shape[:2] != (h, w):
            raise ConfigError(f"texture {i} shape {tex.shape[:2]} != rect {h, w}")
        # left view
        lx0, lx1 = max(x0, 0), min(x0 + w, width)
        ly0, ly1 = max(y0, 0), min(y0 + h, height)
        if lx0 < lx1 and ly0 < ly1:
            left[ly0:ly1, lx0:lx1] = tex[ly0 - y0 : ly1 - y0, lx0 - x0 : lx1 - x0]
            id_left[ly0:ly1, lx0:lx1] = i
        # right view: the layer appears shifted left by its disparity
        rx0, rx1 = max(x0 - d, 0), min(x0 + w - d, width)
        if rx0 < rx1 and ly0 < ly1:
            right[ly0:ly1, rx0:rx1] = tex[ly0 - y0 : ly1 - y0, rx0 + d - x0 : rx1 + d - x0]
            id_right[ly0:ly1, rx0:rx1] = i
    if (id_left < 0).any() or (id_right < 0).any():
        raise ConfigError("background layer does not cover the frame in both views")
    disps = np.asarray(disparities, np.float32)
    d_left = disps[id_left]
    d_right = disps[id_right]
    xs = np.arange(width)[None, :]
    u = xs - d_left  # match position of each left pixel
    ui = np.clip(u.astype(np.int64), 0, width - 1)
    covered = id_right[np.arange(height)[:, None], ui] != id_left
    occluded = (u < 0) | (covered & (u >= 0))
    return ToyScene(left, right, d_left, d_right, occluded, id_left, id_right)


def _make_texture(rng, kind, h, w, scale) -> np.ndarray:
    """uint8-quantized texture so disk round trips are exact."""
    if kind == "noise":
        bh, bw = -(-h // scale), -(-w // scale)
        base = rng.integers(0, 256, size=(bh, bw, 3), dtype=np.uint8)
        tex = np.repeat(np.repeat(base, scale, axis=0), scale, axis=1)[:h, :w]
    elif kind == "gradient":
        c0 = rng.integers(0, 256, size=3)
        c1 = rng.integers(0, 256, size=3)
        ramp = np.linspace(0.0, 1.0, w)[None, :, None]
        tex = np.round(c0[None, None, :] * (1 - ramp) + c1[None, None, :] * ramp).astype(np.uint8)
        tex = np.broadcast_to(tex, (h, w, 3)).copy()
    elif kind == "checker":
        c0 = rng.integers(0, 256, size=3).astype(np.uint8)
        c1 = rng.integers(0, 256, size=3).astype(np.uint8)
        yy, xx = np.indices((h, w))
        cells = ((yy // scale) + (xx // scale)) % 2
        tex = np.where(cells[..., None] == 0, c0, c1)
    else:
        raise ConfigError(f"unknown texture {kind!r}")
    return _u8_to_float(tex)


def generate_toy_pair(spec: ToySceneSpec, seed: int) -> StereoSample:
    """Deterministic in (spec, seed); exact integer ground truth."""
    scene = generate_toy_scene(spec, seed)
    h, w = scene.left.shape[:2]
    return StereoSample(
        id=f"{spec.texture}_{seed:06d}",
        left=scene.left,
        right=scene.right,
        domain="synthetic",
        gt_disparity=scene.disparity_left,
        gt_valid=np.ones((h, w), bool),
        gt_occlusion=scene.occlusion,
    )


def generate_toy_scene(spec: ToySceneSpec, seed: int) -> ToyScene:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([0x7051, int(seed)]))
    w, h = spec.width, spec.height
    d_min, d_max = spec.disparity_range
    values = rng.choice(np.arange(d_min, d_max + 1), size=spec.n_layers, replace=False)
    d_bg = int(values.min())
    fg = [int(v) for v in values if v != d_bg]
    rects = [(0, 0, w + d_max, h)]
    disps = [d_bg]
    textures = [_make_texture(rng, spec.texture, h, w + d_max, spec.texture_scale)]
    for d in fg:
        rw = int(rng.integers(max(w // 6, 4), max(w // 2, 5)))
        rh = int(rng.integers(max(h // 6, 4), max(h // 2, 5)))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        rects.append((x0, y0, rw, rh))
        disps.append(d)
        textures.append(_make_texture(rng, spec.texture, rh, rw, spec.texture_scale))
    return render_layered_scene(w, h, rects, disps, textures)


# ----------------------------------------------------------------- scheduler


def schedule_epoch(n_synthetic: int, n_real: int, seed: int) -> BatchSchedule:
    """Strictly alternating schedule starting with S over seeded permutations
    of both pools. Counts must balance; resample upstream if they do not."""
    if n_synthetic != n_real:
        raise ConfigError(
            f"pools must balance per epoch: n_synthetic={n_synthetic} != n_real={n_real}"
        )
    if n_synthetic <= 0:
        raise ConfigError("schedule needs at least one sample per pool")
    rng = np.random.default_rng(np.random.SeedSequence([0x5CED, int(seed)]))
    perm_s = rng.permutation(n_synthetic)
    perm_r = rng.permutation(n_real)
    entries = []
    for i in range(n_synthetic):
        entries.append(("S", int(perm_s[i])))
        entries.append(("R", int(perm_r[i])))
    schedule = BatchSchedule(tuple(entries))
    schedule.check_invariants()
    return schedule


# ------------------------------------------------------------- on-disk layout


def save_toy_sample(root, sample: StereoSample, meta: dict | None = None):
    """Layout: <root>/<id>/{left.png,right.png,disp.pfm,occ.png,meta.json}."""
    out = Path(root) / sample.id
    out.mkdir(parents=True, exist_ok=True)
    for name, img in (("left.png", sample.left), ("right.png", sample.right)):
        Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(out / name)
    if sample.gt_disparity is not None:
        write_pfm(out / "disp.pfm", sample.gt_disparity)
    if sample.gt_occlusion is not None:
        Image.fromarray(np.where(sample.gt_occlusion, 255, 0).astype(np.uint8)).save(out / "occ.png")
    record = {"id": sample.id, "domain": sample.domain}
    if meta:
        record.update(meta)
    (out / "meta.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_toy_sample(sample_dir, domain: str | None = None) -> StereoSample:
    d = Path(sample_dir)
    if not (d / "left.png").exists():
        raise DataError(f"no left.png under {d}")
    left = _u8_to_float(np.array(Image.open(d / "left.png").convert("RGB")))
    right = _u8_to_float(np.array(Image.open(d / "right.png").convert("RGB")))
    meta = {}
    if (d / "meta.json").exists():
        meta = json.loads((d / "meta.json").read_text())
    gt = gt_valid = occ = None
    if (d / "disp.pfm").exists():
        gt = read_pfm(d / "disp.pfm")
        gt_valid = np.ones(gt.shape, bool)
    if (d / "occ.png").exists():
        occ = np.array(Image.open(d / "occ.png")) >= 128
    return StereoSample(
        id=meta.get("id", d.name),
        left=left,
        right=right,
        domain=domain or meta.get("domain", "synthetic"),
        gt_disparity=gt,
        gt_valid=gt_valid,
        gt_occlusion=occ,
    )


def load_toy_dataset(root, domain: str | None = None) -> list:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    samples = [load_toy_sample(p, domain=domain) for p in dirs]
    if not samples:
        raise DataError(f"no samples under {root}")
    return samples
