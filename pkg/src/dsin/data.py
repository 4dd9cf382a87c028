"""(X, Y) pair construction.

``X`` is always the image being compressed and ``Y`` the decoder-only side
image. Real datasets are described by a frame index ``(scene, time, camera)``;
desk-scale experiments use :func:`synth_pair`, which derives ``Y`` from the
same base scene as ``X`` through a shift, photometric change, occlusions and
noise, and reports the patch correlation it achieved.
"""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import avg_patch_pearson

log = logging.getLogger(__name__)

LEFT, RIGHT = "left", "right"


@dataclass(frozen=True)
class Frame:
    scene: str
    time: int
    camera: str
    path: str


@dataclass(frozen=True)
class PairSpec:
    mode: str = "synthetic"  # stereo | general | synthetic
    time_offset: int = 1
    # synthetic generator
    size: tuple[int, int] = (64, 96)
    max_shift: tuple[int, int] = (0, 0)  # (rows, cols), drawn uniformly in [-m, m]
    min_shift: tuple[int, int] = (0, 0)  # lower bound on |shift| per axis
    rotation_deg: float = 0.0
    scale_jitter: float = 0.0
    gain: tuple[float, float] = (1.0, 1.0)
    bias: tuple[float, float] = (0.0, 0.0)
    occlusion: float = 0.0  # fraction of the Y crop covered by flat rectangles
    noise_sigma: float = 0.0
    band: tuple[float, float] | None = None  # target avg patch Pearson of (X, aligned Y)
    max_retries: int = 40

    def __post_init__(self):
        if self.mode not in ("stereo", "general", "synthetic"):
            raise ValueError(f"unknown pair mode {self.mode!r}")
        if self.mode == "general" and self.time_offset not in (1, 2, 3):
            raise ValueError("general pairs are 1 to 3 time steps apart")
        if self.band is not None:
            lo, hi = self.band
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"correlation band {self.band} must lie inside [0, 1]")


# ----------------------------------------------------------------------------
# frame indexes and manifests

_KITTI_NAME = re.compile(r"^(?P<scene>\d+)_(?P<time>\d+)\.png$")
_CAMERA_DIRS = {"image_2": LEFT, "image_3": RIGHT}


def index_frames(root) -> list[Frame]:
    """Scan a KITTI-multiview style tree: ``<root>/image_{2,3}/<scene>_<tt>.png``."""
    root = Path(root)
    frames = []
    for sub, cam in _CAMERA_DIRS.items():
        d = root / sub
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            m = _KITTI_NAME.match(p.name)
            if m:
                frames.append(Frame(m["scene"], int(m["time"]), cam, str(p)))
    return sorted(frames, key=lambda f: (f.scene, f.time, f.camera))


def build_pairs(frames: list[Frame], spec: PairSpec) -> list[tuple[str, str, str, int]]:
    """Manifest records ``(x_path, y_path, mode, k)``.

    stereo: left and right frames of the same time step.
    general: left frame at ``t`` with the right frame at ``t + k`` (the later frame is Y).
    Frames without a counterpart are skipped and logged.
    """
    if spec.mode not in ("stereo", "general"):
        raise ValueError("build_pairs handles stereo and general modes")
    lookup = {(f.scene, f.time, f.camera): f for f in frames}
    k = 0 if spec.mode == "stereo" else spec.time_offset
    out = []
    for f in sorted(frames, key=lambda f: (f.scene, f.time, f.camera)):
        if f.camera != LEFT:
            continue
        other = lookup.get((f.scene, f.time + k, RIGHT))
        if other is None:
            log.info("skip %s: no right frame at t=%d in scene %s", f.path, f.time + k, f.scene)
            continue
        out.append((f.path, other.path, spec.mode, k))
    return out


def write_manifest(path, pairs) -> None:
    with open(path, "w") as fh:
        for x, y, mode, k in pairs:
            fh.write(f"{x}\t{y}\t{mode}\t{k}\n")


def read_manifest(path) -> list[tuple[str, str, str, int]]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            x, y, mode, k = line.split("\t")
            out.append((x, y, mode, int(k)))
    return out


def split_by_scene(pairs, test_scenes) -> tuple[list, list]:
    """Train/test split on the scene id (leading digits of the file name)."""
    test_scenes = set(test_scenes)

    def scene(p):
        m = _KITTI_NAME.match(Path(p).name)
        return m["scene"] if m else Path(p).stem

    train = [p for p in pairs if scene(p[0]) not in test_scenes]
    test = [p for p in pairs if scene(p[0]) in test_scenes]
    return train, test


def data_root(cli_value=None) -> Path | None:
    v = cli_value or os.environ.get("DSIN_DATA")
    return Path(v) if v else None


# ----------------------------------------------------------------------------
# base scenes for synthetic pairs

TRAIN_SCENES = ("astronaut", "coffee", "immunohistochemistry", "motorcycle_left", "motorcycle_right", "retina", "hubble_deep_field")
TEST_SCENES = ("chelsea", "rocket")


def _load_scene(name: str) -> np.ndarray:
    import skimage.data

    if name.startswith("motorcycle_"):
        left, right, _ = skimage.data.stereo_motorcycle()
        img = left if name.endswith("left") else right
    else:
        img = getattr(skimage.data, name)()
    return np.asarray(img[..., :3], dtype=np.float64) / 255.0


def base_scene(name: str, height: int = 144) -> np.ndarray:
    """Scene rescaled to ``height`` rows (antialiased), float ``(H, W, 3)``."""
    from skimage.transform import resize

    img = _load_scene(name)
    w = int(round(img.shape[1] * height / img.shape[0]))
    return np.clip(resize(img, (height, w), anti_aliasing=True, order=1), 0.0, 1.0)


def base_scenes(split: str = "train", height: int = 144) -> list[np.ndarray]:
    names = TRAIN_SCENES if split == "train" else TEST_SCENES
    return [base_scene(n, height) for n in names]


# ----------------------------------------------------------------------------
# synthetic pairs

def _affine(img: np.ndarray, rot_deg: float, scale: float) -> np.ndarray:
    if rot_deg == 0 and scale == 1:
        return img
    th = np.deg2rad(rot_deg)
    m = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) / scale
    c = (np.array(img.shape[:2]) - 1) / 2
    off = c - m @ c
    return np.stack(
        [ndimage.affine_transform(img[..., k], m, offset=off, order=1, mode="reflect") for k in range(img.shape[-1])],
        axis=-1,
    )


def _draw_shift(rng, max_shift, min_shift):
    out = []
    for m, lo in zip(max_shift, min_shift):
        if m == 0:
            out.append(0)
            continue
        mags = np.arange(lo, m + 1)
        v = int(rng.choice(mags))
        out.append(v if rng.random() < 0.5 else -v)
    return tuple(out)


class BandUnreachable(RuntimeError):
    pass


def synth_pair(base: np.ndarray, spec: PairSpec, seed: int):
    """``(X, Y, achieved_correlation)`` from one base scene.

    The achieved correlation is the average patch Pearson between X and Y
    before the shift is applied (i.e. Y re-aligned to X). With a target band
    the noise level is bisected until the correlation falls inside it.
    """
    rng = np.random.default_rng(seed)
    H, W = spec.size
    dy, dx = _draw_shift(rng, spec.max_shift, spec.min_shift)
    need_h, need_w = H + abs(dy), W + abs(dx)
    if base.shape[0] < need_h or base.shape[1] < need_w:
        raise ValueError(f"base scene {base.shape[:2]} too small for {H}x{W} crops shifted by {(dy, dx)}")
    r0 = int(rng.integers(0, base.shape[0] - need_h + 1)) + max(0, -dy)
    c0 = int(rng.integers(0, base.shape[1] - need_w + 1)) + max(0, -dx)
    x = base[r0:r0 + H, c0:c0 + W].copy()

    rot = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
    scale = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    gain = rng.uniform(*spec.gain)
    bias = rng.uniform(*spec.bias)
    warped = _affine(base, rot, scale) * gain + bias

    occ = np.zeros(base.shape[:2], dtype=bool)
    occ_color = rng.random(3)
    if spec.occlusion > 0:
        # rectangles inside the Y crop until the requested fraction is covered
        ys, xs = r0 + dy, c0 + dx
        target = spec.occlusion * H * W
        for _ in range(200):
            if occ[ys:ys + H, xs:xs + W].sum() >= target:
                break
            h = int(rng.integers(H // 8, H // 2 + 1))
            w = int(rng.integers(W // 8, W // 2 + 1))
            rr = ys + int(rng.integers(0, H - h + 1))
            cc = xs + int(rng.integers(0, W - w + 1))
            occ[rr:rr + h, cc:cc + w] = True
    noise = rng.standard_normal(base.shape)

    def render(sigma):
        yf = warped + sigma * noise
        yf[occ] = occ_color
        return np.clip(yf, 0.0, 1.0)

    def corr_at(sigma):
        yf = render(sigma)
        return avg_patch_pearson(x, yf[r0:r0 + H, c0:c0 + W]), yf

    sigma = spec.noise_sigma
    c, yf = corr_at(sigma)
    if spec.band is not None:
        lo, hi = spec.band
        if not lo <= c <= hi:
            s_lo, s_hi = 0.0, max(sigma, 0.05)
            c_lo, _ = corr_at(s_lo)
            if c_lo < lo:
                raise BandUnreachable(f"correlation {c_lo:.3f} without noise is already below band {spec.band}")
            while corr_at(s_hi)[0] > hi:
                s_hi *= 2
                if s_hi > 64:
                    raise BandUnreachable(f"cannot lower correlation into band {spec.band}")
            for _ in range(spec.max_retries):
                sigma = (s_lo + s_hi) / 2
                c, yf = corr_at(sigma)
                if lo <= c <= hi:
                    break
                if c > hi:
                    s_lo = sigma
                else:
                    s_hi = sigma
            else:
                raise BandUnreachable(f"band {spec.band} not reached after {spec.max_retries} retries")
    y = yf[r0 + dy:r0 + dy + H, c0 + dx:c0 + dx + W].copy()
    return x, y, float(c)


@dataclass
class PairSet:
    """In-memory list of synthetic pairs with their generator metadata."""

    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    corr: list = field(default_factory=list)
    scene: list = field(default_factory=list)

    def __len__(self):
        return len(self.x)

    def pairs(self):
        return list(zip(self.x, self.y))


def make_pairs(n: int, spec: PairSpec, seed: int, split: str = "train", scenes=None) -> PairSet:
    """``n`` synthetic pairs cycling over the split's base scenes."""
    scenes = scenes if scenes is not None else base_scenes(split)
    out = PairSet()
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(n)):
        k = i % len(scenes)
        s = int(child.generate_state(1)[0])
        x, y, c = synth_pair(scenes[k], spec, s)
        out.x.append(x)
        out.y.append(y)
        out.corr.append(c)
        out.scene.append(k)
    return out


def with_band(spec: PairSpec, center: float, half_width: float = 0.05) -> PairSpec:
    return replace(spec, band=(max(0.0, center - half_width), min(1.0, center + half_width)))
