"""Procedural person and garment sprites.

Persons are drawn on a 64×64 canvas from a 13-joint skeleton: head plus
left/right shoulder, elbow, wrist, hip, knee and ankle (the neck is the
shoulder midpoint). Drawing order is legs, arms, neck, head, then the torso
quad, so the garment region is never occluded.

Garment patterns are anchored to absolute canvas coordinates, which keeps a
pattern identical between the flat garment and the worn garment.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from PIL import Image, ImageDraw

from vestido.errors import ValidationError
from vestido.tensor import Tensor

IMAGE_SIZE = 64
BACKGROUND = (238, 238, 232)
MID_GRAY = (128, 128, 128)
PATTERNS = ("solid", "stripes", "checker")

# 13 keypoints; the neck is derived (`PoseSpec.neck`)
JOINTS = (
    "head",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}

CANONICAL_SKELETON = {
    "head": (32.0, 10.0),
    "r_shoulder": (25.0, 19.0),
    "r_elbow": (22.0, 28.0),
    "r_wrist": (20.0, 36.0),
    "l_shoulder": (39.0, 19.0),
    "l_elbow": (42.0, 28.0),
    "l_wrist": (44.0, 36.0),
    "r_hip": (27.0, 38.0),
    "r_knee": (27.0, 48.0),
    "r_ankle": (27.0, 58.0),
    "l_hip": (37.0, 38.0),
    "l_knee": (37.0, 48.0),
    "l_ankle": (37.0, 58.0),
}

# (parent, child) pairs; lengths are checked against the canonical skeleton
BONES = (
    ("r_shoulder", "l_shoulder"),
    ("r_shoulder", "r_elbow"),
    ("r_elbow", "r_wrist"),
    ("l_shoulder", "l_elbow"),
    ("l_elbow", "l_wrist"),
    ("r_shoulder", "r_hip"),
    ("l_shoulder", "l_hip"),
    ("r_hip", "l_hip"),
    ("r_hip", "r_knee"),
    ("r_knee", "r_ankle"),
    ("l_hip", "l_knee"),
    ("l_knee", "l_ankle"),
)
BONE_TOLERANCE = 0.25

# Garment base colors seen in training, and a disjoint set kept for probes
TRAIN_PALETTE = (
    (200, 40, 40),
    (40, 90, 200),
    (40, 160, 70),
    (230, 200, 40),
    (120, 60, 160),
    (240, 130, 30),
    (30, 30, 30),
    (245, 245, 245),
)
UNSEEN_PALETTE = (
    (0, 190, 190),
    (230, 90, 170),
    (140, 100, 50),
    (170, 220, 60),
)

Color = tuple[int, int, int]


def _check_color(color: Sequence[int], name: str) -> Color:
    if len(color) != 3 or any(not 0 <= int(c) <= 255 for c in color):
        raise ValidationError(f"{name} must be three values in [0, 255], got {color}")
    return (int(color[0]), int(color[1]), int(color[2]))


@dataclass(frozen=True)
class PersonSpec:
    """Appearance of one synthetic identity.

    Attributes:
        skin: Skin RGB
        hair: Hair RGB
        trousers: Trouser RGB
        height_scale: Skeleton scale relative to canonical
        width_scale: Limb thickness scale relative to canonical
    """

    skin: Color
    hair: Color
    trousers: Color
    height_scale: float = 1.0
    width_scale: float = 1.0

    def __post_init__(self) -> None:
        for name in ("skin", "hair", "trousers"):
            object.__setattr__(self, name, _check_color(getattr(self, name), name))
        for name in ("height_scale", "width_scale"):
            value = getattr(self, name)
            if not 0.8 <= value <= 1.2:
                raise ValidationError(f"{name} must lie within ±20% of 1, got {value}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PersonSpec:
        return cls(
            skin=tuple(data["skin"]),
            hair=tuple(data["hair"]),
            trousers=tuple(data["trousers"]),
            height_scale=float(data["height_scale"]),
            width_scale=float(data["width_scale"]),
        )


@dataclass(frozen=True)
class GarmentSpec:
    """A top: base color plus an optional two-color pattern.

    Attributes:
        base: Base RGB
        pattern: One of "solid", "stripes", "checker"
        pattern_color: Second RGB for stripes and checks
        stripe_width: Stripe / check cell width in pixels
    """

    base: Color
    pattern: str = "solid"
    pattern_color: Color = (255, 255, 255)
    stripe_width: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "base", _check_color(self.base, "base"))
        object.__setattr__(
            self, "pattern_color", _check_color(self.pattern_color, "pattern_color")
        )
        if self.pattern not in PATTERNS:
            raise ValidationError(
                f"Unknown pattern '{self.pattern}' (expected one of {', '.join(PATTERNS)})"
            )
        if not 1 <= self.stripe_width <= IMAGE_SIZE // 4:
            raise ValidationError(
                f"stripe_width must lie in [1, {IMAGE_SIZE // 4}], got {self.stripe_width}"
            )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GarmentSpec:
        return cls(
            base=tuple(data["base"]),
            pattern=data["pattern"],
            pattern_color=tuple(data["pattern_color"]),
            stripe_width=int(data["stripe_width"]),
        )


@dataclass(frozen=True)
class PoseSpec:
    """13 joints as (x, y, visible) in the 64×64 frame."""

    keypoints: tuple[tuple[float, float, bool], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        points = tuple((float(x), float(y), bool(v)) for x, y, v in self.keypoints)
        if len(points) != len(JOINTS):
            raise ValidationError(f"A pose needs {len(JOINTS)} joints, got {len(points)}")
        object.__setattr__(self, "keypoints", points)

    def __getitem__(self, name: str) -> tuple[float, float]:
        x, y, _ = self.keypoints[JOINT_INDEX[name]]
        return x, y

    def visible(self, name: str) -> bool:
        return self.keypoints[JOINT_INDEX[name]][2]

    @property
    def neck(self) -> tuple[float, float] | None:
        """Shoulder midpoint; the skeleton has no separate neck keypoint.

        None unless both shoulders are visible.
        """
        if not (self.visible("r_shoulder") and self.visible("l_shoulder")):
            return None
        (rx, ry), (lx, ly) = self["r_shoulder"], self["l_shoulder"]
        return (rx + lx) / 2, (ry + ly) / 2

    def to_list(self) -> list[list[float]]:
        return [[x, y, 1 if v else 0] for x, y, v in self.keypoints]

    @classmethod
    def from_list(cls, data: Sequence[Sequence[float]]) -> PoseSpec:
        return cls(tuple((x, y, bool(v)) for x, y, v in data))

    @classmethod
    def canonical(cls) -> PoseSpec:
        return cls(tuple((*CANONICAL_SKELETON[name], True) for name in JOINTS))

    def validate(self, size: int = IMAGE_SIZE) -> None:
        """Check frame bounds and limb lengths of visible joints.

        Raises:
            ValidationError: If a visible joint is outside the frame or a bone
                strays beyond ±25% of its canonical length
        """
        for name, (x, y, visible) in zip(JOINTS, self.keypoints):
            if visible and not (0.0 <= x <= size - 1 and 0.0 <= y <= size - 1):
                raise ValidationError(f"Joint {name} at ({x:.2f}, {y:.2f}) is outside the frame")
        for a, b in BONES:
            if not (self.visible(a) and self.visible(b)):
                continue
            length = math.dist(self[a], self[b])
            reference = math.dist(CANONICAL_SKELETON[a], CANONICAL_SKELETON[b])
            if abs(length - reference) > BONE_TOLERANCE * reference:
                raise ValidationError(
                    f"Bone {a}-{b} has length {length:.2f}, canonical {reference:.2f}"
                )


# --- Sampling ---


def sample_person(rng: np.random.Generator) -> PersonSpec:
    skin_tones = ((255, 219, 172), (241, 194, 125), (198, 134, 66), (141, 85, 36), (96, 60, 30))
    skin = skin_tones[rng.integers(len(skin_tones))]
    return PersonSpec(
        skin=skin,
        hair=tuple(int(c) for c in rng.integers(0, 120, 3)),
        trousers=tuple(int(c) for c in rng.integers(20, 200, 3)),
        height_scale=float(rng.uniform(0.9, 1.05)),
        width_scale=float(rng.uniform(0.85, 1.15)),
    )


def sample_garment(rng: np.random.Generator, palette: Sequence[Color] = TRAIN_PALETTE) -> GarmentSpec:
    base = palette[rng.integers(len(palette))]
    pattern = PATTERNS[rng.integers(len(PATTERNS))]
    others = [c for c in (*TRAIN_PALETTE, *UNSEEN_PALETTE) if c != base]
    return GarmentSpec(
        base=base,
        pattern=pattern,
        pattern_color=others[rng.integers(len(others))],
        stripe_width=int(rng.integers(2, 6)),
    )


def _polar(origin: tuple[float, float], length: float, angle: float) -> tuple[float, float]:
    """Point at `length` from `origin`; angle 0 points straight down."""
    return origin[0] + length * math.sin(angle), origin[1] + length * math.cos(angle)


def sample_pose(rng: np.random.Generator, person: PersonSpec | None = None) -> PoseSpec:
    """Random limb angles on the canonical skeleton, scaled to the person."""
    scale = person.height_scale if person is not None else 1.0
    canon = CANONICAL_SKELETON
    center = (32.0, 38.0)
    dx = float(rng.uniform(-5.0, 5.0))
    dy = float(rng.uniform(-2.0, 2.0))

    def place(name: str) -> tuple[float, float]:
        x, y = canon[name]
        return center[0] + (x - center[0]) * scale + dx, center[1] + (y - center[1]) * scale + dy

    joints = {name: place(name) for name in ("head", "r_shoulder", "l_shoulder", "r_hip", "l_hip")}

    def limb(parent: str, child: str, angle: float) -> None:
        length = math.dist(canon[parent], canon[child]) * scale
        joints[child] = _polar(joints[parent], length, angle)

    for side, sign in (("r", -1.0), ("l", 1.0)):
        upper = float(rng.uniform(0.1, 1.6))
        lower = upper + float(rng.uniform(-0.4, 0.9))
        thigh = float(rng.uniform(-0.05, 0.35))
        shin = thigh + float(rng.uniform(-0.25, 0.1))
        limb(f"{side}_shoulder", f"{side}_elbow", sign * upper)
        limb(f"{side}_elbow", f"{side}_wrist", sign * lower)
        limb(f"{side}_hip", f"{side}_knee", sign * thigh)
        limb(f"{side}_knee", f"{side}_ankle", sign * shin)

    limit = IMAGE_SIZE - 1
    points = tuple(
        (min(max(joints[n][0], 0.0), limit), min(max(joints[n][1], 0.0), limit), True)
        for n in JOINTS
    )
    return PoseSpec(points)


# --- Rendering ---


def pattern_raster(garment: GarmentSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Full-canvas H×W×3 uint8 fill of the garment pattern."""
    ys, xs = np.mgrid[0:size, 0:size]
    w = garment.stripe_width
    if garment.pattern == "stripes":
        alternate = (ys // w) % 2 == 1
    elif garment.pattern == "checker":
        alternate = ((xs // w) + (ys // w)) % 2 == 1
    else:
        alternate = np.zeros((size, size), dtype=bool)
    out = np.empty((size, size, 3), dtype=np.uint8)
    out[...] = garment.base
    out[alternate] = garment.pattern_color
    return out


def _polygon_mask(points: Sequence[tuple[float, float]], size: int) -> Image.Image:
    mask = Image.new("L", (size, size), 0)
    ImageDraw.Draw(mask).polygon(list(points), fill=255)
    return mask


def torso_polygon(pose: PoseSpec) -> list[tuple[float, float]]:
    return [pose["r_shoulder"], pose["l_shoulder"], pose["l_hip"], pose["r_hip"]]


def torso_mask(pose: PoseSpec, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean H×W mask of the torso quad (shoulders → hips).

    Raises:
        ValidationError: If a torso joint is hidden or the quad covers fewer
            than four pixels
    """
    for name in ("r_shoulder", "l_shoulder", "l_hip", "r_hip"):
        if not pose.visible(name):
            raise ValidationError(f"Torso joint {name} is not visible")
    mask = np.asarray(_polygon_mask(torso_polygon(pose), size)) > 0
    if mask.sum() < 4:
        raise ValidationError(f"Degenerate torso quad covering {int(mask.sum())} pixels")
    return mask


def garment_polygon(size: int = IMAGE_SIZE) -> list[tuple[float, float]]:
    """Centered T-shirt silhouette."""
    s = size / 64.0
    outline = [
        (22, 14), (28, 12), (36, 12), (42, 14), (52, 22), (47, 28), (43, 25),
        (43, 54), (21, 54), (21, 25), (17, 28), (12, 22),
    ]  # fmt: skip
    return [(x * s, y * s) for x, y in outline]


def garment_mask(size: int = IMAGE_SIZE) -> np.ndarray:
    return np.asarray(_polygon_mask(garment_polygon(size), size)) > 0


def person_raster(person: PersonSpec, garment: GarmentSpec, pose: PoseSpec) -> Image.Image:
    """Draw a person wearing `garment` in `pose` as a 64×64 RGB image.

    Raises:
        ValidationError: If the pose fails validation
    """
    pose.validate()
    canvas = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    draw = ImageDraw.Draw(canvas)
    limb = max(2, round(3 * person.width_scale))

    def segment(a: str, b: str, color: Color, width: int) -> None:
        if pose.visible(a) and pose.visible(b):
            draw.line([pose[a], pose[b]], fill=color, width=width)

    for side in ("r", "l"):
        segment(f"{side}_hip", f"{side}_knee", person.trousers, limb + 1)
        segment(f"{side}_knee", f"{side}_ankle", person.trousers, limb + 1)
    for side in ("r", "l"):
        segment(f"{side}_shoulder", f"{side}_elbow", person.skin, limb)
        segment(f"{side}_elbow", f"{side}_wrist", person.skin, limb)

    if pose.visible("head"):
        hx, hy = pose["head"]
        if pose.neck is not None:
            draw.line([(hx, hy), pose.neck], fill=person.skin, width=limb)
        r = 5.0 * person.height_scale
        box = [hx - r, hy - r, hx + r, hy + r]
        draw.ellipse(box, fill=person.skin)
        draw.pieslice(box, 180, 360, fill=person.hair)

    fill = Image.fromarray(pattern_raster(garment))
    canvas.paste(fill, (0, 0), Image.fromarray(torso_mask(pose).astype(np.uint8) * 255))
    return canvas


def garment_raster(garment: GarmentSpec) -> Image.Image:
    """Flat garment on the background, as a 64×64 RGB image."""
    canvas = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    fill = Image.fromarray(pattern_raster(garment))
    canvas.paste(fill, (0, 0), _polygon_mask(garment_polygon(), IMAGE_SIZE))
    return canvas


def image_to_tensor(image: Image.Image | np.ndarray) -> Tensor:
    """8-bit H×W×3 image → 3×H×W tensor in [−1, 1]."""
    array = np.asarray(image, dtype=np.float64)
    return Tensor(array.transpose(2, 0, 1) / 127.5 - 1.0)


def tensor_to_image(image: Tensor | np.ndarray) -> Image.Image:
    """3×H×W values in [−1, 1] → 8-bit RGB image (values are clamped)."""
    data = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    pixels = np.clip(np.round((data.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255)
    return Image.fromarray(pixels.astype(np.uint8), mode="RGB")


def render_person(person: PersonSpec, garment: GarmentSpec, pose: PoseSpec) -> Tensor:
    """3×64×64 render in [−1, 1]; deterministic in its inputs."""
    return image_to_tensor(person_raster(person, garment, pose))


def render_garment_flat(garment: GarmentSpec) -> Tensor:
    """3×64×64 flat garment render in [−1, 1]."""
    return image_to_tensor(garment_raster(garment))


def gray_mask_torso(image: Tensor, poses: PoseSpec | Sequence[PoseSpec]) -> Tensor:
    """Replace the torso region with mid-gray, for one image or a batch."""
    data = image.numpy().copy()
    single = data.ndim == 3
    if single:
        data = data[None]
        poses = [poses]
    gray = np.asarray(MID_GRAY, dtype=data.dtype) / 127.5 - 1.0
    for item, pose in zip(data, poses):
        mask = torso_mask(pose, data.shape[-1])
        item[:, mask] = gray[:, None]
    return Tensor(data[0] if single else data)
