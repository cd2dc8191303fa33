"""Synthetic articulated-figure world.

Renders small colored stick-box people at 45-degree azimuth steps and
serves as the exact structure-projection oracle for view synthesis: the
projection of the rotated body is available for every instance at every
azimuth, by construction.

Everything here is a pure function of (spec, view, seed); no global state.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

IMAGE_H = 64
IMAGE_W = 32
STRUCTURE_CHANNELS = 3  # silhouette, upper-body mask, lower-body mask

AZIMUTHS = (0, 45, 90, 135, 180, 225, 270, 315)

# exact cos/sin for the 8 supported azimuths; np.sin(pi) != 0 exactly,
# and mirror identities below rely on exact zeros / sign flips
_R = float(np.sqrt(0.5))
_COS_SIN = {
    0: (1.0, 0.0), 45: (_R, _R), 90: (0.0, 1.0), 135: (-_R, _R),
    180: (-1.0, 0.0), 225: (-_R, -_R), 270: (0.0, -1.0), 315: (_R, -_R),
}

# vertical/horizontal pixel scale (body units -> pixels) and figure anchor
_YSCALE = 56.0
_XSCALE = 38.0
_X0 = IMAGE_W / 2.0
_Y_FEET = 60.0  # image row of the feet (body y=0)

_PALETTE_LEVELS = 8          # palette channel values 0.25 + 0.1 * digit
_PALETTE_BASE = 0.25
_PALETTE_STEP = 0.1
_DIGIT_SPACE = 8 ** 9        # nine base-8 digits = 3x3 RGB palette


class WorldError(ValueError):
    """Invalid argument to a renderer operation."""


@dataclass(frozen=True)
class PersonSpec:
    """Body geometry and coloring of one identity."""

    identity_id: int
    palette: np.ndarray        # (3, 3) rows = head/torso/legs RGB in [0,1]
    proportions: np.ndarray    # (3,) torso height, leg length, shoulder width
    marker_rgb: np.ndarray     # (3,) arm patch color
    marker_side: int           # 0 = +x arm, 1 = -x arm


@dataclass(frozen=True)
class ViewParams:
    azimuth_deg: int
    camera_style: int = 0
    noise_seed: int = 0


@dataclass
class RenderedSample:
    image: np.ndarray       # (3, H, W) float in [0,1]
    structure: np.ndarray   # (3, H, W) float in [0,1]
    view: ViewParams
    identity_id: int        # evaluation-only; never read by training code
    instance_index: int = -1


def _check_azimuth(azimuth_deg):
    if azimuth_deg % 45 != 0:
        raise WorldError(f"azimuth must be a multiple of 45 deg, got {azimuth_deg}")
    return int(azimuth_deg) % 360


def _mix_identity(identity_id, seed):
    """Seeded bijection on the 9-digit palette space.

    Built from odd-multiplier affine maps and xor-shift folds, all invertible
    mod 2**27, so distinct identities always map to distinct digit vectors.
    """
    m = _DIGIT_SPACE
    s = np.random.default_rng([seed, 0x5EED]).integers(0, 2**63, size=3)
    a1 = (int(s[0]) * 2 + 1) % m
    a2 = (int(s[1]) * 2 + 1) % m
    c = int(s[2]) % m
    v = (a1 * int(identity_id) + c) % m
    v ^= v >> 14
    v = (a2 * v) % m
    v ^= v >> 9
    return v % m


def person_spec(identity_id, seed):
    """Deterministic identity generator.

    Palette channels live on a 0.1-spaced grid, and the digit scramble is a
    bijection, so any two identities differ by at least 0.1 in some channel.
    """
    if identity_id < 0 or identity_id >= _DIGIT_SPACE:
        raise WorldError(f"identity_id out of range: {identity_id}")
    v = _mix_identity(identity_id, seed)
    digits = [(v // 8**k) % 8 for k in range(9)]
    palette = _PALETTE_BASE + _PALETTE_STEP * np.array(digits, dtype=np.float64).reshape(3, 3)
    rng = np.random.default_rng([seed, identity_id, 0xB0D4])
    proportions = np.array([
        0.26 + 0.16 * rng.uniform(),   # torso height
        0.32 + 0.16 * rng.uniform(),   # leg length
        0.26 + 0.12 * rng.uniform(),   # shoulder width
    ])
    marker_rgb = rng.uniform(0.3, 1.0, size=3)
    marker_side = int(rng.integers(0, 2))
    return PersonSpec(int(identity_id), palette, proportions, marker_rgb, marker_side)


def _body_parts(spec):
    """3D boxes (center, half-extent) in body units; y from feet (0) to head (1).

    The arms swing front/back on opposite sides and have unequal lengths, so
    the eight azimuth silhouettes are pairwise distinct.
    """
    torso_h, leg_len, shoulder = spec.proportions
    head_h = 1.0 - torso_h - leg_len
    sx = shoulder / 2.0
    arm_w = 0.14 * shoulder
    swing = 0.45 * shoulder
    arm_x = sx + 1.3 * arm_w
    arm_len = (1.0 * torso_h, 0.5 * torso_h)
    shoulder_y = leg_len + torso_h

    parts = []  # (name, center(x,y,z), half(x,y,z), color_row)
    for side, x0 in ((0, 0.20 * shoulder), (1, -0.20 * shoulder)):
        parts.append(("leg", (x0, leg_len / 2, 0.0),
                      (0.18 * shoulder, leg_len / 2, 0.15 * shoulder), 2))
    parts.append(("torso", (0.0, leg_len + torso_h / 2, 0.0),
                  (sx, torso_h / 2, 0.16 * shoulder), 1))
    # head sits forward of and beside the spine; a diagonal offset projects to a
    # distinct horizontal position at every one of the eight azimuths (absolute
    # body units so narrow-shouldered figures stay disambiguated)
    parts.append(("head", (0.045, shoulder_y + head_h / 2, 0.105),
                  (0.28 * shoulder, head_h / 2, 0.26 * shoulder), 0))
    for side, xsign, zsign in ((0, 1.0, 1.0), (1, -1.0, -1.0)):
        length = arm_len[side]
        parts.append((f"arm{side}", (xsign * arm_x, shoulder_y - length / 2, zsign * swing),
                      (arm_w, length / 2, arm_w), 1))
    return parts


def _marker_box(spec):
    """Sub-box of the marker-side arm (contained at every azimuth)."""
    for name, center, half, _ in _body_parts(spec):
        if name == f"arm{spec.marker_side}":
            cx, cy, cz = center
            hx, hy, hz = half
            return (cx, cy - 0.2 * hy, cz), (0.9 * hx, 0.3 * hy, 0.95 * hz)
    raise AssertionError("marker arm missing")


def _project_box(center, half, cos_t, sin_t):
    """Orthographic projection after rotating the body about the y axis.

    Returns pixel-space (u0, u1, v0, v1) and the depth of the box center
    (larger = nearer to the camera).
    """
    cx, cy, cz = center
    hx, hy, hz = half
    u = cx * cos_t + cz * sin_t
    uh = hx * abs(cos_t) + hz * abs(sin_t)
    depth = -cx * sin_t + cz * cos_t
    u0 = _X0 + _XSCALE * (u - uh)
    u1 = _X0 + _XSCALE * (u + uh)
    v0 = _Y_FEET - _YSCALE * (cy + hy)
    v1 = _Y_FEET - _YSCALE * (cy - hy)
    return u0, u1, v0, v1, depth


def _coverage(u0, u1, v0, v1):
    """Anti-aliased box coverage per pixel, in [0,1]."""
    cols = np.arange(IMAGE_W, dtype=np.float64)
    rows = np.arange(IMAGE_H, dtype=np.float64)
    cov_x = np.clip(np.minimum(u1, cols + 1) - np.maximum(u0, cols), 0.0, 1.0)
    cov_y = np.clip(np.minimum(v1, rows + 1) - np.maximum(v0, rows), 0.0, 1.0)
    return cov_y[:, None] * cov_x[None, :]


def _marker_visible(azimuth_deg):
    # back half of the turn; includes 180 so front (0) and back (180) views
    # of the same person are not pure mirror images of each other
    return 180 <= azimuth_deg % 360 < 360


def project_structure(spec, azimuth_deg):
    """Soft masks (silhouette / upper body / legs) of the rotated figure."""
    az = _check_azimuth(azimuth_deg)
    cos_t, sin_t = _COS_SIN[az]
    sil = np.zeros((IMAGE_H, IMAGE_W))
    upper = np.zeros((IMAGE_H, IMAGE_W))
    lower = np.zeros((IMAGE_H, IMAGE_W))
    for name, center, half, _ in _body_parts(spec):
        u0, u1, v0, v1, _ = _project_box(center, half, cos_t, sin_t)
        cov = _coverage(u0, u1, v0, v1)
        sil = 1.0 - (1.0 - sil) * (1.0 - cov)
        if name == "leg":
            lower = 1.0 - (1.0 - lower) * (1.0 - cov)
        else:
            upper = 1.0 - (1.0 - upper) * (1.0 - cov)
    return np.stack([sil, upper, lower])


def camera_style_transform(camera_style):
    """Per-channel (gain, bias) for a camera style; style 0 is the identity.

    The table is global and fixed (seeded by a constant), so a style index
    means the same transform in every dataset.
    """
    style = int(camera_style)
    if style < 0:
        raise WorldError(f"camera_style must be nonnegative, got {style}")
    if style == 0:
        return np.ones(3), np.zeros(3)
    rng = np.random.default_rng([0xCA11, style])
    gain = rng.uniform(0.70, 1.30, size=3)
    bias = rng.uniform(-0.10, 0.10, size=3)
    return gain, bias


def render_person(spec, view):
    """Render one figure; camera style and sensor noise touch only the image."""
    az = _check_azimuth(view.azimuth_deg)
    cos_t, sin_t = _COS_SIN[az]
    structure = project_structure(spec, az)

    img = np.zeros((IMAGE_H, IMAGE_W, 3))
    parts = _body_parts(spec)
    order = sorted(range(len(parts)), key=lambda i: _project_box(*parts[i][1:3], cos_t, sin_t)[4])
    for i in order:  # far-to-near alpha compositing
        name, center, half, color_row = parts[i]
        u0, u1, v0, v1, _ = _project_box(center, half, cos_t, sin_t)
        cov = _coverage(u0, u1, v0, v1)[:, :, None]
        img = img * (1.0 - cov) + spec.palette[color_row] * cov
    if _marker_visible(az):
        center, half = _marker_box(spec)
        u0, u1, v0, v1, _ = _project_box(center, half, cos_t, sin_t)
        cov = _coverage(u0, u1, v0, v1)[:, :, None]
        img = img * (1.0 - cov) + spec.marker_rgb * cov

    gain, bias = camera_style_transform(view.camera_style)
    img = img * gain + bias
    noise = np.random.default_rng([0x0153, view.noise_seed]).normal(0.0, 0.008, img.shape)
    img = np.clip(img + noise, 0.0, 1.0)
    return RenderedSample(
        image=np.ascontiguousarray(img.transpose(2, 0, 1)),
        structure=structure,
        view=view,
        identity_id=spec.identity_id,
    )


@dataclass
class WorldConfig:
    seed: int = 1
    n_identities: int = 16
    views_per_identity: int = 8
    camera_styles: int = 2

    def __post_init__(self):
        if not (1 <= self.views_per_identity <= len(AZIMUTHS)):
            raise WorldError("views_per_identity must be in [1, 8]")
        if self.n_identities < 1 or self.camera_styles < 1:
            raise WorldError("n_identities and camera_styles must be positive")


@dataclass
class DatasetManifest:
    header: dict     # seed + counts + image geometry
    records: list    # per-sample dicts, one per instance_index

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def load(path):
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        return DatasetManifest(header=lines[0], records=lines[1:])


def generate_dataset(config, out_dir):
    """Render every (identity, azimuth, camera style) combination to disk.

    Layout: ``<out_dir>/images/*.png`` plus ``<out_dir>/manifest.jsonl``.
    """
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    azimuths = AZIMUTHS[: config.views_per_identity]
    records = []
    instance = 0
    for identity in range(config.n_identities):
        spec = person_spec(identity, config.seed)
        for az in azimuths:
            for style in range(config.camera_styles):
                view = ViewParams(az, style, noise_seed=hash((config.seed, instance)) % 2**31)
                sample = render_person(spec, view)
                rel = f"images/{instance:05d}.png"
                _save_png(sample.image, os.path.join(out_dir, rel))
                records.append({
                    "instance_index": instance,
                    "path": rel,
                    "identity_id": identity,
                    "azimuth_deg": az,
                    "camera_style": style,
                    "noise_seed": view.noise_seed,
                })
                instance += 1
    header = {
        "seed": config.seed,
        "n_identities": config.n_identities,
        "views_per_identity": config.views_per_identity,
        "camera_styles": config.camera_styles,
        "height": IMAGE_H,
        "width": IMAGE_W,
    }
    manifest = DatasetManifest(header=header, records=records)
    manifest.save(os.path.join(out_dir, "manifest.jsonl"))
    return manifest


def _save_png(image_chw, path):
    arr = np.round(np.clip(image_chw, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _load_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


class RenderedDataset:
    """Disk-backed dataset plus the structure oracle for its instances.

    The oracle role mirrors per-image pose recovery: rotated structure maps
    are derived from each instance's own body geometry, never from labels of
    other instances. ``identity_id`` is surfaced only through
    :meth:`eval_labels` for evaluation.
    """

    def __init__(self, root):
        self.root = root
        manifest = DatasetManifest.load(os.path.join(root, "manifest.jsonl"))
        self.header = manifest.header
        self.records = manifest.records
        self._images = None
        self._structures = {}

    def __len__(self):
        return len(self.records)

    @property
    def images(self):
        if self._images is None:
            self._images = np.stack([
                _load_png(os.path.join(self.root, rec["path"])) for rec in self.records
            ])
        return self._images

    def sample(self, instance_index):
        rec = self.records[instance_index]
        view = ViewParams(rec["azimuth_deg"], rec["camera_style"], rec["noise_seed"])
        return RenderedSample(
            image=self.images[instance_index],
            structure=self.structure_at(instance_index, rec["azimuth_deg"]),
            view=view,
            identity_id=rec["identity_id"],
            instance_index=instance_index,
        )

    def _spec(self, instance_index):
        rec = self.records[instance_index]
        return person_spec(rec["identity_id"], self.header["seed"])

    def structure_at(self, instance_index, azimuth_deg):
        key = (instance_index, azimuth_deg % 360)
        if key not in self._structures:
            self._structures[key] = project_structure(self._spec(instance_index), azimuth_deg)
        return self._structures[key]

    def azimuth_of(self, instance_index):
        return self.records[instance_index]["azimuth_deg"]

    def eval_labels(self):
        """(identity_ids, azimuths, camera_styles) arrays, evaluation only."""
        ids = np.array([r["identity_id"] for r in self.records])
        azs = np.array([r["azimuth_deg"] for r in self.records])
        styles = np.array([r["camera_style"] for r in self.records])
        return ids, azs, styles
