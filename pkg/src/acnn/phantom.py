"""Synthetic cardiac phantoms plus the degradation / augmentation pipeline.

Phantoms are ellipsoidal shells on a (z, y, x) grid: blood pool (class 1)
inside a myocardial shell (class 2) over background (class 0), optionally
truncated flat near the base to mimic short-axis stack coverage. Intensity
is a per-tissue mean plus Gaussian texture. Low-resolution observations come
from a through-plane Gaussian blur followed by slice decimation, then
per-slice in-plane motion corruption.

All randomness derives from (master seed, purpose string), so parallel and
serial generation produce identical datasets.
"""

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .seeding import rng_for
from .tenio import read_ten, write_ten

BACKGROUND, BLOOD_POOL, MYOCARDIUM = 0, 1, 2
CLASS_COUNT = 3


@dataclass
class Volume:
    data: np.ndarray  # float32, (z, y, x)
    spacing: tuple  # (sz, sy, sx) in mm

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")


@dataclass
class LabelMap:
    data: np.ndarray  # uint8, (z, y, x); 0 background, 1 blood pool, 2 myocardium
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)


@dataclass
class PhantomParams:
    center: tuple  # (z, y, x) voxels
    axes: tuple  # outer shell semi-axes (az, ay, ax) voxels
    wall_thickness: float  # voxels, >= 1
    rotation: float = 0.0  # in-plane, radians
    intensities: tuple = (0.2, 0.9, 0.5)  # background, blood pool, myocardium
    texture_std: float = 0.03
    base_truncation: float | None = 0.8  # cut plane at center_z + frac * az
    seed: int = 0


@dataclass
class PhantomSample:
    sample_id: str
    split: str
    regime: str
    params: PhantomParams
    hr: Volume
    labels: LabelMap
    lr: Volume
    shifts: np.ndarray  # per-LR-slice (dy, dx) motion shifts
    es_hr: Volume | None = None
    es_labels: LabelMap | None = None
    es_lr: Volume | None = None


def _ellipsoid_mask(shape, center, axes, rotation):
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    c, s = np.cos(rotation), np.sin(rotation)
    ry = c * dy - s * dx
    rx = s * dy + c * dx
    return (dz / axes[0]) ** 2 + (ry / axes[1]) ** 2 + (rx / axes[2]) ** 2 <= 1.0


def _face_neighbour_any(mask, other):
    """True where any face neighbour of a `mask` voxel lies in `other`."""
    hit = np.zeros_like(mask)
    for axis in range(mask.ndim):
        for step in (1, -1):
            shifted = np.roll(other, step, axis=axis)
            edge = [slice(None)] * mask.ndim
            edge[axis] = 0 if step == 1 else -1
            shifted[tuple(edge)] = False
            hit |= shifted
    return hit & mask


def generate_phantom(params, shape_zyx, spacing):
    """Rasterise one phantom: returns (intensity Volume, LabelMap), both HR.

    The blood pool never touches background through a voxel face; the layer
    of pool voxels exposed by the base truncation is converted to myocardium.
    """
    shape = tuple(int(n) for n in shape_zyx)
    az, ay, ax = params.axes
    t = params.wall_thickness
    if t < 1.0:
        raise ValueError(f"wall thickness must be >= 1 voxel, got {t}")
    for c, a, n in zip(params.center, params.axes, shape):
        if c - a < 0.5 or c + a > n - 1.5:
            raise ValueError(
                f"shell exceeds grid: center {params.center}, axes {params.axes}, "
                f"grid {shape}"
            )
    # wall thickness is in-plane; the through-plane cap stays ~1 voxel thick
    inner_axes = (max(az - 1.0, 1.0), max(ay - t, 1.0), max(ax - t, 1.0))
    outer = _ellipsoid_mask(shape, params.center, params.axes, params.rotation)
    inner = _ellipsoid_mask(shape, params.center, inner_axes, params.rotation)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[outer] = MYOCARDIUM
    labels[inner] = BLOOD_POOL
    if params.base_truncation is not None:
        zcut = params.center[0] + params.base_truncation * az
        zgrid = np.arange(shape[0]).reshape(-1, 1, 1)
        labels[np.broadcast_to(zgrid > zcut, shape)] = BACKGROUND
    exposed = _face_neighbour_any(labels == BLOOD_POOL, labels == BACKGROUND)
    labels[exposed] = MYOCARDIUM

    rng = rng_for(params.seed, "phantom/texture")
    levels = np.asarray(params.intensities, dtype=np.float32)
    intensity = levels[labels] + rng.normal(0.0, params.texture_std, shape).astype(np.float32)
    return Volume(intensity, spacing), LabelMap(labels, spacing)


# ---------------------------------------------------------------------------
# degradation


def gaussian_kernel_1d(sigma_vox):
    radius = int(np.ceil(3.0 * sigma_vox))
    if radius < 1 or sigma_vox < 1e-8:
        return np.array([1.0])
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma_vox) ** 2)
    return taps / taps.sum()


def acquisition_model(hr, decimation, sigma_mm=4.0):
    """Through-plane Gaussian blur then keep every `decimation`-th slice.

    sigma is given in mm and converted to voxels via the z spacing; the
    output z spacing is multiplied by the decimation factor.
    """
    if decimation < 1:
        raise ValueError(f"decimation must be >= 1, got {decimation}")
    depth = hr.data.shape[0]
    if depth % decimation:
        raise ValueError(f"depth {depth} not divisible by decimation {decimation}")
    sigma_vox = sigma_mm / hr.spacing[0]
    taps = gaussian_kernel_1d(sigma_vox)
    if len(taps) > 1:
        blurred = ndimage.correlate1d(
            hr.data.astype(np.float64), taps, axis=0, mode="nearest"
        ).astype(np.float32)
    else:
        blurred = hr.data
    lr = blurred[::decimation]
    spacing = (hr.spacing[0] * decimation, hr.spacing[1], hr.spacing[2])
    return Volume(lr.copy(), spacing)


def corrupt_motion(lr, max_shift_vox, seed):
    """Independent in-plane translation per slice (bilinear, zero fill).

    Returns the corrupted volume and the (depth, 2) array of (dy, dx) shifts.
    """
    if max_shift_vox < 0:
        raise ValueError(f"max_shift_vox must be >= 0, got {max_shift_vox}")
    rng = rng_for(seed, "motion")
    depth = lr.data.shape[0]
    shifts = rng.uniform(-max_shift_vox, max_shift_vox, size=(depth, 2))
    if max_shift_vox == 0:
        return Volume(lr.data.copy(), lr.spacing), np.zeros((depth, 2))
    out = np.empty_like(lr.data)
    for k in range(depth):
        out[k] = ndimage.shift(
            lr.data[k], shifts[k], order=1, mode="constant", cval=0.0
        )
    return Volume(out, lr.spacing), shifts


def upsample_linear_z(lr, factor):
    """Linear through-plane interpolation back to factor * depth slices.

    The interpolation inverts the decimation grid (LR slice j sits at HR
    index j * factor); positions past the last LR slice clamp to it.
    """
    depth = lr.data.shape[0]
    pos = np.arange(depth * factor, dtype=np.float64) / factor
    lo = np.minimum(np.floor(pos).astype(int), depth - 1)
    hi = np.minimum(lo + 1, depth - 1)
    frac = (pos - lo).astype(np.float32).reshape(-1, 1, 1)
    out = (1.0 - frac) * lr.data[lo] + frac * lr.data[hi]
    spacing = (lr.spacing[0] / factor, lr.spacing[1], lr.spacing[2])
    return Volume(out.astype(np.float32), spacing)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AffineRanges:
    rotation_deg: float = 15.0
    scale: tuple = (0.9, 1.1)
    translate_frac: float = 0.1


def augment_affine(x, y, ranges, seed):
    """One random in-plane rotation/scale/translation applied to both inputs.

    Intensity resamples bilinearly, labels nearest-neighbour. Zero ranges are
    a bitwise no-op.
    """
    rng = rng_for(seed, "affine")
    angle = np.deg2rad(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
    scale = rng.uniform(*ranges.scale)
    limit_y = ranges.translate_frac * x.data.shape[1]
    limit_x = ranges.translate_frac * x.data.shape[2]
    ty = rng.uniform(-limit_y, limit_y)
    tx = rng.uniform(-limit_x, limit_x)
    if angle == 0.0 and scale == 1.0 and ty == 0.0 and tx == 0.0:
        return Volume(x.data.copy(), x.spacing), LabelMap(y.data.copy(), y.spacing)

    c, s = np.cos(angle), np.sin(angle)
    fwd = scale * np.array([[c, -s], [s, c]])
    inv = np.linalg.inv(fwd)
    center = np.array([(x.data.shape[1] - 1) / 2.0, (x.data.shape[2] - 1) / 2.0])
    matrix = np.eye(3)
    matrix[1:, 1:] = inv
    offset = np.zeros(3)
    offset[1:] = center - inv @ (center + np.array([ty, tx]))
    vol = ndimage.affine_transform(
        x.data, matrix, offset=offset, order=1, mode="constant", cval=0.0
    ).astype(np.float32)
    lab = ndimage.affine_transform(
        y.data, matrix, offset=offset, order=0, mode="constant", cval=0
    ).astype(np.uint8)
    return Volume(vol, x.spacing), LabelMap(lab, y.spacing)


def augment_noise(x, std_fraction, seed):
    """Additive Gaussian noise scaled by the volume's intensity range."""
    if std_fraction < 0:
        raise ValueError(f"std_fraction must be >= 0, got {std_fraction}")
    if std_fraction == 0:
        return Volume(x.data.copy(), x.spacing)
    rng = rng_for(seed, "noise")
    span = float(x.data.max() - x.data.min())
    noisy = x.data + rng.normal(0.0, std_fraction * span, x.data.shape).astype(np.float32)
    return Volume(noisy, x.spacing)


def swap_labels(labels, prob, rng):
    """Each voxel independently swaps to a uniformly random different class
    with probability `prob`."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"swap probability must be in [0, 1], got {prob}")
    if prob == 0.0:
        return labels.copy()
    mask = rng.random(labels.shape) < prob
    offsets = rng.integers(1, CLASS_COUNT, size=labels.shape)
    swapped = (labels.astype(np.int64) + offsets) % CLASS_COUNT
    return np.where(mask, swapped, labels).astype(labels.dtype)


def augment_label_swap(y_onehot, prob, seed):
    """Label-swap corruption on a one-hot tensor (channel axis first)."""
    from . import engine as E
    from .models import labels_from_logits, one_hot

    rng = rng_for(seed, "label_swap")
    arr = y_onehot.data if isinstance(y_onehot, E.Tensor) else np.asarray(y_onehot)
    labels = labels_from_logits(arr)
    return one_hot(swap_labels(labels, prob, rng), arr.shape[0])


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class DatasetSpec:
    n_train: int = 16
    n_val: int = 0
    n_test: int = 0
    grid_xyz: tuple = (24, 24, 12)
    spacing: tuple = (2.0, 1.25, 1.25)  # HR (sz, sy, sx) mm
    decimation: int = 3
    sigma_mm: float = 4.0
    motion_max_shift: float = 3.0
    pathology: bool = False  # alternate thin/thick wall regimes
    phases: int = 1  # 2 adds an end-systolic phantom per sample
    texture_std: float = 0.03
    extra: dict = field(default_factory=dict)


THICKNESS_RANGES = {
    "normal": (2.0, 3.0),
    "thin": (1.2, 1.8),
    "thick": (3.5, 4.5),
}


def sample_params(rng, shape_zyx, regime="normal", texture_std=0.03, seed=0):
    """Draw phantom parameters that keep the shell inside the grid."""
    nz, ny, nx = shape_zyx
    t_lo, t_hi = THICKNESS_RANGES[regime]
    thickness = rng.uniform(t_lo, t_hi)
    axes = (
        rng.uniform(0.30, 0.33) * nz,
        rng.uniform(0.31, 0.345) * ny,
        rng.uniform(0.27, 0.305) * nx,
    )
    center = (
        nz / 2.0 + rng.uniform(-0.15, 0.15),
        ny / 2.0 + rng.uniform(-0.5, 0.5),
        nx / 2.0 + rng.uniform(-0.5, 0.5),
    )
    return PhantomParams(
        center=center,
        axes=axes,
        wall_thickness=thickness,
        rotation=rng.uniform(-np.pi / 6, np.pi / 6),
        texture_std=texture_std,
        seed=seed,
    )


def _systolic(params):
    """End-systole variant: same outer shell, thicker wall, smaller pool."""
    return replace(params, wall_thickness=params.wall_thickness * 1.6,
                   seed=params.seed + 1)


def _generate_sample(spec, master_seed, index, split, regime):
    shape = tuple(reversed(spec.grid_xyz))
    rng = rng_for(master_seed, f"sample/{index}")
    params = sample_params(
        rng, shape, regime=regime, texture_std=spec.texture_std,
        seed=int(rng.integers(0, 2**62)),
    )
    hr, labels = generate_phantom(params, shape, spec.spacing)
    lr_clean = acquisition_model(hr, spec.decimation, spec.sigma_mm)
    lr, shifts = corrupt_motion(
        lr_clean, spec.motion_max_shift, int(rng.integers(0, 2**62))
    )
    sample = PhantomSample(
        sample_id=f"{index:03d}", split=split, regime=regime, params=params,
        hr=hr, labels=labels, lr=lr, shifts=shifts,
    )
    if spec.phases == 2:
        es_params = _systolic(params)
        sample.es_hr, sample.es_labels = generate_phantom(es_params, shape, spec.spacing)
        es_clean = acquisition_model(sample.es_hr, spec.decimation, spec.sigma_mm)
        sample.es_lr, _ = corrupt_motion(
            es_clean, spec.motion_max_shift, int(rng.integers(0, 2**62))
        )
    return sample


def make_dataset(spec, seed, out_dir):
    """Generate and persist (HR intensity, HR labels, LR corrupted) triplets.

    Returns the list of generated samples. The manifest records ids, roles,
    file names, spacings and generation parameters.
    """
    total = spec.n_train + spec.n_val + spec.n_test
    if total < 1:
        raise ValueError("dataset needs at least one sample")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples = []
    lines = [
        "# phantom dataset manifest",
        f"seed = {seed}",
        f"grid_xyz = {','.join(str(g) for g in spec.grid_xyz)}",
        f"spacing_hr = {','.join(repr(s) for s in spec.spacing)}",
        f"decimation = {spec.decimation}",
        f"sigma_mm = {spec.sigma_mm!r}",
        f"motion_max_shift = {spec.motion_max_shift!r}",
        f"pathology = {int(spec.pathology)}",
        f"phases = {spec.phases}",
        f"count = {total}",
        f"splits = {spec.n_train},{spec.n_val},{spec.n_test}",
    ]
    for index in range(total):
        if index < spec.n_train:
            split = "train"
        elif index < spec.n_train + spec.n_val:
            split = "val"
        else:
            split = "test"
        if spec.pathology:
            regime = "thin" if index % 2 == 0 else "thick"
        else:
            regime = "normal"
        sample = _generate_sample(spec, seed, index, split, regime)
        stem = f"sample_{sample.sample_id}"
        write_ten(out_dir / f"{stem}_hr.ten", sample.hr.data)
        write_ten(out_dir / f"{stem}_labels.ten", sample.labels.data.astype(np.float32))
        write_ten(out_dir / f"{stem}_lr.ten", sample.lr.data)
        files = [f"{stem}_hr.ten", f"{stem}_labels.ten", f"{stem}_lr.ten"]
        if spec.phases == 2:
            write_ten(out_dir / f"{stem}_es_hr.ten", sample.es_hr.data)
            write_ten(out_dir / f"{stem}_es_labels.ten",
                      sample.es_labels.data.astype(np.float32))
            write_ten(out_dir / f"{stem}_es_lr.ten", sample.es_lr.data)
            files += [f"{stem}_es_hr.ten", f"{stem}_es_labels.ten", f"{stem}_es_lr.ten"]
        lines.append(
            f"sample = {sample.sample_id} split={split} regime={regime} "
            f"thickness={sample.params.wall_thickness!r} files={','.join(files)}"
        )
        samples.append(sample)
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    return samples


class PhantomDataset:
    def __init__(self, samples, spec_fields):
        self.samples = samples
        self.fields = spec_fields

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    @property
    def grid_xyz(self):
        return self.fields["grid_xyz"]

    @property
    def decimation(self):
        return int(self.fields["decimation"])


def load_dataset(directory):
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    fields = {}
    sample_lines = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key == "sample":
            sample_lines.append(raw)
        else:
            fields[key] = raw
    fields["grid_xyz"] = tuple(int(v) for v in fields["grid_xyz"].split(","))
    spacing_hr = tuple(float(v) for v in fields["spacing_hr"].split(","))
    decim = int(fields["decimation"])
    spacing_lr = (spacing_hr[0] * decim, spacing_hr[1], spacing_hr[2])

    samples = []
    for raw in sample_lines:
        parts = raw.split()
        sid = parts[0]
        attrs = dict(p.split("=", 1) for p in parts[1:])
        files = attrs["files"].split(",")
        stem = f"sample_{sid}"
        sample = PhantomSample(
            sample_id=sid,
            split=attrs["split"],
            regime=attrs["regime"],
            params=None,
            hr=Volume(read_ten(directory / f"{stem}_hr.ten"), spacing_hr),
            labels=LabelMap(
                read_ten(directory / f"{stem}_labels.ten").astype(np.uint8), spacing_hr
            ),
            lr=Volume(read_ten(directory / f"{stem}_lr.ten"), spacing_lr),
            shifts=None,
        )
        if f"{stem}_es_hr.ten" in files:
            sample.es_hr = Volume(read_ten(directory / f"{stem}_es_hr.ten"), spacing_hr)
            sample.es_labels = LabelMap(
                read_ten(directory / f"{stem}_es_labels.ten").astype(np.uint8), spacing_hr
            )
            sample.es_lr = Volume(read_ten(directory / f"{stem}_es_lr.ten"), spacing_lr)
        samples.append(sample)
    return PhantomDataset(samples, fields)


def dataset_hash(directory):
    """SHA-256 over the manifest and every .ten payload, in sorted file order."""
    directory = Path(directory)
    h = hashlib.sha256()
    for path in sorted(directory.iterdir()):
        if path.suffix in (".ten", ".txt"):
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()
