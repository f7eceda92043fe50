"""
Patch extraction, manifests, examination-level splits, bags and the
synthetic ellipse-scene generator.

Patches are stored as PNG files under ``<root>/<case_id>/<x>_<y>.png`` next to
a manifest CSV with one row per examination.
"""

import csv
import dataclasses
import json
import logging
import math
import os

import numpy as np
from PIL import Image

from asr.errors import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

SUBSETS = ("train", "val", "test")
MANIFEST_COLUMNS = ("case_id", "class", "sex", "age", "subset", "image_path", "patches")
GROUND_TRUTH_FILE = "ground_truth.jsonl"


@dataclasses.dataclass
class ExaminationRecord:
    """One manifest row: an examination (case) and where its image or patches live."""

    case_id: str
    class_label: str
    sex: str = ""
    age_band: str = ""
    subset: str = ""
    image_path: str = ""
    patch_count: int = 0


@dataclasses.dataclass
class Patch:
    """A 3xSxS patch of one examination.

    ``pixels`` holds the decoded float array when the patch lives in memory;
    otherwise ``path`` points at the PNG to decode on demand.
    """

    case_id: str
    origin: tuple
    label: str = ""
    path: str = None
    pixels: np.ndarray = None

    @property
    def key(self):
        return f"{self.case_id}/{self.origin[0]}_{self.origin[1]}"

    def load(self):
        if self.pixels is not None:
            return self.pixels
        return read_png(self.path)


@dataclasses.dataclass
class Bag:
    bag_id: str
    case_id: str
    label: str
    patches: tuple


# Manifest handling.


def read_manifest(path):
    """Read a manifest CSV (UTF-8, header row) into ExaminationRecords."""
    if not os.path.isfile(path):
        raise ConfigurationError(f"manifest {path} not found")

    records = []
    with open(path, newline="", encoding="utf-8") as csvfile:
        reader = csv.DictReader(csvfile)

        missing = {"case_id", "class"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigurationError(f"manifest {path} is missing column(s) {sorted(missing)}")

        for row in reader:
            subset = (row.get("subset") or "").strip()
            if subset and subset not in SUBSETS:
                raise ConfigurationError(f"manifest {path}: case {row['case_id']} has unknown subset {subset!r}")

            records.append(
                ExaminationRecord(
                    case_id=row["case_id"].strip(),
                    class_label=row["class"].strip(),
                    sex=(row.get("sex") or "").strip(),
                    age_band=(row.get("age") or "").strip(),
                    subset=subset,
                    image_path=(row.get("image_path") or "").strip(),
                    patch_count=int(row.get("patches") or 0),
                )
            )

    ids = [r.case_id for r in records]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"manifest {path} lists a case_id more than once")

    return records


def write_manifest(records, path):
    with open(path, "w", newline="", encoding="utf-8") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.case_id, r.class_label, r.sex, r.age_band, r.subset, r.image_path, r.patch_count])
    return path


# Image I/O.


def read_png(path):
    """Decode an image file into a float32 [3,H,W] array in [0,1]."""
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(array.transpose(2, 0, 1))


def write_png(pixels, path):
    """Encode a [3,H,W] (or [H,W,3]) float array in [0,1] as an 8-bit PNG."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[0] == 3 and pixels.shape[-1] != 3:
        pixels = pixels.transpose(1, 2, 0)
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
    return path


def read_image(path):
    """Decode a large raster export as a float32 [H,W,3] array in [0,1]."""
    # Exported slides easily exceed PIL's decompression-bomb guard.
    Image.MAX_IMAGE_PIXELS = None
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


class ArrayImages:
    """Images held in memory as one [N,3,S,S] array."""

    def __init__(self, array):
        array = np.asarray(array)
        if array.ndim != 4 or array.shape[1] != 3:
            raise DimensionError(f"expected an image array of shape [N,3,S,S], got {array.shape}")
        self.array = array

    def __len__(self):
        return self.array.shape[0]

    def load(self, indices):
        return self.array[np.asarray(indices, dtype=int)]


class PatchImages:
    """Patches decoded on demand; decoded pixels are cached as 8-bit arrays."""

    def __init__(self, patches, cache=True):
        self.patches = list(patches)
        self.cache = {} if cache else None

    def __len__(self):
        return len(self.patches)

    def _load_one(self, index):
        if self.cache is None:
            return self.patches[index].load()
        if index not in self.cache:
            pixels = self.patches[index].load()
            self.cache[index] = np.round(pixels * 255.0).astype(np.uint8)
        return self.cache[index].astype(np.float32) / 255.0

    def load(self, indices):
        return np.stack([self._load_one(int(i)) for i in indices])


def as_image_set(images):
    if isinstance(images, (ArrayImages, PatchImages)):
        return images
    if isinstance(images, (list, tuple)) and images and isinstance(images[0], Patch):
        return PatchImages(images)
    return ArrayImages(images)


# Patch extraction.


def _as_hwc(window):
    window = np.asarray(window)
    if window.ndim != 3:
        raise DimensionError(f"expected an RGB raster, got shape {window.shape}")
    if window.shape[-1] != 3 and window.shape[0] == 3:
        window = window.transpose(1, 2, 0)
    if window.dtype == np.uint8:
        window = window.astype(np.float32) / 255.0
    return window


def tissue_occupancy(window, whiteness=0.88):
    """Fraction of pixels that are tissue, i.e. whose darkest channel is below ``whiteness``."""
    window = _as_hwc(window)
    return float(np.mean(window.min(axis=-1) < whiteness))


def downscale(window, factor):
    """Box-filter an [H,W,3] raster by an integer factor."""
    h, w, c = window.shape
    return window.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def extract_patches(image, window=1024, stride=635, occupancy_min=0.8, patch_side=256, whiteness=0.88, case_id=""):
    """Scan ``image`` systematically and keep the windows that are mostly tissue.

    Parameters
    ----------
    image : numpy.ndarray
        [H,W,3] raster (float in [0,1] or uint8).
    window, stride : int
        Window side and scan step in source pixels.
    occupancy_min : float
        Minimal tissue fraction of a kept window.
    patch_side : int
        Side of the downscaled patch; must divide ``window``.

    Returns
    -------
    list of Patch
        Kept windows in row-major scan order, area-downsampled to ``patch_side``.
    """
    if window % patch_side:
        raise ConfigurationError(f"patch side {patch_side} does not divide window {window}")

    image = _as_hwc(image)
    height, width = image.shape[:2]

    if height < window or width < window:
        logger.warning(f"extract_patches: {case_id or 'image'} ({width}x{height}) is smaller than a {window}px window")
        return []

    factor = window // patch_side
    patches = []
    for y in range(0, height - window + 1, stride):
        for x in range(0, width - window + 1, stride):
            region = image[y : y + window, x : x + window]
            if tissue_occupancy(region, whiteness) < occupancy_min:
                continue
            pixels = downscale(region, factor).transpose(2, 0, 1).astype(np.float32)
            patches.append(Patch(case_id=case_id, origin=(x, y), pixels=np.clip(pixels, 0.0, 1.0)))

    logger.debug(f"extract_patches: {case_id}: kept {len(patches)} windows")

    return patches


def save_patches(patches, root):
    """Write patches as ``<root>/<case_id>/<x>_<y>.png`` and point each Patch at its file."""
    for patch in patches:
        directory = os.path.join(root, patch.case_id)
        os.makedirs(directory, exist_ok=True)
        patch.path = write_png(patch.pixels, os.path.join(directory, f"{patch.origin[0]}_{patch.origin[1]}.png"))
    return patches


def load_patches(root, records):
    """Patch references (decoded lazily) of every examination, keyed by case_id."""
    by_case = {}
    for record in records:
        directory = os.path.join(root, record.case_id)
        if not os.path.isdir(directory):
            raise ConfigurationError(f"no patch directory for case {record.case_id} under {root}")

        patches = []
        for name in sorted(os.listdir(directory)):
            stem, ext = os.path.splitext(name)
            if ext.lower() != ".png":
                continue
            x, _, y = stem.partition("_")
            patches.append(
                Patch(
                    case_id=record.case_id,
                    origin=(int(x), int(y)),
                    label=record.class_label,
                    path=os.path.join(directory, name),
                )
            )

        patches.sort(key=lambda p: (p.origin[1], p.origin[0]))
        by_case[record.case_id] = patches

    return by_case


def ingest(manifest_path, out_dir, data_config, seed=0):
    """Extract patches from the raster exports listed in a manifest.

    Image paths are resolved relative to the manifest.  Cases without a subset
    are assigned by ``split_dataset``.  The output manifest records the number
    of patches kept per examination.
    """
    records = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(out_dir, exist_ok=True)

    for record in records:
        source = record.image_path if os.path.isabs(record.image_path) else os.path.join(base, record.image_path)
        if not os.path.isfile(source):
            raise ConfigurationError(f"image {source} of case {record.case_id} not found")

        patches = extract_patches(
            read_image(source),
            window=data_config.window,
            stride=data_config.stride,
            occupancy_min=data_config.occupancy_min,
            patch_side=data_config.patch_side,
            whiteness=data_config.whiteness,
            case_id=record.case_id,
        )
        save_patches(patches, out_dir)
        record.patch_count = len(patches)
        record.image_path = os.path.abspath(source)

        logger.info(f"ingest: {record.case_id} ({record.class_label}): {len(patches)} patches")

    if any(not r.subset for r in records):
        split_dataset(records, data_config.split_ratios, seed)

    write_manifest(records, os.path.join(out_dir, data_config.manifest))

    return records


# Splits and bags.


def _largest_remainder(total, ratios):
    weights = np.asarray(ratios, dtype=float)
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    # Stable sort keeps the earlier subset first on equal remainders.
    for index in np.argsort(-remainder, kind="stable")[: total - counts.sum()]:
        counts[index] += 1
    return counts


def split_dataset(records, ratios=(15, 6, 9), seed=0):
    """Assign every examination to train/val/test, stratified by class.

    Each class is split by largest-remainder apportionment of ``ratios``;
    cases are shuffled per class with a seeded generator first.

    Returns
    -------
    dict
        case_id -> subset; the records' ``subset`` fields are updated too.
    """
    if len(ratios) != len(SUBSETS) or min(ratios) <= 0:
        raise ConfigurationError(f"split ratios must be three positive numbers, got {tuple(ratios)}")

    rng = np.random.default_rng(seed)
    by_class = {}
    for record in records:
        by_class.setdefault(record.class_label, []).append(record)

    assignment = {}
    for label in sorted(by_class):
        cases = sorted(by_class[label], key=lambda r: r.case_id)
        counts = _largest_remainder(len(cases), ratios)

        if counts.min() < 1:
            raise ConfigurationError(
                f"class {label!r}: {len(cases)} cases cannot be split {tuple(ratios)} with a case in every subset"
            )

        order = rng.permutation(len(cases))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for subset, start, stop in zip(SUBSETS, bounds[:-1], bounds[1:]):
            for index in order[start:stop]:
                cases[index].subset = subset
                assignment[cases[index].case_id] = subset

    return assignment


def make_bags(patches_by_case, labels, bag_size=16, bags_per_case=0, seed=0):
    """Draw bags of ``bag_size`` distinct patches from each examination.

    Parameters
    ----------
    patches_by_case : dict
        case_id -> list of Patch.
    labels : dict
        case_id -> class label inherited by the case's bags.
    bags_per_case : int
        Bags drawn per case; 0 draws floor(patches / bag_size) bags (at least one).
        Bags of a case share no patch until that many are drawn; then a fresh shuffle starts.

    Returns
    -------
    list of Bag
    """
    rng = np.random.default_rng(seed)
    bags = []

    for case_id in sorted(patches_by_case):
        patches = patches_by_case[case_id]

        if len(patches) < bag_size:
            logger.warning(f"make_bags: case {case_id} has {len(patches)} patches (< {bag_size}) - excluded")
            continue

        fit = len(patches) // bag_size
        count = bags_per_case or fit
        order = rng.permutation(len(patches))
        for k in range(count):
            if k and k % fit == 0:
                order = rng.permutation(len(patches))
            start = (k % fit) * bag_size
            chosen = np.sort(order[start : start + bag_size])
            bags.append(
                Bag(
                    bag_id=f"{case_id}-{k:03d}",
                    case_id=case_id,
                    label=labels[case_id],
                    patches=tuple(patches[i] for i in chosen),
                )
            )

    return bags


def load_dataset(root, manifest=None):
    """Manifest records and patches of a prepared dataset, grouped by subset.

    Returns
    -------
    tuple
        ``(records, {subset: {case_id: [Patch]}})``
    """
    records = read_manifest(manifest or os.path.join(root, "manifest.csv"))

    if not records:
        raise ConfigurationError(f"dataset {root} lists no examinations")

    unassigned = [r.case_id for r in records if not r.subset]
    if unassigned:
        raise ConfigurationError(f"cases without a subset: {unassigned[:5]}")

    patches = load_patches(root, records)
    grouped = {subset: {} for subset in SUBSETS}
    for record in records:
        grouped[record.subset][record.case_id] = patches[record.case_id]

    return records, grouped


def class_distribution(records, grouped, bags=None):
    """Examination, patch and bag counts per subset and class."""
    labels = {r.case_id: r.class_label for r in records}
    table = {}
    for subset in SUBSETS:
        row = {}
        for case_id, patches in grouped.get(subset, {}).items():
            entry = row.setdefault(labels[case_id], {"examinations": 0, "patches": 0, "bags": 0})
            entry["examinations"] += 1
            entry["patches"] += len(patches)
        for bag in (bags or {}).get(subset, []):
            row.setdefault(bag.label, {"examinations": 0, "patches": 0, "bags": 0})["bags"] += 1
        table[subset] = {label: row[label] for label in sorted(row)}
    return table


# Synthetic ellipse scenes.


@dataclasses.dataclass(frozen=True)
class SyntheticSceneSpec:
    """Per-class distribution of a synthetic scene.

    ``palette`` lists RGB absorptions; each ellipse takes one at random and
    darkens the background multiplicatively by (1 - a).
    """

    name: str
    count_range: tuple
    radius_range: tuple
    palette: tuple
    background: tuple = (0.96, 0.94, 0.96)
    elongation: tuple = (0.6, 1.0)


SYNTHETIC_CLASSES = (
    SyntheticSceneSpec(
        name="dense",
        count_range=(20, 30),
        radius_range=(8.0, 16.0),
        palette=((0.10, 0.45, 0.25), (0.20, 0.55, 0.30), (0.15, 0.35, 0.20)),
    ),
    SyntheticSceneSpec(
        name="sparse",
        count_range=(3, 6),
        radius_range=(36.0, 64.0),
        palette=((0.05, 0.30, 0.15), (0.08, 0.25, 0.12), (0.12, 0.38, 0.20)),
    ),
    SyntheticSceneSpec(
        name="dark-infiltrate",
        count_range=(20, 30),
        radius_range=(8.0, 16.0),
        palette=((0.55, 0.75, 0.35), (0.65, 0.80, 0.45), (0.50, 0.70, 0.30)),
    ),
)


def _ellipse_mask(side, supersample, cx, cy, rx, ry, angle):
    """Anti-aliased coverage [side,side] of a filled ellipse (pixel units, pixel centers at +0.5)."""
    extent = max(rx, ry) + 1
    x0, x1 = max(int(math.floor(cx - extent)), 0), min(int(math.ceil(cx + extent)), side)
    y0, y1 = max(int(math.floor(cy - extent)), 0), min(int(math.ceil(cy + extent)), side)

    mask = np.zeros((side, side))
    if x0 >= x1 or y0 >= y1:
        return mask

    step = 1.0 / supersample
    xs = x0 + (np.arange((x1 - x0) * supersample) + 0.5) * step
    ys = y0 + (np.arange((y1 - y0) * supersample) + 0.5) * step
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy

    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    inside = (u * u + v * v <= 1.0).astype(float)

    coverage = inside.reshape(y1 - y0, supersample, x1 - x0, supersample).mean(axis=(1, 3))
    mask[y0:y1, x0:x1] = coverage
    return mask


def render_ellipses(ellipses, side=256, background=(0.96, 0.94, 0.96), supersample=4):
    """Render ground-truth ellipse records into a [3,side,side] float32 scene in [0,1]."""
    transmission = np.ones((side, side, 3))
    for e in ellipses:
        mask = _ellipse_mask(side, supersample, e["cx"], e["cy"], e["rx"], e["ry"], e["angle"])
        transmission *= 1.0 - mask[..., None] * np.asarray(e["absorption"])[None, None, :]
    scene = np.asarray(background)[None, None, :] * transmission
    return np.clip(scene, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def sample_ellipses(spec, rng, side=256):
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    ellipses = []
    for _ in range(count):
        radius = float(rng.uniform(*spec.radius_range))
        ellipses.append(
            {
                "cx": float(rng.uniform(0, side)),
                "cy": float(rng.uniform(0, side)),
                "rx": radius,
                "ry": radius * float(rng.uniform(*spec.elongation)),
                "angle": float(rng.uniform(0, math.pi)),
                "absorption": [float(v) for v in spec.palette[int(rng.integers(len(spec.palette)))]],
            }
        )
    return ellipses


def generate_synthetic_dataset(
    out_dir, classes=3, cases_per_class=12, patches_per_case=60, seed=7, ratios=(15, 6, 9), side=256
):
    """Write a class-structured synthetic patch dataset.

    Every case draws its patches from its class's SyntheticSceneSpec; patch
    ``k`` of a case is stored at origin ((k % 8) * side, (k // 8) * side) of a
    virtual slide.  Ground-truth ellipse lists go to ``ground_truth.jsonl``,
    the split manifest to ``manifest.csv``.

    Returns
    -------
    list of ExaminationRecord
    """
    if not 1 <= classes <= len(SYNTHETIC_CLASSES):
        raise ConfigurationError(f"synthetic classes must be between 1 and {len(SYNTHETIC_CLASSES)}, got {classes}")
    if cases_per_class < 1 or patches_per_case < 1:
        raise ConfigurationError("synthetic datasets need at least one case per class and one patch per case")

    os.makedirs(out_dir, exist_ok=True)
    records = []

    with open(os.path.join(out_dir, GROUND_TRUTH_FILE), "w", encoding="utf-8") as truth:
        for class_index, spec in enumerate(SYNTHETIC_CLASSES[:classes]):
            for case_index in range(cases_per_class):
                case_id = f"{spec.name}-{case_index:03d}"
                rng = np.random.default_rng([seed, class_index, case_index])
                # Case-level stain variation.
                background = tuple(float(np.clip(b + rng.normal(0, 0.01), 0.85, 1.0)) for b in spec.background)

                patches = []
                for k in range(patches_per_case):
                    ellipses = sample_ellipses(spec, rng, side)
                    origin = ((k % 8) * side, (k // 8) * side)
                    pixels = render_ellipses(ellipses, side, background)
                    patches.append(Patch(case_id=case_id, origin=origin, pixels=pixels))
                    line = {"case_id": case_id, "class": spec.name, "origin": list(origin), "ellipses": ellipses}
                    truth.write(json.dumps(line, sort_keys=True) + "\n")

                save_patches(patches, out_dir)
                records.append(
                    ExaminationRecord(
                        case_id=case_id, class_label=spec.name, image_path=case_id, patch_count=len(patches)
                    )
                )

            logger.info(f"synthetic: class {spec.name}: {cases_per_class} cases x {patches_per_case} patches")

    split_dataset(records, ratios, seed)
    write_manifest(records, os.path.join(out_dir, "manifest.csv"))

    return records


def read_ground_truth(root):
    """Ground-truth ellipse lists keyed by patch key ``<case_id>/<x>_<y>``."""
    truth = {}
    with open(os.path.join(root, GROUND_TRUTH_FILE), encoding="utf-8") as src:
        for line in src:
            entry = json.loads(line)
            truth[f"{entry['case_id']}/{entry['origin'][0]}_{entry['origin'][1]}"] = entry
    return truth


def single_ellipse_scenes(count, seed=0, side=256, grid=2, axis_range=(0.35, 0.9)):
    """Scenes with one ellipse centered on a random cell of a ``grid`` x ``grid`` layout.

    Semi-axes are drawn as fractions ``axis_range`` of the cell spacing.

    Returns
    -------
    tuple
        ``(images [count,3,side,side], truths)`` where each truth holds the
        ellipse record plus its cell ``(row, col)``.
    """
    rng = np.random.default_rng(seed)
    spacing = side // grid
    palette = SYNTHETIC_CLASSES[0].palette + SYNTHETIC_CLASSES[2].palette

    images, truths = [], []
    for _ in range(count):
        row, col = int(rng.integers(grid)), int(rng.integers(grid))
        ellipse = {
            "cx": col * spacing + spacing // 2 + 0.5,
            "cy": row * spacing + spacing // 2 + 0.5,
            "rx": spacing * float(rng.uniform(*axis_range)),
            "ry": spacing * float(rng.uniform(*axis_range)),
            "angle": float(rng.uniform(0, math.pi)),
            "absorption": [float(v) for v in palette[int(rng.integers(len(palette)))]],
        }
        images.append(render_ellipses([ellipse], side))
        truths.append(dict(ellipse, cell=(row, col)))

    return np.stack(images), truths
