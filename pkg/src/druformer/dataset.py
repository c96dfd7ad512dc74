"""On-disk synthetic dataset: manifest.json, images/{id}.ppm, annotations.jsonl."""

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import config_hash, to_plain
from .exceptions import DatasetError
from .rng import make_rng
from .scenes import GeneratorConfig, SceneSpec, render_uint8, sample_scene

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.jsonl"
IMAGES_DIR = "images"
SPLITS = ("train", "val", "test")
SPLIT_STREAM = 2**31 - 1


@dataclass
class DatasetManifest:
    seed: int
    image_size: int
    generator_hash: str
    generator: Dict[str, Any]
    splits: Dict[str, List[int]]
    files: List[str] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        """Validate split layout."""
        if set(self.splits) != set(SPLITS):
            raise ValueError(f"Manifest splits must be exactly {SPLITS}")
        seen: set = set()
        for name in SPLITS:
            ids = set(self.splits[name])
            if seen & ids:
                raise ValueError(f"Split {name} overlaps another split")
            seen |= ids

    @property
    def split_sizes(self) -> Dict[str, int]:
        return {name: len(self.splits[name]) for name in SPLITS}

    @property
    def n_scenes(self) -> int:
        return sum(self.split_sizes.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "n_scenes": self.n_scenes,
            "image_size": self.image_size,
            "generator_hash": self.generator_hash,
            "generator": self.generator,
            "split_sizes": self.split_sizes,
            "splits": {name: list(self.splits[name]) for name in SPLITS},
            "files": list(self.files),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        return cls(
            seed=int(data["seed"]),
            image_size=int(data["image_size"]),
            generator_hash=str(data["generator_hash"]),
            generator=dict(data["generator"]),
            splits={name: [int(i) for i in data["splits"][name]] for name in SPLITS},
            files=list(data.get("files", [])),
            format_version=int(data.get("format_version", FORMAT_VERSION)),
        )


def split_sizes(n: int, ratios: Sequence[float]) -> Dict[str, int]:
    """Floor the train and val shares; the test split takes the remainder."""
    train = int(np.floor(n * ratios[0] + 1e-9))
    val = int(np.floor(n * ratios[1] + 1e-9))
    return {"train": train, "val": val, "test": n - train - val}


def split_ids(n: int, ratios: Sequence[float], seed: int) -> Dict[str, List[int]]:
    """Disjoint, seeded split of scene ids ``0..n-1``; ids within a split are sorted."""
    sizes = split_sizes(n, ratios)
    order = make_rng(seed, SPLIT_STREAM).permutation(n)
    bounds = np.cumsum([sizes["train"], sizes["val"]])
    parts = np.split(order, bounds)
    return {name: sorted(int(i) for i in part) for name, part in zip(SPLITS, parts)}


def generate_scene(config: GeneratorConfig, seed: int, scene_id: int) -> SceneSpec:
    return sample_scene(make_rng(seed, scene_id), config, scene_id)


def generate_scenes(config: GeneratorConfig, n: int, seed: int, threads: int = 1) -> List[SceneSpec]:
    """Scenes ``0..n-1``; each id draws from its own RNG stream, so results are thread-count independent."""
    if n < 1:
        raise ValueError(f"Number of scenes must be positive, got {n}")
    if threads <= 1:
        return [generate_scene(config, seed, i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: generate_scene(config, seed, i), range(n)))


def image_name(scene_id: int) -> str:
    return f"{IMAGES_DIR}/{scene_id}.ppm"


def write_dataset(
    scenes: Sequence[SceneSpec],
    out_dir: Union[str, Path],
    config: GeneratorConfig,
    seed: int,
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    threads: int = 1,
) -> DatasetManifest:
    """Render and write every scene, the annotation lines and the manifest.

    Raises:
        DatasetError: On IO failures or duplicate / non-contiguous scene ids
    """
    ids = [s.scene_id for s in scenes]
    if sorted(ids) != list(range(len(ids))):
        raise DatasetError("Scene ids must be exactly 0..n-1")
    root = Path(out_dir)
    ordered = sorted(scenes, key=lambda s: s.scene_id)

    def write_image(spec: SceneSpec) -> None:
        raster = render_uint8(spec, config.image_size)
        Image.fromarray(raster).save(root / image_name(spec.scene_id), format="PPM")

    try:
        (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(write_image, ordered))
        else:
            for spec in ordered:
                write_image(spec)
        with open(root / ANNOTATIONS, "w", encoding="utf-8") as f:
            for spec in ordered:
                f.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")
        manifest = DatasetManifest(
            seed=seed,
            image_size=config.image_size,
            generator_hash=config_hash(config),
            generator=to_plain(config),
            splits=split_ids(len(ordered), ratios, seed),
            files=[image_name(s.scene_id) for s in ordered],
        )
        (root / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write dataset to {root}: {e}")
        raise DatasetError(f"Cannot write dataset to {root}: {e}") from e

    logger.info(f"Wrote {len(ordered)} scenes to {root} (splits {manifest.split_sizes})")
    return manifest


def manifest_hash(root: Union[str, Path]) -> str:
    return hashlib.sha256((Path(root) / MANIFEST).read_bytes()).hexdigest()[:16]


def load_image(path: Union[str, Path], expected_size: Optional[int] = None) -> np.ndarray:
    """Read an RGB image as a 3×H×W float64 array in [0, 1].

    Raises:
        DatasetError: If the file is unreadable or has the wrong size
    """
    try:
        with Image.open(path) as img:
            raster = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f"Cannot read image {path}: {e}") from e
    if expected_size is not None and raster.shape[:2] != (expected_size, expected_size):
        raise DatasetError(f"Image {path} is {raster.shape[1]}×{raster.shape[0]}, expected {expected_size}")
    return np.ascontiguousarray(raster.transpose(2, 0, 1), dtype=np.float64) / 255.0


def parse_annotations(text: str) -> List[SceneSpec]:
    """One SceneSpec per non-empty line.

    Raises:
        DatasetError: Naming the 1-based line of the first malformed record
    """
    scenes: List[SceneSpec] = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            scenes.append(SceneSpec.from_dict(json.loads(line)))
        except json.JSONDecodeError as e:
            raise DatasetError(f"malformed JSON: {e.msg}", line_number=number) from e
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"invalid annotation: {e}", line_number=number) from e
    return scenes


class Dataset:
    """A dataset directory opened for reading; images load lazily and are cached as uint8."""

    def __init__(self, root: Union[str, Path], manifest: DatasetManifest, scenes: Dict[int, SceneSpec]) -> None:
        self.root = Path(root)
        self.manifest = manifest
        self.scenes = scenes
        self._images: Dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.scenes)

    def split(self, name: str) -> List[SceneSpec]:
        """Scenes of ``train``, ``val`` or ``test`` in id order.

        Raises:
            DatasetError: If the split is unknown
        """
        if name not in self.manifest.splits:
            raise DatasetError(f"Unknown split {name!r}; expected one of {SPLITS}")
        return [self.scenes[i] for i in self.manifest.splits[name]]

    def image(self, scene_id: int) -> np.ndarray:
        with self._lock:
            cached = self._images.get(scene_id)
        if cached is None:
            image = load_image(self.root / image_name(scene_id), self.manifest.image_size)
            cached = np.round(image * 255.0).astype(np.uint8)
            with self._lock:
                self._images[scene_id] = cached
        return cached.astype(np.float64) / 255.0

    def images(self, scene_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.image(i) for i in scene_ids])


def read_dataset(root: Union[str, Path]) -> Dataset:
    """Open a dataset directory and validate manifest against annotations and files.

    Raises:
        DatasetError: On missing files, malformed JSON or manifest/file mismatch
    """
    root = Path(root)
    try:
        manifest_data = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
        annotations = (root / ANNOTATIONS).read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Cannot read dataset at {root}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"Malformed manifest in {root}: {e}") from e
    try:
        manifest = DatasetManifest.from_dict(manifest_data)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Invalid manifest in {root}: {e}") from e

    scenes = {s.scene_id: s for s in parse_annotations(annotations)}
    listed = sorted(i for ids in manifest.splits.values() for i in ids)
    if listed != sorted(scenes):
        raise DatasetError(f"Manifest lists {len(listed)} scenes but annotations hold {len(scenes)}")
    missing = [name for name in manifest.files if not (root / name).is_file()]
    if missing:
        raise DatasetError(f"Manifest references missing files: {missing[:5]}")
    logger.info(f"Opened dataset {root} with splits {manifest.split_sizes}")
    return Dataset(root, manifest, scenes)
