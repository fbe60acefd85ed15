"""Manifests, deterministic splitting, and synthetic dataset generation.

Manifests are JSON-lines files, one record per line with keys id, task,
dataset, images, prompt, answer, answer_type, choices. Image paths are
relative to the manifest's directory. Images are binary PGM (grayscale)
or PPM (RGB) with max value 255.

Shuffling uses an in-house 64-bit linear congruential generator so splits
reproduce anywhere from the documented recurrence alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ManifestError, SampleValidationError

TASKS = ("multi_image_reasoning", "doc_knowledge", "interactive_comm")
ANSWER_TYPES = ("open", "mcq")
IMAGE_TOKEN = "<image>"

MANIFEST_KEYS = ("id", "task", "dataset", "images", "prompt", "answer",
                 "answer_type", "choices")


@dataclass
class SampleRecord:
    """One interleaved example; prompt placeholders pair with images in order."""

    id: str
    task: str
    dataset: str
    images: list[str]
    prompt: str
    answer: str
    answer_type: str
    choices: list[str] | None = None

    def validate(self) -> None:
        if self.task not in TASKS:
            raise SampleValidationError(f"record {self.id!r}: unknown task {self.task!r}")
        if self.answer_type not in ANSWER_TYPES:
            raise SampleValidationError(
                f"record {self.id!r}: unknown answer_type {self.answer_type!r}")
        n_ph = self.prompt.lower().split().count(IMAGE_TOKEN)
        if n_ph != len(self.images):
            raise SampleValidationError(
                f"record {self.id!r}: {n_ph} placeholders for {len(self.images)} images")
        if self.answer_type == "mcq":
            if not self.choices:
                raise SampleValidationError(f"record {self.id!r}: mcq without choices")
            if self.answer not in self.choices:
                raise SampleValidationError(
                    f"record {self.id!r}: gold answer not among choices")

    def to_json(self) -> dict:
        return {
            "id": self.id, "task": self.task, "dataset": self.dataset,
            "images": list(self.images), "prompt": self.prompt, "answer": self.answer,
            "answer_type": self.answer_type, "choices": self.choices,
        }


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Read and validate a JSONL manifest; rejects duplicate ids."""
    path = Path(path)
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            if not isinstance(obj, dict):
                raise ManifestError("record is not an object", line=lineno)
            unknown = set(obj) - set(MANIFEST_KEYS)
            if unknown:
                raise ManifestError(f"unknown keys {sorted(unknown)}", line=lineno)
            try:
                record = SampleRecord(
                    id=str(obj["id"]), task=obj["task"], dataset=obj["dataset"],
                    images=list(obj["images"]), prompt=obj["prompt"],
                    answer=obj["answer"], answer_type=obj["answer_type"],
                    choices=list(obj["choices"]) if obj.get("choices") else None,
                )
            except KeyError as exc:
                raise ManifestError(f"missing key {exc.args[0]!r}", line=lineno) from exc
            record.validate()
            if record.id in seen:
                raise ManifestError(f"duplicate id {record.id!r}", line=lineno)
            seen.add(record.id)
            records.append(record)
    return records


def write_manifest(records: Sequence[SampleRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# deterministic shuffling and splitting


class Lcg:
    """64-bit linear congruential generator (Knuth constants).

    state' = (state * 6364136223846793005 + 1442695040888963407) mod 2^64.
    Draws take the upper 31 bits; bounded draws use a plain modulus.
    """

    MULT = 6364136223846793005
    INC = 1442695040888963407
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next_u31(self) -> int:
        self.state = (self.state * self.MULT + self.INC) & self.MASK
        return self.state >> 33

    def below(self, n: int) -> int:
        return self.next_u31() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates from the top index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


def fnv1a64(text: str) -> int:
    """FNV-1a hash, used to derive per-dataset shuffle streams."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & Lcg.MASK
    return h


@dataclass
class SplitSpec:
    """Split parameters; train/val id lists are filled by the split."""

    ratio: float = 0.9
    seed: int = 0
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)


def split_train_val(records: Sequence[SampleRecord],
                    spec: SplitSpec) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Seeded shuffle then split; validation gets max(1, n - floor(ratio*n)).

    The whole record list is treated as one pool; callers wanting
    per-dataset stratification split each dataset's records separately.
    """
    n = len(records)
    if n < 2:
        raise ConfigurationError(f"need at least 2 records to split, got {n}")
    if not (0.0 < spec.ratio < 1.0):
        raise ConfigurationError(f"split ratio must be in (0, 1), got {spec.ratio}")
    order = list(range(n))
    Lcg(spec.seed).shuffle(order)
    n_val = max(1, n - math.floor(spec.ratio * n))
    val_idx = set(order[n - n_val:])
    train = [records[i] for i in order[:n - n_val]]
    val = [records[i] for i in order[n - n_val:]]
    spec.train_ids = [r.id for r in train]
    spec.val_ids = [r.id for r in val]
    return train, val


def split_per_dataset(records: Sequence[SampleRecord], ratio: float,
                      seed: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Split each dataset's records independently (stratified 9:1).

    Per-dataset shuffle streams are derived from the seed and the dataset
    name so adding a dataset never reorders another's split.
    """
    groups: dict[str, list[SampleRecord]] = {}
    for r in records:
        groups.setdefault(r.dataset, []).append(r)
    train: list[SampleRecord] = []
    val: list[SampleRecord] = []
    for name in sorted(groups):
        spec = SplitSpec(ratio=ratio, seed=seed ^ fnv1a64(name))
        t, v = split_train_val(groups[name], spec)
        train.extend(t)
        val.extend(v)
    return train, val


# ---------------------------------------------------------------------------
# portable image files


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM (P5), max value 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ConfigurationError(f"PGM wants a 2-D array, got shape {img.shape}")
    img = img.astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary PPM (P6), max value 255."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigurationError(f"PPM wants an H x W x 3 array, got shape {img.shape}")
    img = img.astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _read_netpbm(path: Path, magic: bytes, values_per_pixel: int) -> np.ndarray:
    data = path.read_bytes()
    if not data.startswith(magic):
        raise ManifestError(f"{path}: not a {magic.decode()} file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ManifestError(f"{path}: unsupported max value {maxval}")
    count = width * height * values_per_pixel
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos)
    shape = (height, width) if values_per_pixel == 1 else (height, width, 3)
    return raw.reshape(shape).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P5", 1)


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6", 3)


def read_image(path: str | Path) -> np.ndarray:
    """Load a PGM or PPM by magic number."""
    path = Path(path)
    magic = path.open("rb").read(2)
    if magic == b"P5":
        return read_pgm(path)
    if magic == b"P6":
        return read_ppm(path)
    raise ManifestError(f"{path}: unknown image format")


def load_record_images(record: SampleRecord, root: Path) -> list[np.ndarray]:
    return [read_image(root / rel) for rel in record.images]


# ---------------------------------------------------------------------------
# synthetic datasets

SYNTH_KINDS = ("spot_diff", "state_coherence", "mcq_count")

_BG = 16
_FG = 240
_CELL_VALUES = (32, 112, 224)


def _grid_cells(image_size: int) -> int:
    if image_size % 4:
        raise ConfigurationError("synthetic images need an image size divisible by 4")
    return image_size // 4  # one cell per 4x4 pixel block


def _paint(cells: np.ndarray, image_size: int) -> np.ndarray:
    g = cells.shape[0]
    cell_px = image_size // g
    return np.kron(cells, np.ones((cell_px, cell_px), dtype=np.uint8))


def _cells_of(image: np.ndarray) -> np.ndarray:
    g = _grid_cells(image.shape[0])
    cell_px = image.shape[0] // g
    return image[::cell_px, ::cell_px].copy()


def _cell_name(row: int, col: int) -> str:
    return f"r{row + 1}c{col + 1}"


def synth_generate(kind: str, n: int, seed: int, image_size: int,
                   out_dir: str | Path) -> list[SampleRecord]:
    """Generate ``n`` samples of one synthetic kind, writing PGM files under
    ``out_dir``/images. Gold answers are derivable from the images alone,
    so :func:`verify_sample` can re-check every record."""
    if kind not in SYNTH_KINDS:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}")
    if n < 1:
        raise ConfigurationError("need n >= 1")
    g = _grid_cells(image_size)
    out_dir = Path(out_dir)
    rng = Lcg(seed ^ fnv1a64(kind))
    records: list[SampleRecord] = []

    for i in range(n):
        rid = f"{kind}-{i:04d}"
        paths: list[str] = []

        def save(tag: str, cells: np.ndarray) -> None:
            rel = f"images/{rid}-{tag}.pgm"
            write_pgm(out_dir / rel, _paint(cells, image_size))
            paths.append(rel)

        if kind == "spot_diff":
            cells = np.full((g, g), _BG, dtype=np.uint8)
            row, col = rng.below(g), rng.below(g)
            changed = cells.copy()
            changed[row, col] = _FG
            save("a", cells)
            save("b", changed)
            record = SampleRecord(
                id=rid, task="multi_image_reasoning", dataset="spot_diff",
                images=paths,
                prompt=f"{IMAGE_TOKEN} {IMAGE_TOKEN} which cell differs between the grids",
                answer=_cell_name(row, col), answer_type="open")
        elif kind == "state_coherence":
            flat = np.array([_CELL_VALUES[rng.below(3)] for _ in range(g * g)],
                            dtype=np.uint8)
            cells = flat.reshape(g, g)
            same = rng.below(2) == 0
            second = cells.copy()
            if not same:
                row, col = rng.below(g), rng.below(g)
                others = [v for v in _CELL_VALUES if v != second[row, col]]
                second[row, col] = others[rng.below(len(others))]
            save("a", cells)
            save("b", second)
            record = SampleRecord(
                id=rid, task="multi_image_reasoning", dataset="state_coherence",
                images=paths,
                prompt=f"{IMAGE_TOKEN} {IMAGE_TOKEN} are the two grids identical",
                answer="yes" if same else "no", answer_type="mcq",
                choices=["no", "yes"])
        else:  # mcq_count
            count = 1 + rng.below(4)
            order = list(range(g * g))
            rng.shuffle(order)
            flat = np.full(g * g, _BG, dtype=np.uint8)
            flat[order[:count]] = _FG
            save("a", flat.reshape(g, g))
            record = SampleRecord(
                id=rid, task="doc_knowledge", dataset="mcq_count",
                images=paths,
                prompt=f"{IMAGE_TOKEN} how many cells are bright",
                answer=str(count), answer_type="mcq",
                choices=["1", "2", "3", "4"])

        record.validate()
        records.append(record)
    return records


def derive_answer(kind: str, images: Sequence[np.ndarray]) -> str:
    """Recompute the gold answer from images; the generator's inverse."""
    if kind == "spot_diff":
        a, b = _cells_of(images[0]), _cells_of(images[1])
        diff = np.argwhere(a != b)
        if len(diff) != 1:
            raise SampleValidationError(f"expected exactly one differing cell, found {len(diff)}")
        row, col = (int(v) for v in diff[0])
        return _cell_name(row, col)
    if kind == "state_coherence":
        return "yes" if np.array_equal(images[0], images[1]) else "no"
    if kind == "mcq_count":
        return str(int((_cells_of(images[0]) == _FG).sum()))
    raise ConfigurationError(f"unknown synthetic kind {kind!r}")


def verify_sample(record: SampleRecord, root: str | Path) -> bool:
    """True when the stored answer matches one re-derived from the images."""
    images = load_record_images(record, Path(root))
    return derive_answer(record.dataset, images) == record.answer
