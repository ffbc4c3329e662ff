"""Dataset generation, binary serialization, and model-input encoding.

A dataset is a set of obstacle layouts; each layout contributes a fixed
number of (agent, goal) pairs labelled with the expert's first move and the
optimal path length. Layouts are split between the train and test files, so
no obstacle layout ever appears in both.

File format (little-endian): magic ``GWDS``, version u16, length-prefixed
(u32) UTF-8 JSON manifest; then per-sample records of
``m,n (u16), obstacle bitmap (ceil(m*n/8) bytes, row-major, MSB first),
goal (u16,u16), agent (u16,u16), expert_action (u8), optimal_length (u32)``;
a CRC32 (u32) of the record payload closes the file.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import FormatError, Reader, check_crc, check_magic, crc32, pack_u8, pack_u16, pack_u32
from .gridworld import GenerationError, GridMap, PlanningSample, Unreachable, generate_map, label_sample

MAGIC = b"GWDS"
FORMAT_VERSION = 1

# Value written into the goal channel when samples are encoded for a model.
GOAL_CHANNEL_VALUE = 10.0


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to regenerate a dataset bit-exactly.

    The movement conventions (unit diagonal cost, corner cutting) are
    recorded here so alternative rules can be added later without a format
    change.
    """

    seed: int
    map_height: int
    map_width: int
    num_maps: int
    pairs_per_map: int = 6
    density_range: tuple[float, float] = (0.1, 0.3)
    split_ratio: float = 0.8
    format_version: int = FORMAT_VERSION
    move_cost: str = "unit"
    corner_cutting: bool = True
    density_sampling: str = "per-map"

    def __post_init__(self):
        object.__setattr__(self, "density_range",
                           (float(self.density_range[0]), float(self.density_range[1])))
        if self.num_maps < 1 or self.pairs_per_map < 1:
            raise ValueError("num_maps and pairs_per_map must be positive")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split ratio {self.split_ratio} must lie in (0, 1)")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        raw = json.loads(text)
        raw["density_range"] = tuple(raw["density_range"])
        return DatasetManifest(**raw)


def _sample_pairs(layout: GridMap, pairs: int, rng: np.random.Generator,
                  max_retries: int = 50) -> list[PlanningSample] | None:
    """Draw ``pairs`` labelled (agent, goal) pairs on one layout, or None on failure."""
    free = layout.free_cells()
    samples = []
    for _ in range(pairs):
        for attempt in range(max_retries + 1):
            goal = tuple(free[rng.integers(len(free))])
            agent = tuple(free[rng.integers(len(free))])
            if agent == goal:
                continue
            grid = GridMap(layout.obstacles, goal)
            try:
                samples.append(label_sample(grid, agent))
                break
            except Unreachable:
                continue
        else:
            return None  # retries exhausted; caller regenerates the layout
    return samples


def generate_samples_for_map(manifest: DatasetManifest, map_index: int) -> list[PlanningSample]:
    """All samples for one map index, from its own rng stream (seed, index)."""
    rng = np.random.default_rng([manifest.seed, map_index])
    for _ in range(100):
        layout = generate_map(manifest.map_height, manifest.map_width,
                              manifest.density_range, rng)
        samples = _sample_pairs(layout, manifest.pairs_per_map, rng)
        if samples is not None:
            return samples
    raise GenerationError(f"map {map_index}: no solvable layout after 100 regenerations")


def build_dataset(manifest: DatasetManifest, out_dir) -> tuple[Path, Path]:
    """Generate, label, split by map, and serialize. Returns (train_path, test_path)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train = int(round(manifest.split_ratio * manifest.num_maps))
    train, test = [], []
    for i in range(manifest.num_maps):
        samples = generate_samples_for_map(manifest, i)
        (train if i < n_train else test).extend(samples)
    train_path = out_dir / "train.gwds"
    test_path = out_dir / "test.gwds"
    save_samples(train_path, manifest, train)
    save_samples(test_path, manifest, test)
    return train_path, test_path


def _encode_record(sample: PlanningSample) -> bytes:
    grid = sample.grid
    bitmap = np.packbits(grid.obstacles.reshape(-1)).tobytes()
    assert len(bitmap) == math.ceil(grid.m * grid.n / 8)
    return b"".join([
        pack_u16(grid.m), pack_u16(grid.n), bitmap,
        pack_u16(grid.goal[0]), pack_u16(grid.goal[1]),
        pack_u16(sample.agent[0]), pack_u16(sample.agent[1]),
        pack_u8(sample.expert_action), pack_u32(sample.optimal_length),
    ])


def save_samples(path, manifest: DatasetManifest, samples: list[PlanningSample]) -> None:
    payload = b"".join(_encode_record(s) for s in samples)
    manifest_bytes = manifest.to_json().encode("utf-8")
    blob = b"".join([
        MAGIC, pack_u16(FORMAT_VERSION),
        pack_u32(len(manifest_bytes)), manifest_bytes,
        payload, pack_u32(crc32(payload)),
    ])
    Path(path).write_bytes(blob)


def load_dataset(path) -> tuple[DatasetManifest, list[PlanningSample]]:
    """Read a dataset file, validating magic, version, and checksum."""
    reader = Reader(Path(path).read_bytes())
    check_magic(reader, MAGIC, "dataset")
    version = reader.u16()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version} (expected {FORMAT_VERSION})")
    manifest = DatasetManifest.from_json(reader.take(reader.u32()).decode("utf-8"))

    if reader.remaining() < 4:
        raise FormatError("truncated dataset: missing checksum")
    payload = reader.buf[reader.pos:len(reader.buf) - 4]
    stored = Reader(reader.buf[len(reader.buf) - 4:]).u32()
    check_crc(payload, stored, "dataset")  # validate before interpreting records

    records = Reader(payload)
    samples = []
    while records.remaining():
        m, n = records.u16(), records.u16()
        bitmap = records.take(math.ceil(m * n / 8))
        bits = np.unpackbits(np.frombuffer(bitmap, dtype=np.uint8), count=m * n)
        obstacles = bits.astype(bool).reshape(m, n)
        goal = (records.u16(), records.u16())
        agent = (records.u16(), records.u16())
        action = records.u8()
        length = records.u32()
        samples.append(PlanningSample(GridMap(obstacles, goal), agent, action, length))
    return manifest, samples


def encode_samples(samples: list[PlanningSample],
                   goal_value: float = GOAL_CHANNEL_VALUE):
    """Stack samples into model inputs.

    Returns (x, coords, labels, lengths): x is (batch, 2, m, n) with an
    obstacle channel in {0, 1} and a goal channel carrying ``goal_value`` at
    the goal cell; coords is the (batch, 2) agent positions; labels the
    expert actions; lengths the optimal path lengths.
    """
    if not samples:
        raise ValueError("cannot encode an empty sample list")
    m, n = samples[0].grid.m, samples[0].grid.n
    batch = len(samples)
    x = np.zeros((batch, 2, m, n))
    coords = np.zeros((batch, 2), dtype=np.intp)
    labels = np.zeros(batch, dtype=np.intp)
    lengths = np.zeros(batch, dtype=np.intp)
    for i, s in enumerate(samples):
        if (s.grid.m, s.grid.n) != (m, n):
            raise ValueError(f"sample {i} is {s.grid.m}x{s.grid.n}, expected {m}x{n}")
        x[i, 0] = s.grid.obstacles
        x[i, 1, s.grid.goal[0], s.grid.goal[1]] = goal_value
        coords[i] = s.agent
        labels[i] = s.expert_action
        lengths[i] = s.optimal_length
    return x, coords, labels, lengths


def one_hot(labels: np.ndarray, num_classes: int = 8) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out
