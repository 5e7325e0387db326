"""Routing problem instances: generation, TSPLIB parsing, normalization, transforms.

Coordinates are kept in the unit square [0,1]^2; `scale_factor` maps normalized
tour lengths back to the original units of a parsed instance. Cities are indexed
1..N and the M agent depot tokens N+1..N+M, matching the solution encoding in
:mod:`minmax_routing.env`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidTransformError, ParseError, UnsupportedFormatError

# Tolerance for clamping numerical noise back into the unit square.
BOUNDS_SLACK = 1e-9


class TaskKind(str, enum.Enum):
    MTSP = "mtsp"
    MPDP = "mpdp"


@dataclass(frozen=True)
class Instance:
    """A routing problem: N city coordinates plus M agent depot tokens.

    For MPDP, N is even; cities 1..N/2 are pickups and city i pairs with
    delivery i + N/2. All coordinates are float64 and read-only. Generated and
    parsed instances lie in [0,1]^2; transformed training variants may not
    (see `apply_transform`).
    """

    task_kind: TaskKind
    city_coords: np.ndarray   # (N, 2)
    depot_coords: np.ndarray  # (M, 2)
    scale_factor: float = 1.0
    id: str = ""
    node_features: dict | None = None

    def __post_init__(self):
        cities = np.array(self.city_coords, dtype=np.float64, copy=True)
        depots = np.array(self.depot_coords, dtype=np.float64, copy=True)
        if cities.ndim != 2 or cities.shape[1] != 2 or cities.shape[0] < 1:
            raise ValueError("city_coords must have shape (N, 2) with N >= 1")
        if depots.ndim != 2 or depots.shape[1] != 2 or depots.shape[0] < 1:
            raise ValueError("depot_coords must have shape (M, 2) with M >= 1")
        if self.task_kind == TaskKind.MPDP and cities.shape[0] % 2 != 0:
            raise ValueError("MPDP requires an even number of cities (pickup/delivery pairs)")
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be positive")
        cities.setflags(write=False)
        depots.setflags(write=False)
        object.__setattr__(self, "city_coords", cities)
        object.__setattr__(self, "depot_coords", depots)
        all_coords = np.concatenate([cities, depots], axis=0)
        all_coords.setflags(write=False)
        object.__setattr__(self, "_all_coords", all_coords)

    @property
    def n(self) -> int:
        return self.city_coords.shape[0]

    @property
    def m(self) -> int:
        return self.depot_coords.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.n + self.m

    @property
    def all_coords(self) -> np.ndarray:
        """(N+M, 2) array; row i-1 is the coordinate of node index i."""
        return self._all_coords

    def coord(self, index: int) -> np.ndarray:
        """Coordinate of node `index` (1-based: cities 1..N, depots N+1..N+M)."""
        if not 1 <= index <= self.num_tokens:
            raise ValueError(f"node index {index} out of range 1..{self.num_tokens}")
        return self._all_coords[index - 1]

    # MPDP pairing helpers (pickup i <-> delivery i + N/2)
    @property
    def num_pairs(self) -> int:
        if self.task_kind != TaskKind.MPDP:
            return 0
        return self.n // 2

    def is_pickup(self, city: int) -> bool:
        return self.task_kind == TaskKind.MPDP and 1 <= city <= self.num_pairs

    def is_delivery(self, city: int) -> bool:
        return self.task_kind == TaskKind.MPDP and self.num_pairs < city <= self.n

    def delivery_of(self, pickup: int) -> int:
        if not self.is_pickup(pickup):
            raise ValueError(f"city {pickup} is not a pickup")
        return pickup + self.num_pairs

    def pickup_of(self, delivery: int) -> int:
        if not self.is_delivery(delivery):
            raise ValueError(f"city {delivery} is not a delivery")
        return delivery - self.num_pairs

    def has_shared_depot(self) -> bool:
        return bool(np.all(self.depot_coords == self.depot_coords[0]))

    def in_unit_square(self) -> bool:
        return bool(np.all(self._all_coords >= 0.0) and np.all(self._all_coords <= 1.0))


class TransformKind(str, enum.Enum):
    ROTATION = "rotation"
    DIHEDRAL = "dihedral"


# The 8 symmetries of the unit square, index 0 = identity. Each row is
# (A, b) with p' = A @ p + b.
_DIHEDRAL_ELEMENTS = (
    (np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.0, 0.0])),    # (x, y)
    (np.array([[-1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0])),   # (1-x, y)
    (np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([0.0, 1.0])),   # (x, 1-y)
    (np.array([[-1.0, 0.0], [0.0, -1.0]]), np.array([1.0, 1.0])),  # (1-x, 1-y)
    (np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0.0, 0.0])),    # (y, x)
    (np.array([[0.0, -1.0], [1.0, 0.0]]), np.array([1.0, 0.0])),   # (1-y, x)
    (np.array([[0.0, 1.0], [-1.0, 0.0]]), np.array([0.0, 1.0])),   # (y, 1-x)
    (np.array([[0.0, -1.0], [-1.0, 0.0]]), np.array([1.0, 1.0])),  # (1-y, 1-x)
)

_DIHEDRAL_INVERSE = (0, 1, 2, 3, 4, 6, 5, 7)

NUM_DIHEDRAL = len(_DIHEDRAL_ELEMENTS)


@dataclass(frozen=True)
class GeometricTransform:
    """A rotation about a pivot or one of the 8 unit-square symmetries.

    Dihedral element 0 is the identity; the dihedral elements are implicitly
    about the square center and ignore `pivot`.
    """

    kind: TransformKind
    parameter: float
    pivot: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.kind == TransformKind.DIHEDRAL:
            idx = int(self.parameter)
            if idx != self.parameter or not 0 <= idx < NUM_DIHEDRAL:
                raise ValueError(f"dihedral index must be an integer in 0..{NUM_DIHEDRAL - 1}")

    def matrix_offset(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (A, b) such that the transform maps p to A @ p + b."""
        if self.kind == TransformKind.DIHEDRAL:
            return _DIHEDRAL_ELEMENTS[int(self.parameter)]
        theta = float(self.parameter)
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        pivot = np.asarray(self.pivot, dtype=np.float64)
        return rot, pivot - rot @ pivot

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        mat, off = self.matrix_offset()
        return np.asarray(points, dtype=np.float64) @ mat.T + off

    def inverse(self) -> "GeometricTransform":
        if self.kind == TransformKind.DIHEDRAL:
            return GeometricTransform(TransformKind.DIHEDRAL, _DIHEDRAL_INVERSE[int(self.parameter)])
        return GeometricTransform(TransformKind.ROTATION, -float(self.parameter), self.pivot)


def identity_transform() -> GeometricTransform:
    return GeometricTransform(TransformKind.DIHEDRAL, 0)


def dihedral_transform(index: int) -> GeometricTransform:
    return GeometricTransform(TransformKind.DIHEDRAL, index)


def generate_uniform(task_kind: TaskKind, n_cities: int, m_agents: int, rng_seed: int) -> Instance:
    """Sample an instance with i.i.d. uniform coordinates on [0,1]^2.

    All M agent tokens share a single depot coordinate, drawn from the same
    uniform distribution as the cities. Deterministic for a fixed seed.
    """
    task_kind = TaskKind(task_kind)
    if n_cities < 1:
        raise ValueError("n_cities must be >= 1")
    if m_agents < 1:
        raise ValueError("m_agents must be >= 1")
    if task_kind == TaskKind.MPDP and n_cities % 2 != 0:
        raise ValueError("MPDP requires an even n_cities")
    rng = np.random.default_rng(rng_seed)
    points = rng.random((n_cities + 1, 2))
    cities = points[:n_cities]
    depot = np.tile(points[n_cities], (m_agents, 1))
    return Instance(
        task_kind=task_kind,
        city_coords=cities,
        depot_coords=depot,
        scale_factor=1.0,
        id=f"{task_kind.value}-n{n_cities}-m{m_agents}-s{rng_seed}",
    )


def parse_tsplib(text: str) -> list[tuple[int, float, float]]:
    """Parse the EUC_2D / NODE_COORD_SECTION subset of the TSPLIB format.

    Returns the ordered list of (index, x, y) rows from the coordinate
    section; the row count must equal the DIMENSION header.
    """
    dimension = None
    weight_type = None
    coords: list[tuple[int, float, float]] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.upper() == "EOF":
            continue
        key, _, value = line.partition(":")
        key = key.strip().upper()
        value = value.strip()
        if key == "DIMENSION":
            try:
                dimension = int(value)
            except ValueError as exc:
                raise ParseError(f"line {i}: bad DIMENSION value {value!r}") from exc
        elif key == "EDGE_WEIGHT_TYPE":
            weight_type = value.upper()
        elif key == "NODE_COORD_SECTION":
            if dimension is None:
                raise ParseError(f"line {i}: NODE_COORD_SECTION before DIMENSION")
            if weight_type != "EUC_2D":
                raise UnsupportedFormatError(
                    f"EDGE_WEIGHT_TYPE {weight_type or '(missing)'} not supported; only EUC_2D"
                )
            while i < len(lines):
                row = lines[i].strip()
                i += 1
                if not row or row.upper() in ("EOF", "-1"):
                    break
                parts = row.split()
                if len(parts) != 3:
                    raise ParseError(f"line {i}: expected 'index x y', got {row!r}")
                try:
                    coords.append((int(parts[0]), float(parts[1]), float(parts[2])))
                except ValueError as exc:
                    raise ParseError(f"line {i}: bad coordinate row {row!r}") from exc
    if dimension is None:
        raise ParseError("missing DIMENSION header")
    if weight_type is None:
        raise ParseError("missing EDGE_WEIGHT_TYPE header")
    if weight_type != "EUC_2D":
        raise UnsupportedFormatError(f"EDGE_WEIGHT_TYPE {weight_type} not supported; only EUC_2D")
    if not coords:
        raise ParseError("missing NODE_COORD_SECTION")
    if len(coords) != dimension:
        raise ParseError(f"DIMENSION is {dimension} but coordinate section has {len(coords)} rows")
    return coords


def to_routing_instance(
    coords: Sequence[tuple[float, float]] | np.ndarray,
    m_agents: int,
    task_kind: TaskKind = TaskKind.MTSP,
    instance_id: str = "",
) -> Instance:
    """Turn a raw coordinate list into a normalized instance.

    The first coordinate becomes the shared depot for all agents; the rest are
    cities. Coordinates are min-max normalized into [0,1]^2 preserving aspect
    ratio, with scale_factor = the longer bounding-box side, so that
    reported costs = normalized cost * scale_factor.
    """
    if m_agents < 1:
        raise ValueError("m_agents must be >= 1")
    arr = np.asarray(coords, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("coords must be a sequence of (x, y) pairs")
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 coordinates (a depot plus one city)")
    mins = arr.min(axis=0)
    span = arr.max(axis=0) - mins
    side = float(span.max())
    scale = side if side > 0 else 1.0
    normalized = (arr - mins) / scale
    depot = np.tile(normalized[0], (m_agents, 1))
    return Instance(
        task_kind=TaskKind(task_kind),
        city_coords=normalized[1:],
        depot_coords=depot,
        scale_factor=scale,
        id=instance_id,
    )


def apply_transform(instance: Instance, transform: GeometricTransform, strict: bool = True) -> Instance:
    """Map every city and depot coordinate through `transform`.

    With strict=True (the default, used for inference augmentation) the result
    must stay in the unit square up to BOUNDS_SLACK of numerical noise, which
    is clamped; anything further out raises InvalidTransformError. strict=False
    leaves coordinates unclamped for training-time rotations.
    """
    cities = transform.apply_points(instance.city_coords)
    depots = transform.apply_points(instance.depot_coords)
    if strict:
        cities = _clamp_unit(cities)
        depots = _clamp_unit(depots)
    return Instance(
        task_kind=instance.task_kind,
        city_coords=cities,
        depot_coords=depots,
        scale_factor=instance.scale_factor,
        id=instance.id,
        node_features=instance.node_features,
    )


def _clamp_unit(points: np.ndarray) -> np.ndarray:
    if points.min() < -BOUNDS_SLACK or points.max() > 1.0 + BOUNDS_SLACK:
        worst = float(max(0.0 - points.min(), points.max() - 1.0))
        raise InvalidTransformError(
            f"transform moves coordinates {worst:.3g} outside the unit square"
        )
    return np.clip(points, 0.0, 1.0)


def instance_to_dict(instance: Instance) -> dict:
    """Serialize to the fixed JSON schema (single shared depot)."""
    if not instance.has_shared_depot():
        raise ValueError("instance file format stores a single depot; depots differ")
    return {
        "task": instance.task_kind.value,
        "n": instance.n,
        "m": instance.m,
        "cities": [[float(x), float(y)] for x, y in instance.city_coords],
        "depot": [float(instance.depot_coords[0, 0]), float(instance.depot_coords[0, 1])],
        "scale_factor": float(instance.scale_factor),
        "id": instance.id,
    }


def instance_from_dict(data: dict) -> Instance:
    try:
        task = TaskKind(data["task"])
        cities = np.asarray(data["cities"], dtype=np.float64)
        depot = np.asarray(data["depot"], dtype=np.float64)
        m = int(data["m"])
        scale = float(data["scale_factor"])
        inst_id = str(data["id"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad instance document: {exc}") from exc
    if int(data.get("n", len(cities))) != len(cities):
        raise ParseError("instance document: 'n' does not match the city list")
    return Instance(
        task_kind=task,
        city_coords=cities,
        depot_coords=np.tile(depot, (m, 1)),
        scale_factor=scale,
        id=inst_id,
    )


def save_instance(instance: Instance, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(instance_to_dict(instance), indent=2))
    return path


def load_instance(path: str | Path) -> Instance:
    return instance_from_dict(json.loads(Path(path).read_text()))


def load_instances(paths: Iterable[str | Path]) -> list[Instance]:
    return [load_instance(p) for p in paths]
