"""Scene class catalogs: stuff/thing split and grouped part channels.

Part channel 0 is always the shared background channel of the part head.
Class id 0 is reserved for void and never appears in a catalog.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence, TextIO

import numpy as np

STUFF = "stuff"
THING = "thing"
VOID_ID = 0
BACKGROUND_CHANNEL = 0
CATALOG_HEADER = "JPPF-CATALOG v1"


class CatalogError(ValueError):
    """Raised when a catalog cannot be built or parsed."""


class UnknownClassError(KeyError):
    """Raised when a class id is not part of the catalog."""


@dataclass(frozen=True)
class ClassDef:
    class_id: int
    name: str
    kind: str
    part_channel_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "part_channel_ids", tuple(int(c) for c in self.part_channel_ids))

    @property
    def is_thing(self) -> bool:
        return self.kind == THING

    @property
    def is_partitionable(self) -> bool:
        return len(self.part_channel_ids) > 0


@dataclass(frozen=True)
class ClassCatalog:
    """An immutable scene taxonomy.

    Semantic head channel ``i`` corresponds to ``classes[i]``; classes are kept
    in the order given (presets use ids ``1..N`` so channel == id - 1).
    """

    classes: tuple[ClassDef, ...]
    n_part_channels: int
    name: str = "custom"
    part_names: tuple[str, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        index = {}
        for i, c in enumerate(self.classes):
            index.setdefault(c.class_id, i)
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_classes(cls, classes: Iterable[ClassDef], name: str = "custom",
                     part_names: Sequence[str] = ()) -> "ClassCatalog":
        classes = tuple(classes)
        channels = {c for d in classes for c in d.part_channel_ids}
        return cls(classes, 1 + len(channels), name=name, part_names=tuple(part_names))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def stuff_classes(self) -> tuple[ClassDef, ...]:
        return tuple(c for c in self.classes if c.kind == STUFF)

    @property
    def thing_classes(self) -> tuple[ClassDef, ...]:
        return tuple(c for c in self.classes if c.kind == THING)

    @property
    def n_stuff(self) -> int:
        return len(self.stuff_classes)

    @property
    def n_things(self) -> int:
        return len(self.thing_classes)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(c.class_id for c in self.classes)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._index

    def get(self, class_id: int) -> ClassDef:
        try:
            return self.classes[self._index[int(class_id)]]
        except KeyError:
            raise UnknownClassError(f"class id {class_id} is not in catalog {self.name!r}") from None

    def channel_of(self, class_id: int) -> int:
        """Semantic-head channel index holding ``class_id``."""
        self.get(class_id)
        return self._index[int(class_id)]

    def by_name(self, name: str) -> ClassDef:
        for c in self.classes:
            if c.name == name:
                return c
        raise UnknownClassError(f"no class named {name!r} in catalog {self.name!r}")

    def part_name(self, channel: int) -> str:
        if channel == BACKGROUND_CHANNEL:
            return "background"
        if channel < len(self.part_names):
            return self.part_names[channel]
        return f"part{channel}"

    def lookup_tables(self) -> dict[str, np.ndarray]:
        """Dense per-class-id tables used by the vectorized paths.

        Arrays are indexed by class id (size ``max_id + 1``) so that a
        semantic plane can index them directly; void (0) is all-false.
        """
        size = max(self.class_ids, default=0) + 1
        is_thing = np.zeros(size, bool)
        is_stuff = np.zeros(size, bool)
        partitionable = np.zeros(size, bool)
        allowed = np.zeros((size, max(self.n_part_channels, 1)), bool)
        for c in self.classes:
            is_thing[c.class_id] = c.kind == THING
            is_stuff[c.class_id] = c.kind == STUFF
            partitionable[c.class_id] = c.is_partitionable
            for p in c.part_channel_ids:
                if 0 <= p < allowed.shape[1]:
                    allowed[c.class_id, p] = True
        return {"is_thing": is_thing, "is_stuff": is_stuff,
                "partitionable": partitionable, "allowed_parts": allowed}


def part_channels_for_class(catalog: ClassCatalog, class_id: int) -> list[int]:
    """Part-head channels that describe ``class_id``.

    Non-partitionable classes map to the single background channel.
    """
    cdef = catalog.get(class_id)
    if cdef.part_channel_ids:
        return list(cdef.part_channel_ids)
    return [BACKGROUND_CHANNEL]


def validate_catalog(catalog: ClassCatalog) -> list[str]:
    """Return one message per violated invariant; empty means valid."""
    report = []
    seen = set()
    for c in catalog.classes:
        if c.class_id in seen:
            report.append(f"class {c.class_id}: duplicate class_id")
        seen.add(c.class_id)
        if c.class_id < 1:
            report.append(f"class {c.class_id}: class_id must be >= 1 (0 is void)")
        if c.kind not in (STUFF, THING):
            report.append(f"class {c.class_id}: unknown kind {c.kind!r}")
        if c.kind == STUFF and c.part_channel_ids:
            report.append(f"class {c.class_id}: stuff class lists part channels")
        if any(p < 1 for p in c.part_channel_ids):
            report.append(f"class {c.class_id}: part channel ids must be >= 1 (0 is background)")
        if len(set(c.part_channel_ids)) != len(c.part_channel_ids):
            report.append(f"class {c.class_id}: repeated part channel id")
    channels = {p for c in catalog.classes for p in c.part_channel_ids}
    if catalog.n_part_channels != 1 + len(channels):
        report.append(f"n_part_channels is {catalog.n_part_channels}, expected {1 + len(channels)}")
    expected = set(range(1, 1 + len(channels)))
    if channels != expected:
        report.append(f"part channels {sorted(channels)} are not the contiguous range 1..{len(channels)}")
    return report


# CPP: Cityscapes 19-class taxonomy, ids shifted by one so that 0 is void.
_CPP_STUFF = ("road", "sidewalk", "building", "wall", "fence", "pole",
              "traffic light", "traffic sign", "vegetation", "terrain", "sky")
_CPP_THINGS = ("person", "rider", "car", "truck", "bus", "train", "motorcycle", "bicycle")
_CPP_HUMAN_PARTS = ("head", "torso", "arms", "legs")
_CPP_VEHICLE_PARTS = ("chassis", "window", "wheel", "light", "license plate")
_CPP_PARTITIONED = {"person": "human", "rider": "human", "car": "vehicle",
                    "truck": "vehicle", "bus": "vehicle"}

# PPP: the 59-class Pascal-Context subset with per-class part lists (58 parts).
_PPP_CLASSES = (
    "aeroplane", "bag", "bed", "bedclothes", "bench", "bicycle", "bird", "boat",
    "book", "bottle", "building", "bus", "cabinet", "car", "cat", "ceiling",
    "chair", "cloth", "computer", "cow", "cup", "curtain", "dog", "door", "fence",
    "floor", "flower", "food", "grass", "ground", "horse", "keyboard", "light",
    "motorbike", "mountain", "mouse", "person", "plate", "platform", "pottedplant",
    "road", "rock", "sheep", "shelves", "sidewalk", "sign", "sky", "snow", "sofa",
    "table", "track", "train", "tree", "truck", "tvmonitor", "wall", "water",
    "window", "wood",
)
_PPP_THINGS = {"aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
               "chair", "cow", "table", "dog", "horse", "motorbike", "person",
               "pottedplant", "sheep", "sofa", "train", "tvmonitor"}
_PPP_PARTS = {
    "aeroplane": ("body", "engine", "wing", "stern", "wheel"),
    "bicycle": ("wheel", "body"),
    "bird": ("head", "wing", "leg", "torso"),
    "bottle": ("cap", "body"),
    "bus": ("window", "wheel", "body"),
    "car": ("window", "wheel", "light", "plate", "body"),
    "cat": ("head", "leg", "tail", "torso"),
    "cow": ("head", "leg", "tail", "torso"),
    "dog": ("head", "leg", "tail", "torso"),
    "horse": ("head", "leg", "tail", "torso"),
    "motorbike": ("wheel", "body"),
    "person": ("head", "torso", "lower arm", "upper arm", "lower leg", "upper leg"),
    "pottedplant": ("pot", "plant"),
    "sheep": ("head", "leg", "torso"),
    "train": ("head", "head side", "head roof", "coach", "coach side", "coach roof"),
    "tvmonitor": ("screen", "frame"),
}


def _build_cpp() -> ClassCatalog:
    part_names = ["background"]
    groups = {}
    for group, names in (("human", _CPP_HUMAN_PARTS), ("vehicle", _CPP_VEHICLE_PARTS)):
        start = len(part_names)
        part_names.extend(f"{group} {n}" for n in names)
        groups[group] = tuple(range(start, start + len(names)))
    classes = []
    for i, name in enumerate(_CPP_STUFF + _CPP_THINGS, start=1):
        kind = STUFF if name in _CPP_STUFF else THING
        parts = groups[_CPP_PARTITIONED[name]] if name in _CPP_PARTITIONED else ()
        classes.append(ClassDef(i, name, kind, parts))
    return ClassCatalog(tuple(classes), len(part_names), name="cpp", part_names=tuple(part_names))


def _build_ppp() -> ClassCatalog:
    part_names = ["background"]
    classes = []
    for i, name in enumerate(_PPP_CLASSES, start=1):
        parts = ()
        if name in _PPP_PARTS:
            start = len(part_names)
            part_names.extend(f"{name} {p}" for p in _PPP_PARTS[name])
            parts = tuple(range(start, len(part_names)))
        classes.append(ClassDef(i, name, THING if name in _PPP_THINGS else STUFF, parts))
    return ClassCatalog(tuple(classes), len(part_names), name="ppp", part_names=tuple(part_names))


@lru_cache(maxsize=None)
def preset_catalog(name: str) -> ClassCatalog:
    """Compiled-in catalogs: ``"cpp"`` (19 classes) or ``"ppp"`` (59 classes)."""
    builders = {"cpp": _build_cpp, "ppp": _build_ppp}
    if name not in builders:
        raise CatalogError(f"unknown preset {name!r}; expected one of {sorted(builders)}")
    catalog = builders[name]()
    problems = validate_catalog(catalog)
    if problems:  # pragma: no cover - presets are valid by construction
        raise CatalogError("; ".join(problems))
    return catalog


def parse_catalog(stream: TextIO, name: str = "custom") -> ClassCatalog:
    """Parse the ``JPPF-CATALOG v1`` text format and validate the result."""
    lines = [ln.split("#", 1)[0].strip() for ln in stream]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != CATALOG_HEADER:
        raise CatalogError(f"missing catalog header {CATALOG_HEADER!r}")
    classes = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = [f.strip() for f in line.split(";")]
        if len(fields) != 4:
            raise CatalogError(f"catalog record {lineno}: expected 4 ';'-separated fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
            parts = tuple(int(p) for p in fields[3].split(",") if p.strip())
        except ValueError as exc:
            raise CatalogError(f"catalog record {lineno}: {exc}") from None
        classes.append(ClassDef(class_id, fields[1], fields[2], parts))
    catalog = ClassCatalog.from_classes(classes, name=name)
    problems = validate_catalog(catalog)
    if problems:
        raise CatalogError("invalid catalog: " + "; ".join(problems))
    return catalog


def format_catalog(catalog: ClassCatalog) -> str:
    out = io.StringIO()
    out.write(CATALOG_HEADER + "\n")
    out.write("# class_id;name;kind;part_channel_ids\n")
    for c in catalog.classes:
        out.write(f"{c.class_id};{c.name};{c.kind};{','.join(map(str, c.part_channel_ids))}\n")
    return out.getvalue()


def load_catalog(source: str | os.PathLike | ClassCatalog) -> ClassCatalog:
    """Resolve a preset name, a catalog file path, or pass a catalog through."""
    if isinstance(source, ClassCatalog):
        return source
    if str(source) in ("cpp", "ppp"):
        return preset_catalog(str(source))
    if not os.path.exists(source):
        raise CatalogError(f"catalog {source!r} is neither a preset nor an existing file")
    with open(source, encoding="utf-8") as fh:
        return parse_catalog(fh, name=os.path.basename(str(source)))
