"""Annotation protocols, label-set partitions, and marginalization algebra.

A protocol fixes the leaf classes (here: background + 7 brain tissues).
A partially annotated dataset groups leaves into super-classes; such a
grouping is a partition of the leaf set, encoded as a binary K x C
marginalization matrix that maps leaf probabilities to partial-label
probabilities by within-set summation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class LabelSetError(ValueError):
    pass


@dataclass(frozen=True)
class LabelProtocol:
    name: str
    leaf_classes: tuple[tuple[int, str], ...]
    background_id: int = 0

    def __post_init__(self):
        ids = [i for i, _ in self.leaf_classes]
        names = [n for _, n in self.leaf_classes]
        if ids != list(range(len(ids))):
            raise LabelSetError(f"leaf ids must be contiguous 0..C-1, got {ids}")
        if len(set(names)) != len(names):
            raise LabelSetError("leaf class names must be unique")
        if self.background_id not in ids:
            raise LabelSetError(f"background id {self.background_id} is not a leaf id")

    @property
    def num_classes(self) -> int:
        return len(self.leaf_classes)

    def class_name(self, leaf_id: int) -> str:
        return self.leaf_classes[leaf_id][1]


@dataclass(frozen=True)
class LabelSetMapping:
    """Partition of a protocol's leaves into annotated label sets."""

    name: str
    protocol: LabelProtocol
    partial_labels: tuple[tuple[int, frozenset[int]], ...]

    def __post_init__(self):
        ids = [k for k, _ in self.partial_labels]
        if ids != list(range(len(ids))):
            raise LabelSetError(f"partial ids must be contiguous 0..K-1, got {ids}")
        sets = tuple((k, frozenset(s)) for k, s in self.partial_labels)
        object.__setattr__(self, "partial_labels", sets)

    @property
    def num_partial(self) -> int:
        return len(self.partial_labels)

    def leaf_set(self, partial_id: int) -> frozenset[int]:
        return self.partial_labels[partial_id][1]

    def singleton_leaves(self) -> dict[int, int]:
        """partial_id -> leaf_id for every singleton set."""
        return {k: next(iter(s)) for k, s in self.partial_labels if len(s) == 1}


@dataclass(frozen=True)
class MarginalizationMatrix:
    phi: np.ndarray  # K x C binary

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.ndim != 2:
            raise LabelSetError("phi must be 2D")
        if not np.all((phi == 0) | (phi == 1)):
            raise LabelSetError("phi must be binary")
        if not np.all(phi.sum(axis=0) == 1):
            raise LabelSetError("every leaf must belong to exactly one set")
        object.__setattr__(self, "phi", phi)

    @property
    def K(self) -> int:
        return self.phi.shape[0]

    @property
    def C(self) -> int:
        return self.phi.shape[1]


def validate_partition(mapping: LabelSetMapping) -> None:
    """Raise unless the mapping's label sets partition the leaf set."""
    all_leaves = set(range(mapping.protocol.num_classes))
    seen: dict[int, int] = {}
    for k, leaf_set in mapping.partial_labels:
        bad = leaf_set - all_leaves
        if bad:
            raise LabelSetError(
                f"mapping {mapping.name!r}: set {k} references unknown leaves {sorted(bad)}"
            )
        for leaf in leaf_set:
            if leaf in seen:
                raise LabelSetError(
                    f"mapping {mapping.name!r}: leaf {leaf} appears in sets "
                    f"{seen[leaf]} and {k}"
                )
            seen[leaf] = k
    uncovered = all_leaves - set(seen)
    if uncovered:
        raise LabelSetError(
            f"mapping {mapping.name!r}: leaves {sorted(uncovered)} are in no set"
        )


def marginalization_matrix(mapping: LabelSetMapping) -> MarginalizationMatrix:
    validate_partition(mapping)
    phi = np.zeros((mapping.num_partial, mapping.protocol.num_classes))
    for k, leaf_set in mapping.partial_labels:
        phi[k, sorted(leaf_set)] = 1.0
    return MarginalizationMatrix(phi)


def marginalize_probs(p: np.ndarray, phi: MarginalizationMatrix) -> np.ndarray:
    """Sum leaf probabilities within each label set: q = phi . p.

    p has the class axis first, any spatial axes after.
    """
    p = np.asarray(p)
    if np.any(p < 0):
        raise LabelSetError("probabilities must be non-negative")
    if p.shape[0] != phi.C:
        raise LabelSetError(f"class axis {p.shape[0]} does not match phi with C={phi.C}")
    return np.tensordot(phi.phi, p, axes=(1, 0))


# ---------------------------------------------------------------------------
# built-in protocol: background + 7 perinatal brain tissue types

CANONICAL_LEAVES = (
    (0, "background"),
    (1, "extra_axial_csf"),
    (2, "cortical_gm"),
    (3, "white_matter"),
    (4, "ventricular_system"),
    (5, "cerebellum"),
    (6, "deep_gm"),
    (7, "brainstem"),
)


def canonical_protocol() -> LabelProtocol:
    return LabelProtocol(name="feta", leaf_classes=CANONICAL_LEAVES, background_id=0)


def feta_full_mapping(protocol: LabelProtocol | None = None) -> LabelSetMapping:
    """Identity partition: every leaf annotated individually."""
    protocol = protocol or canonical_protocol()
    sets = tuple((i, frozenset({i})) for i in range(protocol.num_classes))
    return LabelSetMapping(name="feta_full", protocol=protocol, partial_labels=sets)


def dhcp_partial_mapping(protocol: LabelProtocol | None = None) -> LabelSetMapping:
    """Neonatal-style partial annotation: WM, ventricles, cerebellum, and the
    rest of the brain pooled into one set, background from the brain mask."""
    protocol = protocol or canonical_protocol()
    sets = (
        (0, frozenset({0})),
        (1, frozenset({3})),
        (2, frozenset({4})),
        (3, frozenset({5})),
        (4, frozenset({1, 2, 6, 7})),
    )
    return LabelSetMapping(name="dhcp_partial", protocol=protocol, partial_labels=sets)


class MappingRegistry:
    """Mutable name -> LabelSetMapping registry used by manifests and training."""

    def __init__(self):
        self._protocols: dict[str, LabelProtocol] = {}
        self._mappings: dict[str, LabelSetMapping] = {}

    def register_protocol(self, protocol: LabelProtocol) -> None:
        self._protocols[protocol.name] = protocol

    def register(self, mapping: LabelSetMapping) -> None:
        validate_partition(mapping)
        if mapping.protocol.name not in self._protocols:
            self.register_protocol(mapping.protocol)
        self._mappings[mapping.name] = mapping

    def get(self, name: str) -> LabelSetMapping:
        try:
            return self._mappings[name]
        except KeyError:
            raise LabelSetError(f"unknown label-set mapping {name!r}") from None

    def protocol(self, name: str) -> LabelProtocol:
        try:
            return self._protocols[name]
        except KeyError:
            raise LabelSetError(f"unknown protocol {name!r}") from None

    def mapping_names(self):
        return sorted(self._mappings)

    def __contains__(self, name: str) -> bool:
        return name in self._mappings


def builtin_registry() -> MappingRegistry:
    reg = MappingRegistry()
    protocol = canonical_protocol()
    reg.register_protocol(protocol)
    reg.register(feta_full_mapping(protocol))
    reg.register(dhcp_partial_mapping(protocol))
    return reg


def load_labelset_config(path, registry: MappingRegistry | None = None) -> MappingRegistry:
    """Extend a registry with protocols/mappings from a JSON config file.

    Schema:
      {"protocols": [{"name": ..., "background": 0, "leaves": [[id, name], ...]}],
       "mappings":  [{"name": ..., "protocol": ..., "sets": {"set_name": [leaf, ...], ...}}]}
    Set order in the file fixes the partial ids.
    """
    registry = registry or builtin_registry()
    with open(path) as f:
        cfg = json.load(f)
    for p in cfg.get("protocols", []):
        leaves = tuple((int(i), str(n)) for i, n in p["leaves"])
        registry.register_protocol(
            LabelProtocol(name=p["name"], leaf_classes=leaves, background_id=int(p.get("background", 0)))
        )
    for m in cfg.get("mappings", []):
        protocol = registry.protocol(m["protocol"])
        sets = tuple(
            (k, frozenset(int(x) for x in leaves))
            for k, (_name, leaves) in enumerate(m["sets"].items())
        )
        registry.register(LabelSetMapping(name=m["name"], protocol=protocol, partial_labels=sets))
    return registry
