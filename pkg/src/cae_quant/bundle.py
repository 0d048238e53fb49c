"""Tensor bundles: the on-disk layer problems the CLI reads and writes.

Layout::

    b"QBND1" | u64 LE manifest length | manifest JSON (UTF-8) | float32 LE blocks

Blocks are row-major and follow manifest order. Every layer carries ``W``
(m x n) and ``X`` (n x k); ``Xtilde`` (n x k) is optional and reads as ``X``
when absent. Tensors stay float32 in the bundle; :meth:`TensorBundle.problem`
upcasts to float64.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError

from cae_quant.calibrator import LayerProblem
from cae_quant.errors import (
    BadMagicError,
    BundleManifestError,
    BundleShapeError,
    TruncatedBundleError,
)

MAGIC = b"QBND1"
_LENGTH = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")

Role = Literal["W", "X", "Xtilde"]
Tensor = NDArray[np.float32]


class TensorEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    role: Role
    layer: int = Field(ge=0)
    shape: tuple[PositiveInt, PositiveInt]

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


class BundleManifest(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    schema_version: Literal[1] = Field(default=1, alias="schema")
    tensors: list[TensorEntry]


def tensor_name(layer: int, role: Role) -> str:
    return f"layer{layer}.{role}"


@dataclass(frozen=True, eq=False)
class TensorBundle:
    """A manifest plus its float32 tensors, keyed by entry name."""

    manifest: BundleManifest
    tensors: dict[str, Tensor]

    def __post_init__(self) -> None:
        _check_layers(self.manifest)
        for entry in self.manifest.tensors:
            data = self.tensors.get(entry.name)
            if data is None or data.shape != entry.shape:
                got = None if data is None else data.shape
                raise BundleShapeError(f"{entry.name}: manifest says {entry.shape}, data is {got}")

    @classmethod
    def from_layers(
        cls, layers: Sequence[tuple[ArrayLike, ArrayLike, ArrayLike | None]]
    ) -> TensorBundle:
        """Build a bundle from ``(W, X, X̃ or None)`` per layer, cast to float32."""
        entries: list[TensorEntry] = []
        tensors: dict[str, Tensor] = {}
        for layer, (w, x, x_fp) in enumerate(layers):
            roles: list[tuple[Role, ArrayLike | None]] = [("W", w), ("X", x), ("Xtilde", x_fp)]
            for role, arr in roles:
                if arr is None:
                    continue
                data = np.ascontiguousarray(arr, dtype=np.float32)
                if data.ndim != 2:
                    raise BundleShapeError(f"layer {layer} {role} must be 2-D, got {data.shape}")
                name = tensor_name(layer, role)
                rows, cols = data.shape
                entries.append(TensorEntry(name=name, role=role, layer=layer, shape=(rows, cols)))
                tensors[name] = data
        return cls(manifest=BundleManifest(tensors=entries), tensors=tensors)

    @property
    def layers(self) -> int:
        return 1 + max(entry.layer for entry in self.manifest.tensors)

    def get(self, layer: int, role: Role) -> Tensor | None:
        return self.tensors.get(tensor_name(layer, role))

    def problem(self, layer: int) -> LayerProblem:
        """Layer ``layer`` as a float64 problem; a missing ``Xtilde`` aliases ``X``."""
        w, x = self.get(layer, "W"), self.get(layer, "X")
        if w is None or x is None:
            raise BundleShapeError(f"layer {layer} is not in the bundle")
        return LayerProblem.create(w, x, self.get(layer, "Xtilde"))


def _check_layers(manifest: BundleManifest) -> None:
    if not manifest.tensors:
        raise BundleShapeError("bundle has no tensors")
    by_layer: dict[int, dict[str, TensorEntry]] = {}
    for entry in manifest.tensors:
        roles = by_layer.setdefault(entry.layer, {})
        if entry.role in roles:
            raise BundleShapeError(f"layer {entry.layer} has two {entry.role} tensors")
        roles[entry.role] = entry
    if sorted(by_layer) != list(range(len(by_layer))):
        raise BundleShapeError(f"layer indices must be contiguous from 0, got {sorted(by_layer)}")
    for layer, roles in sorted(by_layer.items()):
        if "W" not in roles or "X" not in roles:
            raise BundleShapeError(f"layer {layer} needs both W and X")
        (m, n), (n_x, k) = roles["W"].shape, roles["X"].shape
        if min(m, n, k) < 1 or n_x != n:
            raise BundleShapeError(f"layer {layer}: W {(m, n)} and X {(n_x, k)} are inconsistent")
        if "Xtilde" in roles and roles["Xtilde"].shape != (n, k):
            raise BundleShapeError(
                f"layer {layer}: Xtilde {roles['Xtilde'].shape} must match X {(n, k)}"
            )


# --------------------------------------------------------------------------- #
# Encoding
# --------------------------------------------------------------------------- #
def serialize(bundle: TensorBundle) -> bytes:
    manifest = bundle.manifest.model_dump_json(by_alias=True).encode("utf-8")
    blocks = [
        np.ascontiguousarray(bundle.tensors[e.name], dtype=_DTYPE).tobytes()
        for e in bundle.manifest.tensors
    ]
    return b"".join([MAGIC, _LENGTH.pack(len(manifest)), manifest, *blocks])


def parse(data: bytes) -> TensorBundle:
    """Decode bundle bytes, raising a distinct error per failure class."""
    head = len(MAGIC)
    prefix = data[:head]
    if prefix != MAGIC[: len(prefix)]:
        raise BadMagicError(f"not a tensor bundle (magic {prefix!r})")
    if len(data) < head + _LENGTH.size:
        raise TruncatedBundleError(f"bundle ends after {len(data)} bytes, inside the header")
    (length,) = _LENGTH.unpack_from(data, head)
    offset = head + _LENGTH.size
    if len(data) < offset + length:
        raise TruncatedBundleError(f"manifest of {length} bytes runs past the end of the bundle")
    try:
        manifest = BundleManifest.model_validate_json(data[offset : offset + length])
    except ValidationError as exc:
        if any("shape" in err["loc"] for err in exc.errors()):
            raise BundleShapeError("manifest lists a tensor shape that is not positive") from exc
        raise BundleManifestError(f"manifest is invalid: {exc.error_count()} error(s)") from exc
    offset += length

    tensors: dict[str, Tensor] = {}
    for entry in manifest.tensors:
        nbytes = entry.size * _DTYPE.itemsize
        if len(data) < offset + nbytes:
            raise TruncatedBundleError(f"payload for {entry.name} is cut short")
        block = np.frombuffer(data, dtype=_DTYPE, count=entry.size, offset=offset)
        tensors[entry.name] = block.reshape(entry.shape).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise BundleManifestError(f"{len(data) - offset} trailing bytes after the last tensor")
    return TensorBundle(manifest=manifest, tensors=tensors)


def bundle_checksum(data: bytes | TensorBundle) -> str:
    """SHA-256 hex digest of the serialized bundle."""
    raw = serialize(data) if isinstance(data, TensorBundle) else data
    return hashlib.sha256(raw).hexdigest()


def save_bundle(bundle: TensorBundle, path: Path) -> str:
    """Write ``bundle`` atomically and return its checksum."""
    raw = serialize(bundle)
    write_atomic(path, raw)
    return bundle_checksum(raw)


def load_bundle(path: Path) -> TensorBundle:
    return parse(Path(path).read_bytes())


def write_atomic(path: Path, raw: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# --------------------------------------------------------------------------- #
# Synthetic problems
# --------------------------------------------------------------------------- #
def gen_synthetic(seed: int, m: int, n: int, k: int, noise_level: float = 0.0) -> TensorBundle:
    """One seeded layer: ``W``, ``X`` standard normal, ``X̃ = X + noise_level · N``.

    Draw order is W, X, then the noise, from ``numpy.random.default_rng(seed)``.
    """
    if min(m, n, k) < 1:
        raise BundleShapeError(f"dimensions must be >= 1, got m={m} n={n} k={k}")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((m, n))
    x = rng.standard_normal((n, k))
    noise = rng.standard_normal((n, k))
    return TensorBundle.from_layers([(w, x, x + noise_level * noise)])
