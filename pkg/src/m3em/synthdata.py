"""Two-domain multi-modal synthetic dataset with planted transferable structure.

Each sample carries rgb/flow spatial maps and an audio vector.  Class signal
lives on a small set of informative channels, disjoint across modalities, as
per-(verb, noun) Gaussian centroids; for the spatial modalities the signal is
confined to a shared rectangle where rgb and flow co-occur.  Every channel
carries Gaussian noise of scale 1/snr.  The target domain differs from the
source only on NON-informative channels: their noise is scaled by a
multiplier and a fixed signed offset pattern of the configured bias magnitude
is added (per channel for audio, per channel and cell for the spatial
modalities, so it survives at cell level but averages out under global
pooling).  A model that learns to shut those channels out can therefore close
the domain gap completely.

Feature files (one per split and modality): magic ``MMFT``, u32 version,
modality name, per-sample dims, u32 sample count, u8 label flag, then f64
features in sample-major order followed by (verb, noun) u32 pairs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .binio import (
    FormatError,
    check_magic,
    check_version,
    read_f64_array,
    read_str,
    read_u8,
    read_u32,
    read_u32_array,
    write_f64_array,
    write_str,
    write_u8,
    write_u32,
    write_u32_array,
)
from .rng import Rng

MAGIC = b"MMFT"
VERSION = 1

MODALITIES = ("rgb", "flow", "audio")
SPLIT_NAMES = ("source", "target")


@dataclass(frozen=True)
class DomainShift:
    """Perturbation of target-domain non-informative channels."""

    bias: float = 0.8
    noise_scale: float = 2.0


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    seed: int = 7
    n_source: int = 2000
    n_target: int = 2000
    verb_classes: int = 5
    noun_classes: int = 5
    channels: int = 16
    height: int = 8
    width: int = 8
    informative: dict[str, tuple[int, ...]] = field(default_factory=lambda: {
        "rgb": (0, 1, 2, 3),
        "flow": (4, 5, 6, 7),
        "audio": (8, 9, 10, 11),
    })
    shared_region: tuple[int, int, int, int] = (2, 2, 6, 6)  # i0, j0, i1, j1 (exclusive)
    shift: DomainShift = field(default_factory=DomainShift)
    snr: float = 1.0

    def validate(self) -> None:
        if self.n_source < 0 or self.n_target < 0:
            raise ValueError("sample counts must be non-negative")
        if self.verb_classes < 1 or self.noun_classes < 1:
            raise ValueError("class counts must be positive")
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ValueError("feature dims must be positive")
        if self.snr <= 0:
            raise ValueError(f"snr must be positive, got {self.snr}")
        if set(self.informative) != set(MODALITIES):
            raise ValueError(f"informative sets must cover exactly {MODALITIES}")
        used: set[int] = set()
        for modality, channels in self.informative.items():
            for ch in channels:
                if not (0 <= ch < self.channels):
                    raise ValueError(f"{modality} informative channel {ch} out of range")
                if ch in used:
                    raise ValueError(f"informative channel {ch} reused across modalities")
                used.add(ch)
        i0, j0, i1, j1 = self.shared_region
        if not (0 <= i0 < i1 <= self.height and 0 <= j0 < j1 <= self.width):
            raise ValueError(f"shared region {self.shared_region} outside "
                             f"{self.height}x{self.width} grid")

    @property
    def noise_sigma(self) -> float:
        return 1.0 / self.snr


@dataclass
class Split:
    """All samples of one domain, stacked: (n,c,h,w) maps and (n,c) vectors."""

    rgb: np.ndarray
    flow: np.ndarray
    audio: np.ndarray
    verbs: np.ndarray
    nouns: np.ndarray

    @property
    def n(self) -> int:
        return len(self.verbs)

    def modality(self, name: str) -> np.ndarray:
        return {"rgb": self.rgb, "flow": self.flow, "audio": self.audio}[name]


def _centroids(rng: Rng, spec: SyntheticDatasetSpec, modality: str) -> np.ndarray:
    k = len(spec.informative[modality])
    return rng.split("centroids", modality).normal(
        (spec.verb_classes, spec.noun_classes, k))


def _shift_pattern(rng: Rng, spec: "SyntheticDatasetSpec", modality: str,
                   noninformative: np.ndarray) -> np.ndarray:
    """Fixed random sign pattern scaled by the bias magnitude.

    Audio gets one sign per channel; the spatial modalities get one sign per
    (channel, cell) so the offset pattern survives at cell level (where a
    probe on raw features sees it) while averaging out under global pooling.
    """
    stream = rng.split("shift_signs", modality)
    if modality == "audio":
        u = stream.uniform(len(noninformative))
    else:
        u = stream.uniform((len(noninformative), spec.height, spec.width))
    return np.where(u < 0.5, -1.0, 1.0)


def _generate_split(spec: SyntheticDatasetSpec, domain: str, n: int,
                    centroids: dict[str, np.ndarray],
                    signs: dict[str, np.ndarray]) -> Split:
    rng = Rng(spec.seed).split("split", domain)
    verbs = rng.split("verbs").integers(n, spec.verb_classes)
    nouns = rng.split("nouns").integers(n, spec.noun_classes)
    sigma = spec.noise_sigma
    shifted = domain == "target"

    arrays: dict[str, np.ndarray] = {}
    for modality in MODALITIES:
        inf = np.array(spec.informative[modality], dtype=np.int64)
        noninf = np.array([ch for ch in range(spec.channels) if ch not in set(inf.tolist())],
                          dtype=np.int64)
        spatial = modality != "audio"
        shape = (n, spec.channels, spec.height, spec.width) if spatial else (n, spec.channels)
        x = rng.split("noise", modality).normal(shape) * sigma
        if shifted and len(noninf) > 0:
            scale_extra = spec.shift.noise_scale - 1.0
            if spatial:
                x[:, noninf, :, :] += (rng.split("shift_noise", modality)
                                       .normal((n, len(noninf), spec.height, spec.width))
                                       * (sigma * scale_extra))
                x[:, noninf, :, :] += (spec.shift.bias * signs[modality])[None, :, :, :]
            else:
                x[:, noninf] += (rng.split("shift_noise", modality)
                                 .normal((n, len(noninf))) * (sigma * scale_extra))
                x[:, noninf] += (spec.shift.bias * signs[modality])[None, :]
        signal = centroids[modality][verbs, nouns]  # (n, k)
        if spatial:
            i0, j0, i1, j1 = spec.shared_region
            region = np.zeros((spec.height, spec.width))
            region[i0:i1, j0:j1] = 1.0
            x[:, inf, :, :] += signal[:, :, None, None] * region[None, None, :, :]
        else:
            x[:, inf] += signal
        arrays[modality] = x

    return Split(rgb=arrays["rgb"], flow=arrays["flow"], audio=arrays["audio"],
                 verbs=verbs, nouns=nouns)


def generate(spec: SyntheticDatasetSpec) -> tuple[Split, Split]:
    """Deterministically build the (source, target) splits for a spec."""
    spec.validate()
    rng = Rng(spec.seed)
    centroids = {m: _centroids(rng, spec, m) for m in MODALITIES}
    signs = {}
    for modality in MODALITIES:
        noninf = np.array([ch for ch in range(spec.channels)
                           if ch not in set(spec.informative[modality])], dtype=np.int64)
        signs[modality] = _shift_pattern(rng, spec, modality, noninf)
    source = _generate_split(spec, "source", spec.n_source, centroids, signs)
    target = _generate_split(spec, "target", spec.n_target, centroids, signs)
    return source, target


def null_shift(spec: SyntheticDatasetSpec) -> SyntheticDatasetSpec:
    """Copy of the dataset description with the domain shift removed."""
    return replace(spec, shift=DomainShift(bias=0.0, noise_scale=1.0))


# ---------------------------------------------------------------------------
# feature file I/O


def write_modality(path: str | os.PathLike, modality: str, features: np.ndarray,
                   verbs: np.ndarray | None = None,
                   nouns: np.ndarray | None = None) -> None:
    """Write one modality's stacked features (+ optional labels) to a file."""
    n = features.shape[0]
    dims = features.shape[1:]
    has_labels = verbs is not None and nouns is not None
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        write_u32(fh, VERSION)
        write_str(fh, modality)
        write_u32(fh, len(dims))
        write_u32_array(fh, list(dims))
        write_u32(fh, n)
        write_u8(fh, 1 if has_labels else 0)
        write_f64_array(fh, features)
        if has_labels:
            pairs = np.stack([verbs, nouns], axis=1)
            write_u32_array(fh, pairs)


def read_modality(path: str | os.PathLike) -> tuple[str, np.ndarray,
                                                    np.ndarray | None, np.ndarray | None]:
    """Read one modality file; returns (name, features, verbs, nouns)."""
    with open(path, "rb") as fh:
        check_magic(fh, MAGIC)
        check_version(fh, VERSION)
        modality = read_str(fh, "modality name")
        rank = read_u32(fh, "feature rank")
        dims = tuple(int(d) for d in read_u32_array(fh, rank, "feature dims"))
        n = read_u32(fh, "sample count")
        has_labels = read_u8(fh, "label flag")
        count = n
        for d in dims:
            count *= d
        features = read_f64_array(fh, count, "feature payload").reshape((n,) + dims)
        verbs = nouns = None
        if has_labels:
            pairs = read_u32_array(fh, 2 * n, "label payload").reshape(n, 2)
            verbs, nouns = pairs[:, 0], pairs[:, 1]
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"unexpected trailing bytes in {os.fspath(path)}")
    return modality, features, verbs, nouns


def split_filename(split_name: str, modality: str) -> str:
    return f"{split_name}_{modality}.mmft"


def write_split(directory: str | os.PathLike, split_name: str, split: Split) -> list[str]:
    """Write three modality files for a split; returns the paths written."""
    paths = []
    for modality in MODALITIES:
        path = os.path.join(os.fspath(directory), split_filename(split_name, modality))
        write_modality(path, modality, split.modality(modality), split.verbs, split.nouns)
        paths.append(path)
    return paths


def read_split(directory: str | os.PathLike, split_name: str) -> Split:
    """Read a split back from its three modality files, validating consistency."""
    data: dict[str, np.ndarray] = {}
    verbs = nouns = None
    for modality in MODALITIES:
        path = os.path.join(os.fspath(directory), split_filename(split_name, modality))
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing feature file: {path}")
        name, features, file_verbs, file_nouns = read_modality(path)
        if name != modality:
            raise FormatError(f"{path} holds modality {name!r}, expected {modality!r}")
        if file_verbs is None:
            raise FormatError(f"{path} carries no labels")
        if verbs is None:
            verbs, nouns = file_verbs, file_nouns
        elif not (np.array_equal(verbs, file_verbs) and np.array_equal(nouns, file_nouns)):
            raise FormatError(f"labels in {path} disagree with the other modality files")
        data[modality] = features
    return Split(rgb=data["rgb"], flow=data["flow"], audio=data["audio"],
                 verbs=verbs, nouns=nouns)
