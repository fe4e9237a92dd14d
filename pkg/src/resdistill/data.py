"""Paired high/low-resolution datasets, bilinear degradation and synthetic data.

Every sample carries a high-resolution view and a deterministically
downsampled low-resolution view sharing label and id. Datasets are stored as
one compressed file per sample under a directory per class, described by a
checksummed plain-text manifest.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

BILINEAR = "bilinear"
NATIVE = "native"
BILINEAR_UPSAMPLE = "bilinear_upsample"

MANIFEST_NAME = "manifest.txt"


def degrade(x_h: torch.Tensor, factor: int, method: str = BILINEAR) -> torch.Tensor:
    """Downsample a [C, H, W] image by an integer factor.

    Bilinear with half-pixel-aligned sampling centers; deterministic and
    range-preserving.
    """
    if method != BILINEAR:
        raise ValueError(f"unknown degradation method: {method!r}")
    c, h, w = x_h.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by factor {factor}")
    out = F.interpolate(x_h.unsqueeze(0), size=(h // factor, w // factor),
                        mode="bilinear", align_corners=False, antialias=False)
    return out.squeeze(0)


def restore_for_student(x_l: torch.Tensor, target_size: int,
                        mode: str = NATIVE) -> torch.Tensor:
    """Prepare a low-resolution image for a student with a fixed input size."""
    if mode == NATIVE:
        return x_l
    if mode == BILINEAR_UPSAMPLE:
        out = F.interpolate(x_l.unsqueeze(0), size=(target_size, target_size),
                            mode="bilinear", align_corners=False)
        return out.squeeze(0)
    raise ValueError(f"unknown restore mode: {mode!r}")


@dataclass
class PairedSample:
    x_h: torch.Tensor
    x_l: torch.Tensor
    label: int
    sample_id: int


def _upsample_grid(grid: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(grid).unsqueeze(0).unsqueeze(0)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out.squeeze().numpy()


def make_synthetic(classes: int, per_class: int, hi_res: int = 32, seed: int = 5,
                   factor: int = 4, noise: float = 0.18,
                   max_shift: int = 2) -> List[PairedSample]:
    """Seeded synthetic corpus of class-specific patterns at two scales.

    Each class mixes a coarse blob layout (partially surviving downsampling)
    with a fine texture (mostly destroyed at low resolution); samples add a
    random cyclic shift plus pixel noise. Classes are linearly separable at
    high resolution by construction.
    """
    if classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    rng = np.random.default_rng(seed)
    bases = []
    for _ in range(classes):
        coarse = _upsample_grid(rng.random((4, 4), dtype=np.float64), hi_res)
        fine = _upsample_grid(rng.random((hi_res // 2, hi_res // 2), dtype=np.float64), hi_res)
        base = 0.25 + 0.2 * coarse + 0.35 * fine
        bases.append(base)
    samples: List[PairedSample] = []
    sample_id = 0
    for label in range(classes):
        for _ in range(per_class):
            img = bases[label]
            if max_shift > 0:
                dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
                img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
            img = img + noise * rng.standard_normal((hi_res, hi_res))
            x_h = torch.from_numpy(np.clip(img, 0.0, 1.0)).to(torch.float32).unsqueeze(0)
            samples.append(PairedSample(x_h=x_h, x_l=degrade(x_h, factor),
                                        label=label, sample_id=sample_id))
            sample_id += 1
    return samples


@dataclass
class DatasetManifest:
    root: str
    split: str
    classes: int
    hi_res: int
    lo_res: int
    factor: int
    degrade_method: str = BILINEAR
    student_input: str = NATIVE
    checksum: str = ""
    files: List[Tuple[str, int, int, str]] = field(default_factory=list)  # path, label, id, sha256

    def compute_checksum(self) -> str:
        h = hashlib.sha256()
        for path, label, sid, digest in sorted(self.files):
            h.update(f"{path} {label} {sid} {digest}\n".encode())
        return h.hexdigest()


def _write_manifest(manifest: DatasetManifest, path: Path):
    lines = [
        f"split: {manifest.split}",
        f"classes: {manifest.classes}",
        f"hi_res: {manifest.hi_res}",
        f"lo_res: {manifest.lo_res}",
        f"factor: {manifest.factor}",
        f"degrade_method: {manifest.degrade_method}",
        f"student_input: {manifest.student_input}",
        f"checksum: {manifest.checksum}",
        "files:",
    ]
    for rel, label, sid, digest in manifest.files:
        lines.append(f"  {rel} {label} {sid} {digest}")
    path.write_text("\n".join(lines) + "\n")


def _parse_manifest(path: Path) -> DatasetManifest:
    fields = {}
    files: List[Tuple[str, int, int, str]] = []
    in_files = False
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        if raw.strip() == "files:":
            in_files = True
            continue
        if in_files:
            parts = raw.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: malformed file entry: {raw!r}")
            files.append((parts[0], int(parts[1]), int(parts[2]), parts[3]))
        else:
            key, _, value = raw.partition(":")
            fields[key.strip()] = value.strip()
    return DatasetManifest(
        root=str(path.parent), split=fields["split"], classes=int(fields["classes"]),
        hi_res=int(fields["hi_res"]), lo_res=int(fields["lo_res"]),
        factor=int(fields["factor"]), degrade_method=fields["degrade_method"],
        student_input=fields["student_input"], checksum=fields["checksum"],
        files=files)


def save_dataset(samples: List[PairedSample], root, split: str, factor: int,
                 student_input: str = NATIVE) -> DatasetManifest:
    """Write one compressed file per sample under a directory per class."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    classes = max(s.label for s in samples) + 1
    hi_res = samples[0].x_h.shape[-1]
    manifest = DatasetManifest(root=str(root), split=split, classes=classes,
                               hi_res=hi_res, lo_res=hi_res // factor,
                               factor=factor, student_input=student_input)
    for s in samples:
        cls_dir = root / f"class_{s.label:04d}"
        cls_dir.mkdir(exist_ok=True)
        rel = f"class_{s.label:04d}/sample_{s.sample_id:06d}.npz"
        buf = io.BytesIO()
        np.savez_compressed(buf, x_h=s.x_h.numpy())
        payload = buf.getvalue()
        (root / rel).write_bytes(payload)
        manifest.files.append((rel, s.label, s.sample_id, hashlib.sha256(payload).hexdigest()))
    manifest.checksum = manifest.compute_checksum()
    _write_manifest(manifest, root / MANIFEST_NAME)
    return manifest


def load_dataset(root, verify: bool = True) -> Tuple[DatasetManifest, List[PairedSample]]:
    """Load a dataset directory; low-res views are rebuilt via degrade()."""
    root = Path(root)
    manifest = _parse_manifest(root / MANIFEST_NAME)
    if verify and manifest.checksum != manifest.compute_checksum():
        raise ValueError(f"manifest checksum mismatch under {root}")
    samples = []
    for rel, label, sid, digest in manifest.files:
        payload = (root / rel).read_bytes()
        if verify and hashlib.sha256(payload).hexdigest() != digest:
            raise ValueError(f"checksum mismatch for {rel}")
        x_h = torch.from_numpy(np.load(io.BytesIO(payload))["x_h"])
        samples.append(PairedSample(x_h=x_h, x_l=degrade(x_h, manifest.factor,
                                                         manifest.degrade_method),
                                    label=label, sample_id=sid))
    return manifest, samples


def load_pairs_protocol(path) -> List[Tuple[int, int, bool]]:
    """Parse a verification protocol of `id_a id_b {0,1}` lines."""
    pairs: List[Tuple[int, int, bool]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split()
        try:
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError
            pairs.append((int(parts[0]), int(parts[1]), parts[2] == "1"))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed pair line: {raw!r}") from None
    return pairs


def split_samples(samples: List[PairedSample], train_per_class: int):
    """Per-class prefix split into train and test lists."""
    seen: dict = {}
    train, test = [], []
    for s in samples:
        k = seen.get(s.label, 0)
        (train if k < train_per_class else test).append(s)
        seen[s.label] = k + 1
    return train, test
