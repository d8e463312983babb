"""Silhouette ingest, normalization, synthesis and batch composition.

Frame normalization follows the de facto standard for 64x44 silhouettes:
binarize at 128, crop to the vertical foreground bounding box, center the
foreground centroid horizontally, rescale isotropically to the target
height, then symmetric-crop/zero-pad the width.  Rescaling uses
endpoint-aligned nearest-neighbour sampling so outputs stay binary and a
second normalization pass is a no-op (up to the documented +-1 pixel
centroid rounding).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DatasetError, FrameRejected, SamplingError

log = logging.getLogger(__name__)

CONDITIONS = ("NM", "BG", "CL", "SYNTH")
TARGET_SMALL = (64, 44)
TARGET_LARGE = (128, 88)
FG_THRESHOLD = 128


@dataclass
class SequenceRecord:
    subject_id: str
    condition: str
    view_deg: int
    frames: np.ndarray  # [T, H, W] uint8

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise DatasetError(f"unknown condition {self.condition!r}")
        if len(self.frames) == 0:
            raise DatasetError("sequence has no frames")


@dataclass
class Dataset:
    records: list[SequenceRecord]
    index: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            for i, rec in enumerate(self.records):
                self.index.setdefault(rec.subject_id, []).append(i)

    def subjects(self) -> list[str]:
        return sorted(self.index)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class BatchSpec:
    p: int  # subjects per batch
    k: int  # sequences per subject
    t: int  # frames per sequence

    def __post_init__(self):
        if self.p < 2 or self.k < 2 or self.t < 1:
            raise SamplingError(
                f"batch spec needs P >= 2, K >= 2, T >= 1, got ({self.p}, {self.k}, {self.t})")


# ---------------------------------------------------------------------------
# Frame normalization
# ---------------------------------------------------------------------------

def _resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Endpoint-aligned nearest-neighbour resize (binary-preserving)."""
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    rows = (np.round(np.arange(out_h) * (in_h - 1) / (out_h - 1)).astype(int)
            if out_h > 1 else np.zeros(1, dtype=int))
    cols = (np.round(np.arange(out_w) * (in_w - 1) / (out_w - 1)).astype(int)
            if out_w > 1 else np.zeros(1, dtype=int))
    return img[rows][:, cols]


def _shift_cols(img: np.ndarray, shift: int) -> np.ndarray:
    if shift == 0:
        return img
    out = np.zeros_like(img)
    if shift > 0:
        out[:, shift:] = img[:, :img.shape[1] - shift]
    else:
        out[:, :shift] = img[:, -shift:]
    return out


def normalize_frame(raw: np.ndarray, target=TARGET_SMALL) -> np.ndarray:
    """Normalize one grayscale frame to a centered binary target-size frame.

    Steps: binarize at 128, crop the vertical foreground bounding box,
    rescale isotropically to the target height, symmetric-crop/zero-pad
    the width, then integer-shift so the foreground centroid sits on the
    center column.  Centering happens last, on the target geometry, so a
    second pass reproduces the frame (pixel-center convention: the middle
    of width w is (w - 1) / 2).
    """
    target_h, target_w = target
    mask = np.asarray(raw) >= FG_THRESHOLD
    if not mask.any():
        raise FrameRejected("frame has no foreground after binarization")

    rows = np.flatnonzero(mask.any(axis=1))
    band = mask[rows[0]:rows[-1] + 1, :].astype(np.uint8)

    # Isotropic rescale to the target height.
    scale = target_h / band.shape[0]
    new_w = max(1, int(round(band.shape[1] * scale)))
    scaled = _resize_nearest(band, target_h, new_w)

    # Symmetric width crop/zero-pad.
    out = np.zeros((target_h, target_w), dtype=np.uint8)
    if new_w >= target_w:
        lo = (new_w - target_w) // 2
        out[:, :] = scaled[:, lo:lo + target_w]
    else:
        lo = (target_w - new_w) // 2
        out[:, lo:lo + new_w] = scaled

    # Centroid centering by integer shift.
    cols = out.sum(axis=0)
    if not cols.any():
        raise FrameRejected("foreground lost while rescaling")
    centroid = (cols * np.arange(target_w)).sum() / cols.sum()
    shift = int(np.floor((target_w - 1) / 2.0 - centroid + 0.5))
    return _shift_cols(out, shift) * np.uint8(255)


# ---------------------------------------------------------------------------
# Loading and export
# ---------------------------------------------------------------------------

def _parse_condition(name: str) -> str:
    prefix = name.split("-")[0].upper()
    return prefix if prefix in CONDITIONS else "SYNTH"


def load_dataset(root, target=TARGET_SMALL) -> Dataset:
    """Load root/subject/condition-seq/view/frame-file trees.

    Frames are normalized on load; unreadable or empty frames are skipped
    with a warning and empty leaves are dropped.  Zero records is fatal.
    """
    from pathlib import Path

    root = Path(root)
    records = []
    if root.is_dir():
        for subj_dir in sorted(d for d in root.iterdir() if d.is_dir()):
            for seq_dir in sorted(d for d in subj_dir.iterdir() if d.is_dir()):
                for view_dir in sorted(d for d in seq_dir.iterdir() if d.is_dir()):
                    frames = []
                    for f in sorted(view_dir.iterdir()):
                        if not f.is_file():
                            continue
                        try:
                            with Image.open(f) as im:
                                raw = np.asarray(im.convert("L"))
                            frames.append(normalize_frame(raw, target))
                        except (OSError, FrameRejected) as exc:
                            log.warning("skipping frame %s: %s", f, exc)
                    if not frames:
                        log.warning("skipping empty sequence %s", view_dir)
                        continue
                    try:
                        view = int(view_dir.name)
                    except ValueError:
                        view = 0
                    records.append(SequenceRecord(
                        subject_id=subj_dir.name,
                        condition=_parse_condition(seq_dir.name),
                        view_deg=view,
                        frames=np.stack(frames)))
    if not records:
        raise DatasetError(f"no sequences found under {root}")
    return Dataset(records)


def export_dataset(ds: Dataset, root) -> None:
    """Write the standard directory layout with lossless grayscale PNGs."""
    from pathlib import Path

    root = Path(root)
    seq_counter: dict[tuple, int] = {}
    for rec in ds.records:
        key = (rec.subject_id, rec.condition)
        seq_counter[key] = seq_counter.get(key, 0) + 1
        leaf = (root / rec.subject_id
                / f"{rec.condition.lower()}-{seq_counter[key]:02d}"
                / f"{rec.view_deg:03d}")
        leaf.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(rec.frames):
            Image.fromarray(frame, mode="L").save(leaf / f"{i:03d}.png")


# ---------------------------------------------------------------------------
# Synthetic walkers
# ---------------------------------------------------------------------------

_CANVAS_H, _CANVAS_W = 96, 64


def _render_walker(params: dict, phase: float) -> np.ndarray:
    """One binary frame of an articulated blob: torso ellipse + two legs."""
    h, w = _CANVAS_H, _CANVAS_W
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)

    leg = params["leg_len"]
    hip_y = h - 6 - leg
    cx = w / 2.0

    # Torso ellipse sits on the hips; head circle on top.
    torso_h = params["torso_h"]
    torso_w = torso_h * params["torso_aspect"]
    tcy = hip_y - torso_h / 2.0
    mask |= ((xx - cx) / torso_w) ** 2 + ((yy - tcy) / (torso_h / 2.0)) ** 2 <= 1.0
    head_r = params["head_r"]
    mask |= (xx - cx) ** 2 + (yy - (tcy - torso_h / 2.0 - head_r + 2)) ** 2 <= head_r ** 2

    # Two legs oscillating in antiphase.
    amp = params["stride_amp"]
    for sign in (1.0, -1.0):
        theta = sign * amp * np.sin(phase)
        fx = cx + leg * np.sin(theta)
        fy = hip_y + leg * np.cos(theta)
        # Distance from each pixel to the hip->foot segment.
        dx, dy = fx - cx, fy - hip_y
        seg2 = dx * dx + dy * dy
        t = np.clip(((xx - cx) * dx + (yy - hip_y) * dy) / seg2, 0.0, 1.0)
        dist2 = (xx - (cx + t * dx)) ** 2 + (yy - (hip_y + t * dy)) ** 2
        mask |= dist2 <= params["leg_thick"] ** 2

    return mask


def _boundary_noise(mask: np.ndarray, rng: np.random.Generator, rate: float) -> np.ndarray:
    """Flip a fraction of silhouette-boundary pixels (segmentation jitter)."""
    inner = mask.copy()
    outer = mask.copy()
    for axis in (0, 1):
        for shift in (1, -1):
            rolled = np.roll(mask, shift, axis=axis)
            inner &= rolled
            outer |= rolled
    band = (mask & ~inner) | (outer & ~mask)
    flips = band & (rng.random(mask.shape) < rate)
    return mask ^ flips


def synth_walkers(num_ids: int, seqs_per_id: int, frames: int, seed: int,
                  target=TARGET_SMALL) -> Dataset:
    """Deterministic synthetic silhouette dataset.

    Each identity is an articulated blob whose body proportions are drawn
    once (stratified across identities so a scalar size feature separates
    them); sequences of one identity differ by gait phase and boundary
    pixel noise.  Frames are normalized to the target extents.
    """
    if num_ids < 1 or seqs_per_id < 1 or frames < 1:
        raise SamplingError("synth_walkers requires all counts >= 1")
    root_ss = np.random.SeedSequence(seed)
    id_seeds = root_ss.spawn(num_ids)
    records = []
    for i in range(num_ids):
        id_rng = np.random.default_rng(id_seeds[i])
        size = 0.65 + 0.35 * (i + id_rng.uniform(0.2, 0.8)) / num_ids
        params = {
            "leg_len": 30.0 * size,
            "leg_thick": 2.0 + 2.5 * id_rng.uniform(),
            "torso_h": 34.0 * size * id_rng.uniform(0.9, 1.1),
            "torso_aspect": id_rng.uniform(0.28, 0.42),
            "head_r": 5.0 * size,
            "stride_amp": id_rng.uniform(0.35, 0.65),
            "period": id_rng.uniform(14.0, 22.0),
        }
        for s in range(seqs_per_id):
            seq_rng = np.random.default_rng(np.random.SeedSequence((seed, i, s)))
            phase0 = seq_rng.uniform(0.0, 2 * np.pi)
            seq = []
            for t in range(frames):
                phase = phase0 + 2 * np.pi * t / params["period"]
                mask = _render_walker(params, phase)
                mask = _boundary_noise(mask, seq_rng, rate=0.12)
                seq.append(normalize_frame(mask.astype(np.uint8) * 255, target))
            records.append(SequenceRecord(
                subject_id=f"s{i:03d}", condition="SYNTH", view_deg=0,
                frames=np.stack(seq)))
    return Dataset(records)


# ---------------------------------------------------------------------------
# Batch composition
# ---------------------------------------------------------------------------

def sample_batch(ds: Dataset, spec: BatchSpec, rng: np.random.Generator,
                 dtype=np.float64):
    """Compose one P*K batch: [P*K, 1, T, H, W] in [0, 1] plus labels.

    Subjects are drawn without replacement; sequences per subject with
    replacement when the subject has fewer than K; each sequence
    contributes a random contiguous T-frame window (cyclically repeated
    when shorter than T).  Labels are subject positions in sorted order.
    """
    subjects = ds.subjects()
    if len(subjects) < spec.p:
        raise SamplingError(
            f"need {spec.p} subjects but the dataset has {len(subjects)}")
    chosen = rng.choice(len(subjects), size=spec.p, replace=False)
    clips = []
    labels = []
    h, w = ds.records[0].frames.shape[1:]
    for sidx in chosen:
        positions = ds.index[subjects[sidx]]
        picks = rng.choice(len(positions), size=spec.k, replace=len(positions) < spec.k)
        for pk in picks:
            frames = ds.records[positions[pk]].frames
            n = len(frames)
            if n >= spec.t:
                start = int(rng.integers(0, n - spec.t + 1))
                window = frames[start:start + spec.t]
            else:
                start = int(rng.integers(0, n))
                idx = (start + np.arange(spec.t)) % n
                window = frames[idx]
            clips.append(window)
            labels.append(int(sidx))
    batch = np.stack(clips).astype(dtype) / 255.0
    return batch.reshape(spec.p * spec.k, 1, spec.t, h, w), np.asarray(labels)
