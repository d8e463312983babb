"""Optimization loop, optimizers and the binary checkpoint container.

A run is a pure function of (config, dataset): the seed spawns separate
streams for parameter init, batch sampling and mask drawing, and the
checkpoint stores both sampler states so a resumed run replays the
uninterrupted one bit-exactly (arrays are stored as little-endian float32,
matching the single-precision training path).
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import objective as obj
from .autodiff import Tensor
from .data import BatchSpec, Dataset, sample_batch
from .errors import CheckpointError, ConfigurationError, TrainingDiverged
from .masks import MaskStrategy
from .network import PROFILES, GaitGLModel

MAGIC = b"GGLCKPT1"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    profile: str = "toy"
    batch_p: int = 4
    batch_k: int = 4
    frames: int = 30
    iterations: int = 500
    optimizer: str = "adam"  # 'adam' | 'sgd'
    lr: float = 1e-3
    seed: int = 0
    precision: str = "single"
    mask_kind: str = "strip_v"
    mask_ratio: float = 0.2
    head: str = "gem"
    alpha: float = 1.0
    beta: float = 1.0
    p_init: float = 6.5
    margin: float = 0.2
    triplet_reduction: str = "mean-all"
    paper_sign: bool = False
    final_glcl_b: bool = False
    eval_mask: str = "none"
    checkpoint_interval: int = 0  # 0: only at the end
    log_interval: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.profile not in PROFILES:
            raise ConfigurationError(
                f"unknown profile {self.profile!r}, expected one of {sorted(PROFILES)}")
        if self.precision not in ("single", "double"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")

    def backbone_config(self):
        factory = PROFILES[self.profile]
        kwargs = dict(
            mask=MaskStrategy(self.mask_kind, self.mask_ratio),
            head=self.head, alpha=self.alpha, beta=self.beta,
            p_init=self.p_init, eval_mask=self.eval_mask)
        if self.profile != "large":
            return factory(final_b=self.final_glcl_b, **kwargs)
        return factory(**kwargs)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with (0.9, 0.999, 1e-8)."""

    kind = "adam"

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        out = {}
        for p in self.params:
            out[f"opt.m.{p.name}"] = self.m[p.name]
            out[f"opt.v.{p.name}"] = self.v[p.name]
        return out

    def load_state_arrays(self, arrays):
        for p in self.params:
            self.m[p.name] = arrays[f"opt.m.{p.name}"].astype(p.data.dtype)
            self.v[p.name] = arrays[f"opt.v.{p.name}"].astype(p.data.dtype)

    def meta(self):
        return {"kind": self.kind, "step": self.t}

    def load_meta(self, meta):
        self.t = int(meta["step"])


class MomentumSGD:
    """SGD with momentum 0.9: v <- mu*v + g, p <- p - lr*v."""

    kind = "sgd"

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.mu = momentum
        self.t = 0
        self.vel = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        for p in self.params:
            v = self.vel[p.name]
            v *= self.mu
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        return {f"opt.vel.{p.name}": self.vel[p.name] for p in self.params}

    def load_state_arrays(self, arrays):
        for p in self.params:
            self.vel[p.name] = arrays[f"opt.vel.{p.name}"].astype(p.data.dtype)

    def meta(self):
        return {"kind": self.kind, "step": self.t}

    def load_meta(self, meta):
        self.t = int(meta["step"])


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr)
    return MomentumSGD(params, lr)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _encode_arrays(arrays: dict) -> bytes:
    chunks = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def write_checkpoint(path, arrays: dict, header: dict) -> None:
    header = dict(header)
    header["version"] = FORMAT_VERSION
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hjson)))
        fh.write(hjson)
        fh.write(_encode_arrays(arrays))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def read_checkpoint(path):
    """Returns (header dict, arrays dict of float32); validates container."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"bad magic header in {path}")
    (hlen,) = struct.unpack("<I", r.take(4))
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('version')}")
    (count,) = struct.unpack("<I", r.take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2))
        name = r.take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1))
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        arrays[name] = data.copy()
    return header, arrays


def model_state_arrays(model: GaitGLModel, include_classifier=True) -> dict:
    arrays = {}
    for name, p in model.named_parameters().items():
        if not include_classifier and name.startswith("classifier."):
            continue
        arrays[name] = p.data
    return arrays


def apply_model_state(model: GaitGLModel, arrays: dict) -> None:
    """Copy arrays into the model's params; classifier entries may be absent."""
    named = model.named_parameters()
    for name in sorted(named):
        p = named[name]
        if name not in arrays:
            if name.startswith("classifier."):
                continue
            raise CheckpointError(f"checkpoint is missing array {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"shape mismatch for array {name!r}: checkpoint has "
                f"{tuple(arr.shape)}, model expects {tuple(p.data.shape)}")
        p.data[...] = arr.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GaitGLModel
    history: list = field(default_factory=list)  # dicts: iteration/tri/cse/total/wall_ms
    checkpoint_path: str | None = None
    subjects: list = field(default_factory=list)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _param_norm_report(model: GaitGLModel) -> dict:
    return {name: float(np.linalg.norm(p.data))
            for name, p in model.named_parameters().items()}


def save_training_checkpoint(path, model, optimizer, iteration, batch_rng,
                             mask_rng, cfg: TrainConfig,
                             include_classifier=True) -> None:
    arrays = model_state_arrays(model, include_classifier)
    if include_classifier:
        arrays.update(optimizer.state_arrays())
    header = {
        "iteration": iteration,
        "optimizer": optimizer.meta() if include_classifier else None,
        "rng": {"batch": _rng_state(batch_rng), "mask": _rng_state(mask_rng)},
        "config": asdict(cfg),
        "num_classes": (model.classifier.data.shape[2]
                        if model.classifier is not None and include_classifier else None),
    }
    write_checkpoint(path, arrays, header)


def train(ds: Dataset, cfg: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    """Run the optimization loop; reproducible from (cfg, dataset)."""
    from pathlib import Path

    ad.set_default_precision(cfg.precision)
    dtype = ad.default_dtype()
    subjects = ds.subjects()
    num_classes = len(subjects)
    spec = BatchSpec(cfg.batch_p, cfg.batch_k, cfg.frames)

    init_ss, batch_ss, mask_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    model = GaitGLModel(cfg.backbone_config(), np.random.default_rng(init_ss),
                        num_classes=num_classes, dtype=dtype)
    optimizer = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    batch_rng = np.random.default_rng(batch_ss)
    mask_rng = np.random.default_rng(mask_ss)
    start_iter = 0

    if resume is not None:
        header, arrays = read_checkpoint(resume)
        apply_model_state(model, arrays)
        optimizer.load_state_arrays(arrays)
        optimizer.load_meta(header["optimizer"])
        batch_rng = _restore_rng(header["rng"]["batch"])
        mask_rng = _restore_rng(header["rng"]["mask"])
        start_iter = int(header["iteration"])

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.log", "a")

    result = TrainResult(model=model, subjects=subjects)
    try:
        for it in range(start_iter + 1, cfg.iterations + 1):
            t0 = time.perf_counter()
            batch, labels = sample_batch(ds, spec, batch_rng, dtype=dtype)
            x = Tensor(batch)
            emb = model.embed_batch(x, mask_rng, training=True)
            logits = model.logits(emb)
            tri = obj.triplet_ba(emb, labels, cfg.margin,
                                 cfg.triplet_reduction, cfg.paper_sign)
            cse = obj.cross_entropy(logits, labels)
            total = obj.combined(tri, cse)
            tri_v, cse_v, total_v = tri.item(), cse.item(), total.item()
            if not np.isfinite(total_v):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it} "
                    f"(tri={tri_v}, cse={cse_v})",
                    iteration=it,
                    report={"batch": it, "param_norms": _param_norm_report(model)})
            ad.backward(total)
            optimizer.step()
            optimizer.zero_grad()
            wall_ms = (time.perf_counter() - t0) * 1e3
            rec = {"iteration": it, "tri": tri_v, "cse": cse_v,
                   "total": total_v, "wall_ms": wall_ms}
            result.history.append(rec)
            if log_fh is not None:
                log_fh.write(f"iteration={it} tri={tri_v:.6f} cse={cse_v:.6f} "
                             f"total={total_v:.6f} wall_ms={wall_ms:.1f}\n")
                if it % max(cfg.log_interval, 1) == 0:
                    log_fh.flush()
            if out_dir is not None and cfg.checkpoint_interval > 0 \
                    and it % cfg.checkpoint_interval == 0:
                save_training_checkpoint(out_dir / f"checkpoint_{it:06d}.ckpt",
                                         model, optimizer, it, batch_rng,
                                         mask_rng, cfg)
        if out_dir is not None:
            final = out_dir / "checkpoint_final.ckpt"
            save_training_checkpoint(final, model, optimizer, cfg.iterations,
                                     batch_rng, mask_rng, cfg)
            result.checkpoint_path = str(final)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
