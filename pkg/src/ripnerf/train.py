"""Optimization: area-weighted loss, AdamW, multi-step schedule, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .field import FieldConfig, FieldModel
from .render import (
    OccupancyGrid,
    OccupancySchedule,
    RayBatch,
    RenderOptions,
    composite,
    composite_backward,
    default_step,
    field_density_fn,
    march,
    render_rays,
    sample_gaussians,
    update_occupancy,
)

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15
RIPMAP_LR_SCALE = 10.0


class NumericError(FloatingPointError):
    """Non-finite gradient or loss; training is aborted rather than skipped."""


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_rays: int = 1024
    lr_base: float = 2e-3
    lr_ripmap_multiplier: float = RIPMAP_LR_SCALE
    weight_decay: float = 1e-5
    lr_milestones: list | None = None  # None: scaled to the iteration budget
    lr_gamma: float = 0.6
    seed: int = 0
    loss: str = "area_l2"           # "l2" or "area_l2"
    occupancy_resolution: int = 64
    occupancy_every: int = 16
    occupancy_warmup: int = 64
    march_steps: int = 128          # samples along the grid diagonal
    max_samples: int = 1024
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_rays <= 0:
            raise ValueError("iterations must be >= 0 and batch_rays > 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_milestones must be strictly increasing")
        if ms and self.iterations and ms[-1] >= self.iterations:
            raise ValueError("lr_milestones must be < iterations")
        if self.loss not in ("l2", "area_l2"):
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def milestones(self):
        if self.lr_milestones is None:
            return self.scaled_milestones(self.iterations)
        return [int(m) for m in self.lr_milestones]

    @staticmethod
    def scaled_milestones(iterations):
        """The 60k/90k/100k/108k-of-120k milestone shape at another budget."""
        ms = {int(round(iterations * f)) for f in (0.5, 0.75, 100 / 120, 0.9)}
        return sorted(m for m in ms if 0 < m < iterations)


# ---------------------------------------------------------------------------
# loss


def area_weighted_loss(pred, target, ratio):
    """Per-ray ``ratio^2 * ||pred - target||^2``; returns ``(batch_mean, grad_pred)``."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(target)
    w = np.asarray(ratio, dtype=np.float64) ** 2
    per_ray = w * np.sum(diff * diff, axis=-1)
    n = max(per_ray.size, 1)
    loss = float(per_ray.mean()) if per_ray.size else 0.0
    grad = (2.0 / n) * w[..., None] * diff
    return loss, grad


def lr_at(config: TrainConfig, iteration):
    drops = sum(1 for m in config.milestones if m <= iteration)
    return config.lr_base * config.lr_gamma ** drops


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params, weight_decay=1e-5, betas=(BETA1, BETA2), eps=EPS):
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lrs):
        """Update ``params`` in place; ``lrs`` maps name -> learning rate."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.count_nonzero(~np.isfinite(g)))
                raise NumericError(f"non-finite gradient in {k!r} ({bad} entries) "
                                   f"at step {self.step_count + 1}")
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            lr = lrs[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p *= 1.0 - lr * self.weight_decay
            denom = np.sqrt(v) / math.sqrt(bc2) + self.eps
            p -= (lr / bc1) * m / denom

    def state(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}


def param_lrs(params, config: TrainConfig, iteration):
    base = lr_at(config, iteration)
    return {k: base * (config.lr_ripmap_multiplier if k == "ripmaps" else 1.0)
            for k in params}


# ---------------------------------------------------------------------------
# batched training step


def pixel_loss_and_grads(model: FieldModel, rays: RayBatch, target, ratio, grid,
                         step, max_samples, background, area=True):
    """Full forward/backward for one batch of rays.

    Returns ``(loss, grads, rgb)``.
    """
    samples = march(rays, grid, step, max_samples, radius=model.cfg.scene_radius)
    ray_idx, means, covs, deltas = sample_gaussians(rays, samples)
    n_rays, k = samples.mask.shape
    dirs = rays.directions[ray_idx]
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    bg = np.asarray(background, dtype=np.float64)
    if len(ray_idx):
        dens, col, cache = model.forward(means, covs, dirs)
    else:
        dens = np.zeros(0)
        col = np.zeros((0, 3))
        cache = None
    mask = samples.mask
    d_tau = np.zeros((n_rays, k))
    d_delta = np.zeros((n_rays, k))
    d_col = np.zeros((n_rays, k, 3))
    d_tau[mask] = dens
    d_delta[mask] = deltas
    d_col[mask] = col
    rgb, _, ccache = composite(d_tau, d_delta, d_col, bg)
    loss, g_rgb = area_weighted_loss(rgb, target, ratio if area else np.ones(n_rays))
    g_tau, g_col = composite_backward(ccache, d_delta, g_rgb)
    if cache is None:
        grads = {k_: np.zeros_like(v) for k_, v in model.parameters().items()}
    else:
        grads = model.backward(cache, g_tau[mask], g_col[mask])
    return loss, grads, rgb


def mse_to_psnr(mse):
    return 99.0 if mse < 1e-10 else float(-10.0 * np.log10(mse))


class Trainer:
    """Owns the model, optimizer, occupancy grid and RNG for one run."""

    def __init__(self, field_cfg: FieldConfig, train_cfg: TrainConfig, dataset,
                 background=(1.0, 1.0, 1.0), dtype=np.float32):
        self.field_cfg = field_cfg
        self.cfg = train_cfg
        self.background = tuple(float(b) for b in background)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.model = FieldModel(field_cfg, self.rng, dtype)
        self.optimizer = AdamW(self.model.parameters(), train_cfg.weight_decay)
        self.grid = OccupancyGrid(train_cfg.occupancy_resolution, field_cfg.scene_radius)
        self.schedule = OccupancySchedule(train_cfg.occupancy_every, train_cfg.occupancy_warmup)
        self.iteration = 0
        self.dataset = dataset
        self.rays = dataset.ray_table(self.background) if dataset is not None else None

    @property
    def step_size(self):
        return default_step(self.field_cfg.scene_radius, self.cfg.march_steps)

    def render_options(self, **kw):
        return RenderOptions(step=self.step_size, max_samples=self.cfg.max_samples,
                             background=self.background, **kw)

    def batch(self):
        n = len(self.rays["radii"])
        idx = self.rng.integers(0, n, self.cfg.batch_rays)
        t = self.rays
        rays = RayBatch(t["origins"][idx], t["directions"][idx], t["radii"][idx])
        return rays, t["rgb"][idx], t["ratio"][idx]

    def step(self):
        """One iteration; returns the batch loss."""
        update_occupancy(self.grid, field_density_fn(self.model, self.grid), self.iteration,
                         self.rng, self.schedule)
        rays, target, ratio = self.batch()
        loss, grads, _ = pixel_loss_and_grads(
            self.model, rays, target, ratio, self.grid, self.step_size, self.cfg.max_samples,
            self.background, area=self.cfg.loss == "area_l2")
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at iteration {self.iteration}")
        params = self.model.parameters()
        self.optimizer.step(params, grads, param_lrs(params, self.cfg, self.iteration))
        self.model.mark_dirty()
        self.iteration += 1
        return loss

    def train(self, iterations=None, callback=None):
        """Run until ``iterations`` total (default: the configured budget)."""
        target = self.cfg.iterations if iterations is None else iterations
        trace = []
        while self.iteration < target:
            loss = self.step()
            trace.append(loss)
            if callback is not None:
                callback(self, loss)
        return trace

    def render_view(self, camera, opts=None):
        from .render import generate_rays

        opts = opts or self.render_options()
        rgb, _ = render_rays(self.model, generate_rays(camera), self.grid, opts)
        return rgb.reshape(camera.height, camera.width, 3)

    def evaluate_psnr(self, views):
        """Mean PSNR over views (each view's MSE converted separately)."""
        if not views:
            return float("nan")
        scores = []
        for v in views:
            pred = self.render_view(v.camera)
            scores.append(mse_to_psnr(float(np.mean((pred - v.rgb(self.background)) ** 2))))
        return float(np.mean(scores))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"RIPF"
FORMAT_VERSION = 1
SECTIONS = (b"CONF", b"STAT", b"RIPM", b"MLPW", b"MOMS", b"OCCG", b"RNGS")


class CheckpointError(ValueError):
    def __init__(self, section, message):
        super().__init__(f"checkpoint section {section}: {message}")
        self.section = section


def config_document(field_cfg: FieldConfig, train_cfg: TrainConfig, extra=None):
    doc = {"field": asdict(field_cfg), "train": asdict(train_cfg)}
    if extra:
        doc.update(extra)
    return doc


def config_hash(doc):
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()


def _pack_array(buf, arr, dtype="<f4"):
    arr = np.asarray(arr)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _unpack_array(view, pos, dtype="<f4"):
    (ndim,) = struct.unpack_from("<I", view, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", view, pos)
    pos += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    size = n * np.dtype(dtype).itemsize
    if pos + size > len(view):
        raise ValueError("array payload truncated")
    arr = np.frombuffer(view, dtype=dtype, count=n, offset=pos).reshape(shape).copy()
    return arr, pos + size


def _mlp_section(mlp):
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(mlp)))
    for name, arr in mlp.items():
        key = name.encode()
        buf.write(struct.pack("<I", len(key)) + key)
        _pack_array(buf, arr)
    return buf.getvalue()


def _read_mlp(payload):
    (count,) = struct.unpack_from("<I", payload, 0)
    pos = 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        key = payload[pos:pos + klen].decode()
        pos += klen
        out[key], pos = _unpack_array(payload, pos)
    return out


def _ripmap_section(ripmaps):
    buf = io.BytesIO()
    p, h, w, c = ripmaps.shape
    buf.write(struct.pack("<4I", p, h, w, c))
    buf.write(np.ascontiguousarray(ripmaps, dtype="<f4").tobytes())
    return buf.getvalue()


def _read_ripmaps(payload):
    p, h, w, c = struct.unpack_from("<4I", payload, 0)
    n = p * h * w * c
    if len(payload) != 16 + 4 * n:
        raise ValueError("ripmap payload size mismatch")
    return np.frombuffer(payload, dtype="<f4", count=n, offset=16).reshape(p, h, w, c).copy()


def model_bytes(model: FieldModel):
    """Serialized size of the learnable parameters (ripmap and MLP sections)."""
    return len(_ripmap_section(model.ripmaps)) + len(_mlp_section(model.mlp))


def save_checkpoint(trainer: Trainer, path, extra_config=None):
    """Write ``RIPF`` header, config hash, then length-prefixed sections."""
    doc = config_document(trainer.field_cfg, trainer.cfg, extra_config)
    model = trainer.model
    opt = trainer.optimizer
    mom_buf = io.BytesIO()
    mom_buf.write(struct.pack("<Q", opt.step_count))
    mom_buf.write(_mlp_section({f"m.{k}": v for k, v in opt.m.items()}
                               | {f"v.{k}": v for k, v in opt.v.items()}))
    occ = io.BytesIO()
    _pack_array(occ, trainer.grid.density, "<f8")
    _pack_array(occ, trainer.grid.occupied.astype(np.uint8), "<u1")
    payloads = {
        b"CONF": json.dumps(doc, sort_keys=True).encode(),
        b"STAT": json.dumps({"iteration": trainer.iteration}).encode(),
        b"RIPM": _ripmap_section(model.ripmaps),
        b"MLPW": _mlp_section(model.mlp),
        b"MOMS": mom_buf.getvalue(),
        b"OCCG": occ.getvalue(),
        b"RNGS": json.dumps(trainer.rng.bit_generator.state).encode(),
    }
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(config_hash(doc))
    for tag in SECTIONS:
        data = payloads[tag]
        out.write(tag + struct.pack("<Q", len(data)))
        out.write(data)
    Path(path).write_bytes(out.getvalue())
    return len(payloads[b"RIPM"]) + len(payloads[b"MLPW"])


def read_checkpoint(path):
    """Parse a checkpoint into a dict of decoded sections (no model built)."""
    raw = Path(path).read_bytes()
    if len(raw) < 40 or raw[:4] != MAGIC:
        raise CheckpointError("header", "bad magic or truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError("header", f"unsupported format version {version}")
    digest = raw[8:40]
    pos = 40
    sections = {}
    for tag in SECTIONS:
        name = tag.decode()
        if pos + 12 > len(raw):
            raise CheckpointError(name, "truncated before section header")
        if raw[pos:pos + 4] != tag:
            raise CheckpointError(name, f"expected tag {name}, found {raw[pos:pos + 4]!r}")
        (length,) = struct.unpack_from("<Q", raw, pos + 4)
        pos += 12
        if pos + length > len(raw):
            raise CheckpointError(name, "truncated payload")
        sections[tag] = raw[pos:pos + length]
        pos += length
    out = {}
    try:
        out["config"] = json.loads(sections[b"CONF"])
    except ValueError as exc:
        raise CheckpointError("CONF", str(exc)) from exc
    if config_hash(out["config"]) != digest:
        raise CheckpointError("CONF", "config hash does not match header")
    decoders = {
        b"STAT": lambda b: json.loads(b),
        b"RIPM": _read_ripmaps,
        b"MLPW": _read_mlp,
        b"MOMS": lambda b: (struct.unpack_from("<Q", b, 0)[0], _read_mlp(b[8:])),
        b"OCCG": _read_occupancy,
        b"RNGS": lambda b: json.loads(b),
    }
    for tag, fn in decoders.items():
        try:
            out[tag.decode()] = fn(sections[tag])
        except (ValueError, struct.error, KeyError) as exc:
            raise CheckpointError(tag.decode(), str(exc)) from exc
    out["hash"] = digest
    return out


def _read_occupancy(b):
    density, pos = _unpack_array(b, 0, "<f8")
    occupied, _ = _unpack_array(b, pos, "<u1")
    return density, occupied.astype(bool)


def load_checkpoint(path, dataset=None, expected_config=None, dtype=np.float32):
    """Rebuild a :class:`Trainer` from ``path``.

    ``expected_config`` (a config document) must hash identically if given.
    """
    ck = read_checkpoint(path)
    if expected_config is not None and config_hash(expected_config) != ck["hash"]:
        raise CheckpointError("CONF", "config hash mismatch with the requested configuration")
    doc = ck["config"]
    field_cfg = FieldConfig(**doc["field"])
    train_cfg = TrainConfig(**doc["train"])
    bg = tuple(doc.get("render", {}).get("background", (1.0, 1.0, 1.0)))
    trainer = Trainer(field_cfg, train_cfg, dataset, background=bg, dtype=dtype)
    model = trainer.model
    if ck["RIPM"].shape != model.ripmaps.shape:
        raise CheckpointError("RIPM", f"shape {ck['RIPM'].shape} != {model.ripmaps.shape}")
    params = {"ripmaps": ck["RIPM"]}
    for k, v in ck["MLPW"].items():
        if k not in model.mlp or v.shape != model.mlp[k].shape:
            raise CheckpointError("MLPW", f"unexpected tensor {k} {v.shape}")
        params[f"mlp.{k}"] = v
    model.set_parameters(params)
    step, moms = ck["MOMS"]
    opt = AdamW(model.parameters(), train_cfg.weight_decay)
    opt.step_count = int(step)
    for k in opt.m:
        opt.m[k] = moms[f"m.{k}"].astype(model.dtype)
        opt.v[k] = moms[f"v.{k}"].astype(model.dtype)
    trainer.optimizer = opt
    density, occupied = ck["OCCG"]
    if density.shape != trainer.grid.density.shape:
        raise CheckpointError("OCCG", "occupancy resolution mismatch")
    trainer.grid.density = density
    trainer.grid.occupied = occupied
    trainer.rng.bit_generator.state = ck["RNGS"]
    trainer.iteration = int(ck["STAT"]["iteration"])
    return trainer
