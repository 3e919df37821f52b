"""Alternating-update training loop with checkpointing and determinism.

One Philox counter-based generator drives everything random in a run; its
state is checkpointed, so run-2N and run-N + resume-N are bitwise
identical.  NaN losses halt the run (honest curves beat silently skipped
steps).

Checkpoint byte layout (little-endian throughout):

    magic   8 bytes  b"GANCKPT\\0"
    version u32      (currently 1)
    count   u32      number of entries
    entry:  u16 name length, name (utf-8),
            u8 dtype code (0=f32 1=f64 2=i64 3=u8 4=raw bytes),
            u8 ndim, ndim × u32 dims,
            u64 payload length, payload

Raw-bytes entries carry JSON (config, RNG state).
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .losses import Adam, TTURConfig, hinge_d_loss, hinge_g_loss
from .models import (Generator, Discriminator, GeneratorConfig, DiscriminatorConfig,
                     build_generator, build_discriminator)
from .spectral import freeze_power_iteration, spectral_norm_exact

logger = logging.getLogger(__name__)

MAGIC = b"GANCKPT\x00"
FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2, "u1": 3}


class CheckpointError(RuntimeError):
    pass


class TrainingHalted(RuntimeError):
    """Raised when a loss goes non-finite; carries the context needed for
    collapse analysis."""

    def __init__(self, iteration: int, which: str, value: float, log: "TrainingLog"):
        super().__init__(f"training halted at iteration {iteration}: "
                         f"{which} loss is {value}")
        self.iteration = iteration
        self.which = which
        self.value = value
        self.log = log


# ---- checkpoint container --------------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    buf = io.BytesIO()
    entries: list[tuple[str, object]] = [("meta/json", json.dumps(meta).encode())]
    entries += sorted(arrays.items())
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
    for name, value in entries:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        if isinstance(value, bytes):
            buf.write(struct.pack("<BB", 4, 0))
            buf.write(struct.pack("<Q", len(value)))
            buf.write(value)
            continue
        arr = np.asarray(value)
        kind = arr.dtype.newbyteorder("<").str[1:]
        if kind not in _CODE_FOR_KIND:
            raise CheckpointError(f"entry {name}: unsupported dtype {arr.dtype}")
        code = _CODE_FOR_KIND[kind]
        payload = np.ascontiguousarray(arr.astype(_DTYPE_CODES[code])).tobytes()
        buf.write(struct.pack("<BB", code, arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    view = memoryview(buf)
    pos = 0

    def need(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}: "
                                  f"ran out of bytes reading {what} at offset {pos}")
        piece = view[pos:pos + n]
        pos += n
        return piece

    if bytes(need(8, "magic")) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} != {FORMAT_VERSION}")
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", need(2, "name length"))
        name = bytes(need(nlen, "name")).decode()
        code, ndim = struct.unpack("<BB", need(2, "entry header"))
        dims = [struct.unpack("<I", need(4, "dims"))[0] for _ in range(ndim)]
        (plen,) = struct.unpack("<Q", need(8, "payload length"))
        payload = bytes(need(plen, f"payload of {name}"))
        if code == 4:
            if name == "meta/json":
                meta = json.loads(payload.decode())
            else:
                arrays[name] = np.frombuffer(payload, dtype=np.uint8).copy()
            continue
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: entry {name} has unknown dtype code {code}")
        arrays[name] = np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(dims).copy()
    return arrays, meta


# ---- configuration ---------------------------------------------------------------


@dataclass
class TrainerConfig:
    ttur: TTURConfig = field(default_factory=TTURConfig)
    batch_size: int = 64
    total_iterations: int = 5000
    seed: int = 0
    sn_on_generator: bool = True
    sn_on_discriminator: bool = True
    snapshot_every: int = 500
    metrics_every: int = 500
    resolution: int = 16
    num_classes: int = 4
    base_channels: int = 16
    latent_dim: int = 64
    block_kind: str = "attention"
    block_stages: tuple = (16,)
    attention_reduction: int = 8
    d_leaky_slope: float = 0.0
    metric_samples: int = 256
    data_dir: str = ""
    out_dir: str = ""
    extractor_path: str = ""

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")

    def generator_config(self) -> GeneratorConfig:
        stages = {int(r): self.block_kind for r in self.block_stages} \
            if self.block_kind != "none" else {}
        return GeneratorConfig(latent_dim=self.latent_dim, num_classes=self.num_classes,
                               base_channels=self.base_channels,
                               output_resolution=self.resolution,
                               block_kind_at_stage=stages,
                               attention_reduction=self.attention_reduction,
                               spectral_norm=self.sn_on_generator)

    def discriminator_config(self) -> DiscriminatorConfig:
        stages = {int(r): self.block_kind for r in self.block_stages} \
            if self.block_kind != "none" else {}
        return DiscriminatorConfig(num_classes=self.num_classes,
                                   base_channels=self.base_channels,
                                   input_resolution=self.resolution,
                                   block_kind_at_stage=stages,
                                   attention_reduction=self.attention_reduction,
                                   spectral_norm=self.sn_on_discriminator,
                                   leaky_slope=self.d_leaky_slope)

    def to_flat_dict(self) -> dict:
        d = asdict(self)
        ttur = d.pop("ttur")
        d["lr_g"] = ttur["lr_g"]
        d["lr_d"] = ttur["lr_d"]
        d["d_steps_per_g_step"] = ttur["d_steps_per_g_step"]
        d["block_stages"] = ",".join(str(s) for s in self.block_stages)
        return d

    @staticmethod
    def from_flat_dict(kv: dict) -> "TrainerConfig":
        kv = dict(kv)
        ttur = TTURConfig(lr_g=float(kv.pop("lr_g", 0.0001)),
                          lr_d=float(kv.pop("lr_d", 0.0004)),
                          d_steps_per_g_step=int(kv.pop("d_steps_per_g_step", 1)))
        defaults = TrainerConfig()
        args = {"ttur": ttur}
        for f_name, f_type in (("batch_size", int), ("total_iterations", int), ("seed", int),
                               ("snapshot_every", int), ("metrics_every", int),
                               ("resolution", int), ("num_classes", int),
                               ("base_channels", int), ("latent_dim", int),
                               ("attention_reduction", int), ("metric_samples", int),
                               ("d_leaky_slope", float),
                               ("block_kind", str), ("data_dir", str), ("out_dir", str),
                               ("extractor_path", str)):
            if f_name in kv:
                args[f_name] = f_type(kv.pop(f_name))
        for f_name in ("sn_on_generator", "sn_on_discriminator"):
            if f_name in kv:
                args[f_name] = str(kv.pop(f_name)).strip().lower() in ("1", "true", "yes", "on")
        if "block_stages" in kv:
            raw = str(kv.pop("block_stages")).strip()
            args["block_stages"] = tuple(int(s) for s in raw.split(",") if s) if raw else ()
        if kv:
            raise ValueError(f"unknown config keys: {sorted(kv)}")
        for name, value in args.items():
            setattr(defaults, name, value)
        defaults.__post_init__()
        return defaults

    @staticmethod
    def from_file(path) -> "TrainerConfig":
        return TrainerConfig.from_flat_dict(parse_config_file(path))

    def write(self, path) -> None:
        with open(path, "w") as f:
            for k, v in self.to_flat_dict().items():
                f.write(f"{k} = {v}\n")


def parse_config_file(path) -> dict:
    """Flat `key = value` text: one pair per line, '#' comments."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    kv = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    return kv


# ---- training log ----------------------------------------------------------------

LOG_HEADER = "iter,d_loss,g_loss,fid,is,wall_s"


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (iter, d_loss, g_loss, fid, is, wall_s)
    halted_at: int = -1

    def append(self, iteration: int, d_loss: float, g_loss: float,
               fid: float = float("nan"), is_score: float = float("nan"),
               wall_s: float = 0.0) -> None:
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError(f"log iterations must increase: {iteration} after "
                             f"{self.rows[-1][0]}")
        self.rows.append((iteration, d_loss, g_loss, fid, is_score, wall_s))

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(LOG_HEADER + "\n")
            for row in self.rows:
                f.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r},{row[4]!r},"
                        f"{row[5]:.3f}\n")

    def loss_series(self) -> list[tuple]:
        return [(r[0], r[1], r[2]) for r in self.rows]

    def fid_series(self) -> list[tuple]:
        return [(r[0], r[3]) for r in self.rows if np.isfinite(r[3])]


# ---- the loop --------------------------------------------------------------------


def train_step(real: np.ndarray, labels: np.ndarray, gen: Generator, disc: Discriminator,
               opt_g: Adam, opt_d: Adam, rng: np.random.Generator,
               d_steps: int = 1) -> tuple[float, float]:
    """One alternating update: D on hinge loss with fresh detached fakes
    (repeated d_steps times), then G through a new forward.

    Real and fake scores come from a single concatenated D forward so both
    see identical (once-advanced) spectrally normalized weights.
    """
    b = real.shape[0]
    latent = gen.cfg.latent_dim
    num_classes = gen.cfg.num_classes
    d_loss_val = g_loss_val = 0.0

    for _ in range(d_steps):
        z = rng.standard_normal((b, latent)).astype(np.float32)
        fake_labels = rng.integers(0, num_classes, size=b)
        with T.no_grad(), freeze_power_iteration():
            fake = gen(Tensor(z), fake_labels)
        both = Tensor(np.concatenate([real, fake.data]))
        both_labels = np.concatenate([labels, fake_labels])
        scores = disc(both, both_labels)
        d_real = T.reshape(scores, (2 * b,))
        d_loss = hinge_d_loss(_slice_rows(d_real, 0, b), _slice_rows(d_real, b, 2 * b))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()
        d_loss_val = d_loss.item()

    z = rng.standard_normal((b, latent)).astype(np.float32)
    fake_labels = rng.integers(0, num_classes, size=b)
    fake = gen(Tensor(z), fake_labels)
    with freeze_power_iteration():
        d_fake = disc(fake, fake_labels)
    g_loss = hinge_g_loss(d_fake)
    opt_g.zero_grad()
    opt_d.zero_grad()  # discard D grads from the G pass
    g_loss.backward()
    opt_g.step()
    g_loss_val = g_loss.item()
    return d_loss_val, g_loss_val


def _slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[start:stop]

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return T._make(data, (x,), bw, "slice_rows")


class Trainer:
    def __init__(self, cfg: TrainerConfig, dataset: tuple[np.ndarray, np.ndarray],
                 extractor=None):
        self.cfg = cfg
        self.images, self.labels = dataset
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"dataset images must be [N,3,H,W], got {self.images.shape}")
        self.extractor = extractor
        self.gen = build_generator(cfg.generator_config(), seed=cfg.seed)
        self.disc = build_discriminator(cfg.discriminator_config(), seed=cfg.seed + 1)
        self.opt_g = Adam(list(self.gen.named_parameters()), lr=cfg.ttur.lr_g)
        self.opt_d = Adam(list(self.disc.named_parameters()), lr=cfg.ttur.lr_d)
        self.rng = np.random.Generator(np.random.Philox(cfg.seed))
        self.iteration = 0
        self.log = TrainingLog()

    # -- checkpoint plumbing --

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, model in (("g", self.gen), ("d", self.disc)):
            for name, p in model.named_parameters():
                out[f"{prefix}.param/{name}"] = p.data
            for name, b in model.named_buffers():
                out[f"{prefix}.buffer/{name}"] = b
        out.update(self.opt_g.state_arrays("opt_g/"))
        out.update(self.opt_d.state_arrays("opt_d/"))
        out["iteration"] = np.asarray([self.iteration], dtype=np.int64)
        out["rng_state"] = _rng_state_bytes(self.rng)
        return out

    def save(self, path) -> None:
        meta = {"kind": "trainer", "config": self.cfg.to_flat_dict(),
                "iteration": self.iteration}
        save_checkpoint(path, self.state_arrays(), meta)

    def load(self, path) -> None:
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "trainer":
            raise CheckpointError(f"{path} is a {meta.get('kind')!r} checkpoint, "
                                  f"not a trainer checkpoint")
        expected = {k: v.shape for k, v in self.state_arrays().items() if k != "rng_state"}
        got = {k: v.shape for k, v in arrays.items() if k != "rng_state"}
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        if missing or extra:
            raise CheckpointError(
                f"{path} does not match this model configuration; "
                f"missing entries: {missing[:5]}, unexpected entries: {extra[:5]}")
        for k, shape in expected.items():
            if got[k] != shape:
                raise CheckpointError(f"{path}: entry {k} has shape {got[k]}, "
                                      f"model needs {shape}")
        for prefix, model in (("g", self.gen), ("d", self.disc)):
            params = {k[len(prefix) + 7:]: v for k, v in arrays.items()
                      if k.startswith(f"{prefix}.param/")}
            buffers = {k[len(prefix) + 8:]: v for k, v in arrays.items()
                       if k.startswith(f"{prefix}.buffer/")}
            model.load_state(params, buffers)
        self.opt_g.load_state_arrays("opt_g/", arrays)
        self.opt_d.load_state_arrays("opt_d/", arrays)
        self.iteration = int(arrays["iteration"][0])
        _set_rng_state(self.rng, arrays["rng_state"])

    # -- loop --

    def _batch(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rng.integers(0, len(self.images), size=self.cfg.batch_size)
        return self.images[idx], self.labels[idx]

    def _metrics(self) -> tuple[float, float]:
        if self.extractor is None:
            return float("nan"), float("nan")
        from .metrics import generator_metrics

        m = generator_metrics(self.gen, self.extractor, self.images,
                              self.cfg.metric_samples,
                              seed=self.cfg.seed * 1_000_003 + self.iteration,
                              splits=4)
        return m["fid"], m["is_mean"]

    def max_spectral_norm(self) -> float:
        """SVD oracle over every normalized weight (diagnostic)."""
        worst = 0.0
        for model in (self.gen, self.disc):
            for m in model.modules():
                sn_pairs = [(m.__dict__.get(a), m.__dict__.get(w)) for a, w in
                            (("sn", "weight"), ("sn_f", "w_f"), ("sn_g", "w_g"),
                             ("sn_h", "w_h"), ("sn_v", "w_v"))]
                for state, weight in sn_pairs:
                    if state is None or weight is None:
                        continue
                    wmat = weight.data.reshape(weight.shape[0], -1)
                    sigma = state.sigma(wmat)
                    if sigma >= state.eps:
                        worst = max(worst, spectral_norm_exact(wmat / sigma))
        return worst

    def run(self) -> TrainingLog:
        cfg = self.cfg
        out_dir = cfg.out_dir
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        start = time.monotonic()
        self.gen.train()
        self.disc.train()
        while self.iteration < cfg.total_iterations:
            real, labels = self._batch()
            d_loss, g_loss = train_step(real, labels, self.gen, self.disc,
                                        self.opt_g, self.opt_d, self.rng,
                                        d_steps=cfg.ttur.d_steps_per_g_step)
            self.iteration += 1
            it = self.iteration
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                which, value = (("d", d_loss) if not np.isfinite(d_loss)
                                else ("g", g_loss))
                self.log.halted_at = it
                self._flush(out_dir)
                raise TrainingHalted(it, which, value, self.log)
            if it % cfg.metrics_every == 0 or it == cfg.total_iterations:
                fid, is_score = self._metrics()
                self.log.append(it, d_loss, g_loss, fid, is_score,
                                time.monotonic() - start)
                self.gen.train()
            if out_dir and (it % cfg.snapshot_every == 0 or it == cfg.total_iterations):
                self.save(os.path.join(out_dir, f"ckpt_{it:07d}.ckpt"))
        self._flush(out_dir)
        return self.log

    def _flush(self, out_dir) -> None:
        if out_dir:
            try:
                self.log.to_csv(os.path.join(out_dir, "training_log.csv"))
            except OSError as e:
                raise RuntimeError(f"failed writing training log under {out_dir}: {e}") from e


def _rng_state_bytes(rng: np.random.Generator) -> np.ndarray:
    def enc(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        raise TypeError(f"cannot encode {type(o)}")

    raw = json.dumps(rng.bit_generator.state, default=enc).encode()
    return np.frombuffer(raw, dtype=np.uint8).copy()


def _set_rng_state(rng: np.random.Generator, raw: np.ndarray) -> None:
    rng.bit_generator.state = json.loads(raw.tobytes().decode())


def run(config: TrainerConfig, dataset=None, extractor=None) -> TrainingLog:
    """Build a trainer from config (loading the dataset and extractor from
    the configured paths if not given) and run it to completion."""
    from .data import load_dataset

    if dataset is None:
        images, labels, _ = load_dataset(config.data_dir)
        dataset = (images, labels)
    if extractor is None and config.extractor_path:
        from .metrics import load_extractor

        extractor = load_extractor(config.extractor_path)
    trainer = Trainer(config, dataset, extractor=extractor)
    return trainer.run()
