"""Dependency-free file formats: netpbm images, datasets, checkpoints, configs.

Disparity maps are stored as 16-bit PGM with the fixed-point convention
value = round(256 * disparity); RGB images as 8-bit PPM. Checkpoints
are little-endian binary with a named tensor table; experiment configs
are INI-style text that round-trips losslessly.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig
from .autodiff import ConfigError, ContractError, Tensor
from .data import Dataset, Sequence, StereoFrame
from .losses import LossConfig
from .meta import MetaConfig
from .model import ConfidenceParams, DisparityParams, NetConfig

CHECKPOINT_MAGIC = b"MSTEREO\x00"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# netpbm images

def write_ppm(path, img: np.ndarray) -> None:
    """8-bit P6 image from a (3, H, W) float array in [0, 1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected (3, H, W) image, got {img.shape}")
    h, w = img.shape[1:]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, (w, h), maxval, raw = _read_pnm(f)
    if magic != b"P6" or maxval != 255:
        raise ContractError(f"{path}: expected 8-bit P6 image")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm16(path, disparity: np.ndarray) -> None:
    """16-bit P5 map storing round(256 * disparity), big-endian samples."""
    if disparity.ndim != 2:
        raise ContractError(f"expected (H, W) disparity, got {disparity.shape}")
    h, w = disparity.shape
    data = np.clip(np.round(disparity * 256.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, (w, h), maxval, raw = _read_pnm(f)
    if magic != b"P5" or maxval != 65535:
        raise ContractError(f"{path}: expected 16-bit P5 map")
    arr = np.frombuffer(raw, dtype=">u2").reshape(h, w)
    return arr.astype(np.float64) / 256.0


def write_pgm8(path, mask: np.ndarray) -> None:
    """8-bit P5 image from a (H, W) array scaled from [0, 1]."""
    if mask.ndim != 2:
        raise ContractError(f"expected (H, W) image, got {mask.shape}")
    h, w = mask.shape
    data = np.clip(np.round(mask * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm8(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, (w, h), maxval, raw = _read_pnm(f)
    if magic != b"P5" or maxval != 255:
        raise ContractError(f"{path}: expected 8-bit P5 image")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def _read_pnm(f) -> tuple[bytes, tuple[int, int], int, bytes]:
    magic = f.read(2)
    fields_ = []
    while len(fields_) < 3:
        line = f.readline()
        if not line:
            raise ContractError("truncated netpbm header")
        token = line.split(b"#")[0].split()
        fields_.extend(int(t) for t in token)
    w, h, maxval = fields_[:3]
    return magic, (w, h), maxval, f.read()


# ---------------------------------------------------------------------------
# dataset on disk

def save_dataset(dataset: Dataset, out_dir, seed: int | None = None,
                 extra_manifest: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = configparser.ConfigParser()
    manifest["dataset"] = {
        "sequences": str(len(dataset.sequences)),
        "supervised": str(dataset.supervised),
    }
    if seed is not None:
        manifest["dataset"]["seed"] = str(seed)
    for k, v in (extra_manifest or {}).items():
        manifest["dataset"][k] = str(v)
    for seq in dataset.sequences:
        seq_dir = out / seq.id
        seq_dir.mkdir(exist_ok=True)
        manifest[seq.id] = {
            "domain_tag": seq.domain_tag,
            "frames": str(len(seq.frames)),
        }
        for t, frame in enumerate(seq.frames):
            write_ppm(seq_dir / f"frame_{t:04d}_left.ppm", frame.left)
            write_ppm(seq_dir / f"frame_{t:04d}_right.ppm", frame.right)
            if frame.gt_disparity is not None:
                write_pgm16(seq_dir / f"frame_{t:04d}_disp.pgm", frame.gt_disparity[0])
                write_pgm8(seq_dir / f"frame_{t:04d}_valid.pgm",
                           frame.gt_valid[0].astype(np.float64))
    with open(out / "manifest.txt", "w") as f:
        manifest.write(f)


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = configparser.ConfigParser()
    read = manifest.read(root / "manifest.txt")
    if not read:
        raise ConfigError(f"no dataset manifest found at {root}")
    supervised = manifest.getboolean("dataset", "supervised")
    sequences = []
    for sid in manifest.sections():
        if sid == "dataset":
            continue
        n = manifest.getint(sid, "frames")
        tag = manifest.get(sid, "domain_tag")
        frames = []
        for t in range(n):
            base = root / sid / f"frame_{t:04d}"
            left = read_ppm(f"{base}_left.ppm")
            right = read_ppm(f"{base}_right.ppm")
            gt = valid = None
            disp_path = Path(f"{base}_disp.pgm")
            if disp_path.exists():
                gt = read_pgm16(disp_path)[None]
                valid = (read_pgm8(f"{base}_valid.pgm") > 0.5)[None]
            frames.append(StereoFrame(left=left, right=right,
                                      gt_disparity=gt, gt_valid=valid))
        sequences.append(Sequence(id=sid, frames=frames, domain_tag=tag))
    return Dataset(sequences=sequences, supervised=supervised)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, net_cfg: NetConfig, theta: DisparityParams,
                    eta: ConfidenceParams | None = None,
                    provenance: dict | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, t in theta.items():
        tensors.append((f"theta/{name}", t.data))
    if eta is not None:
        for name, t in eta.items():
            tensors.append((f"eta/{name}", t.data))
        for name, arr in eta.bn_stats.items():
            tensors.append((f"eta_stats/{name}", arr))
    meta = {
        "net_config": net_cfg.to_dict(),
        "provenance": provenance or {},
        "has_eta": eta is not None,
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    table = io.BytesIO()
    offset = 0
    for name, arr in tensors:
        nb = name.encode()
        table.write(struct.pack("<H", len(nb)))
        table.write(nb)
        table.write(b"<f8")
        table.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            table.write(struct.pack("<I", dim))
        table.write(struct.pack("<Q", offset))
        offset += arr.size * 8
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(tensors)))
        f.write(table.getvalue())
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NetConfig, DisparityParams, ConfidenceParams | None, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version = struct.unpack_from("<I", blob, 8)[0]
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    meta_len = struct.unpack_from("<I", blob, 12)[0]
    pos = 16
    meta = json.loads(blob[pos:pos + meta_len].decode())
    pos += meta_len
    count = struct.unpack_from("<I", blob, pos)[0]
    pos += 4
    entries = []
    for _ in range(count):
        nlen = struct.unpack_from("<H", blob, pos)[0]
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        dtype = blob[pos:pos + 3].decode()
        pos += 3
        ndim = struct.unpack_from("<B", blob, pos)[0]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        offset = struct.unpack_from("<Q", blob, pos)[0]
        pos += 8
        entries.append((name, dtype, tuple(shape), offset))
    payload = pos
    arrays = {}
    for name, dtype, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=payload + offset)
        arrays[name] = arr.reshape(shape).astype(np.float64)
    net_cfg = NetConfig(**meta["net_config"])
    theta_t = {name.split("/", 1)[1]: Tensor(arr, requires_grad=True)
               for name, arr in arrays.items() if name.startswith("theta/")}
    theta = DisparityParams(net_cfg, theta_t)
    eta = None
    if meta.get("has_eta"):
        eta_t = {name.split("/", 1)[1]: Tensor(arr, requires_grad=True)
                 for name, arr in arrays.items() if name.startswith("eta/")}
        stats = {name.split("/", 1)[1]: arr.copy()
                 for name, arr in arrays.items() if name.startswith("eta_stats/")}
        eta = ConfidenceParams(net_cfg, eta_t, stats)
    return net_cfg, theta, eta, meta["provenance"]


# ---------------------------------------------------------------------------
# experiment configuration

@dataclass(frozen=True)
class DataConfig:
    preset: str = "neutral"
    sequences: int = 4
    frames: int = 50
    gt_retention: float = 1.0
    integer_disparities: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        # the loss section is authoritative for both adapt and meta losses
        self.adapt = replace(self.adapt, loss=self.loss)
        self.meta = replace(self.meta, loss=self.loss)


_SECTIONS = {
    "experiment": {"seed": int},
    "net": {f.name: f.type for f in fields(NetConfig)},
    "loss": {"ssim_weight": float, "ssim_window": int},
    "adapt": {"alpha": float, "momentum": float, "weighted": bool,
              "adapt_loss": str, "detach_mask": bool, "bn_training": bool},
    "meta": {"alpha": float, "beta": float, "k": int, "b": int, "weighted": bool,
             "first_order": bool, "iterations": int, "outer_momentum": float,
             "adapt_loss": str, "detach_mask": bool},
    "data": {"preset": str, "sequences": int, "frames": int,
             "gt_retention": float, "integer_disparities": bool},
}

_TYPES = {"height": int, "width": int, "base_channels": int, "max_disp": int,
          "disparity_scale": float}


def _parse_value(kind, raw: str):
    if kind is bool or kind == "bool":
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"invalid boolean value '{raw}'")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def config_to_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["experiment"] = {"seed": str(cfg.seed)}
    parser["net"] = {k: repr(v) if isinstance(v, float) else str(v)
                     for k, v in cfg.net.to_dict().items()}
    parser["loss"] = {"ssim_weight": repr(cfg.loss.ssim_weight),
                      "ssim_window": str(cfg.loss.ssim_window)}
    adapt = asdict(cfg.adapt)
    adapt.pop("loss")
    parser["adapt"] = {k: repr(v) if isinstance(v, float) else str(v)
                       for k, v in adapt.items()}
    meta = asdict(cfg.meta)
    meta.pop("loss")
    parser["meta"] = {k: repr(v) if isinstance(v, float) else str(v)
                      for k, v in meta.items()}
    parser["data"] = {k: repr(v) if isinstance(v, float) else str(v)
                      for k, v in asdict(cfg.data).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(config_to_text(cfg))


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        known = _SECTIONS[section]
        values[section] = {}
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            kind = known[key]
            if isinstance(kind, str):
                kind = _TYPES.get(key, kind)
            values[section][key] = _parse_value(kind, raw)
    cfg = ExperimentConfig(
        seed=values.get("experiment", {}).get("seed", 0),
        net=NetConfig(**values.get("net", {})),
        loss=LossConfig(**values.get("loss", {})),
        adapt=AdaptConfig(**values.get("adapt", {})),
        meta=MetaConfig(**values.get("meta", {})),
        data=DataConfig(**values.get("data", {})),
    )
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]
