"""Segment encoders: the main multi-subspace network f and the per-instrument
networks g_c, plus a self-describing checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ParameterError, ShapeError
from .features import MelSegment

DEFAULT_CONV_CHANNELS = (16, 32, 64, 128)


@dataclass
class EncoderConfig:
    """Convolutional stack followed by time-mean pooling and two FC layers."""

    n_mels: int = 64
    conv_channels: tuple = DEFAULT_CONV_CHANNELS
    kernel: int = 3
    stride: int = 2
    batch_norm: bool = True
    activation: str = "relu"
    fc_hidden: int = 256
    embed_dim: int = 80

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.embed_dim < 1:
            raise ParameterError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.activation not in ("relu", "elu"):
            raise ParameterError(f"unsupported activation {self.activation!r}")

    @property
    def min_frames(self) -> int:
        return 2 ** len(self.conv_channels)

    def freq_out(self) -> int:
        f = self.n_mels
        for _ in self.conv_channels:
            f = (f - 1) // self.stride + 1
        return f

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _activation(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.ELU()


class SegmentEncoder(nn.Module):
    """Maps a (batch, 1, n_mels, n_frames) log-mel tensor to (batch, embed_dim).

    Time-mean pooling after the conv stack makes the output width independent
    of the input duration.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        blocks = []
        c_in = 1
        pad = config.kernel // 2
        for c_out in config.conv_channels:
            blocks.append(nn.Conv2d(c_in, c_out, config.kernel, config.stride, pad))
            if config.batch_norm:
                blocks.append(nn.BatchNorm2d(c_out))
            blocks.append(_activation(config.activation))
            c_in = c_out
        self.conv = nn.Sequential(*blocks)
        fc_in = config.conv_channels[-1] * config.freq_out()
        self.fc1 = nn.Linear(fc_in, config.fc_hidden)
        self.act = _activation(config.activation)
        self.fc2 = nn.Linear(config.fc_hidden, config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (batch, 1, n_mels, n_frames), got {tuple(x.shape)}")
        if x.shape[2] != self.config.n_mels:
            raise ShapeError(f"input has {x.shape[2]} mel bins, encoder expects {self.config.n_mels}")
        if x.shape[3] < self.config.min_frames:
            raise ShapeError(f"{x.shape[3]} frames too few for {len(self.config.conv_channels)} "
                             f"stride-{self.config.stride} blocks (need >= {self.config.min_frames})")
        h = self.conv(x)                      # (B, C, F', T')
        h = h.flatten(1, 2).mean(dim=-1)      # time-mean -> (B, C*F')
        return self.fc2(self.act(self.fc1(h)))


class InstrumentEncoder(SegmentEncoder):
    """Per-instrument network g_c; embed_dim equals the subspace width."""

    def __init__(self, config: EncoderConfig, condition: int):
        super().__init__(config)
        self.condition = condition


def build_main_encoder(config: EncoderConfig, seed: int = None) -> SegmentEncoder:
    if seed is not None:
        torch.manual_seed(seed)
    return SegmentEncoder(config)


def build_instrument_encoder(config: EncoderConfig, condition: int, seed: int = None) -> InstrumentEncoder:
    if seed is not None:
        torch.manual_seed(seed)
    return InstrumentEncoder(config, condition)


def _mel_to_tensor(mel) -> torch.Tensor:
    if isinstance(mel, MelSegment):
        mel = mel.data
    arr = np.asarray(mel, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D mel matrix, got shape {arr.shape}")
    return torch.from_numpy(arr)[None, None]


def batch_to_tensor(mels: list) -> torch.Tensor:
    return torch.cat([_mel_to_tensor(m) for m in mels], dim=0)


@torch.no_grad()
def encode(model: SegmentEncoder, mel) -> np.ndarray:
    """Deterministic forward pass of one mel segment -> length-E vector."""
    model.eval()
    return model(_mel_to_tensor(mel))[0].numpy()


@torch.no_grad()
def encode_batch(model: SegmentEncoder, mels: list) -> np.ndarray:
    model.eval()
    return model(batch_to_tensor(mels)).numpy()


def encode_instrument(model: InstrumentEncoder, mel) -> np.ndarray:
    """Forward pass of one single-stem mel -> length-D vector."""
    return encode(model, mel)


def subspace(embedding: np.ndarray, c: int, subspace_dim: int) -> np.ndarray:
    return embedding[..., c * subspace_dim:(c + 1) * subspace_dim]


_CKPT_MAGIC = b"SSCK"
_DTYPE_CODES = {"f4": "<f4", "i8": "<i8"}


def save_checkpoint(path, model: SegmentEncoder, seed: int = 0, step: int = 0,
                    extra: dict = None) -> None:
    """Write a checkpoint: JSON header (config, seed, step, tensor table)
    followed by the named tensors as little-endian payloads."""
    state = model.state_dict()
    tensors = []
    payloads = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        code = "i8" if arr.dtype.kind in "iu" else "f4"
        arr = arr.astype(_DTYPE_CODES[code])
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": code})
        payloads.append(np.ascontiguousarray(arr).tobytes())
    header = {
        "format": "stemsim-ckpt-v1",
        "kind": "instrument" if isinstance(model, InstrumentEncoder) else "main",
        "condition": getattr(model, "condition", None),
        "config": model.config.to_json(),
        "seed": seed,
        "step": step,
        "extra": extra or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)


def load_checkpoint(path) -> tuple[SegmentEncoder, dict]:
    """Rebuild the encoder described by a checkpoint and load its tensors."""
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ParameterError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = EncoderConfig.from_json(header["config"])
        if header["kind"] == "instrument":
            model = InstrumentEncoder(config, header["condition"])
        else:
            model = SegmentEncoder(config)
        state = {}
        for spec in header["tensors"]:
            dtype = np.dtype(_DTYPE_CODES[spec["dtype"]])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = f.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype).reshape(spec["shape"]).copy()
            state[spec["name"]] = torch.from_numpy(arr)
    ref_state = model.state_dict()
    model.load_state_dict({name: t.to(ref_state[name].dtype) for name, t in state.items()})
    model.eval()
    return model, header
