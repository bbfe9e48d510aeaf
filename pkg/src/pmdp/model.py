"""Encoder, per-subspace projectors, sum aggregation and decoder.

Parameters live in a flat ``dict[str, ndarray]`` so they can be put on a
tape, stepped by Adam and checkpointed without any wrapper classes::

    enc.{l}.W / enc.{l}.b        encoder layers (last one linear, width d)
    proj.{i}.{0,1}.W / .b        projector i: FC d, ReLU, FC d
    dec.{l}.W / dec.{l}.b        decoder layers (last one linear, width N)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

Params = dict[str, np.ndarray]
SubspaceCodes = list[Tensor]

CHECKPOINT_MAGIC = b"PMDP1"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    latent_dim: int = 6
    num_subspaces: int = 4
    encoder_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.input_dim < 1 or self.latent_dim < 1 or self.num_subspaces < 1:
            raise ContractError(f"invalid model config {self}")
        if any(w < 1 for w in (*self.encoder_hidden, *self.decoder_hidden)):
            raise ContractError("layer widths must be >= 1")

    @property
    def encoder_widths(self) -> list[int]:
        return [self.input_dim, *self.encoder_hidden, self.latent_dim]

    @property
    def decoder_widths(self) -> list[int]:
        return [self.latent_dim, *self.decoder_hidden, self.input_dim]

    def num_params(self) -> int:
        def mlp(widths):
            return np.sum([(a + 1) * b for a, b in zip(widths[:-1], widths[1:])])
        d = self.latent_dim
        return int(mlp(self.encoder_widths) + mlp(self.decoder_widths)
                   + self.num_subspaces * 2 * (d + 1) * d)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases, in a fixed draw order."""
    p: Params = {}

    def mlp(prefix, widths):
        for l, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            p[f"{prefix}.{l}.W"] = _glorot(rng, a, b)
            p[f"{prefix}.{l}.b"] = np.zeros(b)

    mlp("enc", cfg.encoder_widths)
    d = cfg.latent_dim
    for i in range(cfg.num_subspaces):
        mlp(f"proj.{i}", [d, d, d])
    mlp("dec", cfg.decoder_widths)
    return p


def _mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str, n_layers: int) -> Tensor:
    h = x
    for l in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{prefix}.{l}.W"]), params[f"{prefix}.{l}.b"])
        if l < n_layers - 1:
            h = ad.relu(h)
    return h


def _width(params: Mapping[str, Tensor | np.ndarray], name: str) -> int:
    w = params[name]
    return (w.shape if isinstance(w, Tensor) else np.shape(w))[0]


def _n_layers(params: Mapping, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    return n


def num_subspaces(params: Mapping) -> int:
    k = 0
    while f"proj.{k}.0.W" in params:
        k += 1
    return k


def encode(x, params: Mapping[str, Tensor]) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != _width(params, "enc.0.W"):
        raise DimensionError(f"encoder expects width {_width(params, 'enc.0.W')}, got {x.shape}")
    return _mlp(x, params, "enc", _n_layers(params, "enc"))


def project(z_hat: Tensor, params: Mapping[str, Tensor]) -> SubspaceCodes:
    return [_mlp(z_hat, params, f"proj.{i}", 2) for i in range(num_subspaces(params))]


def project_one(z_hat: Tensor, params: Mapping[str, Tensor], i: int) -> Tensor:
    return _mlp(z_hat, params, f"proj.{i}", 2)


def aggregate(codes: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of the subspace codes."""
    z = codes[0]
    for s in codes[1:]:
        z = ad.add(z, s)
    return z


def decode(z, params: Mapping[str, Tensor]) -> Tensor:
    z = ad.as_tensor(z)
    if z.data.ndim != 2 or z.shape[1] != _width(params, "dec.0.W"):
        raise DimensionError(f"decoder expects width {_width(params, 'dec.0.W')}, got {z.shape}")
    return _mlp(z, params, "dec", _n_layers(params, "dec"))


def swap_latent(codes1: Sequence[Tensor], codes2: Sequence[Tensor], i: int) -> Tensor:
    """Aggregate of subspace ``i`` from sample 1 with every other subspace from sample 2.

    ``i`` is zero-based.
    """
    if not 0 <= i < len(codes1):
        raise ContractError(f"subspace index {i} out of range for k={len(codes1)}")
    return aggregate([codes1[j] if j == i else codes2[j] for j in range(len(codes1))])


def swap_recombine(codes1, codes2, i: int, params: Mapping[str, Tensor]) -> Tensor:
    return decode(swap_latent(codes1, codes2, i), params)


def forward(x, params: Mapping[str, Tensor]) -> tuple[SubspaceCodes, Tensor]:
    """Codes and reconstruction for a batch."""
    codes = project(encode(x, params), params)
    return codes, decode(aggregate(codes), params)


def constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap raw arrays as constant tensors for tape-free evaluation."""
    return {k: Tensor(v) for k, v in params.items()}


def subspace_codes(x: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Codes of a batch as a plain ``(N, k, d)`` array."""
    codes = project(encode(x, constants(params)), constants(params))
    return np.stack([c.data for c in codes], axis=1)


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(params))


def dump_checkpoint(params: Mapping[str, np.ndarray]) -> bytes:
    out = [CHECKPOINT_MAGIC]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def load_checkpoint(path: str | Path) -> Params:
    return parse_checkpoint(Path(path).read_bytes())


def parse_checkpoint(buf: bytes) -> Params:
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a PMDP1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    params: Params = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return params


def config_from_params(params: Mapping[str, np.ndarray]) -> ModelConfig:
    """Recover the architecture implied by a parameter dict."""
    n_enc, n_dec = _n_layers(params, "enc"), _n_layers(params, "dec")
    enc = [params[f"enc.{l}.W"].shape for l in range(n_enc)]
    dec = [params[f"dec.{l}.W"].shape for l in range(n_dec)]
    return ModelConfig(
        input_dim=enc[0][0],
        latent_dim=enc[-1][1],
        num_subspaces=num_subspaces(params),
        encoder_hidden=tuple(s[1] for s in enc[:-1]),
        decoder_hidden=tuple(s[1] for s in dec[:-1]),
    )
