"""Shared-representation network with two outcome heads per treatment.

The network maps standardized covariates through a shared stack of dense
layers (linear, ELU, dropout) and feeds the result to four scalar heads,
two per treatment arm, initialized from independent streams so each pair
starts genuinely different. Predictions average the pair for each arm and
are de-standardized with scalers learned from the training split.

The module also owns the checkpoint container used by every model kind in
the package: a magic string, a format version, a canonical JSON header, and
little-endian float64 parameter blobs, with nothing time-dependent so equal
runs produce equal bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff
from .autodiff import ParamSet, Tape
from .errors import CheckpointError, ConfigError, DimensionError
from .seeding import generator

HEAD_KEYS = ((0, 0), (0, 1), (1, 0), (1, 1))

_MAGIC = b"ADBCR-CKPT\x00"
_VERSION = 1


@dataclass
class Scalers:
    """Per-covariate and outcome standardization constants."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @staticmethod
    def identity(d: int) -> "Scalers":
        return Scalers(np.zeros((1, d)), np.ones((1, d)), 0.0, 1.0)

    @staticmethod
    def fit(x: np.ndarray, y: np.ndarray) -> "Scalers":
        """Standardization constants from training rows; zero spreads become 1."""
        x_mean = x.mean(axis=0, keepdims=True)
        x_std = x.std(axis=0, keepdims=True)
        x_std[x_std == 0.0] = 1.0
        y_std = float(y.std())
        return Scalers(x_mean, x_std, float(y.mean()), y_std if y_std > 0.0 else 1.0)

    def standardize_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def standardize_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def destandardize_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_std + self.y_mean


def init_dense(params: ParamSet, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    """Add weight and bias parameters for a dense stack with the given widths.

    Entries are uniform on (-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        bound = 1.0 / np.sqrt(fan_in)
        params.add(f"{prefix}.{i}.w", rng.uniform(-bound, bound, (fan_in, sizes[i + 1])))
        params.add(f"{prefix}.{i}.b", rng.uniform(-bound, bound, (1, sizes[i + 1])))


def dense_forward(tape: Tape, params: ParamSet, prefix: str, n_layers: int,
                  h: autodiff.Tensor, dropout_p: float, training: bool,
                  rng: np.random.Generator | None, final_plain: bool) -> autodiff.Tensor:
    """Forward a dense stack; each layer is linear, ELU, dropout.

    With final_plain the last layer stays purely linear (scalar outputs).
    """
    for i in range(n_layers):
        w = tape.param(f"{prefix}.{i}.w", params[f"{prefix}.{i}.w"])
        b = tape.param(f"{prefix}.{i}.b", params[f"{prefix}.{i}.b"])
        h = autodiff.add(tape, autodiff.matmul(tape, h, w), b)
        if not (final_plain and i == n_layers - 1):
            h = autodiff.elu(tape, h)
            h = autodiff.dropout(tape, h, dropout_p, training, rng)
    return h


def _check_layer_sizes(name: str, sizes) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if not sizes:
        raise ConfigError(f"{name} must list at least one layer width")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"{name} contains a zero-width layer: {sizes}")
    return sizes


class AdbcrModel:
    """Shared representation plus two outcome heads per treatment arm."""

    kind = "adbcr"

    def __init__(self, input_dim: int, shared_layers, head_layers,
                 dropout_p: float, seed: int):
        if input_dim < 1:
            raise ConfigError(f"input_dim must be at least 1, got {input_dim}")
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {dropout_p}")
        self.input_dim = int(input_dim)
        self.shared_layers = _check_layer_sizes("shared_layers", shared_layers)
        self.head_layers = _check_layer_sizes("head_layers", head_layers)
        self.dropout_p = float(dropout_p)
        self.seed = int(seed)
        self.scalers = Scalers.identity(self.input_dim)
        self.params = ParamSet()
        init_dense(self.params, "phi", [self.input_dim, *self.shared_layers],
                   generator(seed, "init", "phi"))
        head_sizes = [self.shared_layers[-1], *self.head_layers, 1]
        for t, r in HEAD_KEYS:
            init_dense(self.params, f"head.{t}.{r}", head_sizes,
                       generator(seed, "init", f"head.{t}.{r}"))

    @property
    def n_phi_layers(self) -> int:
        return len(self.shared_layers)

    @property
    def n_head_layers(self) -> int:
        return len(self.head_layers) + 1

    def phi_forward(self, tape: Tape, x: autodiff.Tensor, training: bool = False,
                    rng: np.random.Generator | None = None) -> autodiff.Tensor:
        return dense_forward(tape, self.params, "phi", self.n_phi_layers, x,
                             self.dropout_p, training, rng, final_plain=False)

    def head_forward_graph(self, tape: Tape, t: int, r: int, h: autodiff.Tensor,
                           training: bool = False,
                           rng: np.random.Generator | None = None) -> autodiff.Tensor:
        return dense_forward(tape, self.params, f"head.{t}.{r}", self.n_head_layers,
                             h, self.dropout_p, training, rng, final_plain=True)

    def _check_columns(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected covariates with {self.input_dim} columns, got shape {x.shape}")
        return x

    def forward_head(self, x: np.ndarray, t: int, r: int, training: bool = False,
                     rng: np.random.Generator | None = None) -> np.ndarray:
        """Head output on already-standardized covariates, as an (n, 1) column."""
        x = self._check_columns(x)
        tape = Tape()
        h = self.phi_forward(tape, tape.constant(x), training, rng)
        out = self.head_forward_graph(tape, t, r, h, training, rng)
        return out.data.copy()

    def predict_potential_outcomes(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """De-standardized (y0, y1) predictions on raw covariates, eval mode.

        Each arm's prediction averages its two heads.
        """
        x = self._check_columns(x)
        tape = Tape()
        h = self.phi_forward(tape, tape.constant(self.scalers.standardize_x(x)))
        outs = {key: self.head_forward_graph(tape, *key, h) for key in HEAD_KEYS}
        y = []
        for t in (0, 1):
            avg = 0.5 * (outs[(t, 0)].data[:, 0] + outs[(t, 1)].data[:, 0])
            y.append(self.scalers.destandardize_y(avg))
        return y[0], y[1]

    def save(self, path: str, *, config: dict | None = None,
             validation_criterion: float | None = None,
             data_seed: int | None = None,
             split_fractions: tuple[float, float, float] | None = None) -> None:
        arch = {
            "input_dim": self.input_dim,
            "shared_layers": list(self.shared_layers),
            "head_layers": list(self.head_layers),
            "dropout_p": self.dropout_p,
            "seed": self.seed,
        }
        extra = {
            "scalers": _scalers_to_header(self.scalers),
            "config": config,
            "fingerprint": canonical_fingerprint(config) if config is not None else None,
            "validation_criterion": validation_criterion,
            "data_seed": data_seed,
            "split_fractions": list(split_fractions) if split_fractions else None,
        }
        write_checkpoint(path, self.kind, arch, dict(self.params.items()), extra)


def _scalers_to_header(s: Scalers) -> dict:
    return {
        "x_mean": s.x_mean[0].tolist(),
        "x_std": s.x_std[0].tolist(),
        "y_mean": s.y_mean,
        "y_std": s.y_std,
    }


def scalers_from_header(header: dict) -> Scalers:
    return Scalers(
        np.array([header["x_mean"]], dtype=np.float64),
        np.array([header["x_std"]], dtype=np.float64),
        float(header["y_mean"]),
        float(header["y_std"]),
    )


def canonical_fingerprint(obj) -> str:
    """Stable short digest of a JSON-serializable configuration."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def write_checkpoint(path: str, kind: str, arch: dict,
                     arrays: dict[str, np.ndarray], extra: dict) -> None:
    """Write the shared checkpoint container atomically.

    Layout: magic, u32 version, u64 header length, canonical JSON header,
    then the parameter matrices as little-endian float64 blobs in header
    order. The header carries no timestamps, so equal contents give equal
    bytes.
    """
    header = {
        "kind": kind,
        "arch": arch,
        "params": [[name, list(a.shape)] for name, a in arrays.items()],
        **extra,
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_MAGIC)
            f.write(np.uint32(_VERSION).tobytes())
            f.write(np.uint64(len(payload)).tobytes())
            f.write(payload)
            for a in arrays.values():
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path: str) -> tuple[str, dict, dict[str, np.ndarray], dict]:
    """Read the container back as (kind, arch, arrays, header).

    A file that cannot be opened raises OSError unchanged; CheckpointError
    is reserved for content defects.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 12 or not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path!r} is not a checkpoint file")
    offset = len(_MAGIC)
    version = int(np.frombuffer(blob, "<u4", count=1, offset=offset)[0])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset += 4
    header_len = int(np.frombuffer(blob, "<u8", count=1, offset=offset)[0])
    offset += 8
    if len(blob) < offset + header_len:
        raise CheckpointError(f"{path!r} is truncated inside the header")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path!r} has a corrupt header: {e}") from e
    offset += header_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        rows, cols = (int(s) for s in shape)
        nbytes = rows * cols * 8
        if len(blob) < offset + nbytes:
            raise CheckpointError(f"{path!r} is truncated inside parameter {name!r}")
        arrays[name] = np.frombuffer(blob, "<f8", count=rows * cols,
                                     offset=offset).reshape(rows, cols).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path!r} has {len(blob) - offset} trailing bytes")
    return header["kind"], header["arch"], arrays, header


CHECKPOINT_LOADERS: dict[str, Callable[[dict, dict[str, np.ndarray], dict], object]] = {}


def register_checkpoint_kind(kind: str, loader: Callable) -> None:
    CHECKPOINT_LOADERS[kind] = loader


def _load_adbcr(arch: dict, arrays: dict[str, np.ndarray], header: dict) -> AdbcrModel:
    model = AdbcrModel(arch["input_dim"], arch["shared_layers"], arch["head_layers"],
                       arch["dropout_p"], arch["seed"])
    if sorted(arrays) != sorted(model.params.names()):
        raise CheckpointError("checkpoint parameters do not match the declared architecture")
    model.params.restore(arrays)
    model.scalers = scalers_from_header(header["scalers"])
    return model


register_checkpoint_kind("adbcr", _load_adbcr)


def load_model(path: str):
    """Load any checkpoint written by this package, dispatching on its kind."""
    kind, arch, arrays, header = read_checkpoint(path)
    loader = CHECKPOINT_LOADERS.get(kind)
    if loader is None:
        raise CheckpointError(
            f"unknown checkpoint kind {kind!r}; known kinds: {sorted(CHECKPOINT_LOADERS)}")
    return loader(arch, arrays, header)
