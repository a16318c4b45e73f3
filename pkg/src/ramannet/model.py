"""RamanNet: location-specific dense blocks over overlapping spectral windows.

Each window of the spectrum gets its own dense layer (no weight sharing), so
the same peak shape at two different Raman shifts produces different
features.  Block features are concatenated, summarized by a wide dense
layer, projected to an embedding layer that also feeds a triplet loss, and
classified by a softmax head.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics as nx
from .errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    InputTooShortError,
    ShapeError,
)


@dataclass(frozen=True)
class ModelConfig:
    input_len: int
    num_classes: int
    window_len: int = 50
    window_step: int = 25
    block_units: int = 25
    summary_units: int = 512
    embed_units: int = 256
    dropout1: float = 0.5
    dropout2: float = 0.4
    dropout3: float = 0.25
    leaky_slope: float = 0.3
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.window_len < 1 or self.window_len > self.input_len:
            raise ConfigError(
                f"window_len must lie in [1, input_len={self.input_len}], got {self.window_len}"
            )
        if not 1 <= self.window_step <= self.window_len:
            raise ConfigError(
                f"window_step must lie in [1, window_len={self.window_len}], got {self.window_step}"
            )
        for name in ("block_units", "summary_units", "embed_units"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("dropout1", "dropout2", "dropout3"):
            nx.DropoutSpec(getattr(self, name))
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in [0, 1), got {self.leaky_slope}")

    @property
    def num_windows(self) -> int:
        return (self.input_len - self.window_len) // self.window_step + 1

    @property
    def dropped_tail(self) -> int:
        """Trailing samples not covered by any full window."""
        covered = (self.num_windows - 1) * self.window_step + self.window_len
        return self.input_len - covered

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def split_windows(spectrum: np.ndarray, w: int, dw: int) -> np.ndarray:
    """Cut the last axis into windows ``[i*dw, i*dw + w)``.

    A 1-D input gives ``[num_windows, w]``, a batch ``[B, L]`` gives
    ``[B, num_windows, w]``.  Samples after the last full window are dropped.
    The result is a read-only view.
    """
    length = spectrum.shape[-1]
    if w < 1 or dw < 1:
        raise ConfigError(f"window length and step must be >= 1, got w={w}, dw={dw}")
    if length < w:
        raise InputTooShortError(f"spectrum of length {length} is shorter than the window ({w})")
    return sliding_window_view(spectrum, w, axis=-1)[..., ::dw, :]


def count_parameters(config: ModelConfig) -> int:
    """Trainable parameter count (batchnorm scale/shift included, running stats excluded)."""
    w, n1, n2, nf, c = (
        config.window_len,
        config.block_units,
        config.summary_units,
        config.embed_units,
        config.num_classes,
    )
    nw = config.num_windows
    blocks = nw * (w * n1 + n1 + 2 * n1)
    summary = nw * n1 * n2 + n2 + 2 * n2
    embed = n2 * nf + nf + 2 * nf
    head = nf * c + c
    return blocks + summary + embed + head


@dataclass
class DenseBN:
    dense: nx.DenseLayer
    bn: nx.BatchNormLayer


class RamanNet:
    """Parameters, forward pass and manual backward pass of the network.

    ``forward`` caches its intermediates; ``backward`` consumes the cache of
    the most recent forward call.  An instance is single-writer.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int | None = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        rng = np.random.default_rng(rng)
        c = config

        def dense_bn(n_in, n_out):
            return DenseBN(
                nx.DenseLayer.glorot(n_in, n_out, rng, self.dtype),
                nx.BatchNormLayer.create(n_out, self.dtype, c.bn_momentum, c.bn_epsilon),
            )

        self.blocks = [dense_bn(c.window_len, c.block_units) for _ in range(c.num_windows)]
        self.summary = dense_bn(c.num_windows * c.block_units, c.summary_units)
        self.embedding = dense_bn(c.summary_units, c.embed_units)
        self.head = nx.DenseLayer.glorot(c.embed_units, c.num_classes, rng, self.dtype)
        self.dropouts = (nx.DropoutSpec(c.dropout1), nx.DropoutSpec(c.dropout2), nx.DropoutSpec(c.dropout3))
        self.metadata: dict = {}
        self._cache = None

    # -- parameter access -------------------------------------------------

    def _stages(self):
        for i, blk in enumerate(self.blocks):
            yield f"blocks.{i}", blk
        yield "summary", self.summary
        yield "embedding", self.embedding

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in a fixed declared order."""
        out = []
        for prefix, st in self._stages():
            out += [
                (f"{prefix}.dense.weights", st.dense.weights),
                (f"{prefix}.dense.bias", st.dense.bias),
                (f"{prefix}.bn.gamma", st.bn.gamma),
                (f"{prefix}.bn.beta", st.bn.beta),
            ]
        out += [("head.weights", self.head.weights), ("head.bias", self.head.bias)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for prefix, st in self._stages():
            out += [
                (f"{prefix}.bn.running_mean", st.bn.running_mean),
                (f"{prefix}.bn.running_var", st.bn.running_var),
            ]
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return self.named_parameters() + self.named_buffers()

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: a.copy() for k, a in self.named_arrays()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        arrays = dict(self.named_arrays())
        if set(state) != set(arrays):
            raise ShapeError("state keys do not match model arrays")
        for k, a in arrays.items():
            if state[k].shape != a.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {a.shape}")
            a[...] = state[k]

    # -- forward / backward ----------------------------------------------

    def forward(self, batch: np.ndarray, mode: str = nx.INFER, rng: np.random.Generator | None = None,
                freeze_bn: bool = False):
        """Return ``(logits [B x C], embeddings [B x nf])``.

        ``freeze_bn`` keeps batchnorm on its running statistics during a
        train-mode pass (dropout stays active).
        """
        c = self.config
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] != c.input_len:
            raise ShapeError(f"expected input [B x {c.input_len}], got {list(batch.shape)}")
        batch = batch.astype(self.dtype, copy=False)
        bn_mode = nx.INFER if (mode == nx.INFER or freeze_bn) else nx.TRAIN
        slope = c.leaky_slope

        windows = split_windows(batch, c.window_len, c.window_step)
        block_pre, block_bn, block_out = [], [], []
        for i, blk in enumerate(self.blocks):
            z = nx.dense_forward(blk.dense, windows[:, i, :])
            zn, bn_cache = nx.batchnorm_forward(blk.bn, z, bn_mode)
            block_pre.append(zn)
            block_bn.append(bn_cache)
            block_out.append(nx.leaky_relu(zn, slope))
        concat = np.concatenate(block_out, axis=1)

        h1, mask1 = nx.dropout_apply(self.dropouts[0], concat, mode, rng)
        z2 = nx.dense_forward(self.summary.dense, h1)
        z2n, bn2 = nx.batchnorm_forward(self.summary.bn, z2, bn_mode)
        a2 = nx.leaky_relu(z2n, slope)

        h2, mask2 = nx.dropout_apply(self.dropouts[1], a2, mode, rng)
        z3 = nx.dense_forward(self.embedding.dense, h2)
        z3n, bn3 = nx.batchnorm_forward(self.embedding.bn, z3, bn_mode)
        emb = nx.leaky_relu(z3n, slope)

        h3, mask3 = nx.dropout_apply(self.dropouts[2], emb, mode, rng)
        logits = nx.dense_forward(self.head, h3)

        self._cache = dict(
            windows=windows, block_pre=block_pre, block_bn=block_bn, concat=concat,
            mask1=mask1, h1=h1, z2n=z2n, bn2=bn2, mask2=mask2, h2=h2, z3n=z3n, bn3=bn3,
            emb=emb, mask3=mask3, h3=h3, logits=logits,
        )
        return logits, emb

    def block_features(self) -> np.ndarray:
        """Concatenated block activations of the last forward pass, ``[B x nw*n1]``."""
        if self._cache is None:
            raise RuntimeError("forward() has not been called")
        return self._cache["concat"]

    def backward(self, labels: np.ndarray, triplets=None, ce_weight: float = 1.0,
                 triplet_weight: float = 1.0, margin: float = 1.0):
        """Gradients of ``ce_weight*CE + triplet_weight*TripletLoss`` for the cached batch.

        ``triplets`` is a :class:`~ramannet.data.TripletBatch` (or any object
        with ``anchor_idx``, ``positive_idx``, ``negative_idx``) indexing rows
        of the batch; None or an empty batch skips the triplet term.

        Returns ``(losses, grads)``: a dict with ``ce``, ``triplet`` and
        ``total`` and a dict keyed like :meth:`named_parameters`.
        """
        if self._cache is None:
            raise RuntimeError("backward() called before forward()")
        k = self._cache
        c = self.config
        slope = c.leaky_slope
        logits, emb = k["logits"], k["emb"]
        n = logits.shape[0]

        ce, d_logits = nx.softmax_cross_entropy(logits, labels)
        d_logits = d_logits * ce_weight

        d_emb = np.zeros_like(emb)
        tl = 0.0
        if triplets is not None and len(triplets.anchor_idx) > 0:
            idx = [np.asarray(a, dtype=np.intp) for a in
                   (triplets.anchor_idx, triplets.positive_idx, triplets.negative_idx)]
            for a in idx:
                if a.min() < 0 or a.max() >= n:
                    raise ShapeError(f"triplet index out of batch range [0, {n})")
            tl, grads3 = nx.triplet_loss(emb[idx[0]], emb[idx[1]], emb[idx[2]], margin)
            for a, g in zip(idx, grads3):
                np.add.at(d_emb, a, g * triplet_weight)

        grads = {}
        gw, gb, d_h3 = nx.dense_backward(self.head, k["h3"], d_logits)
        grads["head.weights"], grads["head.bias"] = gw, gb
        d_emb = d_emb + nx.dropout_backward(k["mask3"], d_h3)

        d_z3n = nx.leaky_relu_backward(k["z3n"], d_emb, slope)
        gg, gbt, d_z3 = nx.batchnorm_backward(self.embedding.bn, k["bn3"], d_z3n)
        gw, gb, d_h2 = nx.dense_backward(self.embedding.dense, k["h2"], d_z3)
        grads.update({"embedding.dense.weights": gw, "embedding.dense.bias": gb,
                      "embedding.bn.gamma": gg, "embedding.bn.beta": gbt})

        d_a2 = nx.dropout_backward(k["mask2"], d_h2)
        d_z2n = nx.leaky_relu_backward(k["z2n"], d_a2, slope)
        gg, gbt, d_z2 = nx.batchnorm_backward(self.summary.bn, k["bn2"], d_z2n)
        gw, gb, d_h1 = nx.dense_backward(self.summary.dense, k["h1"], d_z2)
        grads.update({"summary.dense.weights": gw, "summary.dense.bias": gb,
                      "summary.bn.gamma": gg, "summary.bn.beta": gbt})

        d_concat = nx.dropout_backward(k["mask1"], d_h1)
        n1 = c.block_units
        for i, blk in enumerate(self.blocks):
            d_out = d_concat[:, i * n1:(i + 1) * n1]
            d_zn = nx.leaky_relu_backward(k["block_pre"][i], d_out, slope)
            gg, gbt, d_z = nx.batchnorm_backward(blk.bn, k["block_bn"][i], d_zn)
            gw, gb, _ = nx.dense_backward(blk.dense, k["windows"][:, i, :], d_z)
            grads.update({f"blocks.{i}.dense.weights": gw, f"blocks.{i}.dense.bias": gb,
                          f"blocks.{i}.bn.gamma": gg, f"blocks.{i}.bn.beta": gbt})

        total = ce_weight * ce + triplet_weight * tl
        return {"ce": ce, "triplet": tl, "total": total}, grads

    def predict_logits(self, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Infer-mode logits, evaluated in chunks."""
        out = [self.forward(batch[i:i + chunk], nx.INFER)[0] for i in range(0, len(batch), chunk)]
        if not out:
            return np.zeros((0, self.config.num_classes), dtype=self.dtype)
        return np.concatenate(out)

    def embed(self, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
        out = [self.forward(batch[i:i + chunk], nx.INFER)[1] for i in range(0, len(batch), chunk)]
        if not out:
            return np.zeros((0, self.config.embed_units), dtype=self.dtype)
        return np.concatenate(out)


# ----------------------------------------------------------------------------
# checkpoint
#
# layout (all integers little-endian):
#   8s   magic  b"RMNETCKP"
#   u16  format version
#   u32  header length, then UTF-8 JSON header {config, dtype, metadata, arrays}
#   per array, in named_arrays() order:
#        u16 name length, name bytes, u8 ndim, u32 * ndim dims, u64 payload bytes, payload
#   4s   end marker b"END."

MAGIC = b"RMNETCKP"
FORMAT_VERSION = 1
_END = b"END."
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def _dtype_code(dtype: np.dtype) -> str:
    return "f4" if dtype == np.float32 else "f8"


def save_checkpoint(model: RamanNet, path) -> None:
    code = _dtype_code(model.dtype)
    header = json.dumps(
        {
            "config": model.config.to_dict(),
            "dtype": code,
            "metadata": model.metadata,
            "arrays": [name for name, _ in model.named_arrays()],
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(header)), header]
    for name, arr in model.named_arrays():
        raw = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<Q", len(payload)) + payload)
    parts.append(_END)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> RamanNet:
    r = _Reader(Path(path).read_bytes())
    if len(r.data) < len(MAGIC) and MAGIC.startswith(r.data):
        raise CheckpointTruncatedError(f"{path}: checkpoint truncated inside the magic bytes")
    if r.data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a RamanNet checkpoint (bad magic)")
    r.take(len(MAGIC))
    version, header_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        dtype = _DTYPES[header["dtype"]]
    except CheckpointTruncatedError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc

    model = RamanNet(config, rng=0, dtype=dtype.newbyteorder("="))
    model.metadata = header.get("metadata", {})
    expected = model.named_arrays()
    if header.get("arrays") != [n for n, _ in expected]:
        raise CheckpointFormatError(f"{path}: array list does not match the configured architecture")
    loaded = {}
    for name, target in expected:
        (name_len,) = r.unpack("<H")
        got = r.take(name_len).decode("utf-8")
        if got != name:
            raise CheckpointFormatError(f"{path}: expected array {name!r}, found {got!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        if tuple(shape) != target.shape or nbytes != target.size * dtype.itemsize:
            raise CheckpointFormatError(f"{path}: array {name!r} has shape {shape}, expected {target.shape}")
        loaded[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
    if r.take(len(_END)) != _END:
        raise CheckpointFormatError(f"{path}: missing end marker")
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    model.load_state(loaded)
    return model
