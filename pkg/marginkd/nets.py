import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ndgrad as nd
from .errors import ContractError, DimensionError
from .ndgrad import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MARGINKD-CKPT"
CHECKPOINT_VERSION = 2


@dataclass(eq=False)
class MLPModel:
    """Feed-forward trunk with a unit-norm embedding head and a linear classifier.

    Inputs are standardized with `input_shift` / `input_scale` when those
    are set. Layers before `embed_layer_index` use ReLU. The output of layer
    `embed_layer_index` is the raw embedding; it is L2-normalized for
    contrastive use and passed through ReLU into the remaining layers.
    """

    layer_dims: List[int]
    weights: List[Tensor]
    biases: List[Tensor]
    embed_layer_index: int
    input_shift: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None

    @property
    def standardized(self) -> bool:
        return self.input_shift is not None

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def embed_dim(self) -> int:
        return self.layer_dims[self.embed_layer_index + 1]

    def parameters(self) -> List[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self, requires_grad: bool = True) -> "MLPModel":
        return MLPModel(list(self.layer_dims),
                        [Tensor(w.data, requires_grad=requires_grad) for w in self.weights],
                        [Tensor(b.data, requires_grad=requires_grad) for b in self.biases],
                        self.embed_layer_index,
                        None if self.input_shift is None else self.input_shift.copy(),
                        None if self.input_scale is None else self.input_scale.copy())


def _check_dims(layer_dims: Sequence[int], embed_layer_index: int) -> None:
    if len(layer_dims) < 3:
        raise ContractError(f"need input, embedding and class dims at least, got {list(layer_dims)}")
    if any(int(d) < 1 for d in layer_dims):
        raise ContractError(f"layer dims must be positive, got {list(layer_dims)}")
    if not 0 <= embed_layer_index < len(layer_dims) - 2:
        raise ContractError(f"embed_layer_index {embed_layer_index} must name a layer before the classifier")
    embed_dim, classes = layer_dims[embed_layer_index + 1], layer_dims[-1]
    if embed_dim <= classes:
        raise ContractError(f"embedding dim {embed_dim} must exceed class count {classes}")


def init_mlp(layer_dims: Sequence[int], seed: int, embed_layer_index: Optional[int] = None) -> MLPModel:
    """Glorot-uniform weights, zero biases. The embedding defaults to the penultimate layer."""
    dims = [int(d) for d in layer_dims]
    if embed_layer_index is None:
        embed_layer_index = len(dims) - 3
    _check_dims(dims, embed_layer_index)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MLPModel(dims, weights, biases, embed_layer_index)


def standardize_inputs(model: MLPModel, X: np.ndarray) -> MLPModel:
    """Fit per-feature mean and std on `X`; constant features keep scale 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} input features", [X.shape])
    std = X.std(axis=0)
    model.input_shift = X.mean(axis=0)
    model.input_scale = np.where(std > 0, std, 1.0)
    return model


def _input(model: MLPModel, x_batch) -> Tensor:
    x = nd.as_tensor(x_batch)
    if x.data.ndim == 1:
        x = Tensor(x.data[None, :])
    if x.data.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} input features", [x.shape])
    if model.standardized:
        x = nd.mul(nd.add(x, -model.input_shift), np.broadcast_to(1.0 / model.input_scale, x.shape))
    return x


def forward_all(model: MLPModel, x_batch) -> Tuple[Tensor, Tensor]:
    """One pass through the shared trunk: (logits, raw embedding)."""
    h = _input(model, x_batch)
    raw = None
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = nd.add(nd.matmul(h, w), b)
        if i == len(model.weights) - 1:
            return z, raw
        if i == model.embed_layer_index:
            raw = z
        h = nd.relu(z)
    raise AssertionError("unreachable")


def forward_logits(model: MLPModel, x_batch) -> Tensor:
    return forward_all(model, x_batch)[0]


def predict_proba(model: MLPModel, x_batch) -> Tensor:
    return nd.softmax_rows(forward_logits(model, x_batch))


def embed_normalized(model: MLPModel, x_batch) -> Tensor:
    """Unit-norm embeddings; a zero raw row raises DegenerateEmbeddingError."""
    return nd.l2_normalize_rows(forward_all(model, x_batch)[1])


def soft_labels(model: MLPModel, X: np.ndarray) -> np.ndarray:
    """Probabilities as a plain array, computed on a frozen copy (no graph)."""
    return predict_proba(model.copy(requires_grad=False), X).data


def embeddings(model: MLPModel, X: np.ndarray) -> np.ndarray:
    return embed_normalized(model.copy(requires_grad=False), X).data


def save_checkpoint(model: MLPModel, path: Path) -> None:
    """Header line, JSON line with the layout, then little-endian float64 W, b per layer.

    Standardized models append the input shift and scale after the last layer.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = CHECKPOINT_MAGIC + f" v{CHECKPOINT_VERSION}\n".encode("ascii")
    layout = json.dumps({"layer_dims": model.layer_dims, "embed_layer_index": model.embed_layer_index,
                         "standardized": model.standardized}, sort_keys=True).encode("utf-8") + b"\n"
    with open(path, "wb") as f:
        f.write(header)
        f.write(layout)
        for w, b in zip(model.weights, model.biases):
            f.write(w.data.astype("<f8").tobytes())
            f.write(b.data.astype("<f8").tobytes())
        if model.standardized:
            f.write(model.input_shift.astype("<f8").tobytes())
            f.write(model.input_scale.astype("<f8").tobytes())
    logger.info(f"Saved checkpoint {model.layer_dims} to {path}")


def load_checkpoint(path: Path) -> MLPModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found at: {path}")
    raw = path.read_bytes()
    header, _, rest = raw.partition(b"\n")
    if not header.startswith(CHECKPOINT_MAGIC):
        raise ContractError(f"{path} is not a marginkd checkpoint")
    version = int(header[len(CHECKPOINT_MAGIC):].strip().lstrip(b"v"))
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    layout_line, _, payload = rest.partition(b"\n")
    layout = json.loads(layout_line)
    dims, embed_idx = layout["layer_dims"], layout["embed_layer_index"]
    _check_dims(dims, embed_idx)
    weights, biases, offset = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(payload, dtype="<f8", count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(payload, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(Tensor(w.astype(np.float64), requires_grad=True))
        biases.append(Tensor(b.astype(np.float64), requires_grad=True))
    model = MLPModel(list(dims), weights, biases, embed_idx)
    if layout.get("standardized", False):
        d_in = dims[0]
        if len(payload) - offset < 16 * d_in:
            raise ContractError(f"checkpoint {path} is missing its input standardization")
        shift = np.frombuffer(payload, dtype="<f8", count=d_in, offset=offset)
        scale = np.frombuffer(payload, dtype="<f8", count=d_in, offset=offset + 8 * d_in)
        model.input_shift, model.input_scale = shift.astype(np.float64), scale.astype(np.float64)
        offset += 16 * d_in
    if offset != len(payload):
        raise ContractError(f"checkpoint {path} has {len(payload) - offset} trailing bytes")
    return model
