"""Siamese encoder pair and predictor head.

Each branch is a small MLP over flattened, centered pixels (no parameter
sharing between branches); the predictor is a single square affine layer
appended to the first branch. Forward passes exist both as plain numpy
(feature extraction, evaluation) and as tape ops (training); the two paths
produce bitwise-identical values.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor

CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    """Weights and biases of one MLP branch, first layer acting on 3*H*W pixels."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


@dataclass
class PredictorParams:
    weight: np.ndarray  # (D, D)
    bias: np.ndarray  # (D,)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w": self.weight, "b": self.bias}


@dataclass
class SiameseModel:
    """Both branches plus predictor(s); predictor2 only exists in symmetric mode."""

    encoder1: EncoderParams
    predictor1: PredictorParams
    encoder2: EncoderParams
    predictor2: PredictorParams | None = None

    def copy(self) -> "SiameseModel":
        enc = lambda e: EncoderParams(
            [w.copy() for w in e.weights], [b.copy() for b in e.biases]
        )
        pred = lambda p: PredictorParams(p.weight.copy(), p.bias.copy())
        return SiameseModel(
            encoder1=enc(self.encoder1),
            predictor1=pred(self.predictor1),
            encoder2=enc(self.encoder2),
            predictor2=pred(self.predictor2) if self.predictor2 is not None else None,
        )

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, params in self._parts():
            for name, arr in params.tensors().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def _parts(self):
        parts = [("encoder1", self.encoder1), ("predictor1", self.predictor1), ("encoder2", self.encoder2)]
        if self.predictor2 is not None:
            parts.append(("predictor2", self.predictor2))
        return parts


def init_encoder(
    in_dim: int, hidden_dims: tuple[int, ...], out_dim: int, rng: np.random.Generator
) -> EncoderParams:
    """He-initialized MLP: Gaussian weights scaled by sqrt(2 / fan_in), zero biases."""
    if out_dim < 2:
        raise ValueError(f"output dimension must be >= 2, got {out_dim}")
    if any(h < 1 for h in hidden_dims):
        raise ValueError(f"hidden sizes must be >= 1, got {hidden_dims}")
    dims = [in_dim, *hidden_dims, out_dim]
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    return EncoderParams(weights=weights, biases=biases)


def init_predictor(dim: int, rng: np.random.Generator) -> PredictorParams:
    return PredictorParams(
        weight=rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, dim)),
        bias=np.zeros(dim),
    )


def init_model(
    image_shape: tuple[int, int],
    hidden_dims: tuple[int, ...],
    embed_dim: int,
    seed: int,
    symmetric: bool = False,
) -> SiameseModel:
    """Initialize both branches from distinct seeds (no parameter sharing)."""
    h, w = image_shape
    in_dim = 3 * h * w
    ss = np.random.SeedSequence(seed).spawn(4)
    model = SiameseModel(
        encoder1=init_encoder(in_dim, hidden_dims, embed_dim, np.random.default_rng(ss[0])),
        predictor1=init_predictor(embed_dim, np.random.default_rng(ss[1])),
        encoder2=init_encoder(in_dim, hidden_dims, embed_dim, np.random.default_rng(ss[2])),
        predictor2=init_predictor(embed_dim, np.random.default_rng(ss[3])) if symmetric else None,
    )
    return model


def _flatten_centered(images: np.ndarray, in_dim: int) -> np.ndarray:
    """Flatten row-major and standardize each image by its scalar mean/std.

    Per-image standardization keeps channel ratios (color structure) intact
    but removes the shared brightness component that would otherwise squeeze
    every input into a narrow cone.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    flat = images.reshape(images.shape[0], -1)
    if flat.shape[1] != in_dim:
        raise ValueError(
            f"image batch flattens to {flat.shape[1]} values per row, encoder expects {in_dim}"
        )
    centered = flat - flat.mean(axis=1, keepdims=True)
    return centered / (flat.std(axis=1, keepdims=True) + 1e-8)


def encode(images: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Deterministic forward pass: (B, H, W, 3) images -> (B, D) features."""
    x = _flatten_centered(images, params.in_dim)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        if i < last:
            x = np.maximum(x, 0.0)
    return x


def predict(x: np.ndarray, params: PredictorParams) -> np.ndarray:
    if x.shape[1] != params.weight.shape[0]:
        raise ValueError(
            f"predictor expects {params.weight.shape[0]} columns, got {x.shape[1]}"
        )
    return x @ params.weight + params.bias


def encode_on_tape(
    tape: Tape, images: np.ndarray, layers: list[tuple[Tensor, Tensor]]
) -> Tensor:
    """Tape version of :func:`encode`; `layers` are (weight, bias) leaf tensors."""
    in_dim = layers[0][0].shape[0]
    x = tape.constant(_flatten_centered(images, in_dim))
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        x = tape.add(tape.matmul(x, w), b)
        if i < last:
            x = tape.relu(x)
    return x


def predict_on_tape(tape: Tape, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"predictor expects {weight.shape[0]} columns, got {x.shape[1]}")
    return tape.add(tape.matmul(x, weight), bias)


def model_leaves(tape: Tape, model: SiameseModel) -> dict[str, Tensor]:
    """Create requires-grad leaves for every parameter, keyed like named_tensors()."""
    return {
        name: tape.leaf(arr, requires_grad=True)
        for name, arr in model.named_tensors().items()
    }


def encoder_layers(leaves: dict[str, Tensor], prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers = []
    i = 0
    while f"{prefix}.w{i}" in leaves:
        layers.append((leaves[f"{prefix}.w{i}"], leaves[f"{prefix}.b{i}"]))
        i += 1
    return layers


# -- checkpoint io -----------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode(),
    }


def _decode_array(spec: dict) -> np.ndarray:
    raw = base64.b64decode(spec["data"])
    return np.frombuffer(raw, dtype=spec["dtype"]).reshape(spec["shape"]).copy()


def save_checkpoint(path: str | Path, model: SiameseModel, config: dict) -> None:
    """Versioned JSON dump; float64 values round-trip exactly (raw-byte encoding)."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "layer_counts": {
            "encoder1": len(model.encoder1.weights),
            "encoder2": len(model.encoder2.weights),
            "predictor2": int(model.predictor2 is not None),
        },
        "tensors": {name: _encode_array(arr) for name, arr in model.named_tensors().items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[SiameseModel, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    tensors = {name: _decode_array(spec) for name, spec in doc["tensors"].items()}

    def read_encoder(prefix: str, n_layers: int) -> EncoderParams:
        return EncoderParams(
            weights=[tensors[f"{prefix}.w{i}"] for i in range(n_layers)],
            biases=[tensors[f"{prefix}.b{i}"] for i in range(n_layers)],
        )

    counts = doc["layer_counts"]
    model = SiameseModel(
        encoder1=read_encoder("encoder1", counts["encoder1"]),
        predictor1=PredictorParams(tensors["predictor1.w"], tensors["predictor1.b"]),
        encoder2=read_encoder("encoder2", counts["encoder2"]),
        predictor2=(
            PredictorParams(tensors["predictor2.w"], tensors["predictor2.b"])
            if counts.get("predictor2")
            else None
        ),
    )
    return model, doc["config"]
