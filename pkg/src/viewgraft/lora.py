"""Low-rank adapter algebra.

An adapter holds, per targeted layer, factors A (m x r) and B (r x n)
whose product (times a scalar scale) is the weight update for that
layer. Adapters can be materialized to dense deltas, extracted back from
dense deltas by truncated SVD, compared column-wise for alignment, and
persisted bit-exactly in the tensor container format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ContractError, FormatError, ParameterError
from .numerics import Rng, matmul, svd_truncated
from .numerics.matrix import Matrix, check_matrix, matrix


@dataclass(frozen=True)
class LoraLayer:
    a: Matrix  # m x r
    b: Matrix  # r x n
    scale: float = 1.0

    def __post_init__(self):
        check_matrix(self.a, "A")
        check_matrix(self.b, "B")
        if self.a.shape[1] != self.b.shape[0]:
            raise ContractError(f"A cols {self.a.shape[1]} != B rows {self.b.shape[0]}")
        if self.rank > min(self.a.shape[0], self.b.shape[1]):
            raise ContractError(f"rank {self.rank} exceeds min dim of {self.delta_shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def delta_shape(self) -> tuple[int, int]:
        return (self.a.shape[0], self.b.shape[1])


@dataclass(frozen=True)
class LoraAdapter:
    layers: dict[str, LoraLayer]
    concept_tag: str = ""
    uid_tokens: tuple[str, ...] = ()


@dataclass(frozen=True)
class AlignmentReport:
    per_layer: dict[str, tuple[float, float]] = field(default_factory=dict)  # key -> (mean, max)
    overall_mean: float = 0.0
    overall_max: float = 0.0
    baseline_mean: float = 0.0
    baseline_p95: float = 0.0


def init_adapter(
    shapes: dict[str, tuple[int, int]],
    rank: int,
    rng: Rng,
    concept_tag: str = "",
    uid_tokens: tuple[str, ...] = (),
) -> LoraAdapter:
    """Fresh adapter: A gaussian, B zero, so the initial delta is exactly zero."""
    layers = {}
    for key, (m, n) in shapes.items():
        if rank > min(m, n):
            raise ParameterError(f"rank {rank} exceeds min dim of layer {key!r} ({m}x{n})")
        a = rng.child(f"lora-a/{key}").normal(m, rank, std=1.0 / np.sqrt(m))
        b = np.zeros((rank, n), dtype=np.float32)
        b.setflags(write=False)
        layers[key] = LoraLayer(a=a, b=b)
    return LoraAdapter(layers=layers, concept_tag=concept_tag, uid_tokens=tuple(uid_tokens))


def materialize(adapter: LoraAdapter, key: str) -> Matrix:
    """Dense delta scale * A @ B for one layer."""
    layer = adapter.layers[key]
    delta = matmul(layer.a, layer.b)
    if layer.scale != 1.0:
        delta = matrix(delta.astype(np.float64) * layer.scale)
    return delta


def materialize_all(adapter: LoraAdapter) -> dict[str, Matrix]:
    return {key: materialize(adapter, key) for key in adapter.layers}


def extract_lora(delta: Matrix, r: int) -> tuple[Matrix, Matrix]:
    """Split a dense delta into (A, B) via truncated SVD; A @ B is the best rank-r fit."""
    u, s, v = svd_truncated(delta, r)
    root = np.sqrt(s.astype(np.float64))
    a = matrix(u.astype(np.float64) * root)
    b = matrix((v.astype(np.float64) * root).T)
    return a, b


def adapter_from_deltas(
    deltas: dict[str, Matrix],
    rank: int,
    concept_tag: str = "",
    uid_tokens: tuple[str, ...] = (),
) -> LoraAdapter:
    layers = {}
    for key, delta in deltas.items():
        r = min(rank, *delta.shape)
        a, b = extract_lora(delta, r)
        layers[key] = LoraLayer(a=a, b=b)
    return LoraAdapter(layers=layers, concept_tag=concept_tag, uid_tokens=tuple(uid_tokens))


def _column_cosines(da: Matrix, db: Matrix) -> np.ndarray:
    a = da.astype(np.float64)
    b = db.astype(np.float64)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    keep = (na > 1e-12) & (nb > 1e-12)
    if not np.any(keep):
        return np.zeros(0)
    dots = (a * b).sum(axis=0)
    return np.abs(dots[keep]) / (na[keep] * nb[keep])


def alignment(
    adapter_a: LoraAdapter,
    adapter_b: LoraAdapter,
    baseline_rng: Rng | None = None,
    baseline_trials: int = 200,
) -> AlignmentReport:
    """Column-wise |cosine| between two adapters' deltas, with a random baseline.

    The baseline is the Monte-Carlo distribution of the same mean-|cosine|
    statistic over pairs of same-shape gaussian matrices.
    """
    if set(adapter_a.layers) != set(adapter_b.layers):
        raise ContractError("adapters target different layer sets")
    per_layer = {}
    all_cos = []
    for key in adapter_a.layers:
        cos = _column_cosines(materialize(adapter_a, key), materialize(adapter_b, key))
        if cos.size == 0:
            per_layer[key] = (0.0, 0.0)
            continue
        per_layer[key] = (float(cos.mean()), float(cos.max()))
        all_cos.append(cos)

    flat = np.concatenate(all_cos) if all_cos else np.zeros(1)
    rng = baseline_rng if baseline_rng is not None else Rng(0).child("alignment-baseline")
    shapes = [adapter_a.layers[k].delta_shape for k in adapter_a.layers]
    trial_means = []
    for trial in range(baseline_trials):
        trng = rng.child(f"trial{trial}")
        means = []
        for i, (m, n) in enumerate(shapes):
            ra = trng.child(f"a{i}").normal(m, n)
            rb = trng.child(f"b{i}").normal(m, n)
            cos = _column_cosines(ra, rb)
            means.append(cos.mean())
        trial_means.append(float(np.mean(means)))
    trial_means = np.array(trial_means)

    return AlignmentReport(
        per_layer=per_layer,
        overall_mean=float(flat.mean()),
        overall_max=float(flat.max()),
        baseline_mean=float(trial_means.mean()),
        baseline_p95=float(np.percentile(trial_means, 95.0)),
    )


def save_adapter(adapter: LoraAdapter, path) -> None:
    tensors = {}
    scales = {}
    for key, layer in adapter.layers.items():
        tensors[f"{key}.A"] = layer.a
        tensors[f"{key}.B"] = layer.b
        scales[key] = layer.scale
    metadata = {
        "kind": "adapter",
        "concept_tag": adapter.concept_tag,
        "uid_tokens": json.dumps(list(adapter.uid_tokens)),
        "layer_order": json.dumps(list(adapter.layers)),
        "scales": json.dumps(scales, sort_keys=True),
    }
    container.save_tensors(path, tensors, metadata)


def load_adapter(path) -> LoraAdapter:
    tensors, metadata = container.load_tensors(path)
    if metadata.get("kind") != "adapter":
        raise FormatError(f"expected kind 'adapter', found {metadata.get('kind')!r}")
    order = json.loads(metadata.get("layer_order", "[]"))
    if not order:
        order = sorted({name.rsplit(".", 1)[0] for name in tensors})
    scales = json.loads(metadata.get("scales", "{}"))
    layers = {}
    for key in order:
        try:
            a = tensors[f"{key}.A"]
            b = tensors[f"{key}.B"]
        except KeyError as exc:
            raise FormatError(f"adapter layer {key!r} is missing tensor {exc}") from exc
        layers[key] = LoraLayer(a=a, b=b, scale=float(scales.get(key, 1.0)))
    return LoraAdapter(
        layers=layers,
        concept_tag=metadata.get("concept_tag", ""),
        uid_tokens=tuple(json.loads(metadata.get("uid_tokens", "[]"))),
    )
