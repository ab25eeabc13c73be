"""Toy conditional denoising-diffusion model.

A two-block transformer over image patches predicts the noise added at a
sampled timestep, conditioned on a short prompt through cross-attention.
The attention projections (q, k, v, out in both self- and cross-attention)
are the layers that low-rank adapters may target; everything else is part
of the frozen base after pretraining.

Epsilon-prediction DDPM with a linear beta schedule; DDIM for
deterministic sampling.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Union

import numpy as np

from . import container, scenegen
from .errors import ContractError, FormatError, ParameterError, TrainingDivergenceError
from .lora import LoraAdapter, LoraLayer, materialize
from .numerics import AdamState, Rng, adam_step, sgd_step
from .numerics.matrix import Matrix
from .numerics.tape import (
    Node,
    Tape,
    add,
    backward,
    broadcast_cols,
    concat_rows,
    gelu,
    hadamard,
    layer_norm,
    matmul,
    mse_loss,
    row_softmax,
    scale,
    slice_rows,
    transpose,
)
from .reporting import write_csv


@dataclass(frozen=True)
class DenoiserConfig:
    grid: int = 24
    patch_size: int = 4
    embed_dim: int = 64
    n_blocks: int = 2
    n_timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    vocab_size: int = len(scenegen.DEFAULT_VOCAB)
    max_prompt_len: int = 6

    def __post_init__(self):
        if self.grid % self.patch_size != 0:
            raise ParameterError(f"grid {self.grid} not divisible by patch size {self.patch_size}")
        if self.n_timesteps < 10:
            raise ParameterError("need at least 10 timesteps")

    @property
    def n_patches(self) -> int:
        return (self.grid // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    lr: float = 5e-5
    batch_size: int = 1
    seed: int = 0
    optimizer: str = "sgd"  # "adam" is accepted for base pretraining only

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ModelWeights:
    config: DenoiserConfig
    layers: dict[str, Matrix]


def layer_keys(cfg: DenoiserConfig) -> tuple[str, ...]:
    """Canonical, ordered layer-key contract shared with the adapter module."""
    keys = ["patch_embed", "pos_embed", "time_embed", "text_embed"]
    for i in range(cfg.n_blocks):
        for attn in ("self", "cross"):
            for proj in ("q", "k", "v", "out"):
                keys.append(f"block{i}.{attn}.{proj}")
        keys.append(f"block{i}.mlp.in")
        keys.append(f"block{i}.mlp.out")
        for norm in ("norm1", "norm2", "norm3"):
            keys.append(f"block{i}.{norm}.g")
    keys.append("final_norm.g")
    keys.append("head")
    return tuple(keys)


def attention_projection_keys(cfg: DenoiserConfig) -> tuple[str, ...]:
    return tuple(
        f"block{i}.{attn}.{proj}"
        for i in range(cfg.n_blocks)
        for attn in ("self", "cross")
        for proj in ("q", "k", "v", "out")
    )


def layer_shape(cfg: DenoiserConfig, key: str) -> tuple[int, int]:
    d = cfg.embed_dim
    if key == "patch_embed":
        return (cfg.patch_dim, d)
    if key == "pos_embed":
        return (cfg.n_patches, d)
    if key == "time_embed":
        return (cfg.n_timesteps, d)
    if key == "text_embed":
        return (cfg.vocab_size, d)
    if key == "head":
        return (d, cfg.patch_dim)
    if key.endswith(".g"):
        return (1, d)
    if key.endswith(".mlp.in"):
        return (d, 2 * d)
    if key.endswith(".mlp.out"):
        return (2 * d, d)
    return (d, d)  # attention projections


def _sinusoid_table(rows: int, dim: int, base: float = 10_000.0) -> Matrix:
    # smooth-in-index features, so sparse per-row SGD updates start from an
    # informative table instead of independent random rows
    pos = np.arange(rows, dtype=np.float64)[:, None]
    k = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(base, 2.0 * k / dim)
    table = np.zeros((rows, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)[:, : dim - dim // 2]
    out = table.astype(np.float32)
    out.setflags(write=False)
    return out


def init_weights(cfg: DenoiserConfig, rng: Rng) -> ModelWeights:
    d = cfg.embed_dim
    layers: dict[str, Matrix] = {}
    for key in layer_keys(cfg):
        rows, cols = layer_shape(cfg, key)
        r = rng.child(f"init/{key}")
        if key.endswith(".g"):
            g = np.ones((1, d), dtype=np.float32)
            g.setflags(write=False)
            layers[key] = g
        elif key in ("pos_embed", "time_embed"):
            layers[key] = _sinusoid_table(rows, cols)
        elif key == "text_embed":
            layers[key] = r.normal(rows, cols, std=1.0)
        elif key == "head":
            layers[key] = r.normal(rows, cols, std=0.02)
        else:
            layers[key] = r.normal(rows, cols, std=1.0 / math.sqrt(rows))
    return ModelWeights(config=cfg, layers=layers)


# --------------------------------------------------------------------------
# schedule and patch plumbing


def beta_schedule(cfg: DenoiserConfig) -> tuple[np.ndarray, np.ndarray]:
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.n_timesteps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return betas, alpha_bar


def patchify(image, cfg: DenoiserConfig) -> np.ndarray:
    p = cfg.patch_size
    side = cfg.grid // p
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != (cfg.grid, cfg.grid):
        raise ParameterError(f"image shape {arr.shape} does not match grid {cfg.grid}")
    return arr.reshape(side, p, side, p).transpose(0, 2, 1, 3).reshape(cfg.n_patches, cfg.patch_dim)


def unpatchify(patches, cfg: DenoiserConfig) -> np.ndarray:
    p = cfg.patch_size
    side = cfg.grid // p
    arr = np.asarray(patches, dtype=np.float64)
    return arr.reshape(side, side, p, p).transpose(0, 2, 1, 3).reshape(cfg.grid, cfg.grid)


def _pad_prompt(prompt, cfg: DenoiserConfig) -> tuple[int, ...]:
    ids = tuple(int(t) for t in prompt)
    if len(ids) > cfg.max_prompt_len:
        raise ParameterError(f"prompt of {len(ids)} tokens exceeds max {cfg.max_prompt_len}")
    if any(t < 0 or t >= cfg.vocab_size for t in ids):
        raise ParameterError("prompt token id outside the vocabulary")
    pad = scenegen.DEFAULT_VOCAB.pad_id
    return ids + (pad,) * (cfg.max_prompt_len - len(ids))


# --------------------------------------------------------------------------
# forward pass on a tape

AdapterLike = Union[None, LoraAdapter, Mapping[str, Matrix]]


def _stage_params(tape: Tape, weights: ModelWeights, adapters: AdapterLike, trainable=frozenset()):
    """Leaves for every layer; adapter deltas are added onto their targets."""
    nodes = {key: tape.leaf(w, trainable=key in trainable) for key, w in weights.layers.items()}
    if adapters is None:
        return nodes
    deltas = materialize_deltas(adapters)
    for key, delta in deltas.items():
        if key not in nodes:
            raise KeyError(f"adapter targets unknown layer {key!r}")
        nodes[key] = add(nodes[key], tape.leaf(delta))
    return nodes


def materialize_deltas(adapters: AdapterLike) -> dict[str, Matrix]:
    if adapters is None:
        return {}
    if isinstance(adapters, LoraAdapter):
        return {key: materialize(adapters, key) for key in adapters.layers}
    return dict(adapters)


def _attention(x: Node, keys_values: Node, params, prefix: str, d: int) -> Node:
    q = matmul(x, params[f"{prefix}.q"])
    k = matmul(keys_values, params[f"{prefix}.k"])
    v = matmul(keys_values, params[f"{prefix}.v"])
    attn = row_softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))
    return matmul(matmul(attn, v), params[f"{prefix}.out"])


def _gain(x: Node, params, key: str, rows: int) -> Node:
    return hadamard(layer_norm(x), broadcast_cols(params[key], rows))


def _predict_eps(tape: Tape, params: dict[str, Node], cfg: DenoiserConfig, noisy: Node, t: int, prompt) -> Node:
    if not (0 <= t < cfg.n_timesteps):
        raise ParameterError(f"timestep {t} outside [0, {cfg.n_timesteps})")
    n = cfg.n_patches
    d = cfg.embed_dim

    x = matmul(noisy, params["patch_embed"])
    t_row = slice_rows(params["time_embed"], t, t + 1)
    x = add(x, broadcast_cols(t_row, n))
    x = add(x, params["pos_embed"])

    ids = _pad_prompt(prompt, cfg)
    text = concat_rows([slice_rows(params["text_embed"], i, i + 1) for i in ids])

    for b in range(cfg.n_blocks):
        h = _gain(x, params, f"block{b}.norm1.g", n)
        x = add(x, _attention(h, h, params, f"block{b}.self", d))
        h = _gain(x, params, f"block{b}.norm2.g", n)
        x = add(x, _attention(h, text, params, f"block{b}.cross", d))
        h = _gain(x, params, f"block{b}.norm3.g", n)
        x = add(x, matmul(gelu(matmul(h, params[f"block{b}.mlp.in"])), params[f"block{b}.mlp.out"]))

    h = _gain(x, params, "final_norm.g", n)
    return matmul(h, params["head"])


def forward(weights: ModelWeights, adapters: AdapterLike, noisy_image, t: int, prompt) -> Matrix:
    """Predicted noise for a noisy image, as an image-shaped matrix."""
    cfg = weights.config
    tape = Tape()
    params = _stage_params(tape, weights, adapters)
    noisy = tape.leaf(patchify(noisy_image, cfg))
    pred = _predict_eps(tape, params, cfg, noisy, t, prompt)
    out = unpatchify(pred.value, cfg).astype(np.float32)
    out.setflags(write=False)
    return out


def _loss_on_tape(tape, params, cfg, scene: scenegen.RenderedScene, prompt, t: int, eps: np.ndarray) -> Node:
    _, alpha_bar = beta_schedule(cfg)
    x0 = patchify(scene.image.astype(np.float64) * 2.0 - 1.0, cfg)
    x_t = math.sqrt(alpha_bar[t]) * x0 + math.sqrt(1.0 - alpha_bar[t]) * eps
    pred = _predict_eps(tape, params, cfg, tape.leaf(x_t), t, prompt)
    return mse_loss(pred, tape.leaf(eps))


def diffusion_loss(weights: ModelWeights, adapters: AdapterLike, scene, prompt, rng: Rng) -> Node:
    """MSE between true and predicted noise at a uniformly sampled timestep."""
    cfg = weights.config
    t = rng.integer(0, cfg.n_timesteps)
    eps = rng.normal(cfg.n_patches, cfg.patch_dim).astype(np.float64)
    tape = Tape()
    params = _stage_params(tape, weights, adapters)
    return _loss_on_tape(tape, params, cfg, scene, prompt, t, eps)


# --------------------------------------------------------------------------
# training loops


def _draw_batch(dataset: scenegen.Dataset, rng: Rng, batch_size: int):
    n = len(dataset.items)
    return [dataset.items[rng.integer(0, n)] for _ in range(batch_size)]


def pretrain(
    cfg: DenoiserConfig,
    train_cfg: TrainConfig,
    dataset: scenegen.Dataset,
    log_path=None,
) -> ModelWeights:
    """Train the base model on the full factor grid; later stages freeze it."""
    weights = init_weights(cfg, Rng(train_cfg.seed).child("weights-init"))
    rng = Rng(train_cfg.seed).child("pretrain")
    all_keys = frozenset(layer_keys(cfg))
    adam_state = AdamState()
    log_rows = []
    for it in range(train_cfg.iterations):
        tape = Tape()
        params = _stage_params(tape, weights, None, trainable=all_keys)
        losses = []
        for scene, prompt in _draw_batch(dataset, rng, train_cfg.batch_size):
            t = rng.integer(0, cfg.n_timesteps)
            eps = rng.normal(cfg.n_patches, cfg.patch_dim).astype(np.float64)
            losses.append(_loss_on_tape(tape, params, cfg, scene, prompt, t, eps))
        loss = losses[0]
        for extra in losses[1:]:
            loss = add(loss, extra)
        if len(losses) > 1:
            loss = scale(loss, 1.0 / len(losses))
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"pretrain loss became non-finite at iteration {it}")
        grads = backward(tape, loss)
        by_key = {key: grads[node] for key, node in params.items() if node in grads}
        if train_cfg.optimizer == "adam":
            new_layers = adam_step(weights.layers, by_key, adam_state, train_cfg.lr)
        else:
            new_layers = sgd_step(weights.layers, by_key, train_cfg.lr)
        weights = ModelWeights(config=cfg, layers=new_layers)
        log_rows.append({"iteration": it, "loss": value})
    if log_path is not None:
        write_csv(log_path, ["iteration", "loss"], log_rows)
    return weights


def finetune_lora(
    base: ModelWeights,
    adapter: LoraAdapter,
    dataset: scenegen.Dataset,
    train_cfg: TrainConfig,
    log_path=None,
) -> LoraAdapter:
    """Dreambooth-style concept finetuning: base frozen, only A and B move."""
    cfg = base.config
    allowed = set(attention_projection_keys(cfg))
    for key, layer in adapter.layers.items():
        if key not in allowed:
            raise ContractError(f"adapter layer {key!r} is not an attention projection")
        if layer.delta_shape != base.layers[key].shape:
            raise ContractError(f"adapter delta shape mismatch on {key!r}")

    ab = {}
    for key, layer in adapter.layers.items():
        ab[f"{key}.A"] = layer.a
        ab[f"{key}.B"] = layer.b
    rng = Rng(train_cfg.seed).child(f"finetune/{adapter.concept_tag}")
    log_rows = []
    for it in range(train_cfg.iterations):
        tape = Tape()
        params = {key: tape.leaf(w) for key, w in base.layers.items()}
        ab_nodes = {}
        for key, layer in adapter.layers.items():
            a_node = tape.leaf(ab[f"{key}.A"], trainable=True)
            b_node = tape.leaf(ab[f"{key}.B"], trainable=True)
            ab_nodes[f"{key}.A"] = a_node
            ab_nodes[f"{key}.B"] = b_node
            delta = matmul(a_node, b_node)
            if adapter.layers[key].scale != 1.0:
                delta = scale(delta, adapter.layers[key].scale)
            params[key] = add(params[key], delta)

        losses = []
        for scene, prompt in _draw_batch(dataset, rng, train_cfg.batch_size):
            t = rng.integer(0, cfg.n_timesteps)
            eps = rng.normal(cfg.n_patches, cfg.patch_dim).astype(np.float64)
            losses.append(_loss_on_tape(tape, params, cfg, scene, prompt, t, eps))
        loss = losses[0]
        for extra in losses[1:]:
            loss = add(loss, extra)
        if len(losses) > 1:
            loss = scale(loss, 1.0 / len(losses))
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise TrainingDivergenceError(f"finetune loss became non-finite at iteration {it}")
        grads = backward(tape, loss)
        by_name = {name: grads[node] for name, node in ab_nodes.items() if node in grads}
        ab = sgd_step(ab, by_name, train_cfg.lr)
        log_rows.append({"iteration": it, "loss": value})

    if log_path is not None:
        write_csv(log_path, ["iteration", "loss"], log_rows)
    new_layers = {
        key: LoraLayer(a=ab[f"{key}.A"], b=ab[f"{key}.B"], scale=layer.scale)
        for key, layer in adapter.layers.items()
    }
    return LoraAdapter(layers=new_layers, concept_tag=adapter.concept_tag, uid_tokens=adapter.uid_tokens)


# --------------------------------------------------------------------------
# sampling


def _predict_value(weights, adapters, cfg, x_patches, t, prompt) -> np.ndarray:
    tape = Tape()
    params = _stage_params(tape, weights, adapters)
    return _predict_eps(tape, params, cfg, tape.leaf(x_patches), t, prompt).value


def sample_ddim(
    weights: ModelWeights,
    adapters: AdapterLike,
    prompt,
    n_steps: int = 20,
    seed: int = 0,
) -> Matrix:
    """Deterministic DDIM sample, clipped to [0, 1]."""
    cfg = weights.config
    if n_steps < 1 or n_steps > cfg.n_timesteps:
        raise ParameterError(f"n_steps must be in [1, {cfg.n_timesteps}]")
    _, alpha_bar = beta_schedule(cfg)
    deltas = materialize_deltas(adapters) or None
    rng = Rng(seed).child("ddim-init")
    x = rng.normal(cfg.n_patches, cfg.patch_dim).astype(np.float64)
    ts = [int(round(v)) for v in np.linspace(cfg.n_timesteps - 1, 0, n_steps)]
    for i, t in enumerate(ts):
        eps_hat = _predict_value(weights, deltas, cfg, x, t, prompt)
        ab_t = alpha_bar[t]
        x0 = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        ab_prev = alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat
    img = np.clip((unpatchify(x, cfg) + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
    img.setflags(write=False)
    return img


def sample_ancestral(
    weights: ModelWeights,
    adapters: AdapterLike,
    prompt,
    seed: int = 0,
    noise_scale: float = 1.0,
) -> Matrix:
    """DDPM ancestral sampling; noise_scale=0 gives the deterministic mean path."""
    cfg = weights.config
    betas, alpha_bar = beta_schedule(cfg)
    deltas = materialize_deltas(adapters) or None
    rng = Rng(seed).child("ddim-init")
    x = rng.normal(cfg.n_patches, cfg.patch_dim).astype(np.float64)
    step_rng = Rng(seed).child("ancestral-steps")
    for t in range(cfg.n_timesteps - 1, -1, -1):
        eps_hat = _predict_value(weights, deltas, cfg, x, t, prompt)
        alpha_t = 1.0 - betas[t]
        mean = (x - betas[t] / math.sqrt(1.0 - alpha_bar[t]) * eps_hat) / math.sqrt(alpha_t)
        if t > 0 and noise_scale > 0.0:
            var = betas[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
            z = step_rng.normal(cfg.n_patches, cfg.patch_dim).astype(np.float64)
            x = mean + noise_scale * math.sqrt(var) * z
        else:
            x = mean
    img = np.clip((unpatchify(x, cfg) + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
    img.setflags(write=False)
    return img


# --------------------------------------------------------------------------
# checkpoints


def save_model(weights: ModelWeights, path) -> None:
    metadata = {
        "kind": "model",
        "config": json.dumps(asdict(weights.config), sort_keys=True),
        "layer_order": json.dumps(list(weights.layers)),
    }
    container.save_tensors(path, weights.layers, metadata)


def load_model(path) -> ModelWeights:
    tensors, metadata = container.load_tensors(path)
    if metadata.get("kind") != "model":
        raise FormatError(f"expected kind 'model', found {metadata.get('kind')!r}")
    cfg = DenoiserConfig(**json.loads(metadata["config"]))
    order = json.loads(metadata.get("layer_order", "[]")) or sorted(tensors)
    return ModelWeights(config=cfg, layers={k: tensors[k] for k in order})
