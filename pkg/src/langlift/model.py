"""Micro decoder-only transformer with attachable low-rank adapters.

Pre-norm residual blocks, learned positional embeddings, gated MLP.
Tokens live on rows, so a projection stored as [d_in, d_out] is applied
as x @ W. An adapter adds scale * (x @ down) @ up to a projection; the
up matrix starts at zero, so a freshly attached adapter changes nothing
until trained, and merging folds scale * down @ up into the base matrix.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc

ATTENTION_TARGETS = ("wq", "wk", "wv", "wo")
MLP_TARGETS = ("w_gate", "w_up", "w_down")
ALL_TARGETS = ATTENTION_TARGETS + MLP_TARGETS

_NEG_MASK = -1e9  # finite additive mask; underflows to exact 0 after softmax


class ModelError(ValueError):
    pass


class SequenceLengthError(ModelError):
    pass


class MergeError(ModelError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    lora_targets: tuple = ALL_TARGETS

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.lora_rank < 1:
            raise ModelError("lora_rank must be at least 1")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ModelError("lora_dropout must be in [0, 1)")
        self.lora_targets = tuple(self.lora_targets)
        unknown = set(self.lora_targets) - set(ALL_TARGETS)
        if unknown:
            raise ModelError(f"unknown adapter targets: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["lora_targets"] = tuple(d.get("lora_targets", ALL_TARGETS))
        return cls(**d)


@dataclass
class LayerWeights:
    ln1_g: nc.Tensor
    ln1_b: nc.Tensor
    wq: nc.Tensor
    wk: nc.Tensor
    wv: nc.Tensor
    wo: nc.Tensor
    ln2_g: nc.Tensor
    ln2_b: nc.Tensor
    w_gate: nc.Tensor
    w_up: nc.Tensor
    w_down: nc.Tensor


@dataclass
class TransformerWeights:
    config: ModelConfig
    embed: nc.Tensor          # [vocab, d]
    pos: nc.Tensor            # [max_seq_len, d]
    layers: list[LayerWeights]
    lnf_g: nc.Tensor
    lnf_b: nc.Tensor
    head: nc.Tensor           # [d, vocab]

    def named(self):
        yield "embed", self.embed
        yield "pos", self.pos
        for i, layer in enumerate(self.layers):
            for fname in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
                          "ln2_g", "ln2_b", "w_gate", "w_up", "w_down"):
                yield f"layers.{i}.{fname}", getattr(layer, fname)
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b
        yield "head", self.head

    def base_matrices(self):
        """The frozen-under-adaptation projection matrices."""
        for i, layer in enumerate(self.layers):
            for fname in ALL_TARGETS:
                yield f"layers.{i}.{fname}", getattr(layer, fname)


def _t(rng, shape, std, dtype):
    return nc.Tensor(rng.normal(0.0, std, size=shape).astype(dtype))


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> TransformerWeights:
    rng = np.random.default_rng([seed, 201])
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    ones = lambda n: nc.Tensor(np.ones(n, dtype=dtype))
    zeros = lambda n: nc.Tensor(np.zeros(n, dtype=dtype))
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            ln1_g=ones(d), ln1_b=zeros(d),
            wq=_t(rng, (d, d), 0.02, dtype), wk=_t(rng, (d, d), 0.02, dtype),
            wv=_t(rng, (d, d), 0.02, dtype), wo=_t(rng, (d, d), 0.02, dtype),
            ln2_g=ones(d), ln2_b=zeros(d),
            w_gate=_t(rng, (d, ff), 0.02, dtype), w_up=_t(rng, (d, ff), 0.02, dtype),
            w_down=_t(rng, (ff, d), 0.02, dtype),
        ))
    return TransformerWeights(
        config=config,
        embed=_t(rng, (v, d), 0.02, dtype),
        pos=_t(rng, (config.max_seq_len, d), 0.02, dtype),
        layers=layers,
        lnf_g=ones(d), lnf_b=zeros(d),
        head=_t(rng, (d, v), 0.02, dtype),
    )


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank update for one projection: delta(x) = scale * (x @ down) @ up.

    up is zero at construction so the update starts at exactly zero;
    scale is alpha / rank, so doubling alpha and rank together changes
    nothing.
    """

    down: nc.Tensor           # [d_in, rank], random init
    up: nc.Tensor             # [rank, d_out], zero init
    scale: float
    dropout: float = 0.0
    enabled: bool = True
    merged: bool = field(default=False, compare=False)


def _target_dims(config: ModelConfig, target: str) -> tuple[int, int]:
    d, ff = config.d_model, config.d_ff
    if target in ATTENTION_TARGETS:
        return d, d
    if target in ("w_gate", "w_up"):
        return d, ff
    return ff, d


def init_adapters(config: ModelConfig, seed: int, dtype=np.float32) -> list[dict[str, LoraAdapter]]:
    """One adapter per configured target per layer."""
    rng = np.random.default_rng([seed, 202])
    scale = config.lora_alpha / config.lora_rank
    adapters = []
    for _ in range(config.n_layers):
        per_layer = {}
        for target in config.lora_targets:
            d_in, d_out = _target_dims(config, target)
            per_layer[target] = LoraAdapter(
                down=_t(rng, (d_in, config.lora_rank), 0.02, dtype),
                up=nc.Tensor(np.zeros((config.lora_rank, d_out), dtype=dtype)),
                scale=scale,
                dropout=config.lora_dropout,
            )
        adapters.append(per_layer)
    return adapters


def adapters_named(adapters):
    for i, per_layer in enumerate(adapters):
        for target in sorted(per_layer):
            yield f"layers.{i}.lora.{target}.down", per_layer[target].down
            yield f"layers.{i}.lora.{target}.up", per_layer[target].up


def set_adapters_enabled(adapters, enabled: bool) -> None:
    for per_layer in adapters:
        for a in per_layer.values():
            a.enabled = enabled


def lora_apply(h: nc.Tensor, w: nc.Tensor, adapter: LoraAdapter | None,
               training: bool = False, rng=None) -> nc.Tensor:
    """x @ W plus the adapter branch when enabled.

    Outside a recording tape a still-zero adapter is skipped entirely,
    so the output is bit-identical to the base projection. Under a tape
    the branch is always computed (the zero up matrix needs gradients to
    start learning). Dropout hits only the adapter branch, only in
    training mode.
    """
    base = nc.matmul(h, w)
    if adapter is None or not adapter.enabled:
        return base
    if nc.active_tape() is None and not np.any(adapter.up.data):
        return base
    branch = h
    if training and adapter.dropout > 0.0:
        if rng is None:
            raise ModelError("training-mode dropout needs a generator")
        branch = nc.dropout(branch, adapter.dropout, rng)
    delta = nc.matmul(nc.matmul(branch, adapter.down), adapter.up)
    return nc.add(base, nc.scale(delta, adapter.scale))


def merge_adapters(weights: TransformerWeights, adapters) -> TransformerWeights:
    """Fold scale * down @ up into every wrapped projection in place.

    Adapters are consumed: their matrices are zeroed and a second merge
    of the same set is rejected.
    """
    for per_layer in adapters:
        for target, a in per_layer.items():
            if a.merged:
                raise MergeError("adapters were already merged; attach fresh ones first")
    for layer, per_layer in zip(weights.layers, adapters):
        for target, a in per_layer.items():
            delta = (a.down.data @ a.up.data) * np.asarray(a.scale, dtype=a.down.dtype)
            w = getattr(layer, target)
            if np.any(delta):
                w.data = w.data + delta.astype(w.dtype)
            a.up.data = np.zeros_like(a.up.data)
            a.down.data = np.zeros_like(a.down.data)
            a.merged = True
    return weights


def extend_embeddings(weights: TransformerWeights, old_vocab_size: int,
                      new_vocab_size: int, seed: int) -> TransformerWeights:
    """Grow the token embedding and output head to a larger vocabulary.

    Existing rows/columns are copied bit-exactly; new ones are drawn
    from a seeded normal(0, 0.02). Returns a fresh weight struct.
    """
    if old_vocab_size != weights.config.vocab_size:
        raise ModelError(
            f"old_vocab_size {old_vocab_size} does not match current {weights.config.vocab_size}"
        )
    if new_vocab_size < old_vocab_size:
        raise ModelError("vocabulary cannot shrink")
    out = copy.deepcopy(weights)
    out.config = ModelConfig.from_dict({**weights.config.to_dict(), "vocab_size": new_vocab_size})
    if new_vocab_size == old_vocab_size:
        return out
    rng = np.random.default_rng([seed, 203])
    d = weights.config.d_model
    dtype = weights.embed.dtype
    extra = new_vocab_size - old_vocab_size
    new_embed = np.concatenate(
        [weights.embed.data, rng.normal(0.0, 0.02, size=(extra, d)).astype(dtype)], axis=0)
    new_head = np.concatenate(
        [weights.head.data, rng.normal(0.0, 0.02, size=(d, extra)).astype(dtype)], axis=1)
    out.embed = nc.Tensor(new_embed)
    out.head = nc.Tensor(new_head)
    return out


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

_mask_cache: dict[tuple[int, str], nc.Tensor] = {}


def _causal_mask(t: int, dtype) -> nc.Tensor:
    key = (t, np.dtype(dtype).name)
    m = _mask_cache.get(key)
    if m is None:
        data = np.triu(np.full((t, t), _NEG_MASK, dtype=dtype), k=1)
        m = nc.Tensor(data)
        _mask_cache[key] = m
    return m


@dataclass
class ForwardResult:
    logits: nc.Tensor                      # [T, vocab]
    hidden: nc.Tensor | None = None        # [T, d] last block output
    attention: list[np.ndarray] | None = None  # per layer, head-averaged [T, T]


def forward(ids, weights: TransformerWeights, adapters=None,
            want_hidden: bool = False, want_attention: bool = False,
            training: bool = False, rng=None) -> ForwardResult:
    """Run the decoder over a token sequence.

    Position t attends only to positions <= t. With adapters absent,
    disabled, or still zero (outside a tape), the result equals the
    base model's output exactly.
    """
    config = weights.config
    ids = list(ids)
    t = len(ids)
    if t == 0:
        raise ModelError("forward needs at least one token")
    if t > config.max_seq_len:
        raise SequenceLengthError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    for i in ids:
        if not 0 <= int(i) < config.vocab_size:
            raise ModelError(f"token id {i} out of vocabulary range")

    n_heads = config.n_heads
    d_head = config.d_model // n_heads
    inv_sqrt = 1.0 / np.sqrt(d_head)
    mask = _causal_mask(t, weights.embed.dtype)
    attn_maps: list[np.ndarray] | None = [] if want_attention else None

    def adapter_for(layer_idx: int, target: str) -> LoraAdapter | None:
        if adapters is None:
            return None
        return adapters[layer_idx].get(target)

    h = nc.add(nc.embedding(weights.embed, ids), nc.embedding(weights.pos, list(range(t))))
    for li, layer in enumerate(weights.layers):
        x = nc.layer_norm(h, layer.ln1_g, layer.ln1_b)
        q = lora_apply(x, layer.wq, adapter_for(li, "wq"), training, rng)
        k = lora_apply(x, layer.wk, adapter_for(li, "wk"), training, rng)
        v = lora_apply(x, layer.wv, adapter_for(li, "wv"), training, rng)
        heads = []
        layer_attn = None
        for hd in range(n_heads):
            lo, hi = hd * d_head, (hd + 1) * d_head
            qh = nc.slice_cols(q, lo, hi)
            kh = nc.slice_cols(k, lo, hi)
            vh = nc.slice_cols(v, lo, hi)
            scores = nc.add(nc.scale(nc.matmul(qh, nc.transpose(kh)), inv_sqrt), mask)
            probs = nc.softmax_rows(scores)
            if attn_maps is not None:
                layer_attn = probs.data if layer_attn is None else layer_attn + probs.data
            heads.append(nc.matmul(probs, vh))
        if attn_maps is not None:
            attn_maps.append(layer_attn / n_heads)
        ctx = nc.concat_cols(heads)
        attn_out = lora_apply(ctx, layer.wo, adapter_for(li, "wo"), training, rng)
        h = nc.add(h, attn_out)

        x = nc.layer_norm(h, layer.ln2_g, layer.ln2_b)
        gate = nc.silu(lora_apply(x, layer.w_gate, adapter_for(li, "w_gate"), training, rng))
        up = lora_apply(x, layer.w_up, adapter_for(li, "w_up"), training, rng)
        mlp = lora_apply(nc.mul(gate, up), layer.w_down, adapter_for(li, "w_down"), training, rng)
        h = nc.add(h, mlp)

    final = nc.layer_norm(h, weights.lnf_g, weights.lnf_b)
    logits = nc.matmul(final, weights.head)
    return ForwardResult(
        logits=logits,
        hidden=h if want_hidden else None,
        attention=attn_maps,
    )


# ---------------------------------------------------------------------------
# bundle and checkpoint format
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """A model plus whatever adapters are attached and its vocabulary hash."""

    config: ModelConfig
    weights: TransformerWeights
    adapters: list[dict[str, LoraAdapter]] | None = None
    vocab_hash: str = ""

    def named_parameters(self):
        yield from self.weights.named()
        if self.adapters is not None:
            yield from adapters_named(self.adapters)

    def trainable_parameters(self):
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]


def attach_adapters(bundle: ModelBundle, seed: int) -> ModelBundle:
    bundle.adapters = init_adapters(bundle.config, seed, dtype=bundle.weights.embed.dtype)
    return bundle


def set_trainable(bundle: ModelBundle, mode: str) -> None:
    """"lora": adapters + embeddings + positional table + head train,
    base projections and norms stay frozen. "full": everything trains."""
    if mode not in ("lora", "full"):
        raise ModelError(f"unknown trainable mode {mode!r}")
    for _, tensor in bundle.weights.named():
        tensor.requires_grad = mode == "full"
        tensor.grad = None
    if mode == "lora":
        for t in (bundle.weights.embed, bundle.weights.pos, bundle.weights.head):
            t.requires_grad = True
        if bundle.adapters is None:
            raise ModelError("lora training mode needs attached adapters")
    if bundle.adapters is not None:
        for _, tensor in adapters_named(bundle.adapters):
            tensor.requires_grad = mode == "lora"
            tensor.grad = None


def clone_bundle(bundle: ModelBundle) -> ModelBundle:
    return copy.deepcopy(bundle)


CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "weights.bin"


def write_checkpoint(path: str, named_arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Manifest (tensor names, shapes, byte offsets, meta) plus one blob
    of little-endian float32. load(save(x)) is bit-exact."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name], dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "langlift-checkpoint-v1", "meta": meta, "tensors": entries}
    with open(os.path.join(path, CHECKPOINT_BLOB), "wb") as f:
        f.write(b"".join(chunks))
    tmp = os.path.join(path, CHECKPOINT_MANIFEST + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(path, CHECKPOINT_MANIFEST))


def read_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, CHECKPOINT_MANIFEST), encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != "langlift-checkpoint-v1":
        raise ModelError(f"{path} is not a langlift checkpoint")
    with open(os.path.join(path, CHECKPOINT_BLOB), "rb") as f:
        blob = f.read()
    arrays = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def save_bundle(bundle: ModelBundle, path: str, extra_meta: dict | None = None) -> None:
    arrays = {name: t.data for name, t in bundle.named_parameters()}
    meta = {
        "config": bundle.config.to_dict(),
        "vocab_hash": bundle.vocab_hash,
        "has_adapters": bundle.adapters is not None,
        "adapter_scale": (None if bundle.adapters is None or not bundle.adapters
                          else bundle.adapters[0][sorted(bundle.adapters[0])[0]].scale),
    }
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(path, arrays, meta)


def load_bundle(path: str, expect_vocab_hash: str | None = None) -> tuple[ModelBundle, dict]:
    arrays, meta = read_checkpoint(path)
    if expect_vocab_hash is not None and meta.get("vocab_hash") != expect_vocab_hash:
        raise ModelError(
            f"checkpoint vocabulary hash {meta.get('vocab_hash')!r} does not match "
            f"expected {expect_vocab_hash!r}"
        )
    config = ModelConfig.from_dict(meta["config"])
    weights = init_weights(config, seed=0)
    bundle = ModelBundle(config=config, weights=weights, vocab_hash=meta.get("vocab_hash", ""))
    if meta.get("has_adapters"):
        bundle.adapters = init_adapters(config, seed=0)
        scale = meta.get("adapter_scale")
        if scale is not None:
            for per_layer in bundle.adapters:
                for a in per_layer.values():
                    a.scale = float(scale)
    for name, tensor in bundle.named_parameters():
        if name not in arrays:
            raise ModelError(f"checkpoint is missing tensor {name!r}")
        if tuple(arrays[name].shape) != tensor.shape:
            raise ModelError(f"checkpoint tensor {name!r} has shape {arrays[name].shape}, "
                             f"expected {tensor.shape}")
        tensor.data = arrays[name]
    return bundle, meta
