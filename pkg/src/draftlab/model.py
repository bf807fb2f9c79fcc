"""Acoustic model: conv front-end, transformer encoder, residual adapters, heads."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, SequenceTooShortError, StateError
from .params import Group, ParamStore
from .tensor import Tensor

HEAD_KINDS = ("apc", "masked", "contrastive", "asr")
SSL_HEADS = ("apc", "masked", "contrastive")
ADAPTER_TENSORS = ("ln_gain", "ln_bias", "w1", "b1", "w2", "b2")
PLACEMENTS = ("block_output", "ffn_output")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    causal: bool = True
    subsample: int = 4
    in_dim: int = 80
    ssl_out_dim: int = 320
    vocab_size: int = 29
    conv_channels: int = 64
    conv_kernel: int = 3
    apc_shifts: tuple[int, ...] = (1, 2, 3)
    n_clusters: int = 32
    proj_dim: int = 64
    adapter_placement: str = "block_output"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.subsample != 4:
            raise ConfigurationError("subsample must be 4 (two stride-2 conv layers)")
        if self.ssl_out_dim != self.subsample * self.in_dim:
            raise ConfigurationError("ssl_out_dim must equal subsample * in_dim")
        if not self.apc_shifts or min(self.apc_shifts) < 1 or len(set(self.apc_shifts)) != len(self.apc_shifts):
            raise ConfigurationError(f"apc_shifts must be distinct positive integers, got {self.apc_shifts}")
        if self.adapter_placement not in PLACEMENTS:
            raise ConfigurationError(f"adapter_placement must be one of {PLACEMENTS}")

    @property
    def n_adapters(self) -> int:
        return self.n_layers + 1


def desk_preset(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def paper_preset(**overrides) -> ModelConfig:
    """Paper-scale sizes; used for parameter accounting, never trained here."""
    base = ModelConfig(d_model=512, n_layers=12, n_heads=8, d_ff=2048, conv_channels=256,
                       apc_shifts=(1, 2, 3, 4), proj_dim=256)
    return replace(base, **overrides)


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def adapter_param_count(d_model: int, d_ada: int) -> int:
    return 2 * d_model + (d_model * d_ada + d_ada) + (d_ada * d_model + d_model)


def frontend_lengths(lengths, kernel: int = 3) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    l1 = (lengths - kernel) // 2 + 1
    return (l1 - kernel) // 2 + 1


def min_frames(kernel: int = 3) -> int:
    """Shortest raw input producing one subsampled step."""
    return 3 * kernel - 2


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out


def adapter_forward(x: Tensor, a: dict[str, Tensor], eps: float = 1e-5) -> Tensor:
    """``x + W2 relu(W1 LN(x) + b1) + b2``."""
    d = a["ln_gain"].shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"adapter expects last extent {d}, got {x.shape}")
    h = T.layer_norm(x, a["ln_gain"], a["ln_bias"], eps)
    h = T.relu(T.linear(h, a["w1"], a["b1"]))
    return x + T.linear(h, a["w2"], a["b2"])


@dataclass
class Encoded:
    hidden: Tensor  # [B, T'', d] after the final layer norm
    frontend: Tensor  # [B, T'', d] front-end projection, before masking/positions
    lengths: np.ndarray
    padding_mask: np.ndarray  # [B, T''] True on real steps
    layer_inputs: list[Tensor] = field(default_factory=list)


def backbone_layout(c: ModelConfig) -> list[tuple[str, tuple[int, ...], Group, str]]:
    """(name, shape, group, init) for every backbone tensor, in creation order.

    ``init`` is ``"ones"``, ``"zeros"``, ``"normal"`` or ``"dense:<fan_in>"``.
    """
    bb, k, d = Group.BACKBONE, c.conv_kernel, c.d_model
    out = [
        ("frontend.conv1.weight", (k, c.in_dim, c.conv_channels), bb, f"dense:{k * c.in_dim}"),
        ("frontend.conv1.bias", (c.conv_channels,), bb, "zeros"),
        ("frontend.conv2.weight", (k, c.conv_channels, d), bb, f"dense:{k * c.conv_channels}"),
        ("frontend.conv2.bias", (d,), bb, "zeros"),
        ("frontend.proj.weight", (d, d), bb, f"dense:{d}"),
        ("frontend.proj.bias", (d,), bb, "zeros"),
    ]
    for i in range(c.n_layers):
        p = f"blocks.{i:02d}."
        for ln in ("ln1", "ln2"):
            out.append((p + ln + ".gain", (d,), bb, "ones"))
            out.append((p + ln + ".bias", (d,), bb, "zeros"))
        for m in ("wq", "wk", "wv", "wo"):
            out.append((p + "attn." + m, (d, d), bb, f"dense:{d}"))
            out.append((p + "attn.b" + m[1], (d,), bb, "zeros"))
        out += [
            (p + "ffn.w1", (d, c.d_ff), bb, f"dense:{d}"),
            (p + "ffn.b1", (c.d_ff,), bb, "zeros"),
            (p + "ffn.w2", (c.d_ff, d), bb, f"dense:{c.d_ff}"),
            (p + "ffn.b2", (d,), bb, "zeros"),
        ]
    out.append(("encoder.ln_f.gain", (d,), bb, "ones"))
    out.append(("encoder.ln_f.bias", (d,), bb, "zeros"))
    return out


def head_layout(c: ModelConfig, kind: str, vocab_size: int | None = None):
    d, ssl = c.d_model, Group.SSL_HEAD
    if kind == "apc":
        out = []
        for n in c.apc_shifts:
            out.append((f"head.apc.{n}.weight", (d, c.ssl_out_dim), ssl, f"dense:{d}"))
            out.append((f"head.apc.{n}.bias", (c.ssl_out_dim,), ssl, "zeros"))
        return out
    if kind == "masked":
        return [("head.mask_emb", (d,), ssl, "normal"),
                ("head.proj.weight", (d, c.n_clusters), ssl, f"dense:{d}"),
                ("head.proj.bias", (c.n_clusters,), ssl, "zeros")]
    if kind == "contrastive":
        out = [("head.mask_emb", (d,), ssl, "normal")]
        for m in ("proj_c", "proj_q"):
            out.append((f"head.{m}.weight", (d, c.proj_dim), ssl, f"dense:{d}"))
            out.append((f"head.{m}.bias", (c.proj_dim,), ssl, "zeros"))
        return out
    if kind == "asr":
        v = vocab_size if vocab_size is not None else c.vocab_size
        if v is None or v < 2:
            raise ConfigurationError("ASR head needs vocab_size >= 2")
        return [("head.asr.weight", (d, v), Group.ASR_HEAD, f"dense:{d}"),
                ("head.asr.bias", (v,), Group.ASR_HEAD, "zeros")]
    raise ConfigurationError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def adapter_layout(c: ModelConfig, d_ada: int):
    d, ad = c.d_model, Group.ADAPTER
    out = []
    for i in range(c.n_adapters):
        p = f"adapters.{i:02d}."
        out += [
            (p + "ln_gain", (d,), ad, "ones"),
            (p + "ln_bias", (d,), ad, "zeros"),
            (p + "w1", (d, d_ada), ad, f"dense:{d}"),
            (p + "b1", (d_ada,), ad, "zeros"),
            (p + "w2", (d_ada, d), ad, "zeros"),
            (p + "b2", (d,), ad, "zeros"),
        ]
    return out


def _materialize(store: ParamStore, layout, rng) -> None:
    for name, shape, group, init in layout:
        if init == "ones":
            value = np.ones(shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "normal":
            value = rng.normal(0.0, 1.0, shape)
        else:
            value = rng.normal(0.0, 1.0 / np.sqrt(int(init.split(":")[1])), shape)
        store.add(name, value, group)


class AcousticModel:
    """Parameters live in ``self.store``; forward methods read them by name."""

    def __init__(self, config: ModelConfig, head: str = "apc", seed: int = 0):
        self.config = config
        self.store = ParamStore()
        self.head_kind: str | None = None
        self.d_ada: int | None = None
        # stages in which each group was trained (the update superscripts)
        self.update_counts: dict[Group, int] = {g: 0 for g in Group}
        self.step = 0
        rng = np.random.default_rng(seed)
        _materialize(self.store, backbone_layout(config), rng)
        self._add_head(head, rng)

    def _add_head(self, kind: str, rng, vocab_size: int | None = None) -> None:
        _materialize(self.store, head_layout(self.config, kind, vocab_size), rng)
        if kind == "asr" and vocab_size is not None:
            self.config = replace(self.config, vocab_size=vocab_size)
        self.head_kind = kind

    def clone(self) -> "AcousticModel":
        other = copy.copy(self)
        other.store = self.store.clone()
        other.update_counts = dict(self.update_counts)
        return other

    @property
    def has_adapters(self) -> bool:
        return self.d_ada is not None

    def adapter_params(self, i: int) -> dict[str, Tensor]:
        return {k: self.store[f"adapters.{i:02d}.{k}"] for k in ADAPTER_TENSORS}

    # -- forward ----------------------------------------------------------
    def frontend(self, features, lengths=None) -> tuple[Tensor, np.ndarray]:
        s, c = self.store, self.config
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[-1] != c.in_dim:
            raise DimensionError(f"expected {c.in_dim}-dim features, got {x.shape}")
        if lengths is None:
            lengths = np.full(x.shape[0], x.shape[1])
        lengths = np.asarray(lengths)
        if lengths.min() < min_frames(c.conv_kernel):
            raise SequenceTooShortError(
                f"front-end needs at least {min_frames(c.conv_kernel)} frames, got {int(lengths.min())}")
        h = T.relu(T.conv1d(x, s["frontend.conv1.weight"], 2, s["frontend.conv1.bias"]))
        h = T.relu(T.conv1d(h, s["frontend.conv2.weight"], 2, s["frontend.conv2.bias"]))
        h = T.linear(h, s["frontend.proj.weight"], s["frontend.proj.bias"])
        return h, frontend_lengths(lengths, c.conv_kernel)

    def _attention(self, x: Tensor, p: str, allowed: np.ndarray) -> Tensor:
        s, c = self.store, self.config
        b, t, d = x.shape
        h, dh = c.n_heads, d // c.n_heads

        def heads(m):
            y = T.linear(x, s[p + "attn.w" + m], s[p + "attn.b" + m])
            return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        att = T.masked_softmax(scores, allowed)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return T.linear(out, s[p + "attn.wo"], s[p + "attn.bo"])

    def attention_mask(self, padding_mask: np.ndarray, causal: bool | None = None) -> np.ndarray:
        causal = self.config.causal if causal is None else causal
        t = padding_mask.shape[1]
        allowed = np.broadcast_to(padding_mask[:, None, None, :], (padding_mask.shape[0], 1, t, t))
        if causal:
            allowed = allowed & np.tril(np.ones((t, t), dtype=bool))
        return allowed

    def encoder_forward(self, x: Tensor, padding_mask: np.ndarray, causal: bool | None = None,
                        keep_layers: bool = False) -> tuple[Tensor, list[Tensor]]:
        """Blocks (with adapters after each when present) and the final layer norm.

        ``x`` is the front-end output with positions added; adapter 0 is applied here.
        """
        c, s = self.config, self.store
        allowed = self.attention_mask(np.asarray(padding_mask, dtype=bool), causal)
        layers = []
        if self.has_adapters:
            x = adapter_forward(x, self.adapter_params(0), c.ln_eps)
        for i in range(c.n_layers):
            if keep_layers:
                layers.append(x)
            p = f"blocks.{i:02d}."
            h = T.layer_norm(x, s[p + "ln1.gain"], s[p + "ln1.bias"], c.ln_eps)
            x = x + self._attention(h, p, allowed)
            h = T.layer_norm(x, s[p + "ln2.gain"], s[p + "ln2.bias"], c.ln_eps)
            f = T.linear(T.relu(T.linear(h, s[p + "ffn.w1"], s[p + "ffn.b1"])), s[p + "ffn.w2"], s[p + "ffn.b2"])
            if self.has_adapters and c.adapter_placement == "ffn_output":
                f = adapter_forward(f, self.adapter_params(i + 1), c.ln_eps)
            x = x + f
            if self.has_adapters and c.adapter_placement == "block_output":
                x = adapter_forward(x, self.adapter_params(i + 1), c.ln_eps)
        x = T.layer_norm(x, s["encoder.ln_f.gain"], s["encoder.ln_f.bias"], c.ln_eps)
        return x, layers

    def encode(self, features, lengths=None, mask: np.ndarray | None = None,
               keep_layers: bool = False) -> Encoded:
        """Full backbone pass.

        ``mask`` ([B, T''] bool) marks subsampled steps whose front-end output
        is replaced by the head's learned mask embedding.
        """
        fe, out_len = self.frontend(features, lengths)
        b, t, d = fe.shape
        pad = np.arange(t)[None, :] < out_len[:, None]
        x = fe
        if mask is not None:
            if "head.mask_emb" not in self.store:
                raise ConfigurationError(f"head {self.head_kind!r} has no mask embedding")
            x = T.where(np.asarray(mask, dtype=bool)[:, :, None], self.store["head.mask_emb"], x)
        x = x + Tensor(sinusoidal_positions(t, d))
        hidden, layers = self.encoder_forward(x, pad, keep_layers=keep_layers)
        return Encoded(hidden, fe, out_len, pad, layers)

    # -- heads -------------------------------------------------------------
    def apc_predictions(self, hidden: Tensor) -> dict[int, Tensor]:
        self._require_head("apc")
        s = self.store
        return {n: T.linear(hidden, s[f"head.apc.{n}.weight"], s[f"head.apc.{n}.bias"])
                for n in self.config.apc_shifts}

    def cluster_logits(self, hidden: Tensor) -> Tensor:
        self._require_head("masked")
        return T.linear(hidden, self.store["head.proj.weight"], self.store["head.proj.bias"])

    def contrastive_projections(self, hidden: Tensor, frontend: Tensor) -> tuple[Tensor, Tensor]:
        self._require_head("contrastive")
        s = self.store
        return (T.linear(hidden, s["head.proj_c.weight"], s["head.proj_c.bias"]),
                T.linear(frontend, s["head.proj_q.weight"], s["head.proj_q.bias"]))

    def asr_log_probs(self, hidden: Tensor) -> Tensor:
        self._require_head("asr")
        return T.log_softmax(T.linear(hidden, self.store["head.asr.weight"], self.store["head.asr.bias"]))

    def _require_head(self, kind: str) -> None:
        if self.head_kind != kind:
            raise ConfigurationError(f"model has a {self.head_kind!r} head, {kind!r} required")


# -- structural edits -------------------------------------------------------
def insert_adapters(model: AcousticModel, d_ada: int, seed: int = 0) -> AcousticModel:
    """Add ``n_layers + 1`` adapters whose output layer is zero (exact passthrough)."""
    if model.has_adapters:
        raise StateError("model already has residual adapters")
    if d_ada < 1:
        raise ConfigurationError(f"d_ada must be >= 1, got {d_ada}")
    _materialize(model.store, adapter_layout(model.config, d_ada), np.random.default_rng(seed))
    model.d_ada = d_ada
    return model


def remove_adapters(model: AcousticModel) -> AcousticModel:
    model.store.remove(model.store.names([Group.ADAPTER]))
    model.d_ada = None
    return model


def swap_head(model: AcousticModel, new_head_kind: str, vocab_size: int | None = None,
              seed: int = 0) -> AcousticModel:
    """Drop the current head's parameters and attach a freshly initialised one."""
    if model.head_kind is None:
        raise StateError("model has no head to swap")
    if new_head_kind == "asr" and vocab_size is None:
        raise ConfigurationError("swapping to an ASR head requires vocab_size")
    old = [n for n in model.store.names() if n.startswith("head.")]
    model.store.remove(old)
    model.head_kind = None
    model._add_head(new_head_kind, np.random.default_rng(seed), vocab_size)
    return model


def count_model_params(config: ModelConfig, head: str = "apc", d_ada: int | None = None,
                       groups=None) -> int:
    """Scalar parameter count from the layout, without allocating the model."""
    layout = backbone_layout(config) + head_layout(config, head)
    if d_ada is not None:
        layout += adapter_layout(config, d_ada)
    sel = set(Group) if groups is None else {Group.parse(g) for g in groups}
    return int(sum(np.prod(shape) for _, shape, group, _ in layout if group in sel))
