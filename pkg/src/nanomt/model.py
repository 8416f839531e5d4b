"""Small encoder-decoder transformer with optional adapter routing.

Post-layer-norm residual blocks, sinusoidal positions, a source/target
embedding table tied to the output projection. When a bundle is supplied,
every encoder-layer and decoder-layer output is routed through the matching
adapter module; a freshly initialized bundle leaves all outputs bitwise
unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBundle, adapter_forward
from .autodiff import Tensor
from .data import BOS, EOS, PAD
from .errors import ContractError, DimensionError, TaskExistsError, TaskNotFoundError
from .store import ParameterStore

MASK_VALUE = -1e9
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    num_heads: int = 4
    max_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.num_layers < 1:
            raise ContractError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.vocab_size < 5:
            raise ContractError(
                f"vocab_size must be >= 5 for reserved + content tokens, "
                f"got {self.vocab_size}"
            )
        if self.d_model % self.num_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout {self.dropout} not in [0, 1)")

    def to_header(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in vars(self).items()}

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "ModelConfig":
        return cls(
            vocab_size=int(header["model.vocab_size"]),
            num_layers=int(header["model.num_layers"]),
            d_model=int(header["model.d_model"]),
            d_ff=int(header["model.d_ff"]),
            num_heads=int(header["model.num_heads"]),
            max_len=int(header["model.max_len"]),
            dropout=float(header["model.dropout"]),
        )


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def padding_mask(ids: np.ndarray) -> np.ndarray:
    """Additive attention mask [B, 1, 1, T] excluding pad keys."""
    return np.where(ids == PAD, MASK_VALUE, 0.0)[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    """Additive mask [1, 1, T, T] excluding future positions."""
    upper = np.triu(np.ones((length, length)), k=1)
    return (upper * MASK_VALUE)[None, None, :, :]


class Transformer:
    """Encoder-decoder over a shared parameter store.

    Construction with ``create`` initializes fresh base parameters; bind an
    existing store (for instance one loaded from a checkpoint) with the plain
    constructor.
    """

    def __init__(self, config: ModelConfig, store: ParameterStore):
        self.config = config
        self.store = store
        self._positions = sinusoidal_positions(config.max_len, config.d_model)

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "Transformer":
        store = ParameterStore()
        rng = np.random.default_rng(seed)

        def glorot(fan_in: int, fan_out: int) -> np.ndarray:
            std = math.sqrt(2.0 / (fan_in + fan_out))
            return rng.normal(0.0, std, (fan_in, fan_out))

        d, ff = config.d_model, config.d_ff
        store.add("embed.tokens",
                  Tensor(rng.normal(0.0, d ** -0.5, (config.vocab_size, d))))
        for side, blocks in (("encoder", ("attn",)),
                             ("decoder", ("self_attn", "cross_attn"))):
            for i in range(config.num_layers):
                prefix = f"{side}.{i}"
                for block in blocks:
                    for w in ("wq", "wk", "wv", "wo"):
                        store.add(f"{prefix}.{block}.{w}", Tensor(glorot(d, d)))
                store.add(f"{prefix}.ffn.w1", Tensor(glorot(d, ff)))
                store.add(f"{prefix}.ffn.b1", Tensor(np.zeros(ff)))
                store.add(f"{prefix}.ffn.w2", Tensor(glorot(ff, d)))
                store.add(f"{prefix}.ffn.b2", Tensor(np.zeros(d)))
                norms = ("ln1", "ln2") if side == "encoder" else ("ln1", "ln2", "ln3")
                for ln in norms:
                    store.add(f"{prefix}.{ln}.gain", Tensor(np.ones(d)))
                    store.add(f"{prefix}.{ln}.bias", Tensor(np.zeros(d)))
        return cls(config, store)

    # -- building blocks ---------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.store[name]

    def _embed(self, ids: np.ndarray, rng: np.random.Generator | None) -> Tensor:
        if ids.shape[-1] > self.config.max_len:
            raise ContractError(
                f"sequence length {ids.shape[-1]} exceeds max_len "
                f"{self.config.max_len}"
            )
        x = ad.embedding(self._p("embed.tokens"), ids)
        x = ad.add(ad.mul(x, math.sqrt(self.config.d_model)),
                   self._positions[: ids.shape[-1]])
        return self._dropout(x, rng)

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        if rng is None or self.config.dropout == 0.0:
            return x
        return ad.dropout(x, self.config.dropout, rng)

    def attention(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                  mask: np.ndarray | None, prefix: str) -> Tensor:
        """Multi-head scaled dot-product attention with additive masking.

        ``mask`` broadcasts to [B, H, Tq, Tk]; masked logits are pushed to
        -1e9 before the softmax, and fully-masked query rows yield a zero
        context vector.
        """
        cfg = self.config
        head_dim = cfg.d_model // cfg.num_heads
        q = ad.matmul(q_in, self._p(f"{prefix}.wq"))
        k = ad.matmul(k_in, self._p(f"{prefix}.wk"))
        v = ad.matmul(v_in, self._p(f"{prefix}.wv"))

        def split_heads(t: Tensor, length: int) -> Tensor:
            t = ad.reshape(t, (-1, length, cfg.num_heads, head_dim))
            return ad.transpose(t, (0, 2, 1, 3))

        tq, tk = q.shape[-2], k.shape[-2]
        q = split_heads(q, tq)
        k = split_heads(k, tk)
        v = split_heads(v, tk)

        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                        1.0 / math.sqrt(head_dim))
        if mask is not None:
            scores = ad.add(scores, mask)
        weights = ad.softmax(scores)
        if mask is not None:
            dead_rows = np.all(mask <= MASK_VALUE / 2, axis=-1, keepdims=True)
            if dead_rows.any():
                weights = ad.mul(weights, np.where(dead_rows, 0.0, 1.0))
        context = ad.matmul(weights, v)
        context = ad.reshape(ad.transpose(context, (0, 2, 1, 3)),
                             (-1, tq, cfg.d_model))
        return ad.matmul(context, self._p(f"{prefix}.wo"))

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        inner = ad.relu(ad.add(ad.matmul(x, self._p(f"{prefix}.w1")),
                               self._p(f"{prefix}.b1")))
        return ad.add(ad.matmul(inner, self._p(f"{prefix}.w2")),
                      self._p(f"{prefix}.b2"))

    def _residual_norm(self, x: Tensor, sub: Tensor, prefix: str,
                       rng: np.random.Generator | None) -> Tensor:
        return ad.layer_norm(ad.add(x, self._dropout(sub, rng)),
                             self._p(f"{prefix}.gain"),
                             self._p(f"{prefix}.bias"), LN_EPS)

    # -- forward passes ----------------------------------------------------

    def encode(self, src: np.ndarray, bundle: AdapterBundle | None = None,
               rng: np.random.Generator | None = None) -> list[Tensor]:
        """Run the encoder; returns the stack of per-layer outputs.

        ``src`` is an int array [B, Ts]; the last stack entry feeds the
        decoder's cross-attention.
        """
        self._check_bundle(bundle)
        src = np.atleast_2d(np.asarray(src))
        mask = padding_mask(src)
        x = self._embed(src, rng)
        stack: list[Tensor] = []
        for i in range(self.config.num_layers):
            prefix = f"encoder.{i}"
            attn = self.attention(x, x, x, mask, f"{prefix}.attn")
            x = self._residual_norm(x, attn, f"{prefix}.ln1", rng)
            x = self._residual_norm(x, self._ffn(x, f"{prefix}.ffn"),
                                    f"{prefix}.ln2", rng)
            if bundle is not None:
                module = bundle.module_for("encoder", i)
                if module is not None:
                    x = adapter_forward(x, module)
            stack.append(x)
        return stack

    def decode(self, dec_in: np.ndarray, encoder_states: Tensor,
               src: np.ndarray, bundle: AdapterBundle | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced decoder pass; returns logits [B, Tt, V]."""
        dec_in = np.atleast_2d(np.asarray(dec_in))
        src = np.atleast_2d(np.asarray(src))
        self_mask = causal_mask(dec_in.shape[-1])
        cross_mask = padding_mask(src)
        y = self._embed(dec_in, rng)
        for i in range(self.config.num_layers):
            prefix = f"decoder.{i}"
            attn = self.attention(y, y, y, self_mask, f"{prefix}.self_attn")
            y = self._residual_norm(y, attn, f"{prefix}.ln1", rng)
            cross = self.attention(y, encoder_states, encoder_states,
                                   cross_mask, f"{prefix}.cross_attn")
            y = self._residual_norm(y, cross, f"{prefix}.ln2", rng)
            y = self._residual_norm(y, self._ffn(y, f"{prefix}.ffn"),
                                    f"{prefix}.ln3", rng)
            if bundle is not None:
                module = bundle.module_for("decoder", i)
                if module is not None:
                    y = adapter_forward(y, module)
        table = self._p("embed.tokens")
        return ad.matmul(y, ad.transpose(table, (1, 0)))

    def forward_loss(self, src: np.ndarray, dec_in: np.ndarray,
                     targets: np.ndarray, bundle: AdapterBundle | None = None,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Mean next-token cross-entropy over non-pad target positions."""
        stack = self.encode(src, bundle, rng)
        logits = self.decode(dec_in, stack[-1], src, bundle, rng)
        return ad.cross_entropy(logits, targets, PAD)

    def pair_loss(self, src_ids: np.ndarray, tgt_ids: np.ndarray,
                  bundle: AdapterBundle | None = None,
                  rng: np.random.Generator | None = None) -> Tensor:
        """Convenience single-pair loss; adds bos/eos framing internally."""
        src_ids = np.asarray(src_ids)
        tgt_ids = np.asarray(tgt_ids)
        if src_ids.size == 0 or tgt_ids.size == 0:
            raise ContractError("source and target must be non-empty")
        dec_in = np.concatenate(([BOS], tgt_ids))[None, :]
        targets = np.concatenate((tgt_ids, [EOS]))[None, :]
        return self.forward_loss(src_ids[None, :], dec_in, targets, bundle, rng)

    def decode_greedy(self, sources: list[np.ndarray],
                      bundle: AdapterBundle | None = None,
                      max_steps: int | None = None) -> list[list[int]]:
        """Batched argmax decoding from bos until eos or ``max_steps``.

        Deterministic; argmax ties break toward the lowest token id.
        """
        if max_steps is None:
            max_steps = self.config.max_len - 1
        if max_steps < 1:
            raise ContractError(f"max_steps must be >= 1, got {max_steps}")
        max_steps = min(max_steps, self.config.max_len - 1)
        batch = len(sources)
        width = max(len(s) for s in sources)
        src = np.full((batch, width), PAD, dtype=np.int64)
        for row, ids in enumerate(sources):
            src[row, : len(ids)] = ids
        enc = self.encode(src, bundle)[-1]

        ys = np.full((batch, 1), BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_steps):
            logits = self.decode(ys, enc, src, bundle)
            next_ids = np.argmax(logits.data[:, -1, :], axis=-1)
            for row in range(batch):
                if done[row]:
                    continue
                token = int(next_ids[row])
                if token == EOS:
                    done[row] = True
                else:
                    outputs[row].append(token)
            if done.all():
                break
            ys = np.concatenate([ys, next_ids[:, None]], axis=1)
        return outputs

    def decode_beam(self, src_ids: np.ndarray, beam: int,
                    bundle: AdapterBundle | None = None,
                    max_steps: int | None = None) -> list[int]:
        """Beam search for a single source; beam 1 equals greedy decoding."""
        if beam < 1:
            raise ContractError(f"beam width must be >= 1, got {beam}")
        if beam == 1:
            return self.decode_greedy([np.asarray(src_ids)], bundle,
                                      max_steps)[0]
        if max_steps is None:
            max_steps = self.config.max_len - 1
        max_steps = min(max_steps, self.config.max_len - 1)
        src = np.asarray(src_ids)[None, :]
        enc = self.encode(src, bundle)[-1]
        hyps: list[tuple[float, list[int], bool]] = [(0.0, [BOS], False)]
        for _ in range(max_steps):
            candidates: list[tuple[float, list[int], bool]] = []
            for score, prefix, finished in hyps:
                if finished:
                    candidates.append((score, prefix, True))
                    continue
                logits = self.decode(np.asarray(prefix)[None, :], enc, src,
                                     bundle)
                row = logits.data[0, -1, :]
                shifted = row - row.max()
                log_probs = shifted - np.log(np.exp(shifted).sum())
                top = np.argsort(-log_probs, kind="stable")[:beam]
                for token in top:
                    token = int(token)
                    candidates.append((score + float(log_probs[token]),
                                       prefix + [token], token == EOS))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            hyps = candidates[:beam]
            if all(h[2] for h in hyps):
                break
        best = hyps[0][1][1:]
        return best[:-1] if best and best[-1] == EOS else best

    def _check_bundle(self, bundle: AdapterBundle | None) -> None:
        if bundle is not None and bundle.d_model != self.config.d_model:
            raise DimensionError(
                f"bundle width {bundle.d_model} does not match model width "
                f"{self.config.d_model}"
            )


class AdaptedModel:
    """View of a base model plus one or more injected adapter bundles.

    Base parameters are shared, never copied; routing picks the bundle for
    the requested task at call time.
    """

    def __init__(self, base: Transformer, bundles: dict[str, AdapterBundle]):
        self.base = base
        self.bundles = dict(bundles)

    def bundle_for(self, task_id: str | None) -> AdapterBundle | None:
        if task_id is None:
            return None
        if task_id not in self.bundles:
            raise TaskNotFoundError(f"no injected bundle for task {task_id!r}")
        return self.bundles[task_id]

    def encode(self, src: np.ndarray, task: str | None = None,
               rng: np.random.Generator | None = None) -> list[Tensor]:
        return self.base.encode(src, self.bundle_for(task), rng)

    def forward_loss(self, src, dec_in, targets, task: str | None = None,
                     rng: np.random.Generator | None = None) -> Tensor:
        return self.base.forward_loss(src, dec_in, targets,
                                      self.bundle_for(task), rng)

    def decode_greedy(self, sources, task: str | None = None,
                      max_steps: int | None = None) -> list[list[int]]:
        return self.base.decode_greedy(sources, self.bundle_for(task), max_steps)


def inject(model: Transformer | AdaptedModel,
           bundle: AdapterBundle) -> AdaptedModel:
    """Attach a bundle, returning a routed view; base parameters are shared."""
    base = model.base if isinstance(model, AdaptedModel) else model
    bundles = dict(model.bundles) if isinstance(model, AdaptedModel) else {}
    if bundle.d_model != base.config.d_model:
        raise DimensionError(
            f"bundle width {bundle.d_model} does not match model width "
            f"{base.config.d_model}"
        )
    if bundle.num_layers != base.config.num_layers:
        raise DimensionError(
            f"bundle has {bundle.num_layers} layers, model has "
            f"{base.config.num_layers}"
        )
    if bundle.task_id in bundles:
        raise TaskExistsError(f"task {bundle.task_id!r} already injected")
    bundles[bundle.task_id] = bundle
    return AdaptedModel(base, bundles)


def remove(model: AdaptedModel, task_id: str) -> Transformer | AdaptedModel:
    """Detach one bundle; with none left the plain base model is returned."""
    if not isinstance(model, AdaptedModel) or task_id not in model.bundles:
        raise TaskNotFoundError(f"task {task_id!r} is not injected")
    remaining = {t: b for t, b in model.bundles.items() if t != task_id}
    if not remaining:
        return model.base
    return AdaptedModel(model.base, remaining)
