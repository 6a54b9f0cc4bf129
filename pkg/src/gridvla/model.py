"""Tiny multimodal prefix-LM policy: image patches and instruction in, action and
rationale token logits out, with per-block freeze masks and attention extraction."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .autodiff import Tape, Tensor
from .vocab import Vocabulary

_NEG_INF = -1e30


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class SpanError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    dim: int = 64
    patch_px: int = 4
    grid: int = 8
    max_seq: int = 128
    rationale_max: int = 40
    frozen_blocks: int = 2
    freeze_embeddings: bool | None = None  # None: freeze only when every block is frozen

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0 <= self.frozen_blocks <= self.layers:
            raise ConfigError(
                f"frozen_blocks {self.frozen_blocks} outside 0..{self.layers}"
            )
        if self.rationale_max < 0:
            raise ConfigError("rationale_max must be non-negative")

    @property
    def patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * 3

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def resolved_freeze_embeddings(self) -> bool:
        if self.freeze_embeddings is None:
            return self.frozen_blocks == self.layers
        return self.freeze_embeddings

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def canonical_param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Stable name -> shape listing; checkpoints and optimizers follow this order."""
    d = cfg.dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch_proj", (cfg.patch_dim, d)),
        ("tok_emb", (cfg.vocab_size, d)),
        ("pos_emb", (cfg.max_seq, d)),
    ]
    for b in range(cfg.layers):
        shapes += [
            (f"block{b}.ln1.gain", (d,)),
            (f"block{b}.ln1.offset", (d,)),
            (f"block{b}.attn.wq", (d, d)),
            (f"block{b}.attn.wk", (d, d)),
            (f"block{b}.attn.wv", (d, d)),
            (f"block{b}.attn.wo", (d, d)),
            (f"block{b}.ln2.gain", (d,)),
            (f"block{b}.ln2.offset", (d,)),
            (f"block{b}.mlp.w1", (d, 4 * d)),
            (f"block{b}.mlp.w2", (4 * d, d)),
        ]
    shapes += [
        ("final_norm.gain", (d,)),
        ("final_norm.offset", (d,)),
        ("head", (d, cfg.vocab_size)),
    ]
    return shapes


class ParamStore:
    """Named parameter tensors in canonical order, with trainable flags."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.names = [name for name, _ in canonical_param_shapes(cfg)]
        missing = [n for n in self.names if n not in tensors]
        if missing:
            raise ConfigError(f"param store missing tensors: {missing}")
        self.tensors = {n: tensors[n] for n in self.names}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return ((n, self.tensors[n]) for n in self.names)

    def trainable(self):
        return ((n, t) for n, t in self.items() if t.requires_grad)

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ParamStore":
        clones = {}
        for n, t in self.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            clones[n] = c
        return ParamStore(self.cfg, clones)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.items()}


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Seeded Gaussian init, std 0.02; norm gains start at one, offsets at zero."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in canonical_param_shapes(cfg):
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".offset"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    store = ParamStore(cfg, tensors)
    apply_freeze(store, cfg.frozen_blocks, cfg.resolved_freeze_embeddings())
    return store


def apply_freeze(params: ParamStore, frozen_blocks: int, freeze_embeddings: bool) -> ParamStore:
    """Mark the first `frozen_blocks` blocks (and optionally the embeddings) frozen.

    The output head and final norm stay trainable no matter what, so an update
    always has somewhere to go.
    """
    layers = params.cfg.layers
    if not 0 <= frozen_blocks <= layers:
        raise ConfigError(f"frozen_blocks {frozen_blocks} outside 0..{layers}")
    for name, tensor in params.items():
        if name.startswith("block"):
            block_idx = int(name[5 : name.index(".")])
            tensor.requires_grad = block_idx >= frozen_blocks
        elif name in ("patch_proj", "tok_emb", "pos_emb"):
            tensor.requires_grad = not freeze_embeddings
        else:  # head and final norm
            tensor.requires_grad = True
    return params


# ---- forward ----------------------------------------------------------------


@dataclass(frozen=True)
class SpanLayout:
    """Absolute positions of each segment in the assembled sequence."""

    patches: int
    instruction_len: int
    rationale_len: int
    action_len: int
    has_act: bool

    @property
    def sep_pos(self) -> int:
        return self.patches + self.instruction_len

    @property
    def rationale_start(self) -> int:
        return self.sep_pos + 1

    @property
    def act_pos(self) -> int:
        if not self.has_act:
            raise SpanError("layout has no action segment")
        return self.rationale_start + self.rationale_len

    @property
    def seq_len(self) -> int:
        n = self.rationale_start + self.rationale_len
        if self.has_act:
            n += 1 + self.action_len
        return n

    @property
    def prefix_len(self) -> int:
        # patches + instruction + <SEP> attend bidirectionally
        return self.sep_pos + 1

    def rationale_query_rows(self) -> tuple[int, int]:
        return (self.sep_pos, self.sep_pos + self.rationale_len)

    def action_query_rows(self) -> tuple[int, int]:
        start = self.act_pos
        return (start, start + max(1, self.action_len))


@dataclass
class ForwardOutput:
    """Teacher-forced logits plus (optionally) every attention map.

    `rationale_logits` rows predict rationale tokens 0..m-1; `action_logits`
    rows predict the action tokens. Tensors stay attached to the tape when the
    forward ran on one, so losses built from them backpropagate.
    """

    rationale_logits: object
    action_logits: object
    attention: np.ndarray | None
    layout: SpanLayout

    def attention_rows_sum_to_one(self, tol: float = 1e-6) -> bool:
        if self.attention is None:
            return True
        sums = self.attention.sum(axis=-1)
        return bool(np.all(np.abs(sums - 1.0) <= tol))


class _TapeOps:
    is_tape = True

    def __init__(self, tape: Tape):
        self.tape = tape
        self.matmul = tape.matmul
        self.add = tape.add
        self.scale = tape.scale
        self.transpose = tape.transpose
        self.softmax_rows = tape.softmax_rows
        self.layer_norm = tape.layer_norm
        self.gelu = tape.gelu
        self.gather_rows = tape.gather_rows
        self.slice_rows = tape.slice_rows
        self.slice_cols = tape.slice_cols
        self.concat_rows = tape.concat_rows
        self.concat_cols = tape.concat_cols

    @staticmethod
    def constant(arr):
        return Tensor(arr)

    @staticmethod
    def value(t):
        return t.data


class _ArrayOps:
    """Raw numpy twin of the tape primitives; expression-for-expression identical."""

    is_tape = False

    @staticmethod
    def constant(arr):
        return arr

    @staticmethod
    def value(a):
        return a

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def scale(a, s):
        return a * float(s)

    @staticmethod
    def transpose(a):
        return a.T.copy()

    @staticmethod
    def softmax_rows(a):
        m = np.max(a, axis=-1, keepdims=True)
        e = np.subtract(a, m)
        np.exp(e, out=e)
        return e / np.sum(e, axis=-1, keepdims=True)

    @staticmethod
    def layer_norm(a, gain, offset, eps=1e-5):
        mu = np.mean(a, axis=-1, keepdims=True)
        var = np.mean((a - mu) ** 2, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return (a - mu) * inv * gain + offset

    @staticmethod
    def gelu(a):
        cdf = a * (1.0 / math.sqrt(2.0))
        erf(cdf, out=cdf)
        cdf += 1.0
        cdf *= 0.5
        return a * cdf

    @staticmethod
    def gather_rows(table, ids):
        return table[np.asarray(ids, dtype=np.intp)]

    @staticmethod
    def slice_rows(a, start, stop):
        return a[start:stop].copy()

    @staticmethod
    def slice_cols(a, start, stop):
        return a[..., start:stop].copy()

    @staticmethod
    def concat_rows(tensors):
        return np.concatenate(list(tensors), axis=0)

    @staticmethod
    def concat_cols(tensors):
        return np.concatenate(list(tensors), axis=-1)


_ARRAY_OPS = _ArrayOps()
_MASK_CACHE: dict[tuple[int, int], np.ndarray] = {}


def patchify(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(4*grid, 4*grid, 3) image in [0,1] -> (grid*grid, 48) row-major patch matrix.

    Pixels are rescaled to [-1, 1] before projection; without the centering all
    patch embeddings share one large mean component and attention keys start
    nearly collinear.
    """
    px = cfg.patch_px
    expected = (cfg.grid * px, cfg.grid * px, 3)
    if image.shape != expected:
        raise SequenceLengthError(f"image shape {image.shape} != {expected}")
    g = cfg.grid
    patches = (
        np.asarray(image, dtype=np.float64)
        .reshape(g, px, g, px, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, px * px * 3)
    )
    return patches * 2.0 - 1.0


def prefix_lm_mask(seq_len: int, prefix_len: int) -> np.ndarray:
    """Additive mask: prefix positions see the whole prefix, the rest are causal."""
    key = (seq_len, prefix_len)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        mask = np.full((seq_len, seq_len), _NEG_INF)
        mask[:prefix_len, :prefix_len] = 0.0
        for q in range(prefix_len, seq_len):
            mask[q, : q + 1] = 0.0
        _MASK_CACHE[key] = cached = mask
    return cached


def _forward_core(
    ops,
    weights: dict,
    cfg: ModelConfig,
    patch_matrix: np.ndarray,
    token_ids: list[int],
    layout: SpanLayout,
    collect_attention: bool,
):
    """One shared forward over the assembled sequence. Returns (logits, attention)."""
    seq_len = layout.seq_len
    if seq_len > cfg.max_seq:
        raise SequenceLengthError(f"sequence of {seq_len} exceeds max_seq {cfg.max_seq}")

    x_patch = ops.matmul(ops.constant(patch_matrix), weights["patch_proj"])
    x_tok = ops.gather_rows(weights["tok_emb"], token_ids)
    x = ops.concat_rows([x_patch, x_tok])
    pos = ops.gather_rows(weights["pos_emb"], np.arange(seq_len))
    x = ops.add(x, pos)

    mask = ops.constant(prefix_lm_mask(seq_len, layout.prefix_len))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    attention = (
        np.empty((cfg.layers, cfg.heads, seq_len, seq_len)) if collect_attention else None
    )

    for b in range(cfg.layers):
        h = ops.layer_norm(x, weights[f"block{b}.ln1.gain"], weights[f"block{b}.ln1.offset"])
        q = ops.matmul(h, weights[f"block{b}.attn.wq"])
        k = ops.matmul(h, weights[f"block{b}.attn.wk"])
        v = ops.matmul(h, weights[f"block{b}.attn.wv"])
        head_outs = []
        for hd in range(cfg.heads):
            lo, hi = hd * cfg.head_dim, (hd + 1) * cfg.head_dim
            qh = ops.slice_cols(q, lo, hi)
            kh = ops.slice_cols(k, lo, hi)
            vh = ops.slice_cols(v, lo, hi)
            scores = ops.scale(ops.matmul(qh, ops.transpose(kh)), scale)
            attn = ops.softmax_rows(ops.add(scores, mask))
            if collect_attention:
                attention[b, hd] = ops.value(attn)
            head_outs.append(ops.matmul(attn, vh))
        ctx = ops.concat_cols(head_outs)
        x = ops.add(x, ops.matmul(ctx, weights[f"block{b}.attn.wo"]))
        h2 = ops.layer_norm(x, weights[f"block{b}.ln2.gain"], weights[f"block{b}.ln2.offset"])
        m1 = ops.gelu(ops.matmul(h2, weights[f"block{b}.mlp.w1"]))
        x = ops.add(x, ops.matmul(m1, weights[f"block{b}.mlp.w2"]))

    xf = ops.layer_norm(x, weights["final_norm.gain"], weights["final_norm.offset"])
    logits = ops.matmul(xf, weights["head"])
    return logits, attention


def _assemble_tokens(
    vocab: Vocabulary,
    cfg: ModelConfig,
    instruction_ids: list[int],
    rationale_ids: list[int],
    action_ids: list[int] | None,
) -> tuple[list[int], SpanLayout]:
    layout = SpanLayout(
        patches=cfg.patches,
        instruction_len=len(instruction_ids),
        rationale_len=len(rationale_ids),
        action_len=0 if action_ids is None else len(action_ids),
        has_act=action_ids is not None,
    )
    tokens = list(instruction_ids) + [vocab.sep_id] + list(rationale_ids)
    if action_ids is not None:
        tokens += [vocab.act_id] + list(action_ids)
    return tokens, layout


def forward(
    params: ParamStore,
    cfg: ModelConfig,
    vocab: Vocabulary,
    image: np.ndarray,
    instruction_ids: list[int],
    rationale_ids: list[int],
    action_ids: list[int],
    tape: Tape | None = None,
    collect_attention: bool = False,
) -> ForwardOutput:
    """Teacher-forced training forward on a tape. Layout:
    [patches][instruction][<SEP>][rationale][<ACT>][action]."""
    tape = tape if tape is not None else Tape()
    ops = _TapeOps(tape)
    tokens, layout = _assemble_tokens(vocab, cfg, instruction_ids, rationale_ids, action_ids)
    logits, attention = _forward_core(
        ops, params.tensors, cfg, patchify(image, cfg), tokens, layout, collect_attention
    )
    r0, r1 = layout.rationale_query_rows()
    a0, a1 = layout.action_query_rows()
    return ForwardOutput(
        rationale_logits=tape.slice_rows(logits, r0, r1),
        action_logits=tape.slice_rows(logits, a0, a1),
        attention=attention,
        layout=layout,
    )


def fast_logits(
    arrays: dict[str, np.ndarray],
    cfg: ModelConfig,
    vocab: Vocabulary,
    patch_matrix: np.ndarray,
    instruction_ids: list[int],
    rationale_ids: list[int],
    action_ids: list[int] | None,
    collect_attention: bool = False,
) -> tuple[np.ndarray, np.ndarray | None, SpanLayout]:
    """Inference twin of forward(): same math, no tape. Returns all S x V logits."""
    tokens, layout = _assemble_tokens(vocab, cfg, instruction_ids, rationale_ids, action_ids)
    logits, attention = _forward_core(
        _ARRAY_OPS, arrays, cfg, patch_matrix, tokens, layout, collect_attention
    )
    return logits, attention, layout


def generate_rationale(
    params: ParamStore,
    cfg: ModelConfig,
    vocab: Vocabulary,
    image: np.ndarray,
    instruction_ids: list[int],
    max_len: int | None = None,
) -> list[int]:
    """Greedy decode after <SEP>, stopping at <EOS> or the length budget."""
    budget = cfg.rationale_max if max_len is None else max_len
    if budget > cfg.rationale_max:
        raise SequenceLengthError(f"max_len {budget} exceeds budget {cfg.rationale_max}")
    arrays = params.state_arrays()
    patch_matrix = patchify(image, cfg)
    ids: list[int] = []
    for _ in range(budget):
        logits, _, _ = fast_logits(
            arrays, cfg, vocab, patch_matrix, instruction_ids, ids, action_ids=None
        )
        nxt = int(np.argmax(logits[-1]))
        ids.append(nxt)
        if nxt == vocab.eos_id:
            break
    return ids


@dataclass
class PolicyDecision:
    action_token_id: int
    rationale_ids: list[int]
    attention: np.ndarray | None
    layout: SpanLayout


def decide_action(
    params: ParamStore,
    cfg: ModelConfig,
    vocab: Vocabulary,
    image: np.ndarray,
    instruction_ids: list[int],
    collect_attention: bool = False,
) -> PolicyDecision:
    """Generate the model's own rationale, then read the action logit at <ACT>.

    Only the 18 action-token logits compete; ties break toward the lower id.
    """
    rationale = generate_rationale(params, cfg, vocab, image, instruction_ids)
    logits, attention, layout = fast_logits(
        params.state_arrays(),
        cfg,
        vocab,
        patchify(image, cfg),
        instruction_ids,
        rationale,
        action_ids=[],
        collect_attention=collect_attention,
    )
    row = logits[layout.act_pos]
    block = row[vocab.action_start : vocab.action_start + vocab.action_count]
    action_token = vocab.action_start + int(np.argmax(block))
    return PolicyDecision(
        action_token_id=action_token,
        rationale_ids=rationale,
        attention=attention,
        layout=layout,
    )


def predict_action(
    params: ParamStore,
    cfg: ModelConfig,
    vocab: Vocabulary,
    image: np.ndarray,
    instruction_ids: list[int],
) -> int:
    return decide_action(params, cfg, vocab, image, instruction_ids).action_token_id


def extract_attention(
    attention: np.ndarray, layout: SpanLayout, query_span: str
) -> np.ndarray:
    """Slice attention to (layers, heads, Q, patches) and renormalize each row
    over the patch keys."""
    if attention is None:
        raise SpanError("forward ran without attention collection")
    if query_span == "action":
        q0, q1 = layout.action_query_rows()
    elif query_span == "rationale":
        q0, q1 = layout.rationale_query_rows()
    else:
        raise SpanError(f"unknown query span {query_span!r}")
    if q1 <= q0:
        raise SpanError(f"empty {query_span!r} query span")
    sub = attention[:, :, q0:q1, : layout.patches].copy()
    sums = sub.sum(axis=-1, keepdims=True)
    return sub / sums


# ---- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"RFVL"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    params: ParamStore,
    vocab_hash: str,
    metadata: dict | None = None,
) -> None:
    """Binary layout: magic, version, header length, JSON header, float32 LE data."""
    cfg = params.cfg
    header = {
        "config": cfg.to_json(),
        "metadata": metadata or {},
        "param_count": params.num_params(),
        "vocab_hash": vocab_hash,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, tensor in params.items():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ParamStore, ModelConfig, str, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        cfg = ModelConfig.from_json(header["config"])
        tensors: dict[str, Tensor] = {}
        total = 0
        for name, shape in canonical_param_shapes(cfg):
            n = int(np.prod(shape))
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"truncated parameter data at {name}")
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            tensors[name] = Tensor(arr, requires_grad=True)
            total += n
        if fh.read(1):
            raise CheckpointError("trailing bytes after parameter data")
    if total != header["param_count"]:
        raise CheckpointError(
            f"parameter count {total} does not match header {header['param_count']}"
        )
    params = ParamStore(cfg, tensors)
    apply_freeze(params, cfg.frozen_blocks, cfg.resolved_freeze_embeddings())
    return params, cfg, header["vocab_hash"], header["metadata"]
