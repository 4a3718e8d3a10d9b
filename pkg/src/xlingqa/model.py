"""Pre-norm transformer encoder with a span head and a language discriminator.

Everything is written against the autodiff tensor core. Broadcasting a row
vector over a sequence is not part of the tensor contract, so layer norm,
biases, and pooling are expressed with constant matmuls (ones-column times
row vector), which stays inside the supported operation set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import ANS_CLOSE_ID, CLS_ID, SEP_ID
from .errors import ConfigError

_LN_EPS = 1e-6
_MASK_NEG = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    num_heads: int
    hidden_dim: int
    ff_dim: int
    vocab_size: int
    max_seq_len: int
    num_segments: int = 2
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1:
            raise ConfigError("need at least one layer and one head")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_seq_len < 8:
            raise ConfigError(f"max_seq_len {self.max_seq_len} below minimum of 8")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size too small")
        if self.ff_dim < 1 or self.num_segments < 1:
            raise ConfigError("ff_dim and num_segments must be positive")


class UnpackableExample(ValueError):
    """The question alone leaves no room for context in one window."""


@dataclass
class PackedInput:
    """One model-ready window: [CLS] question [SEP] context-slice [SEP]."""

    token_ids: list[int]
    segment_ids: list[int]
    attention_mask: list[int]
    question_range: tuple[int, int]  # half-open, question tokens only
    context_range: tuple[int, int]  # half-open, context tokens only
    answer: tuple[int, int] | None  # inclusive packed coordinates
    example_id: str = ""
    window_index: int = 0
    window_start: int = 0  # context offset where this window begins

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class SpanPrediction:
    """Begin/end distributions over one packed sequence, each shaped (1, T)."""

    alpha_begin: Tensor
    alpha_end: Tensor

    def begin_probs(self) -> np.ndarray:
        return self.alpha_begin.data.ravel()

    def end_probs(self) -> np.ndarray:
        return self.alpha_end.data.ravel()


@dataclass
class QAHead:
    w_begin: Tensor  # (d, 1)
    w_end: Tensor  # (d, 1)


def pack_input(
    question_ids: Sequence[int],
    context_ids: Sequence[int],
    answer_span: tuple[int, int] | None,
    config: EncoderConfig,
    doc_stride: int,
    example_id: str = "",
) -> list[PackedInput]:
    """Pack one example into model windows.

    Contexts longer than the window capacity slide by doc_stride; a window
    carries the answer span only when it contains it entirely.
    """
    q = list(question_ids)
    c = list(context_ids)
    if not q or not c:
        raise ValueError("question and context must be non-empty")
    if doc_stride < 1:
        raise ConfigError(f"doc_stride must be positive, got {doc_stride}")
    capacity = config.max_seq_len - 3 - len(q)
    if capacity < 1:
        raise UnpackableExample(
            f"question of {len(q)} tokens leaves no context room at max_seq_len {config.max_seq_len}"
        )
    if answer_span is not None:
        b, e = answer_span
        if not (0 <= b <= e < len(c)):
            raise ValueError(f"answer span ({b}, {e}) outside context of {len(c)} tokens")

    if len(c) <= capacity:
        starts = [0]
    else:
        starts = []
        s = 0
        while True:
            starts.append(s)
            if s + capacity >= len(c):
                break
            s = min(s + doc_stride, len(c) - capacity)

    windows: list[PackedInput] = []
    for wi, s in enumerate(starts):
        chunk = c[s : s + capacity]
        tokens = [CLS_ID] + q + [SEP_ID] + chunk + [SEP_ID]
        segments = [0] * (len(q) + 2) + [1] * (len(chunk) + 1)
        ctx_lo = len(q) + 2
        answer = None
        if answer_span is not None:
            b, e = answer_span
            if s <= b and e < s + len(chunk):
                answer = (b - s + ctx_lo, e - s + ctx_lo)
        windows.append(
            PackedInput(
                token_ids=tokens,
                segment_ids=segments,
                attention_mask=[1] * len(tokens),
                question_range=(1, 1 + len(q)),
                context_range=(ctx_lo, ctx_lo + len(chunk)),
                answer=answer,
                example_id=example_id,
                window_index=wi,
                window_start=s,
            )
        )
    return windows


def _init_params(config: EncoderConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng([config.seed, 0x1217])
    d, dk = config.hidden_dim, config.hidden_dim // config.num_heads
    params: dict[str, Tensor] = {}

    def normal(name: str, shape: tuple[int, ...]):
        params[name] = Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(name: str, shape: tuple[int, ...]):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name: str, shape: tuple[int, ...]):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    normal("tok_emb", (config.vocab_size, d))
    normal("pos_emb", (config.max_seq_len, d))
    normal("seg_emb", (config.num_segments, d))
    for i in range(config.num_layers):
        p = f"layer{i}"
        ones(f"{p}.attn.ln.gain", (1, d))
        zeros(f"{p}.attn.ln.bias", (1, d))
        for h in range(config.num_heads):
            q = f"{p}.attn.head{h}"
            normal(f"{q}.wq", (d, dk))
            normal(f"{q}.wk", (d, dk))
            normal(f"{q}.wv", (d, dk))
            zeros(f"{q}.bq", (1, dk))
            zeros(f"{q}.bk", (1, dk))
            zeros(f"{q}.bv", (1, dk))
            normal(f"{q}.wo", (dk, d))
            # Lexical-identity attention gains: learned strengths for the
            # constant token-match score biases (see encode()).
            params[f"{q}.match_same.gain"] = Tensor(np.ones((1, 1)), requires_grad=True)
            params[f"{q}.match_prev.gain"] = Tensor(np.ones((1, 1)), requires_grad=True)
            params[f"{q}.match_next.gain"] = Tensor(np.ones((1, 1)), requires_grad=True)
        zeros(f"{p}.attn.bo", (1, d))
        ones(f"{p}.ff.ln.gain", (1, d))
        zeros(f"{p}.ff.ln.bias", (1, d))
        normal(f"{p}.ff.w1", (d, config.ff_dim))
        zeros(f"{p}.ff.b1", (1, config.ff_dim))
        normal(f"{p}.ff.w2", (config.ff_dim, d))
        zeros(f"{p}.ff.b2", (1, d))
    ones("final_ln.gain", (1, d))
    zeros("final_ln.bias", (1, d))
    normal("qa.w_begin", (d, 1))
    normal("qa.w_end", (d, 1))
    return params


class QAModel:
    """Encoder plus span head; parameters live in a flat named dict."""

    def __init__(self, config: EncoderConfig, languages: Sequence[str], params: dict[str, Tensor]):
        self.config = config
        self.languages = list(languages)
        self.params = params
        d = config.hidden_dim
        self._mean_col = Tensor(np.full((d, 1), 1.0 / d))
        self._ones_row = Tensor(np.ones((1, d)))
        self._ones_col: dict[int, Tensor] = {}

    @classmethod
    def initialize(cls, config: EncoderConfig, languages: Sequence[str]) -> "QAModel":
        return cls(config, languages, _init_params(config))

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def qa_head(self) -> QAHead:
        return QAHead(w_begin=self.params["qa.w_begin"], w_end=self.params["qa.w_end"])

    def _ones(self, t: int) -> Tensor:
        col = self._ones_col.get(t)
        if col is None:
            col = Tensor(np.ones((t, 1)))
            self._ones_col[t] = col
        return col

    def _broadcast_row(self, row: Tensor, t: int) -> Tensor:
        return ad.matmul(self._ones(t), row)

    def _layer_norm(self, x: Tensor, gain: Tensor, bias: Tensor, t: int) -> Tensor:
        mu = ad.matmul(x, self._mean_col)  # (T, 1)
        centered = ad.sub(x, ad.matmul(mu, self._ones_row))
        var = ad.matmul(ad.mul(centered, centered), self._mean_col)
        inv = ad.exp(ad.mul(ad.log(ad.add(var, _LN_EPS)), -0.5))
        normed = ad.mul(centered, ad.matmul(inv, self._ones_row))
        return ad.add(ad.mul(normed, self._broadcast_row(gain, t)),
                      self._broadcast_row(bias, t))

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        rate = self.config.dropout_rate
        if rng is None or rate <= 0.0:
            return x
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return ad.mul(x, Tensor(keep))

    def encode(self, packed: PackedInput, dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Run the encoder over one packed window, returning H of shape (T, d)."""
        cfg = self.config
        ids = packed.token_ids
        t = len(ids)
        if t > cfg.max_seq_len:
            raise ValueError(f"packed length {t} exceeds max_seq_len {cfg.max_seq_len}")
        bad = [i for i in ids if not 0 <= i < cfg.vocab_size]
        if bad:
            raise IndexError(f"token id {bad[0]} out of range (vocab {cfg.vocab_size})")
        p = self.params
        x = ad.add(
            ad.add(ad.gather_rows(p["tok_emb"], ids), ad.gather_rows(p["pos_emb"], range(t))),
            ad.gather_rows(p["seg_emb"], packed.segment_ids),
        )

        add_mask = None
        if any(m == 0 for m in packed.attention_mask):
            row = np.asarray(packed.attention_mask, dtype=np.float64).reshape(1, t)
            add_mask = Tensor(np.ones((t, 1)) @ ((1.0 - row) * _MASK_NEG))

        # Constant lexical-identity matrices: where does my token (or my
        # neighbor's) reappear? Specials never match; self-matches are
        # excluded so the signal points at *other* occurrences.
        ids_arr = np.asarray(ids)
        content = ids_arr > ANS_CLOSE_ID
        pair_ok = content[:, None] & content[None, :]
        m_same_np = pair_ok & (ids_arr[:, None] == ids_arr[None, :])
        np.fill_diagonal(m_same_np, False)
        prev_ids = np.roll(ids_arr, 1)
        prev_ok = np.zeros(t, dtype=bool)
        prev_ok[1:] = content[:-1]
        m_prev_np = (prev_ok[:, None] & content[None, :]) & (prev_ids[:, None] == ids_arr[None, :])
        next_ids = np.roll(ids_arr, -1)
        next_ok = np.zeros(t, dtype=bool)
        next_ok[:-1] = content[1:]
        m_next_np = (next_ok[:, None] & content[None, :]) & (next_ids[:, None] == ids_arr[None, :])
        matches = [
            ("match_same", Tensor(m_same_np.astype(np.float64))),
            ("match_prev", Tensor(m_prev_np.astype(np.float64))),
            ("match_next", Tensor(m_next_np.astype(np.float64))),
        ]

        dk = cfg.hidden_dim // cfg.num_heads
        scale = 1.0 / np.sqrt(dk)
        for i in range(cfg.num_layers):
            lp = f"layer{i}"
            a = self._layer_norm(x, p[f"{lp}.attn.ln.gain"], p[f"{lp}.attn.ln.bias"], t)
            out = None
            for h in range(cfg.num_heads):
                hp = f"{lp}.attn.head{h}"
                q = ad.add(ad.matmul(a, p[f"{hp}.wq"]), self._broadcast_row(p[f"{hp}.bq"], t))
                k = ad.add(ad.matmul(a, p[f"{hp}.wk"]), self._broadcast_row(p[f"{hp}.bk"], t))
                v = ad.add(ad.matmul(a, p[f"{hp}.wv"]), self._broadcast_row(p[f"{hp}.bv"], t))
                scores = ad.mul(ad.matmul(q, k, transpose_b=True), scale)
                for mname, mat in matches:
                    g = p[f"{hp}.{mname}.gain"]
                    gm = ad.matmul(ad.matmul(self._ones(t), g), self._ones(t), transpose_b=True)
                    scores = ad.add(scores, ad.mul(gm, mat))
                if add_mask is not None:
                    scores = ad.add(scores, add_mask)
                probs = ad.softmax_rows(scores)
                head_out = ad.matmul(ad.matmul(probs, v), p[f"{hp}.wo"])
                out = head_out if out is None else ad.add(out, head_out)
            out = ad.add(out, self._broadcast_row(p[f"{lp}.attn.bo"], t))
            out = self._dropout(out, dropout_rng)
            x = ad.add(x, out)

            b = self._layer_norm(x, p[f"{lp}.ff.ln.gain"], p[f"{lp}.ff.ln.bias"], t)
            hidden = ad.gelu(ad.add(ad.matmul(b, p[f"{lp}.ff.w1"]),
                                    self._broadcast_row(p[f"{lp}.ff.b1"], t)))
            ff = ad.add(ad.matmul(hidden, p[f"{lp}.ff.w2"]),
                        self._broadcast_row(p[f"{lp}.ff.b2"], t))
            ff = self._dropout(ff, dropout_rng)
            x = ad.add(x, ff)

        return self._layer_norm(x, p["final_ln.gain"], p["final_ln.bias"], t)

    def forward(self, packed: PackedInput, dropout_rng: np.random.Generator | None = None) -> SpanPrediction:
        return qa_forward(self.encode(packed, dropout_rng), self.qa_head)


def qa_forward(hidden: Tensor, head: QAHead) -> SpanPrediction:
    """Project H onto begin/end logits and normalize over positions."""
    logits_b = ad.matmul(head.w_begin, hidden, transpose_a=True, transpose_b=True)  # (1, T)
    logits_e = ad.matmul(head.w_end, hidden, transpose_a=True, transpose_b=True)
    return SpanPrediction(
        alpha_begin=ad.softmax_rows(logits_b),
        alpha_end=ad.softmax_rows(logits_e),
    )


def question_repr(hidden: Tensor, packed: PackedInput, mode: str) -> Tensor:
    """Question representation: the [CLS] row or the question-token average."""
    if mode == "cls":
        return ad.gather_rows(hidden, [0])
    if mode == "avg":
        lo, hi = packed.question_range
        if hi <= lo:
            raise ValueError("empty question range")
        rows = ad.gather_rows(hidden, range(lo, hi))
        pool = Tensor(np.full((1, hi - lo), 1.0 / (hi - lo)))
        return ad.matmul(pool, rows)
    raise ConfigError(f"unknown question representation mode {mode!r}")


class Discriminator:
    """MLP language classifier over question representations.

    Two GELU hidden layers of width 4x the encoder dimension, then a
    softmax over the language labels. Accepts a batch of representations
    shaped (B, d).
    """

    def __init__(self, labels: Sequence[str], params: dict[str, Tensor]):
        self.labels = list(labels)
        self.params = params
        self._ones_col: dict[int, Tensor] = {}

    @classmethod
    def initialize(cls, hidden_dim: int, labels: Sequence[str], seed: int) -> "Discriminator":
        if len(labels) < 2:
            raise ConfigError("discriminator needs at least two labels")
        rng = np.random.default_rng([seed, 0xD15C])
        width = 4 * hidden_dim
        params = {
            "disc.w1": Tensor(rng.normal(0.0, 0.02, size=(hidden_dim, width)), requires_grad=True),
            "disc.b1": Tensor(np.zeros((1, width)), requires_grad=True),
            "disc.w2": Tensor(rng.normal(0.0, 0.02, size=(width, width)), requires_grad=True),
            "disc.b2": Tensor(np.zeros((1, width)), requires_grad=True),
            "disc.w3": Tensor(rng.normal(0.0, 0.02, size=(width, len(labels))), requires_grad=True),
            "disc.b3": Tensor(np.zeros((1, len(labels))), requires_grad=True),
        }
        return cls(labels, params)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def _ones(self, n: int) -> Tensor:
        col = self._ones_col.get(n)
        if col is None:
            col = Tensor(np.ones((n, 1)))
            self._ones_col[n] = col
        return col

    def forward(self, reprs: Tensor) -> Tensor:
        """Class probabilities, shape (B, num_labels)."""
        if reprs.data.ndim != 2:
            raise ad.ShapeError(f"discriminator input must be 2-D, got {reprs.shape}")
        n = reprs.shape[0]
        p = self.params
        ones = self._ones(n)
        h = ad.gelu(ad.add(ad.matmul(reprs, p["disc.w1"]), ad.matmul(ones, p["disc.b1"])))
        h = ad.gelu(ad.add(ad.matmul(h, p["disc.w2"]), ad.matmul(ones, p["disc.b2"])))
        logits = ad.add(ad.matmul(h, p["disc.w3"]), ad.matmul(ones, p["disc.b3"]))
        return ad.softmax_rows(logits)


def discriminate(repr_tensor: Tensor, disc: Discriminator) -> Tensor:
    return disc.forward(repr_tensor)


def extract_answer(pred: SpanPrediction, packed: PackedInput, max_answer_len: int) -> tuple[int, int, float]:
    """Best in-context span (b, e, score) maximizing alpha_b[b] * alpha_e[e].

    Constraints: b <= e, both inside the context range, span length at most
    max_answer_len. Ties break toward the earliest (b, e) in scan order.
    """
    if max_answer_len < 1:
        raise ConfigError(f"max_answer_len must be positive, got {max_answer_len}")
    pb = pred.begin_probs()
    pe = pred.end_probs()
    lo, hi = packed.context_range
    best: tuple[int, int, float] | None = None
    for b in range(lo, hi):
        for e in range(b, min(hi, b + max_answer_len)):
            score = pb[b] * pe[e]
            if best is None or score > best[2]:
                best = (b, e, float(score))
    if best is None:
        # Degenerate empty context range: highest-probability single token.
        t = int(np.argmax(pb * pe))
        return t, t, float(pb[t] * pe[t])
    return best
