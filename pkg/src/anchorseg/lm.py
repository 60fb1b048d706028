"""Word-level vocabulary with anchor tokens and the small causal LM.

The transformer consumes a sequence of [image feature rows | text embeddings].
Image positions attend freely among themselves and are visible to every later
text position; text positions attend causally.  Logits are produced only for
text-generation positions: row i is the distribution over text token i, and
one trailing row predicts the continuation, so an image-only prefix yields
exactly one logit row.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import FeedForward, LayerNorm, Linear, MultiHeadAttention

ANCHOR_NOR = "[NOR]"
ANCHOR_ANO = "[ANO]"
ANCHOR_SEG = "[SEG]"
ANCHORS = (ANCHOR_NOR, ANCHOR_ANO, ANCHOR_SEG)
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<img>")
_PUNCT = ".,?!"
_ANCHOR_SPLIT = re.compile(r"(\[NOR\]|\[ANO\]|\[SEG\])")


class AnchorsMissingError(RuntimeError):
    """Generated/target text lacks one of the anchor tokens."""


class ContextOverflowError(ValueError):
    """Assembled sequence exceeds the model's context length."""


def words_of(text: str) -> list[str]:
    """Split text into word-level tokens; anchors and trailing .,?! split off."""
    out = []
    for frag in _ANCHOR_SPLIT.split(text):
        if frag in ANCHORS:
            out.append(frag)
            continue
        for word in frag.split():
            core = word.rstrip(_PUNCT)
            if core:
                out.append(core)
            out.extend(word[len(core):])
    return out


class Vocabulary:
    """token <-> id table; anchor ids are always the three highest."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for a in ANCHORS:
            if a not in self.index:
                raise ValueError(f"vocabulary lacks anchor {a}")
        if [self.index[a] for a in ANCHORS] != [len(self.tokens) - 3, len(self.tokens) - 2, len(self.tokens) - 1]:
            raise ValueError("anchor ids must be the three highest, in [NOR][ANO][SEG] order")

    @classmethod
    def build(cls, corpus_words) -> "Vocabulary":
        seen = set(SPECIALS) | set(ANCHORS)
        body = sorted({w for w in corpus_words if w not in seen})
        return cls(list(SPECIALS) + body + list(ANCHORS))

    def __len__(self):
        return len(self.tokens)

    @property
    def base_size(self) -> int:
        return len(self.tokens) - 3

    @property
    def pad_id(self):
        return self.index["<pad>"]

    @property
    def bos_id(self):
        return self.index["<bos>"]

    @property
    def eos_id(self):
        return self.index["<eos>"]

    @property
    def unk_id(self):
        return self.index["<unk>"]

    @property
    def img_id(self):
        return self.index["<img>"]

    @property
    def nor_id(self):
        return self.index[ANCHOR_NOR]

    @property
    def ano_id(self):
        return self.index[ANCHOR_ANO]

    @property
    def seg_id(self):
        return self.index[ANCHOR_SEG]

    @property
    def anchor_ids(self) -> tuple[int, int, int]:
        return (self.nor_id, self.ano_id, self.seg_id)

    def tokenize(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in words_of(text)]

    def detokenize(self, ids) -> str:
        parts = []
        prev = None
        for i in ids:
            tok = self.tokens[int(i)]
            if not parts:
                parts.append(tok)
            elif tok in _PUNCT or (tok in ANCHORS and prev in ANCHORS):
                parts[-1] += tok
            else:
                parts.append(tok)
            prev = tok
        return " ".join(parts)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass
class AnchorSet:
    """Last-layer anchor states (1x64 rows) and their refined 1x32 embeddings."""

    h_nor: T.Tensor
    h_ano: T.Tensor
    h_seg: T.Tensor
    r_nor: T.Tensor | None = None
    r_ano: T.Tensor | None = None
    r_seg: T.Tensor | None = None


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    n_ctx: int = 320
    d_ff: int = 128


class TransformerBlock:
    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)

    def __call__(self, x: T.Tensor, mask: np.ndarray) -> T.Tensor:
        normed = self.ln1(x)
        x = T.add(x, self.attn(normed, normed, normed, mask=mask))
        return T.add(x, self.ffn(self.ln2(x)))

    def params(self, prefix: str):
        return (self.ln1.params(f"{prefix}.ln1") + self.attn.params(f"{prefix}.attn")
                + self.ln2.params(f"{prefix}.ln2") + self.ffn.params(f"{prefix}.ffn"))

    def adapter_targets(self) -> list[Linear]:
        return [self.attn.q, self.attn.k, self.attn.v, self.attn.out,
                self.ffn.lin1, self.ffn.lin2]


class MicroLM:
    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.token_emb = T.param_normal(rng, (cfg.vocab_size, cfg.d_model), 0.02)
        self.pos_emb = T.param_normal(rng, (cfg.n_ctx, cfg.d_model), 0.02)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = T.param_normal(rng, (cfg.vocab_size, cfg.d_model), 0.02)
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def extend_vocab(self, n_new: int, rng: np.random.Generator) -> None:
        """Append fresh embedding and head rows; existing rows untouched."""
        emb_new = rng.normal(0.0, 0.02, size=(n_new, self.cfg.d_model))
        head_new = rng.normal(0.0, 0.02, size=(n_new, self.cfg.d_model))
        self.token_emb = T.Tensor(np.vstack([self.token_emb.data, emb_new]), requires_grad=True)
        self.head = T.Tensor(np.vstack([self.head.data, head_new]), requires_grad=True)
        self.cfg.vocab_size += n_new

    def embed_text(self, ids) -> T.Tensor:
        return T.take_rows(self.token_emb, ids)

    def _mask(self, total: int, n_img: int) -> np.ndarray:
        key = (total, n_img)
        cached = self._mask_cache.get(key)
        if cached is not None:
            return cached
        mask = np.full((total, total), -1e9)
        mask[:n_img, :n_img] = 0.0  # image tokens attend among themselves
        for t in range(n_img, total):
            mask[t, : t + 1] = 0.0  # text attends causally over everything prior
        self._mask_cache[key] = mask
        return mask

    def forward(self, embedded: T.Tensor, n_img: int) -> tuple[T.Tensor, T.Tensor]:
        """Returns (logits[T_txt+1, V], hidden rows for the text positions)."""
        total = embedded.shape[0]
        if total > self.cfg.n_ctx:
            raise ContextOverflowError(f"sequence length {total} > context {self.cfg.n_ctx}")
        if n_img < 1 or n_img > total:
            raise ValueError(f"image prefix length {n_img} out of range for sequence {total}")
        x = T.add(embedded, T.slice_rows(self.pos_emb, 0, total))
        mask = self._mask(total, n_img)
        for block in self.blocks:
            x = block(x, mask)
        h = self.ln_f(x)
        logits = T.matmul(T.slice_rows(h, n_img - 1, total), T.transpose(self.head))
        hidden_text = T.slice_rows(h, n_img, total)
        return logits, hidden_text

    def generate(self, img_prefix: T.Tensor, prompt_ids: list[int], max_new: int,
                 eos_id: int) -> list[int]:
        """Greedy decode; stops before emitting EOS or after max_new tokens."""
        ids = list(prompt_ids)
        out = []
        n_img = img_prefix.shape[0]
        with T.no_grad():
            for _ in range(max_new):
                seq = T.concat_tokens([img_prefix, self.embed_text(ids)]) if ids else img_prefix
                if seq.shape[0] >= self.cfg.n_ctx:
                    break
                logits, _ = self.forward(seq, n_img)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == eos_id:
                    break
                ids.append(nxt)
                out.append(nxt)
        return out

    def params(self, prefix: str):
        out = [(f"{prefix}.token_emb", self.token_emb), (f"{prefix}.pos_emb", self.pos_emb)]
        for i, block in enumerate(self.blocks):
            out.extend(block.params(f"{prefix}.block{i}"))
        out.extend(self.ln_f.params(f"{prefix}.ln_f"))
        out.append((f"{prefix}.head", self.head))
        return out

    def apply_adapters(self, rank: int, rng: np.random.Generator) -> None:
        """Low-rank adapters on every attention/FFN weight; bases freeze."""
        for block in self.blocks:
            for lin in block.adapter_targets():
                lin.add_adapter(rank, rng)


def extract_anchor_hidden(hidden_text: T.Tensor, text_ids, vocab: Vocabulary) -> AnchorSet:
    """First-occurrence anchor rows from the text-position hidden states."""
    ids = list(text_ids)
    rows = []
    for aid, name in zip(vocab.anchor_ids, ANCHORS):
        try:
            pos = ids.index(aid)
        except ValueError:
            raise AnchorsMissingError(f"anchor {name} absent from response") from None
        rows.append(T.slice_rows(hidden_text, pos, pos + 1))
    return AnchorSet(h_nor=rows[0], h_ano=rows[1], h_seg=rows[2])


class TokenRefiner:
    """Shared two-layer map from LM hidden space into the decoder space."""

    def __init__(self, rng: np.random.Generator, d_in: int = 64, d_out: int = 32):
        self.lin1 = Linear(d_in, d_in, rng)
        self.lin2 = Linear(d_in, d_out, rng)

    def _map(self, h: T.Tensor) -> T.Tensor:
        return self.lin2(T.silu(self.lin1(h)))

    def refine(self, anchors: AnchorSet) -> AnchorSet:
        anchors.r_nor = self._map(anchors.h_nor)
        anchors.r_ano = self._map(anchors.h_ano)
        anchors.r_seg = self._map(anchors.h_seg)
        return anchors

    def params(self, prefix: str):
        return self.lin1.params(f"{prefix}.lin1") + self.lin2.params(f"{prefix}.lin2")
