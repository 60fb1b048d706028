"""Full model assembly: encoders -> alignment -> LM -> refiner -> mask decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import MaskDecoder, ProbMaps
from .encoders import (
    D_LLM, FeatureMap, LinearProjection, PIXEL_DIM, PixelEncoder, SEMANTIC_DIM,
    SemanticEncoder,
)
from .lm import (
    AnchorsMissingError, LMConfig, MicroLM, TokenRefiner, Vocabulary,
    extract_anchor_hidden,
)
from .losses import LossConfig, SupervisionTriple, seg_loss, text_loss, total_loss
from .spam import AlignmentModule, assemble_llm_input

VARIANTS = ("full", "no-seg-anchor", "no-relative-anchors", "no-spam")


def variant_wiring(variant: str) -> tuple[tuple[str, ...], bool]:
    """(decoder heads, use alignment module) for an ablation variant."""
    if variant == "full":
        return ("seg", "rel"), True
    if variant == "no-seg-anchor":
        return ("rel",), True
    if variant == "no-relative-anchors":
        return ("seg",), True
    if variant == "no-spam":
        return ("seg", "rel"), False
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class ModelConfig:
    variant: str = "full"
    encoder_seed: int = 0
    init_seed: int = 0
    adapter_only: bool = False
    adapter_rank: int = 4


@dataclass
class SegmentResult:
    response: str
    probs: ProbMaps | None
    flags: list[str] = field(default_factory=list)

    def mask(self, size: int = 64) -> np.ndarray:
        if self.probs is None:
            return np.zeros((size, size), dtype=np.uint8)
        return self.probs.mask

    def score_map(self, size: int = 64) -> np.ndarray:
        if self.probs is None:
            return np.zeros((size, size))
        return self.probs.p_full


class AnchorSegModel:
    def __init__(self, vocab: Vocabulary, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.vocab = vocab
        heads, use_spam = variant_wiring(cfg.variant)
        self.heads = heads
        self.use_spam = use_spam
        rng = np.random.default_rng(np.random.SeedSequence([cfg.init_seed, 5]))
        self.sem_encoder = SemanticEncoder(cfg.encoder_seed)
        self.pix_encoder = PixelEncoder(cfg.encoder_seed)
        self.proj_s = LinearProjection(SEMANTIC_DIM, D_LLM, rng)
        self.proj_p = LinearProjection(PIXEL_DIM, D_LLM, rng)
        self.spam = AlignmentModule(rng) if use_spam else None
        self.lm = MicroLM(LMConfig(vocab_size=vocab.base_size), rng)
        self.lm.extend_vocab(3, rng)
        self.refiner = TokenRefiner(rng)
        self.decoder = MaskDecoder(rng, heads=heads)
        if cfg.adapter_only:
            self.lm.apply_adapters(cfg.adapter_rank, rng)
        self._feature_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, T.Tensor]:
        pairs = self.proj_s.params("proj_s")
        if self.use_spam:
            pairs += self.proj_p.params("proj_p")
            pairs += self.spam.params("spam")
        pairs += self.lm.params("lm")
        pairs += self.refiner.params("refiner")
        pairs += self.decoder.params("decoder")
        return dict(pairs)

    def trainable_parameters(self) -> dict[str, T.Tensor]:
        return {k: p for k, p in self.named_parameters().items() if p.requires_grad}

    # -- text plumbing ------------------------------------------------------

    def prompt_ids(self, instruction: str) -> list[int]:
        v = self.vocab
        return ([v.bos_id, v.img_id] + v.tokenize("User:") + v.tokenize(instruction)
                + v.tokenize("Assistant:"))

    def response_ids(self, response: str) -> list[int]:
        return self.vocab.tokenize(response) + [self.vocab.eos_id]

    # -- feature plumbing ---------------------------------------------------

    def encode_image(self, img: np.ndarray, cache_key: str | None = None):
        if cache_key is not None and cache_key in self._feature_cache:
            sem, pix = self._feature_cache[cache_key]
        else:
            sem = self.sem_encoder.encode(img).data.data
            pix = self.pix_encoder.encode(img).data.data
            if cache_key is not None:
                self._feature_cache[cache_key] = (sem, pix)
        f_s_raw = FeatureMap(64, SEMANTIC_DIM, (8, 8), T.tensor(sem))
        f_p_raw = FeatureMap(256, PIXEL_DIM, (16, 16), T.tensor(pix))
        return f_s_raw, f_p_raw

    def _llm_inputs(self, f_s_raw: FeatureMap, f_p_raw: FeatureMap):
        f_s = self.proj_s(f_s_raw)
        f_align = None
        if self.use_spam:
            f_align = self.spam.align(f_s, self.proj_p(f_p_raw))
        return f_s, f_align

    # -- training path (teacher forcing, gold anchor positions) --------------

    def live_heads(self, supervised_heads: tuple[str, ...]) -> tuple[str, ...]:
        """Sample-requested heads that survive the variant's wiring."""
        return tuple(h for h in supervised_heads
                     if (h == "seg" and "seg" in self.heads)
                     or (h in ("nor", "ano") and "rel" in self.heads))

    def forward_teacher(self, instruction: str, response: str, image: np.ndarray,
                        decode_masks: bool = True,
                        cache_key: str | None = None) -> dict:
        """Teacher-forced forward; returns logits, hidden rows, decoded maps."""
        prompt = self.prompt_ids(instruction)
        target = self.response_ids(response)
        text_ids = prompt + target
        f_s_raw, f_p_raw = self.encode_image(image, cache_key)
        f_s, f_align = self._llm_inputs(f_s_raw, f_p_raw)
        seq, n_img = assemble_llm_input(f_s, f_align, text_ids, self.lm)
        logits, hidden = self.lm.forward(seq, n_img)
        maps = None
        if decode_masks:
            anchors = extract_anchor_hidden(hidden, text_ids, self.vocab)
            refined = self.refiner.refine(anchors)
            maps = self.decoder.forward(refined, f_p_raw)
        return {"logits": logits, "hidden": hidden, "maps": maps,
                "prompt_len": len(prompt), "target": target}

    def training_pass(self, instruction: str, response: str, image: np.ndarray,
                      gt_mask: np.ndarray | None, supervised_heads: tuple[str, ...],
                      loss_cfg: LossConfig, cache_key: str | None = None) -> dict:
        live = self.live_heads(supervised_heads)
        want_masks = gt_mask is not None and bool(live)
        out = self.forward_teacher(instruction, response, image,
                                   decode_masks=want_masks, cache_key=cache_key)
        stop = out["prompt_len"] + len(out["target"])
        l_txt = text_loss(out["logits"], out["target"], out["prompt_len"], stop)
        l_seg = None
        if want_masks:
            l_seg = seg_loss(out["maps"], SupervisionTriple.from_mask(gt_mask),
                             loss_cfg, heads=live)
        return {"text": l_txt, "seg": l_seg, "total": total_loss(l_txt, l_seg)}

    # -- inference path (greedy generation, extraction from the output) ------

    def segment(self, image: np.ndarray, instruction: str, max_new: int = 48,
                cache_key: str | None = None) -> SegmentResult:
        prompt = self.prompt_ids(instruction)
        f_s_raw, f_p_raw = self.encode_image(image, cache_key)
        with T.no_grad():
            f_s, f_align = self._llm_inputs(f_s_raw, f_p_raw)
            prefix_parts = [f_s.data] + ([f_align.data] if f_align is not None else [])
            img_prefix = T.concat_tokens(prefix_parts) if len(prefix_parts) > 1 else prefix_parts[0]
            generated = self.lm.generate(img_prefix, prompt, max_new, self.vocab.eos_id)
            response = self.vocab.detokenize(generated)
            flags: list[str] = []
            full_ids = prompt + generated
            seq = T.concat_tokens([img_prefix, self.lm.embed_text(full_ids)])
            _, hidden = self.lm.forward(seq, img_prefix.shape[0])
            try:
                anchors = extract_anchor_hidden(hidden, full_ids, self.vocab)
            except AnchorsMissingError as exc:
                flags.append(f"anchors-missing: {exc}")
                return SegmentResult(response=response, probs=None, flags=flags)
            refined = self.refiner.refine(anchors)
            maps = self.decoder.forward(refined, f_p_raw)
        return SegmentResult(response=response, probs=maps.realize(), flags=flags)

    # -- integrity ----------------------------------------------------------

    def encoder_fingerprint(self, probe: np.ndarray) -> bytes:
        import hashlib
        h = hashlib.sha256()
        h.update(self.sem_encoder.encode(probe).data.data.tobytes())
        h.update(self.pix_encoder.encode(probe).data.data.tobytes())
        return h.digest()
