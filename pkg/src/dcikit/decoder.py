"""Causal decoder over interleaved text and vision tokens.

Text is tokenized at word level against a corpus-built vocabulary with
five reserved ids. Prompts may contain ``<image>`` placeholders; when a
sequence is assembled, each placeholder expands in place into that
image's projected vision tokens. Training loss covers the answer span
(answer words plus the end-of-sequence token); prompt and vision
positions are masked out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Tensor
from .errors import (ConfigurationError, DimensionError, MissingImageError,
                     SequenceError)

PAD_ID = 0
UNK_ID = 1
IMG_ID = 2
BOS_ID = 3
EOS_ID = 4
RESERVED = ("<pad>", "<unk>", "<image>", "<bos>", "<eos>")
IMAGE_TOKEN = "<image>"


class Vocab:
    """Word-level vocabulary with fixed reserved ids.

    Normal text never maps to a reserved id; the literal ``<image>`` maps
    to IMG_ID and unknown words to UNK_ID.
    """

    def __init__(self, words: Sequence[str]):
        self.id_to_token: list[str] = list(RESERVED) + list(words)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigurationError("duplicate words in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Collect every whitespace word (lowercased) across ``texts``."""
        words = set()
        for text in texts:
            for w in text.lower().split():
                if w != IMAGE_TOKEN:
                    words.add(w)
        return cls(sorted(words))

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for w in text.lower().split():
            if w == IMAGE_TOKEN:
                ids.append(IMG_ID)
            else:
                ids.append(self.token_to_id.get(w, UNK_ID))
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            words.append(self.id_to_token[i] if 0 <= i < self.size else RESERVED[UNK_ID])
        return " ".join(words)

    def to_json(self) -> dict:
        return {"words": self.id_to_token[len(RESERVED):]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(obj["words"])


@dataclass(frozen=True)
class DecoderConfig:
    """Decoder sizing; vocab_size/max_len of 0 mean "derive from the data"."""

    lm_width: int
    blocks: int
    heads: int
    vocab_size: int
    max_len: int
    seed: int = 0

    def __post_init__(self):
        if self.lm_width % self.heads:
            raise ConfigurationError(
                f"lm_width {self.lm_width} not divisible by {self.heads} heads")
        if self.blocks < 1:
            raise ConfigurationError("decoder needs at least one block")
        if self.vocab_size != 0 and self.vocab_size < len(RESERVED):
            raise ConfigurationError(f"vocab size must cover the {len(RESERVED)} reserved ids")
        if self.max_len != 0 and self.max_len < 2:
            raise ConfigurationError("max_len must allow at least two positions")


@dataclass
class SequencePlan:
    """Token ids with image placeholders plus the expanded loss mask.

    ``spans[k]`` is the index of the image that the k-th placeholder
    expands to; ``loss_mask`` already has the expanded length (text length
    minus placeholders plus the vision token counts).
    """

    ids: list[int]
    spans: list[int]
    loss_mask: list[int]

    def __post_init__(self):
        if self.ids.count(IMG_ID) != len(self.spans):
            raise SequenceError(
                f"{self.ids.count(IMG_ID)} placeholders but {len(self.spans)} image spans")


def build_plan(vocab: Vocab, prompt: str, answer: str | None,
               vision_token_counts: Sequence[int]) -> SequencePlan:
    """Plan a training or generation sequence for one sample.

    The sequence is BOS, prompt tokens (placeholders included), then for
    training the answer tokens and EOS. The loss mask covers the answer
    tokens and the EOS terminator only.
    """
    prompt_ids = [BOS_ID] + vocab.tokenize(prompt)
    n_img = prompt_ids.count(IMG_ID)
    if n_img != len(vision_token_counts):
        raise SequenceError(
            f"prompt has {n_img} placeholders but {len(vision_token_counts)} images")
    answer_ids = (vocab.tokenize(answer) + [EOS_ID]) if answer is not None else []
    if IMG_ID in answer_ids:
        raise SequenceError("answers must not contain image placeholders")
    ids = prompt_ids + answer_ids
    prompt_expanded = len(prompt_ids) - n_img + sum(vision_token_counts)
    loss_mask = [0] * prompt_expanded + [1] * len(answer_ids)
    return SequencePlan(ids=ids, spans=list(range(n_img)), loss_mask=loss_mask)


@dataclass
class AssembledSequence:
    """An embedded interleaved sequence ready for the decoder.

    ``token_ids`` carries PAD at vision positions; those rows are never
    loss targets because the mask is zero there.
    """

    embeddings: Tensor
    loss_mask: list[int]
    token_ids: list[int]

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def assemble_interleaved_sequence(plan: SequencePlan, vision_tokens: Sequence[Tensor],
                                  embed_table: Tensor) -> AssembledSequence:
    """Replace each placeholder with its image's vision token rows.

    Text positions are embedded through the table; the result keeps prompt
    order, so gradients flow to both the table and the vision pathway.
    """
    width = embed_table.shape[1]
    segments: list[Tensor] = []
    token_ids: list[int] = []
    run: list[int] = []
    img_index = 0

    def flush():
        if run:
            segments.append(ad.gather_rows(embed_table, list(run)))
            token_ids.extend(run)
            run.clear()

    for tok in plan.ids:
        if tok == IMG_ID:
            flush()
            if img_index >= len(plan.spans) or plan.spans[img_index] >= len(vision_tokens):
                raise MissingImageError(f"no image for placeholder {img_index}")
            vt = vision_tokens[plan.spans[img_index]]
            if vt.data.ndim != 2 or vt.shape[1] != width:
                raise DimensionError(
                    f"vision tokens {vt.shape} do not match embedding width {width}")
            segments.append(vt)
            token_ids.extend([PAD_ID] * vt.shape[0])
            img_index += 1
        else:
            run.append(tok)
    flush()

    embedded = segments[0] if len(segments) == 1 else ad.concat_rows(segments)
    if len(plan.loss_mask) != embedded.shape[0]:
        raise SequenceError(
            f"loss mask length {len(plan.loss_mask)} vs sequence length {embedded.shape[0]}")
    return AssembledSequence(embedded, list(plan.loss_mask), token_ids)


def init_decoder_params(cfg: DecoderConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict[str, np.ndarray] = {}
    s = 1.0 / np.sqrt(cfg.lm_width)
    params["decoder.embed"] = rng.uniform(-s, s, size=(cfg.vocab_size, cfg.lm_width))
    params["decoder.pos"] = rng.uniform(-s, s, size=(cfg.max_len, cfg.lm_width))
    for i in range(cfg.blocks):
        tf.init_block(params, f"decoder.block{i}", rng, cfg.lm_width, 4 * cfg.lm_width)
    params["decoder.ln_f.g"] = np.ones(cfg.lm_width)
    params["decoder.ln_f.b"] = np.zeros(cfg.lm_width)
    tf.init_linear(params, "decoder.head", rng, cfg.lm_width, cfg.vocab_size)
    return params


def decode_logits(seq: AssembledSequence, params: dict[str, Tensor],
                  cfg: DecoderConfig) -> Tensor:
    """Causal decoder forward pass; returns n-by-vocab logits."""
    n = len(seq)
    if n > cfg.max_len:
        raise SequenceError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    x = ad.add(seq.embeddings, ad.slice_rows(params["decoder.pos"], 0, n))
    mask = tf.causal_mask(n)
    for i in range(cfg.blocks):
        x = tf.block(x, params, f"decoder.block{i}", cfg.heads, mask)
    x = ad.layer_norm(x, params["decoder.ln_f.g"], params["decoder.ln_f.b"], tf.LN_EPS)
    return tf.linear(x, params, "decoder.head")


def forward_loss(seq: AssembledSequence, params: dict[str, Tensor],
                 cfg: DecoderConfig) -> Tensor:
    """Next-token cross-entropy averaged over the answer positions."""
    n = len(seq)
    logits = decode_logits(seq, params, cfg)
    # position i predicts token i+1, so targets and mask shift left by one
    return ad.softmax_cross_entropy(
        ad.slice_rows(logits, 0, n - 1), seq.token_ids[1:], seq.loss_mask[1:])


_NON_TEXT_IDS = (PAD_ID, UNK_ID, IMG_ID, BOS_ID)


def greedy_generate(plan: SequencePlan, vision_tokens: Sequence[Tensor],
                    params: dict[str, Tensor], cfg: DecoderConfig, vocab: Vocab,
                    max_new: int) -> str:
    """Argmax decoding until EOS or ``max_new`` tokens; ties pick the
    lowest token id. Generated text is word-space only, so the reserved
    non-terminal ids are excluded from the argmax. Deterministic given
    parameters and inputs."""
    generated: list[int] = []
    for _ in range(max_new):
        step_plan = SequencePlan(ids=plan.ids + generated, spans=list(plan.spans),
                                 loss_mask=plan.loss_mask + [0] * len(generated))
        seq = assemble_interleaved_sequence(step_plan, vision_tokens, params["decoder.embed"])
        if len(seq) + 1 > cfg.max_len:
            break
        logits = decode_logits(seq, params, cfg)
        row = logits.data[-1].copy()
        row[list(_NON_TEXT_IDS)] = -np.inf
        nxt = int(np.argmax(row))
        if nxt == EOS_ID:
            break
        generated.append(nxt)
    return vocab.detokenize(generated)
