"""Embedding-layer pruning: frequency-based vocabulary reduction with
embedding-row rewrite, plus position-table trimming.

Both transforms are pure row/column selection, so for inputs whose tokens
all stay in the kept set (and fit the trimmed position range) the pruned
model's logits over kept ids equal the original model's logits at those
ids bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, ParameterError
from .model import Model, ModelConfig, _config_dict, _model_from_dict
from .tensor import Tensor
from .tokenizer import Tokenizer, Vocab


@dataclass(frozen=True)
class PrunedVocabMap:
    """Order-preserving bijection between kept original ids and 0..K-1."""

    kept_old_ids: tuple[int, ...]
    threshold: int  # keep-count or frequency threshold that produced the map

    def __post_init__(self):
        ids = self.kept_old_ids
        if not ids:
            raise ParameterError("kept set must not be empty")
        if list(ids) != sorted(set(ids)):
            raise ParameterError("kept_old_ids must be sorted and unique")

    @property
    def keep_count(self) -> int:
        return len(self.kept_old_ids)

    @property
    def old_to_new(self) -> dict[int, int]:
        return {old: new for new, old in enumerate(self.kept_old_ids)}

    @property
    def new_to_old(self) -> dict[int, int]:
        return dict(enumerate(self.kept_old_ids))

    def remap(self, old_ids: Iterable[int]) -> list[int]:
        table = self.old_to_new
        return [table[int(i)] for i in old_ids]


def scan_frequencies(corpus: Iterable[str], tok: Tokenizer) -> np.ndarray:
    """Total occurrences of each token id across encode(text) for the corpus."""
    counts = np.zeros(len(tok.vocab), dtype=np.int64)
    for text in corpus:
        ids = tok.encode(text)
        if ids:
            counts += np.bincount(np.asarray(ids, dtype=np.int64),
                                  minlength=len(tok.vocab))
    return counts


def build_pruned_vocab(counts: Sequence[int], keep_count: int,
                       specials: Iterable[int] = ()) -> PrunedVocabMap:
    """Keep the keep_count highest-count ids (ties to the lower original id),
    forcing the special ids in."""
    counts = np.asarray(counts, dtype=np.int64)
    specials = sorted(set(int(s) for s in specials))
    for s in specials:
        if not 0 <= s < len(counts):
            raise ParameterError(f"special id {s} out of range")
    if not len(specials) <= keep_count <= len(counts):
        raise ParameterError(
            f"keep_count must be in [{len(specials)}, {len(counts)}]")
    kept = set(specials)
    # stable sort by (-count, id): ties resolve to the lower original id
    order = np.lexsort((np.arange(len(counts)), -counts))
    for tid in order:
        if len(kept) == keep_count:
            break
        kept.add(int(tid))
    return PrunedVocabMap(kept_old_ids=tuple(sorted(kept)),
                          threshold=keep_count)


def build_pruned_vocab_by_threshold(counts: Sequence[int], min_count: int,
                                    specials: Iterable[int] = ()
                                    ) -> PrunedVocabMap:
    """Keep every id whose count reaches min_count, plus the specials."""
    counts = np.asarray(counts, dtype=np.int64)
    if min_count < 0:
        raise ParameterError("min_count must be >= 0")
    kept = {int(i) for i in np.nonzero(counts >= min_count)[0]}
    kept.update(int(s) for s in specials)
    if not kept:
        raise ParameterError("threshold keeps no tokens")
    return PrunedVocabMap(kept_old_ids=tuple(sorted(kept)),
                          threshold=min_count)


def prune_token_embedding(model: Model, vmap: PrunedVocabMap) -> Model:
    """Restrict token-embedding rows and lm-head columns to the kept ids.

    eos/pad ids are remapped; every other weight is shared unchanged.
    """
    c = model.config
    kept = list(vmap.kept_old_ids)
    if kept[-1] >= c.vocab_size:
        raise DimensionError(
            f"map keeps id {kept[-1]} but model vocab is {c.vocab_size}")
    o2n = vmap.old_to_new
    if c.eos_token not in o2n or c.pad_token not in o2n:
        raise DimensionError("map must keep the model's eos and pad tokens")
    cfg = ModelConfig(**{**_config_dict(c),
                         "vocab_size": vmap.keep_count,
                         "eos_token": o2n[c.eos_token],
                         "pad_token": o2n[c.pad_token]})
    idx = np.asarray(kept, dtype=np.int64)
    arrays = dict(model.named_tensors())
    arrays["token_embedding"] = Tensor(model.token_embedding.array[idx],
                                       c.dtype)
    arrays["lm_head"] = Tensor(
        np.ascontiguousarray(model.lm_head.array[:, idx]), c.dtype)
    return _model_from_dict(cfg, arrays)


def prune_position_embedding(model: Model, new_max_position: int) -> Model:
    """Truncate the position table to its first new_max_position rows."""
    c = model.config
    if not 1 <= new_max_position <= c.max_position:
        raise ParameterError(
            f"new_max_position must be in [1, {c.max_position}]")
    if new_max_position == c.max_position:
        return model
    cfg = ModelConfig(**{**_config_dict(c), "max_position": new_max_position})
    arrays = dict(model.named_tensors())
    arrays["position_embedding"] = Tensor(
        model.position_embedding.array[:new_max_position].copy(), c.dtype)
    return _model_from_dict(cfg, arrays)


def prune_vocab(vocab: Vocab, vmap: PrunedVocabMap) -> Vocab:
    """Vocabulary restricted to kept tokens, specials remapped."""
    if vmap.kept_old_ids[-1] >= len(vocab):
        raise DimensionError("map keeps ids beyond the vocabulary")
    o2n = vmap.old_to_new
    for name, sid in (("unk", vocab.unk), ("eos", vocab.eos), ("pad", vocab.pad)):
        if sid not in o2n:
            raise DimensionError(f"map must keep the {name} token")
    tokens = tuple(vocab.tokens[old] for old in vmap.kept_old_ids)
    freq = None
    if vocab.frequency is not None:
        freq = tuple(vocab.frequency[old] for old in vmap.kept_old_ids)
    return Vocab(tokens=tokens, unk=o2n[vocab.unk], eos=o2n[vocab.eos],
                 pad=o2n[vocab.pad], frequency=freq)


# ---------------------------------------------------------------------------
# map TSV: one "old_id<TAB>new_id" line per kept token
# ---------------------------------------------------------------------------

def write_vocab_map(path: str | Path, vmap: PrunedVocabMap) -> None:
    lines = [f"{old}\t{new}" for new, old in enumerate(vmap.kept_old_ids)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vocab_map(path: str | Path) -> PrunedVocabMap:
    kept = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line:
            continue
        old_s, sep, new_s = line.partition("\t")
        if not sep:
            raise FormatError(f"map line {ln}: expected old<TAB>new")
        try:
            old, new = int(old_s), int(new_s)
        except ValueError:
            raise FormatError(f"map line {ln}: bad ids") from None
        if new != len(kept):
            raise FormatError(f"map line {ln}: new ids must be dense ascending")
        kept.append(old)
    return PrunedVocabMap(kept_old_ids=tuple(kept), threshold=len(kept))
