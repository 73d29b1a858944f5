"""Per-channel text descriptions and their token embeddings.

Each channel gets a semantic paragraph (authored offline, read from a
``<channel>: <description>`` file) followed by a statistics sentence computed
from the training split. The combined text is tokenized with the backbone's
tokenizer and looked up in its token table.
"""

from __future__ import annotations

import string
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import structlog
import torch

from plmcast.core.models import TextMode
from plmcast.data.dataset import RawSeries
from plmcast.errors import DescriptionError
from plmcast.model.backbone import Backbone, Tokenizer

logger = structlog.get_logger()

PROMPT_TEMPLATE = (
    "This is {dataset} from {domain}, including {channels}, "
    "please describe these channels and their correlations."
)
STATS_TEMPLATE = "Statistics: max={max:.4g}, min={min:.4g}, mean={mean:.4g}, variance={variance:.4g}"
_LETTERS = np.array(list(string.ascii_lowercase))


@dataclass(frozen=True, eq=False)
class ChannelStats:
    """Training-split statistics per channel (population variance)."""

    names: tuple[str, ...]
    max: np.ndarray
    min: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    def __len__(self) -> int:
        return len(self.names)

    def sentence(self, index: int) -> str:
        return STATS_TEMPLATE.format(
            max=self.max[index],
            min=self.min[index],
            mean=self.mean[index],
            variance=self.variance[index],
        )


@dataclass(frozen=True)
class ChannelDescriptions:
    semantic: tuple[str, ...]
    stats_text: tuple[str, ...]
    combined: tuple[str, ...]
    separator: str = " "

    def __len__(self) -> int:
        return len(self.combined)


@dataclass(frozen=True, eq=False)
class TokenizedText:
    """Token ids padded to a fixed length; ``mask`` is 1 on real tokens."""

    ids: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def compute_channel_stats(train: RawSeries) -> ChannelStats:
    if train.rows == 0:
        raise DescriptionError("Channel statistics need a non-empty training split")
    values = train.values
    low, high = values.min(axis=0), values.max(axis=0)
    return ChannelStats(
        names=train.channel_names,
        max=high,
        min=low,
        mean=np.clip(values.mean(axis=0), low, high),
        variance=values.var(axis=0),
    )


def build_prompt(dataset_name: str, domain: str, channel_names: Sequence[str]) -> str:
    """The question to put to a language model to obtain the semantic file."""
    if not channel_names:
        raise DescriptionError("Cannot build a prompt without channel names")
    return PROMPT_TEMPLATE.format(
        dataset=dataset_name, domain=domain, channels=", ".join(channel_names)
    )


def read_semantic_file(path: Path, channel_names: Sequence[str]) -> dict[str, str]:
    """Parse ``<channel>: <description>`` lines; blank lines are skipped."""
    known = set(channel_names)
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, description = line.partition(": ")
        name = name.strip()
        if not sep:
            raise DescriptionError(
                f"{path}:{lineno} is not of the form '<channel>: <description>'", line=lineno
            )
        if name not in known:
            raise DescriptionError(
                f"Channel {name!r} in {path} is not in the dataset", channel=name, line=lineno
            )
        if name in entries:
            raise DescriptionError(f"Channel {name!r} is described twice in {path}", channel=name)
        entries[name] = description.strip()
    return entries


def random_text(texts: Sequence[str], seed: int) -> list[str]:
    """Replace each text with seeded random words of the same word count."""
    rng = np.random.default_rng(seed)
    out = []
    for text in texts:
        words = [
            "".join(rng.choice(_LETTERS, size=int(rng.integers(3, 9))))
            for _ in range(len(text.split()))
        ]
        out.append(" ".join(words))
    return out


def add_noise(texts: Sequence[str], rate: float, seed: int) -> list[str]:
    """Substitute a random letter for each character with probability ``rate``."""
    rng = np.random.default_rng(seed)
    out = []
    for text in texts:
        chars = np.array(list(text), dtype=object)
        hit = rng.random(len(chars)) < rate
        chars[hit] = rng.choice(_LETTERS, size=int(hit.sum()))
        out.append("".join(chars))
    return out


def compose_descriptions(
    semantic: Path | Mapping[str, str] | None,
    stats: ChannelStats,
    separator: str = " ",
    mode: TextMode = TextMode.SEMANTIC,
    noise_rate: float = 0.1,
    seed: int = 0,
) -> ChannelDescriptions:
    if isinstance(semantic, Path | str):
        entries = read_semantic_file(Path(semantic), stats.names)
    else:
        entries = dict(semantic or {})
        unknown = sorted(set(entries) - set(stats.names))
        if unknown:
            raise DescriptionError(
                f"Channel {unknown[0]!r} is not in the dataset", channel=unknown[0]
            )

    missing = [name for name in stats.names if name not in entries]
    if len(missing) == len(stats):
        logger.warning("semantic_descriptions_absent", fallback="statistics only")
    elif missing:
        logger.warning("semantic_descriptions_missing", channels=missing)

    texts = [entries.get(name, "") for name in stats.names]
    if mode == TextMode.RANDOM:
        texts = random_text(texts, seed)
    elif mode == TextMode.NOISY:
        texts = add_noise(texts, noise_rate, seed)

    stats_text = [stats.sentence(i) for i in range(len(stats))]
    combined = [
        f"{sem}{separator}{tail}" if sem else tail
        for sem, tail in zip(texts, stats_text, strict=True)
    ]
    return ChannelDescriptions(
        semantic=tuple(texts),
        stats_text=tuple(stats_text),
        combined=tuple(combined),
        separator=separator,
    )


def tokenize(desc: ChannelDescriptions, tokenizer: Tokenizer, max_tokens: int = 64) -> TokenizedText:
    """Tokenize every channel to exactly ``max_tokens`` ids.

    Over-long texts lose the tail of the semantic part first so the statistics
    sentence survives; padding uses the end-of-text id.
    """
    pad = tokenizer.eos_token_id
    ids = np.full((len(desc), max_tokens), pad, dtype=np.int64)
    mask = np.zeros((len(desc), max_tokens), dtype=np.int64)
    for i, (sem, tail) in enumerate(zip(desc.semantic, desc.stats_text, strict=True)):
        head_ids = tokenizer.encode(sem) if sem else []
        tail_ids = tokenizer.encode(f"{desc.separator}{tail}" if sem else tail)
        if len(head_ids) + len(tail_ids) > max_tokens:
            logger.warning(
                "description_truncated",
                channel=i,
                tokens=len(head_ids) + len(tail_ids),
                max_tokens=max_tokens,
            )
            tail_ids = tail_ids[:max_tokens]
            head_ids = head_ids[: max_tokens - len(tail_ids)]
        row = head_ids + tail_ids
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1
    return TokenizedText(ids=ids, mask=mask)


def encode_text(
    desc: ChannelDescriptions, backbone: Backbone, max_tokens: int = 64
) -> torch.Tensor:
    """Token-table embeddings, shape (C, L, D); padded positions are zero vectors."""
    tokens = tokenize(desc, backbone.tokenizer, max_tokens)
    table = backbone.wte
    with torch.no_grad():
        ids = torch.from_numpy(tokens.ids).to(table.weight.device)
        mask = torch.from_numpy(tokens.mask).to(table.weight)
        return table(ids) * mask.unsqueeze(-1)
