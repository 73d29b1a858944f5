"""Channel descriptions: statistics, prompt, semantic files and token embeddings."""

import textwrap
from pathlib import Path

import numpy as np
import pytest
import torch

from plmcast.core.models import TextMode
from plmcast.data.dataset import RawSeries
from plmcast.data.synthetic import channel_descriptions
from plmcast.errors import DescriptionError
from plmcast.model.backbone import ByteTokenizer
from plmcast.pipeline import describe_channels, load_series, split_series
from plmcast.text.channel_text import (
    add_noise,
    build_prompt,
    compose_descriptions,
    compute_channel_stats,
    encode_text,
    random_text,
    read_semantic_file,
    tokenize,
)


def _train() -> RawSeries:
    values = np.array([[1.0, 10.0], [2.0, 10.0], [3.0, 10.0], [6.0, 10.0]])
    return RawSeries(values=values, channel_names=("OT", "HUFL"), timestamps=("a", "b", "c", "d"))


# ── Statistics and prompt ────────────────────────


def test_channel_stats_use_population_variance():
    stats = compute_channel_stats(_train())
    assert stats.max[0] == 6.0 and stats.min[0] == 1.0
    assert stats.mean[0] == pytest.approx(3.0)
    assert stats.variance[0] == pytest.approx(3.5)
    assert stats.variance[1] == 0.0


def test_stats_sentence_format():
    stats = compute_channel_stats(_train())
    assert stats.sentence(0) == "Statistics: max=6, min=1, mean=3, variance=3.5"


def test_prompt_lists_every_channel():
    prompt = build_prompt("ETTh1", "electricity", ["HUFL", "HULL", "OT"])
    assert prompt.startswith("This is ETTh1 from electricity, including HUFL, HULL, OT")
    assert prompt.endswith("please describe these channels and their correlations.")


def test_prompt_without_channels():
    with pytest.raises(DescriptionError):
        build_prompt("x", "y", [])


# ── Semantic file ────────────────────────────────


def test_read_semantic_file(tmp_path: Path):
    path = tmp_path / "desc.txt"
    path.write_text(
        textwrap.dedent("""\
        OT: Oil temperature, the target.

        HUFL: High useful load.
        """)
    )
    entries = read_semantic_file(path, ["OT", "HUFL"])
    assert entries == {"OT": "Oil temperature, the target.", "HUFL": "High useful load."}


def test_semantic_file_unknown_channel(tmp_path: Path):
    path = tmp_path / "desc.txt"
    path.write_text("OT: fine\nWIND: not in the data\n")
    with pytest.raises(DescriptionError, match="'WIND'") as info:
        read_semantic_file(path, ["OT", "HUFL"])
    assert info.value.context["channel"] == "WIND"


def test_semantic_file_malformed_line(tmp_path: Path):
    path = tmp_path / "desc.txt"
    path.write_text("OT oil temperature\n")
    with pytest.raises(DescriptionError, match="desc.txt:1"):
        read_semantic_file(path, ["OT"])


# ── Composition ──────────────────────────────────


def test_compose_places_stats_last():
    stats = compute_channel_stats(_train())
    desc = compose_descriptions({"OT": "Oil temperature."}, stats)
    assert desc.combined[0] == "Oil temperature. " + stats.sentence(0)
    assert desc.combined[1] == stats.sentence(1)


def test_compose_without_semantic_is_stats_only():
    stats = compute_channel_stats(_train())
    desc = compose_descriptions(None, stats)
    assert desc.combined == tuple(stats.sentence(i) for i in range(2))


def test_stats_ignore_rows_outside_train():
    train = _train()
    longer = RawSeries(
        values=np.vstack([train.values, [[1e6, -1e6]]]),
        channel_names=train.channel_names,
        timestamps=(*train.timestamps, "e"),
    )
    a = compose_descriptions(None, compute_channel_stats(train))
    b = compose_descriptions(None, compute_channel_stats(longer.slice(0, 4)))
    assert a == b


def test_text_interventions_are_seeded():
    texts = ["Oil temperature of the transformer.", "High useful load."]
    assert random_text(texts, 1) == random_text(texts, 1)
    assert random_text(texts, 1) != texts
    noisy = add_noise(texts, 0.1, 1)
    assert noisy == add_noise(texts, 0.1, 1)
    assert [len(t) for t in noisy] == [len(t) for t in texts]


def test_compose_noisy_mode_changes_semantic_only():
    stats = compute_channel_stats(_train())
    clean = compose_descriptions({"OT": "Oil temperature " * 5}, stats)
    noisy = compose_descriptions(
        {"OT": "Oil temperature " * 5}, stats, mode=TextMode.NOISY, noise_rate=0.5
    )
    assert noisy.semantic[0] != clean.semantic[0]
    assert noisy.stats_text == clean.stats_text


# ── Tokens and embeddings ────────────────────────


def test_tokenize_pads_with_eos():
    stats = compute_channel_stats(_train())
    desc = compose_descriptions(None, stats)
    tokens = tokenize(desc, ByteTokenizer(), max_tokens=64)
    n = len(stats.sentence(0))
    assert tokens.ids.shape == (2, 64)
    assert tokens.mask[0].sum() == n
    assert np.all(tokens.ids[0, n:] == ByteTokenizer.eos_token_id)


def test_tokenize_truncates_semantic_before_stats():
    stats = compute_channel_stats(_train())
    desc = compose_descriptions({"OT": "x" * 200}, stats)
    tokens = tokenize(desc, ByteTokenizer(), max_tokens=64)
    tail = list((" " + stats.sentence(0)).encode("utf-8"))
    assert tokens.mask[0].sum() == 64
    assert tokens.ids[0, 64 - len(tail) :].tolist() == tail


def test_encode_text_shape_and_zero_padding(stub_backbone):
    stats = compute_channel_stats(_train())
    desc = compose_descriptions(None, stats)
    emb = encode_text(desc, stub_backbone, max_tokens=64)
    assert emb.shape == (2, 64, 16)
    n = len(stats.sentence(0))
    assert torch.all(emb[0, n:] == 0)
    assert not emb.requires_grad


def test_identical_descriptions_identical_rows(stub_backbone):
    values = np.ones((4, 2)) * np.arange(4)[:, None]
    train = RawSeries(values=values, channel_names=("a", "b"), timestamps=tuple("wxyz"))
    emb = encode_text(compose_descriptions(None, compute_channel_stats(train)), stub_backbone)
    torch.testing.assert_close(emb[0], emb[1], rtol=0, atol=0)


def test_channels_with_different_stats_get_different_token_rows(stub_cfg):
    stats = compute_channel_stats(_train())
    tokens = tokenize(compose_descriptions(None, stats), ByteTokenizer(), stub_cfg.text.max_tokens)
    assert tokens.mask.sum(axis=1).tolist() == [len(stats.sentence(i)) for i in range(2)]
    assert not np.array_equal(tokens.ids[0], tokens.ids[1])


# ── Synthetic channel text ───────────────────────


def _synthetic_tokens(cfg) -> np.ndarray:
    raw = load_series(cfg)
    splits = split_series(cfg, raw, cfg.data.horizons[0])
    return tokenize(describe_channels(cfg, splits.train), ByteTokenizer(), cfg.text.max_tokens).ids


def test_synthetic_channels_carry_their_own_text(stub_cfg):
    texts = channel_descriptions(stub_cfg.data.synthetic)
    assert texts["ch1"] == "Follows ch0 scaled by 0.9."
    assert texts["ch0"].startswith("A sine wave of period 24")
    ids = _synthetic_tokens(stub_cfg)
    assert len({row.tobytes() for row in ids}) == 3


@pytest.mark.parametrize("mode", [TextMode.RANDOM, TextMode.NOISY])
def test_text_interventions_change_synthetic_tokens(stub_cfg, mode):
    changed = stub_cfg.with_overrides({"text": {"mode": mode}})
    assert not np.array_equal(_synthetic_tokens(changed), _synthetic_tokens(stub_cfg))
