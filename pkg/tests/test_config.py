import pytest

from cashformer.config import PRESETS, ModelConfig, load_config


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_text_roundtrip(name, tmp_path):
    cfg = PRESETS[name]
    cfg.save(tmp_path / "c.txt")
    back = load_config(tmp_path / "c.txt")
    assert back == cfg and back.digest() == cfg.digest()


def test_presets_by_name():
    assert load_config("toy") is PRESETS["toy"]
    vit = PRESETS["vit_large"]
    assert (vit.blocks, vit.latent_dim, vit.hidden, vit.heads) == (24, 1024, 4096, 16)


def test_embedding_std_default():
    assert PRESETS["toy"].embedding_std == pytest.approx(32 ** -0.5)
    assert PRESETS["toy"].replace(init_scale=0.02).embedding_std == 0.02


@pytest.mark.parametrize("text, message", [
    ("bogus = 1\n", "unknown key"),
    ("latent_dim\n", "key = value"),
    ("latent_dim = 10\nheads = 3\n", "divisible"),
    ("channels = 4,8\n", "entries"),
])
def test_invalid_config(text, message):
    with pytest.raises(ValueError, match=message):
        ModelConfig.from_text(text)


def test_comments_and_blank_lines():
    cfg = ModelConfig.from_text("# toy\n\nlatent_dim = 8  # small\nheads = 2\n")
    assert cfg.latent_dim == 8 and cfg.heads == 2
