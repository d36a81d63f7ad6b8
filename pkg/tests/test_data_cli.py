import hashlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from graftnet.cli import main
from graftnet.config import ConfigError, ModelConfig, RunConfig, TrainConfig, parse_config, serialize_config
from graftnet.data import (
    CorruptImageError,
    ManifestError,
    MissingFileError,
    load_image,
    load_manifest,
    load_mask,
    load_sample,
    render_sample,
    save_mask,
    synth_dataset,
)

TINY_INI = """\
[model]
cnn_input_hw = 64,64
trans_input_hw = 32,32
cnn_channel_base = 4
trans_embed_base = 8
window_size = 2
trans_depths = 1,1,1
d_graft = 16

[train]
epochs = 2
batch_size = 4
"""


def _digest(folder: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(folder.rglob("*")):
        if f.is_file():
            h.update(f.relative_to(folder).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# -- loading --------------------------------------------------------------

def test_mask_values_binarized_and_roundtrip(tmp_path):
    arr = np.zeros((6, 5), dtype=np.uint8)
    arr[1:4, 2:] = 255
    arr[5, 0] = 127
    Image.fromarray(arr, mode="L").save(tmp_path / "m.png")
    m = load_mask(tmp_path / "m.png")
    assert set(np.unique(m)) == {0.0, 1.0}
    assert np.array_equal(m, (arr >= 128).astype(np.float32))
    save_mask(m, tmp_path / "m2.png")
    assert np.array_equal(load_mask(tmp_path / "m2.png"), m)
    # a saved {0,1} mask reloads to the identical PNG bytes when re-saved
    save_mask(load_mask(tmp_path / "m2.png"), tmp_path / "m3.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "m2.png")), np.asarray(Image.open(tmp_path / "m3.png")))


def test_native_size_resize_is_identity(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, (12, 10, 3), dtype=np.uint8)
    Image.fromarray(arr, mode="RGB").save(tmp_path / "i.png")
    assert np.array_equal(load_image(tmp_path / "i.png", (12, 10)), load_image(tmp_path / "i.png"))
    assert np.array_equal(load_image(tmp_path / "i.png"), arr.transpose(2, 0, 1) / np.float32(255.0))


def test_load_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_image(tmp_path / "none.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(CorruptImageError):
        load_mask(tmp_path / "junk.png")


def test_manifest_duplicates_report_line(tmp_path):
    (tmp_path / "m.csv").write_text("image,mask\na/x.png,b/x.png\na/y.png,b/y.png\nc/x.png,d/x.png\n")
    with pytest.raises(ManifestError, match=r"m\.csv:4: duplicate id 'x'.*line 2"):
        load_manifest(tmp_path / "m.csv")


def test_manifest_header_and_columns(tmp_path):
    (tmp_path / "a.csv").write_text("img,msk\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("image,mask\nonly_one\n")
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(tmp_path / "b.csv")


# -- synthetic data -------------------------------------------------------

def test_synth_deterministic_checksum(tmp_path):
    synth_dataset(4, 32, 7, tmp_path / "a")
    synth_dataset(4, 32, 7, tmp_path / "b")
    synth_dataset(4, 32, 8, tmp_path / "c")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_synth_masks_nonempty_and_under_half(tmp_path):
    m = synth_dataset(40, 64, 3, tmp_path)
    for entry in m:
        s = load_sample(entry)
        assert s.image.shape == (3, 64, 64) and s.mask.shape == (64, 64)
        frac = s.mask.mean()
        assert 0 < frac < 0.5


def test_synth_worst_case_bound():
    # three maximal ellipses cover at most 3 * pi * 0.2^2 ~ 0.377 of the frame
    assert 3 * np.pi * 0.2**2 < 0.5


def test_centered_disk_symmetric():
    size = 33
    c = (size - 1) / 2
    _, mask = render_sample(np.random.default_rng(0), size, shapes=[(c, c, 6.0, 6.0, 0.0)])
    assert mask.sum() > 0
    assert np.array_equal(mask, mask[:, ::-1])


def test_synth_rejects_bad_n(tmp_path):
    with pytest.raises(ValueError):
        synth_dataset(0, 32, 0, tmp_path)


# -- config ---------------------------------------------------------------

@pytest.mark.parametrize("rc", [
    RunConfig(),
    RunConfig(ModelConfig.full(), TrainConfig(lr0=0.01, epochs=3)),
    RunConfig(ModelConfig.tiny(alpha=2.5, graft_grid=3, shared_qkv=True, use_cgm=False), TrainConfig(hflip=False)),
])
def test_config_roundtrip(rc):
    text = serialize_config(rc)
    again = parse_config(text)
    assert again == rc
    assert serialize_config(again) == text


def test_config_errors_are_named():
    with pytest.raises(ConfigError, match="unknown key 'depth'"):
        parse_config("[model]\ndepth = 3\n")
    with pytest.raises(ConfigError, match="window_size"):
        parse_config("[model]\nwindow_size = 3\n")
    with pytest.raises(ConfigError, match="lr0"):
        parse_config("[train]\nlr0 = -1\n")
    with pytest.raises(ConfigError, match="unknown config sections"):
        parse_config("[optim]\nlr = 1\n")


# -- CLI ------------------------------------------------------------------

def test_cli_synth_train_eval_predict(tmp_path, capsys):
    d, run = tmp_path / "d", tmp_path / "run"
    (tmp_path / "c.ini").write_text(TINY_INI)
    assert main(["synth", "--n", "8", "--size", "64", "--seed", "7", "--out", str(d)]) == 0
    assert main(["train", "--config", str(tmp_path / "c.ini"), "--data", str(d / "manifest.csv"), "--out", str(run)]) == 0
    assert (run / "model.trnc").is_file()
    assert len((run / "train.log").read_text().splitlines()) == 2
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "model.trnc"), "--data", str(d / "manifest.csv")]) == 0
    out = capsys.readouterr().out
    assert "mDice" in out and "mIoU" in out and "mF1" in out
    assert sum(line.startswith("id=synth_") for line in out.splitlines()) == 8
    assert main(["eval", "--checkpoint", str(run / "model.trnc"), "--data", str(d / "manifest.csv"),
                 "--pcs", "--threshold", "0.5"]) == 0
    mask_out = tmp_path / "pred.png"
    assert main(["predict", "--checkpoint", str(run / "model.trnc"), "--image", str(d / "images" / "synth_0000.png"),
                 "--out", str(mask_out)]) == 0
    pred = load_mask(mask_out)
    assert pred.shape == (64, 64)


def test_cli_eval_empty_manifest(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(TINY_INI)
    synth_dataset(2, 64, 0, tmp_path / "d")
    assert main(["train", "--config", str(tmp_path / "c.ini"), "--data", str(tmp_path / "d" / "manifest.csv"),
                 "--out", str(tmp_path / "run"), "--epochs", "1"]) == 0
    (tmp_path / "empty.csv").write_text("image,mask\n")
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(tmp_path / "run" / "model.trnc"), "--data", str(tmp_path / "empty.csv")])
    assert code == 2
    assert "empty" in capsys.readouterr().err


def test_cli_usage_errors(capsys):
    assert main(["bogus"]) == 1
    assert main(["train", "--unknown"]) == 1
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_config_and_data_errors(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[model]\nd_graft = 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini"), "--data", "x.csv", "--out", str(tmp_path)]) == 1
    assert "d_graft" in capsys.readouterr().err
    (tmp_path / "c.ini").write_text(TINY_INI)
    assert main(["train", "--config", str(tmp_path / "c.ini"), "--data", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path)]) == 2


def test_cli_gradcheck_cgm(capsys):
    assert main(["gradcheck", "--module", "cgm"]) == 0
    out = capsys.readouterr().out
    assert "max rel err" in out and "ok" in out


def test_cli_gradcheck_failure_exit_code(monkeypatch, capsys):
    from graftnet import gradcheck

    monkeypatch.setitem(gradcheck.SUITES, "cgm", lambda seed=0: {"cgm.params": 0.5})
    assert main(["gradcheck", "--module", "cgm"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_cli_thread_cap(monkeypatch, tmp_path):
    monkeypatch.setenv("GRAFTNET_THREADS", "1")
    assert main(["synth", "--n", "1", "--size", "32", "--out", str(tmp_path)]) == 0
    monkeypatch.setenv("GRAFTNET_THREADS", "zero")
    assert main(["synth", "--n", "1", "--size", "32", "--out", str(tmp_path)]) == 1


def test_cli_ablate_modules_four_rows(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(TINY_INI)
    synth_dataset(6, 64, 1, tmp_path / "d")
    code = main(["ablate", "--study", "modules", "--config", str(tmp_path / "c.ini"),
                 "--data", str(tmp_path / "d" / "manifest.csv"), "--seeds", "1", "--epochs", "1"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    head = next(i for i, line in enumerate(lines) if line.startswith("variant "))
    rows = lines[head + 1:]
    assert [r.split("  ")[0].strip() for r in rows] == ["cnn only", "transformer only", "both, no grafting", "full"]


def test_cli_ablate_pairs(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(TINY_INI)
    synth_dataset(4, 64, 1, tmp_path / "d")
    assert main(["ablate", "--study", "pairs", "--config", str(tmp_path / "c.ini"),
                 "--data", str(tmp_path / "d" / "manifest.csv"), "--seeds", "1", "--epochs", "1"]) == 0
    out = capsys.readouterr().out
    for i in (1, 2, 3, 4):
        assert f"cnn5 + trans{i}" in out
