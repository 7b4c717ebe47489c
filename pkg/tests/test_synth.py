import numpy as np
import pytest

from densepipe.data import read_manifest
from densepipe.errors import DataError
from densepipe.imageio import load_image
from densepipe.synth import synth_generate


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return out, synth_generate(200, 32, 0.5, seed=7, out_dir=str(out))


def test_bookkeeping(generated):
    out, m = generated
    assert m.counts() == {"female": 100, "male": 100}
    assert len(list(out.glob("*.pgm"))) == 200
    assert read_manifest(out / "manifest.csv").entries == m.entries


def test_cue_boxes_in_lower_half(generated):
    out, m = generated
    for e in m.entries:
        x, y, w, h = e.cue
        assert y >= 16 and y + h <= 32 and x >= 0 and x + w <= 32 and w > 0 and h > 0


def test_wide_arch_is_wider(generated):
    _, m = generated
    widths = {lab: np.mean([e.cue[2] for e in m.entries if e.label == lab]) for lab in m.classes}
    assert widths["female"] > widths["male"] + 4


def test_arch_is_brighter_than_background(generated):
    out, m = generated
    e = m.entries[0]
    px = load_image(out / e.path).pixels.astype(float)
    x, y, w, h = (int(v) for v in e.cue)
    assert px[y:y + h, x:x + w].max() > np.median(px[:16]) + 60


def test_same_seed_byte_identical(tmp_path, generated):
    out, _ = generated
    synth_generate(200, 32, 0.5, seed=7, out_dir=str(tmp_path))
    for name in ("main_000.pgm", "main_123.pgm", "manifest.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_variant_and_balance(tmp_path):
    m = synth_generate(10, 32, 0.3, seed=7, out_dir=str(tmp_path), variant="src")
    assert m.counts() == {"female": 3, "male": 7}
    assert all(e.path.startswith("src_") for e in m.entries)


def test_errors(tmp_path):
    with pytest.raises(DataError):
        synth_generate(1, 32, out_dir=str(tmp_path))
    with pytest.raises(DataError):
        synth_generate(10, 16, out_dir=str(tmp_path))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        synth_generate(10, 32, out_dir=str(blocker / "sub"))
