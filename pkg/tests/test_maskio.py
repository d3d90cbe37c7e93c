import numpy as np
import pytest

from ftn.backbone import GridSpec
from ftn.configurer import static_mask
from ftn.errors import IngestionError
from ftn.maskio import PALETTE, overlay_rgb, read_pgm_gates, read_pnm, write_pgm, write_ppm


def test_pgm_round_trip(tmp_path, rng):
    gates = (rng.uniform(size=64) < 0.3).astype(float)
    write_pgm(tmp_path / "m.pgm", gates, 8)
    assert np.array_equal(read_pgm_gates(tmp_path / "m.pgm"), gates)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")


def test_lit_pixel_count(tmp_path):
    g = GridSpec(D=32, k=128)
    write_pgm(tmp_path / "m.pgm", static_mask("fixed-mask", g, 3).gates, 32)
    img = read_pnm(tmp_path / "m.pgm")
    assert np.count_nonzero(img) == 128 and set(np.unique(img)) == {0, 255}


def test_fixed_mask_overlay_bands(tmp_path):
    g = GridSpec(D=8, k=16)
    masks = [static_mask("fixed-mask", g, t).gates for t in range(3)]
    rgb = overlay_rgb(masks, 8)
    flat = rgb.reshape(64, 3)
    for t in range(3):
        assert (flat[16 * t:16 * (t + 1)] == PALETTE[t]).all()
    assert not flat[48:].any()
    write_ppm(tmp_path / "o.ppm", rgb)
    assert np.array_equal(read_pnm(tmp_path / "o.ppm"), rgb)


def test_additive_saturation():
    a = np.ones(4)
    rgb = overlay_rgb([a, a, a, a], 2)  # red + green + blue + yellow
    assert rgb[0, 0].tolist() == [255, 255, 255]


def test_palette_cycles_with_warning():
    masks = [np.eye(16)[t % 16] for t in range(len(PALETTE) + 1)]
    with pytest.warns(UserWarning, match="colours repeat"):
        rgb = overlay_rgb(masks, 4)
    assert rgb.reshape(16, 3)[len(PALETTE)].tolist() == list(PALETTE[0])


def test_text_masks_accepted(tmp_path):
    write_pgm(tmp_path / "m.pgm", "1001", 2)
    assert read_pgm_gates(tmp_path / "m.pgm").tolist() == [1, 0, 0, 1]


def test_bad_files(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(IngestionError):
        read_pnm(tmp_path / "x.pgm")
    (tmp_path / "y.pgm").write_bytes(b"P5\n2 2\n255\n\0\0\0")
    with pytest.raises(IngestionError):
        read_pnm(tmp_path / "y.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "z.pgm", np.ones(5), 2)
