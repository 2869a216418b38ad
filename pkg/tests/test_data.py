import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from normdistill.data import ImageSample, load_dataset, load_image
from normdistill.errors import ConfigurationError, DatasetIntegrityError, InputError
from normdistill.synthetic import SynthSpec, generate_synthetic, load_synth_spec

SPEC = SynthSpec(num_categories=2, train_images=4, test_good=2, test_anomalous=3,
                 resolution=32, seed=5, min_defect_fraction=0.01, max_defect_fraction=0.25)


def _tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            digest.update(str(p.relative_to(root)).encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def test_generation_is_byte_reproducible(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_synthetic(SPEC, a)
    generate_synthetic(SPEC, b)
    assert _tree_hash(a) == _tree_hash(b)


def test_refuses_nonempty_target_without_overwrite(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    with pytest.raises(InputError):
        generate_synthetic(SPEC, out)
    generate_synthetic(SPEC, out, overwrite=True)


def test_masks_nonempty_and_fraction_in_bounds(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    samples = load_dataset(out, "test")
    anomalous = [s for s in samples if s.is_anomalous]
    assert anomalous
    for s in anomalous:
        fraction = s.mask.float().mean().item()
        assert SPEC.min_defect_fraction <= fraction <= SPEC.max_defect_fraction
    for s in samples:
        if not s.is_anomalous:
            assert s.mask is None


def test_train_split_is_all_good(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    train = load_dataset(out, "train")
    assert train and all(not s.is_anomalous for s in train)
    assert all(s.defect_type == "good" for s in train)


def test_category_filter_and_counts(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    all_test = load_dataset(out, "test")
    walk_count = sum(1 for p in out.rglob("*.png")
                     if "test" in p.parts and p.suffix == ".png")
    assert len(all_test) == walk_count
    one = load_dataset(out, "test", categories=["stripes00"])
    assert {s.category for s in one} == {"stripes00"}
    with pytest.raises(DatasetIntegrityError):
        load_dataset(out, "test", categories=["missing"])


def test_loader_resizes(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    samples = load_dataset(out, "test", resolution=16)
    for s in samples:
        assert s.pixels.shape == (16, 16, 3)
        if s.mask is not None:
            assert s.mask.shape == (16, 16)


def test_missing_mask_detected(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    victim = next(out.glob("*/ground_truth/*/*_mask.png"))
    victim.unlink()
    with pytest.raises(DatasetIntegrityError, match="missing mask"):
        load_dataset(out, "test")


def test_anomaly_directory_in_train_detected(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    cat = next(p for p in out.iterdir() if p.is_dir())
    bad = cat / "train" / "scratch_line"
    bad.mkdir()
    with pytest.raises(DatasetIntegrityError, match="non-good"):
        load_dataset(out, "train")


def test_mask_resolution_mismatch_detected(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    victim = next(out.glob("*/ground_truth/*/*_mask.png"))
    Image.new("L", (8, 8)).save(victim)
    with pytest.raises(DatasetIntegrityError, match="resolution"):
        load_dataset(out, "test")


def test_image_sample_validation():
    with pytest.raises(InputError):
        ImageSample(pixels=torch.rand(4, 4), category="x", is_anomalous=False)
    with pytest.raises(InputError):
        ImageSample(pixels=torch.full((4, 4, 3), 2.0), category="x", is_anomalous=False)
    with pytest.raises(InputError):
        ImageSample(pixels=torch.rand(4, 4, 3), category="x", is_anomalous=True,
                    mask=torch.zeros(8, 8, dtype=torch.bool))


def test_load_image_roundtrip(tmp_path):
    arr = (np.random.default_rng(0).random((16, 16, 3)) * 255).astype(np.uint8)
    path = tmp_path / "img.png"
    Image.fromarray(arr).save(path)
    pixels = load_image(path)
    assert pixels.shape == (16, 16, 3)
    assert np.allclose(pixels.numpy(), arr / 255.0, atol=1e-6)


def test_synth_spec_parsing(tmp_path):
    spec_file = tmp_path / "synth.ini"
    spec_file.write_text(
        "[synth]\nnum_categories = 2\ntrain_images = 4\ntest_good = 1\n"
        "test_anomalous = 2\nresolution = 32\nseed = 9\n"
        "defect_kinds = scratch_line,intensity_blot\n")
    spec = load_synth_spec(spec_file)
    assert spec.num_categories == 2
    assert spec.defect_kinds == ("scratch_line", "intensity_blot")
    bad = tmp_path / "bad.ini"
    bad.write_text("[synth]\nnope = 1\n")
    with pytest.raises(ConfigurationError):
        load_synth_spec(bad)


def test_bad_defect_kind_rejected():
    with pytest.raises(ConfigurationError):
        SynthSpec(defect_kinds=("sparkles",))


def test_deterministic_iteration_order(tmp_path):
    out = tmp_path / "data"
    generate_synthetic(SPEC, out)
    a = [str(s.path) for s in load_dataset(out, "test")]
    b = [str(s.path) for s in load_dataset(out, "test")]
    assert a == b == sorted(a)
