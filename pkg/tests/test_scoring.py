import numpy as np
import pytest
import torch

from normdistill.scoring import AnomalyResult, anomaly_map, layer_score_map

from oracles import bilinear_upsample_oracle, cosine


def _layers(rng, shape=(1, 4, 4, 6), n=3):
    return [torch.tensor(rng.normal(size=shape)) for _ in range(n)]


def test_identical_features_give_zero_map(rng):
    enc = _layers(rng)
    results = anomaly_map(enc, [e.clone() for e in enc], out_size=8)
    assert len(results) == 1
    assert results[0].pixel_map.shape == (8, 8)
    assert np.allclose(results[0].pixel_map, 0.0, atol=1e-6)
    assert results[0].image_score == pytest.approx(0.0, abs=1e-6)


def test_opposed_position_peaks_at_two(rng):
    enc = _layers(rng, shape=(1, 4, 4, 6))
    dec = [e.clone() for e in enc]
    dec[1][0, 2, 3] = -enc[1][0, 2, 3]
    results = anomaly_map(enc, dec, out_size=4)  # no resampling at same size
    pm = results[0].pixel_map
    assert pm[2, 3] == pytest.approx(2.0, abs=1e-6)
    mask = np.ones_like(pm, dtype=bool)
    mask[2, 3] = False
    assert np.allclose(pm[mask], 0.0, atol=1e-6)
    assert results[0].image_score == pytest.approx(2.0, abs=1e-6)


def test_matches_cosine_plus_bilinear_oracle(rng):
    enc = _layers(rng, shape=(2, 4, 4, 5))
    dec = _layers(rng, shape=(2, 4, 4, 5))
    results = anomaly_map(enc, dec, out_size=8)
    for b in range(2):
        expected = np.zeros((8, 8))
        for e, d in zip(enc, dec):
            grid = np.zeros((4, 4))
            for y in range(4):
                for x in range(4):
                    grid[y, x] = 1.0 - cosine(e[b, y, x].numpy(), d[b, y, x].numpy())
            expected += bilinear_upsample_oracle(grid, 8, 8)
        assert np.allclose(results[b].pixel_map, expected, atol=1e-5)


def test_zero_norm_position_counts_as_degenerate(rng):
    enc = _layers(rng, shape=(1, 3, 3, 4))
    dec = [e.clone() for e in enc]
    enc[0][0, 1, 1] = 0.0
    layer_map, degenerate = layer_score_map(enc[0], dec[0])
    assert degenerate == 1
    assert layer_map[0, 1, 1] == pytest.approx(1.0)  # cosine treated as 0
    results = anomaly_map(enc, dec, out_size=3)
    assert results[0].degenerate_positions == 1


def test_layer_map_is_permutation_equivariant(rng):
    enc = torch.tensor(rng.normal(size=(1, 3, 4, 5)))
    dec = torch.tensor(rng.normal(size=(1, 3, 4, 5)))
    base, _ = layer_score_map(enc, dec)
    perm_rows = torch.tensor(rng.permutation(3))
    permuted, _ = layer_score_map(enc[:, perm_rows], dec[:, perm_rows])
    assert torch.allclose(permuted, base[:, perm_rows], atol=1e-9)


def test_image_score_is_map_max(rng):
    enc = _layers(rng)
    dec = _layers(rng)
    for r in anomaly_map(enc, dec, out_size=16):
        assert r.image_score == pytest.approx(float(r.pixel_map.max()))
        assert r.pixel_map.min() >= 0.0
        assert r.pixel_map.max() <= 6.0


def test_anomaly_result_fields():
    r = AnomalyResult(pixel_map=np.zeros((2, 2), dtype=np.float32), image_score=0.0)
    assert r.degenerate_positions == 0
