import json

import numpy as np
import pytest
import torch

from recvarnet.data import (
    MAP_GRADIENT_BOUND,
    SliceDataset,
    Volume,
    generate_dataset,
    generate_phantom,
    read_header,
    read_volume,
    simulate_acquisition,
    simulate_coil_maps,
    write_volume,
)
from recvarnet.operators import ifft2c, rss, sense_reconstruct


class TestPhantom:
    def test_deterministic(self):
        assert np.array_equal(generate_phantom((48, 40), 3), generate_phantom((48, 40), 3))
        assert not np.array_equal(generate_phantom((48, 40), 3), generate_phantom((48, 40), 4))

    def test_magnitude_range(self):
        for seed in range(5):
            magnitude = np.abs(generate_phantom((64, 64), seed))
            assert magnitude.min() >= 0 and magnitude.max() <= 1 + 1e-12

    def test_support_fraction(self):
        for seed in range(10):
            support = np.count_nonzero(np.abs(generate_phantom((64, 64), seed)) > 0) / 64**2
            assert 0.2 <= support <= 0.8


class TestCoilMaps:
    @pytest.mark.parametrize("n_coils", [2, 4, 8, 12])
    def test_normalized_everywhere(self, n_coils):
        maps = simulate_coil_maps((40, 48), n_coils, seed=1)
        assert np.abs((np.abs(maps) ** 2).sum(0) - 1).max() < 1e-6

    def test_single_coil_constant(self):
        maps = simulate_coil_maps((16, 16), 1, seed=5)
        assert np.all(maps == maps[0, 0, 0]) and abs(abs(maps[0, 0, 0]) - 1) < 1e-12

    @pytest.mark.parametrize("shape", [(32, 32), (64, 64), (128, 96)])
    def test_smoothness_bound(self, shape):
        for seed in range(10):
            maps = simulate_coil_maps(shape, 8, seed)
            # finite differences scaled to the [-1, 1] image coordinate
            dy = np.abs(np.diff(maps, axis=1)) * shape[0] / 2
            dx = np.abs(np.diff(maps, axis=2)) * shape[1] / 2
            assert max(dy.max(), dx.max()) < MAP_GRADIENT_BOUND


class TestAcquisition:
    def setup_method(self):
        self.phantom = generate_phantom((32, 32), 0)
        self.maps = simulate_coil_maps((32, 32), 4, 0)

    def test_noiseless_sense_inversion(self):
        sample = simulate_acquisition(self.phantom, self.maps, 0.0, seed=0)
        recovered = sense_reconstruct(torch.from_numpy(sample.kspace), torch.from_numpy(self.maps)).numpy()
        assert np.abs(recovered - self.phantom).max() < 1e-6

    def test_noiseless_rss_is_magnitude(self):
        sample = simulate_acquisition(self.phantom, self.maps, 0.0, seed=0)
        assert np.abs(sample.reference - np.abs(self.phantom)).max() < 1e-6
        assert np.abs(rss(ifft2c(torch.from_numpy(sample.kspace))).numpy() - sample.reference).max() < 1e-6

    def test_noise_level(self):
        phantom = np.zeros((50, 50))
        maps = simulate_coil_maps((50, 50), 4, 0)
        sample = simulate_acquisition(phantom, maps, 0.05, seed=3)
        std = np.sqrt(np.mean(np.abs(sample.kspace) ** 2))
        assert abs(std - 0.05) < 0.05 * 0.05

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            simulate_acquisition(self.phantom, self.maps, -1.0, seed=0)


class TestVolumeIO:
    def test_round_trip_complex(self, tmp_path, rng):
        data = (rng.standard_normal((3, 2, 8, 6)) + 1j * rng.standard_normal((3, 2, 8, 6))).astype(np.complex64)
        write_volume(tmp_path / "v.kspv", Volume(data, sigma=0.01, seed=7))
        v = read_volume(tmp_path / "v.kspv")
        assert v.data.dtype == np.complex64 and np.array_equal(v.data.view(np.uint8), data.view(np.uint8))
        assert v.sigma == 0.01 and v.seed == 7

    def test_round_trip_real(self, tmp_path, rng):
        data = rng.standard_normal((2, 8, 6)).astype(np.float32)
        write_volume(tmp_path / "r.kspv", Volume(data))
        v = read_volume(tmp_path / "r.kspv")
        assert v.data.shape == (2, 8, 6) and np.array_equal(v.data, data) and v.seed is None

    def test_payload_layout(self, tmp_path):
        data = np.array([[1 + 2j, 3 - 4j]], dtype=np.complex64)
        write_volume(tmp_path / "v.kspv", Volume(data))
        raw = (tmp_path / "v.kspv").read_bytes()
        header = read_header(tmp_path / "v.kspv")
        payload = np.frombuffer(raw[header.payload_offset :], dtype="<f4")
        assert payload.tolist() == [1, 2, 3, -4]

    def test_truncated(self, tmp_path):
        write_volume(tmp_path / "v.kspv", Volume(np.zeros((2, 1, 4, 4), np.complex64)))
        raw = (tmp_path / "v.kspv").read_bytes()
        (tmp_path / "t.kspv").write_bytes(raw[:-10])
        with pytest.raises(ValueError, match=f"expected {len(raw)} bytes.*found {len(raw) - 10}"):
            read_volume(tmp_path / "t.kspv")

    def test_bad_magic_and_version(self, tmp_path):
        write_volume(tmp_path / "v.kspv", Volume(np.zeros((1, 1, 4, 4), np.complex64)))
        raw = bytearray((tmp_path / "v.kspv").read_bytes())
        (tmp_path / "m.kspv").write_bytes(b"NOPE" + raw[4:])
        raw[4] = 99
        (tmp_path / "ver.kspv").write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            read_volume(tmp_path / "m.kspv")
        with pytest.raises(ValueError, match="version"):
            read_volume(tmp_path / "ver.kspv")

    def test_header_only_inspection(self, tmp_path):
        write_volume(tmp_path / "v.kspv", Volume(np.zeros((5, 3, 16, 12), np.complex64)))
        raw = (tmp_path / "v.kspv").read_bytes()
        # Keep only the header bytes: the payload is not needed to read the shape.
        header_size = read_header(tmp_path / "v.kspv").payload_offset
        (tmp_path / "h.kspv").write_bytes(raw[:header_size])
        header = read_header(tmp_path / "h.kspv")
        assert header.shape == (5, 3, 16, 12)
        assert header.payload_offset + header.payload_nbytes == len(raw)


class TestDataset:
    def test_generate_and_load(self, tmp_path):
        manifest = generate_dataset(tmp_path, seed=3, shape=(16, 16), n_coils=2, slices_per_volume=2)
        assert [v["split"] for v in manifest["volumes"]].count("train") == 4
        assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
        train = SliceDataset(tmp_path, "train")
        assert len(train) == 8
        kspace, reference, slice_id = train[0]
        assert kspace.shape == (2, 16, 16) and reference.shape == (16, 16) and ":" in slice_id

    def test_deterministic_files(self, tmp_path):
        generate_dataset(tmp_path / "a", seed=3, shape=(16, 16), n_coils=2, slices_per_volume=1)
        generate_dataset(tmp_path / "b", seed=3, shape=(16, 16), n_coils=2, slices_per_volume=1)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
