import numpy as np
import pytest
from PIL import Image

from roadgnn.data import (DatasetSpec, RoadDataset, balance_weights, border_pyramid,
                          collate, extract_border, make_sample, synth_tiles,
                          write_synth_dataset)
from roadgnn.errors import ValidationError

from helpers import dilation_erosion_oracle


class TestExtractBorder:
    def test_empty_mask_has_empty_border(self):
        assert extract_border(np.zeros((8, 8), dtype=np.uint8)).sum() == 0

    def test_isolated_pixel_is_its_own_boundary(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[2, 2] = 1
        border = extract_border(mask)
        assert border[2, 2] == 1 and border.sum() == 1

    def test_filled_square_gives_perimeter_ring(self):
        # 5x5 square centered in 9x9; oracle-derived expected ring has 16 px
        mask = np.zeros((9, 9), dtype=np.uint8)
        mask[2:7, 2:7] = 1
        border = extract_border(mask)
        expected = dilation_erosion_oracle(mask)
        assert np.array_equal(border, expected)
        assert border.sum() == 16
        assert border[3:6, 3:6].sum() == 0  # interior stays clear

    def test_matches_oracle_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            mask = (rng.random((16, 16)) < 0.4).astype(np.uint8)
            assert np.array_equal(extract_border(mask), dilation_erosion_oracle(mask))

    def test_inverted_transitions_agree_on_interior(self):
        # transition pixels are symmetric under mask complement; restricted to
        # the mask they must reproduce the border exactly
        rng = np.random.default_rng(11)
        for _ in range(10):
            mask = (rng.random((16, 16)) < 0.5).astype(np.uint8)
            inverted_border = dilation_erosion_oracle(1 - mask)
            transitions = dilation_erosion_oracle(mask) | inverted_border
            assert np.array_equal(extract_border(mask), transitions & mask)

    def test_radius_two_widens_the_ring(self):
        mask = np.zeros((11, 11), dtype=np.uint8)
        mask[2:9, 2:9] = 1
        assert np.array_equal(extract_border(mask, radius=2),
                              dilation_erosion_oracle(mask, radius=2))

    def test_rejects_non_binary(self):
        with pytest.raises(ValidationError):
            extract_border(np.full((4, 4), 2, dtype=np.uint8))

    def test_rejects_bad_radius(self):
        with pytest.raises(ValidationError):
            extract_border(np.zeros((4, 4), dtype=np.uint8), radius=0)


class TestBorderPyramid:
    def test_zero_border_stays_zero(self):
        levels = border_pyramid(np.zeros((8, 8), dtype=np.uint8), [2, 4])
        assert [lvl.sum() for lvl in levels] == [0, 0]
        assert [lvl.shape for lvl in levels] == [(4, 4), (2, 2)]

    def test_single_pixel_survives_pooling(self):
        border = np.zeros((8, 8), dtype=np.uint8)
        border[0, 0] = 1
        level, = border_pyramid(border, [2])
        assert level[0, 0] == 1 and level.sum() == 1

    def test_horizontal_line_fills_pooled_row(self):
        # row 3 lies in the first 4x4 window row; every column is covered
        border = np.zeros((8, 8), dtype=np.uint8)
        border[3, :] = 1
        level, = border_pyramid(border, [4])
        assert np.array_equal(level, np.array([[1, 1], [0, 0]], dtype=np.uint8))

    def test_existence_preservation_exhaustive(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            border = (rng.random((8, 12)) < 0.1).astype(np.uint8)
            for stride in (2, 4):
                level, = border_pyramid(border, [stride])
                for i in range(level.shape[0]):
                    for j in range(level.shape[1]):
                        window = border[i * stride:(i + 1) * stride,
                                        j * stride:(j + 1) * stride]
                        assert level[i, j] == int(window.any())

    def test_rejects_non_dividing_stride(self):
        with pytest.raises(ValidationError):
            border_pyramid(np.zeros((8, 8), dtype=np.uint8), [3])


class TestBalanceWeights:
    def test_counted_fractions(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask.flat[:3] = 1
        assert balance_weights(mask) == (13 / 16, 3 / 16)

    def test_all_positive(self):
        assert balance_weights(np.ones((4, 4), dtype=np.uint8)) == (0.0, 1.0)

    def test_half_positive(self):
        mask = np.zeros((2, 4), dtype=np.uint8)
        mask[0] = 1
        assert balance_weights(mask) == (0.5, 0.5)

    def test_sums_to_one_when_both_classes_present(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mask = (rng.random((6, 6)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
            if 0 < mask.sum() < mask.size:
                pos, neg = balance_weights(mask)
                assert pos + neg == pytest.approx(1.0)

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            balance_weights(np.zeros((0, 0), dtype=np.uint8))


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthset")
    write_synth_dataset(root, count=5, size=96, seed=21, split="train")
    write_synth_dataset(root, count=3, size=96, seed=91, split="test")
    return root


def _spec(root, **kwargs):
    defaults = dict(image_dir=str(root / "images"), mask_dir=str(root / "masks"),
                    split="train", crop_size=64, seed=4)
    defaults.update(kwargs)
    return DatasetSpec(**defaults)


class TestRoadDataset:
    def test_pairs_and_loading(self, dataset_dir):
        dataset = RoadDataset(_spec(dataset_dir))
        assert len(dataset) == 5
        image, mask = dataset.load_pair(0)
        assert image.shape == (3, 96, 96) and mask.shape == (96, 96)
        assert image.dtype == np.float32 and set(np.unique(mask)) <= {0, 1}

    def test_basename_mismatch_lists_offenders(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.zeros((64, 64, 3), dtype=np.uint8)).save(
            tmp_path / "images" / "a.png")
        Image.fromarray(np.zeros((64, 64), dtype=np.uint8)).save(
            tmp_path / "masks" / "b.png")
        with pytest.raises(ValidationError, match="a.*b|b.*a"):
            RoadDataset(DatasetSpec(image_dir=str(tmp_path / "images"),
                                    mask_dir=str(tmp_path / "masks")))

    def test_unreadable_file_names_the_path(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        (tmp_path / "images" / "bad.png").write_bytes(b"not a png")
        Image.fromarray(np.zeros((64, 64), dtype=np.uint8)).save(
            tmp_path / "masks" / "bad.png")
        dataset = RoadDataset(DatasetSpec(image_dir=str(tmp_path / "images"),
                                          mask_dir=str(tmp_path / "masks")))
        with pytest.raises(OSError, match="bad.png"):
            dataset.load_pair(0)

    def test_crop_determinism(self, dataset_dir):
        a = RoadDataset(_spec(dataset_dir))
        b = RoadDataset(_spec(dataset_dir))
        for index in range(3):
            for epoch in (0, 2):
                s1 = a.sample_crop(index, epoch, (8, 16))
                s2 = b.sample_crop(index, epoch, (8, 16))
                assert np.array_equal(s1.image, s2.image)
                assert np.array_equal(s1.road_mask, s2.road_mask)
                for m1, m2 in zip(s1.border_masks, s2.border_masks):
                    assert np.array_equal(m1, m2)
                assert (s1.pos_weight, s1.neg_weight) == (s2.pos_weight, s2.neg_weight)

    def test_crop_origins_stay_in_valid_range(self, dataset_dir):
        dataset = RoadDataset(_spec(dataset_dir))
        image, _ = dataset.load_pair(1)
        max_origin = 96 - 64
        origins = set()
        for epoch in range(40):
            sample = dataset.sample_crop(1, epoch, (8,))
            row = sample.image[:, 0, :]
            found = None
            for top in range(max_origin + 1):
                for left in range(max_origin + 1):
                    if np.array_equal(row, image[:, top, left:left + 64]):
                        found = (top, left)
                        break
                if found:
                    break
            assert found is not None, "crop content not found at any valid origin"
            origins.add(found)
        assert len(origins) > 5  # the sampler actually moves around

    def test_crop_masks_follow_image(self, dataset_dir):
        dataset = RoadDataset(_spec(dataset_dir))
        sample = dataset.sample_crop(2, 0, (8, 16, 32))
        assert sample.image.shape == (3, 64, 64)
        assert sample.road_mask.shape == (64, 64)
        assert [m.shape for m in sample.border_masks] == [(8, 8), (4, 4), (2, 2)]
        # borders recomputed on the crop: every border pixel touches a transition
        assert np.array_equal(sample.border_masks[0],
                              border_pyramid(extract_border(sample.road_mask), [8])[0])

    def test_crop_too_large_is_rejected(self, dataset_dir):
        dataset = RoadDataset(_spec(dataset_dir, crop_size=128))
        with pytest.raises(ValidationError):
            dataset.sample_crop(0, 0, (8,))

    def test_road_free_crop_degrades_gracefully(self):
        # all-negative target: the positive class is absent so its opposing
        # weight is 0 (pos_weight = neg fraction = 1, neg_weight = 0)
        sample = make_sample(np.zeros((3, 32, 32), dtype=np.float32),
                             np.zeros((32, 32), dtype=np.uint8), (8,))
        assert sample.road_mask.sum() == 0
        assert sample.neg_weight == 0.0 and sample.pos_weight == 1.0


class TestSynthTiles:
    def test_count_zero_gives_empty_list(self):
        assert synth_tiles(0, 64, seed=1) == []

    def test_seed_determinism(self):
        a = synth_tiles(3, 64, seed=9)
        b = synth_tiles(3, 64, seed=9)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.image, s2.image)
            assert np.array_equal(s1.road_mask, s2.road_mask)

    def test_density_stays_in_band_over_100_seeds(self):
        # frozen generator parameters keep positives in (0, 0.5)
        for seed in range(100):
            sample, = synth_tiles(1, 64, seed=seed)
            fraction = sample.road_mask.mean()
            assert 0.0 < fraction < 0.5, f"seed {seed}: fraction {fraction}"

    def test_rejects_small_size(self):
        with pytest.raises(ValidationError):
            synth_tiles(1, 32, seed=0)

    def test_written_dataset_round_trips(self, tmp_path):
        write_synth_dataset(tmp_path, count=2, size=64, seed=5)
        dataset = RoadDataset(DatasetSpec(image_dir=str(tmp_path / "images"),
                                          mask_dir=str(tmp_path / "masks"),
                                          crop_size=64))
        assert len(dataset) == 2
        image, mask = dataset.load_pair(0)
        reference, = synth_tiles(1, 64, seed=5)
        assert np.array_equal(mask, reference.road_mask)  # masks survive PNG exactly
        assert np.abs(image - reference.image).max() <= 1 / 255 + 1e-6


class TestCollate:
    def test_stacks_and_checks_strides(self):
        samples = synth_tiles(2, 64, seed=2, border_strides=(8, 16))
        batch = collate(samples)
        assert batch.images.shape == (2, 3, 64, 64)
        assert batch.road_mask.shape == (2, 64, 64)
        assert sorted(batch.border_masks) == [8, 16]
        assert batch.pos_weight.shape == (2,)

    def test_rejects_mixed_strides(self):
        a = synth_tiles(1, 64, seed=2, border_strides=(8,))
        b = synth_tiles(1, 64, seed=2, border_strides=(16,))
        with pytest.raises(ValidationError):
            collate(a + b)

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            collate([])
