import json
import math

import numpy as np
import pytest

from rblkit import (
    AnchorSet,
    InvalidParameterError,
    NoiseSpec,
    ObservationSet,
    RssiModelParams,
    SingularityError,
    UndefinedBearingError,
    gen_doa,
    gen_range,
    gen_rssi,
)
from rblkit.measurements import (
    load_observations,
    observations_to_csv,
    observations_to_dict,
    save_observations,
)

ORIGIN_ANCHOR = AnchorSet(np.array([[0.0], [0.0]]))
NO_NOISE = NoiseSpec(sigma=0.0)


class TestNoiseSpec:
    def test_validation(self):
        with pytest.raises(InvalidParameterError):
            NoiseSpec(sigma=-1.0)
        with pytest.raises(InvalidParameterError):
            NoiseSpec(nlos_prob=1.5)
        with pytest.raises(InvalidParameterError):
            NoiseSpec(nlos_bias=-0.1)
        with pytest.raises(InvalidParameterError):
            NoiseSpec(kind="laplace")

    def test_anchors_must_be_distinct(self):
        with pytest.raises(InvalidParameterError):
            AnchorSet(np.array([[1.0, 1.0], [2.0, 2.0]]))


class TestGenDoa:
    def test_on_axis(self):
        body = np.array([[1.0], [0.0]])
        obs = gen_doa(body, ORIGIN_ANCHOR, NO_NOISE, seed=0)
        assert obs.values[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_straight_up(self):
        body = np.array([[0.0], [1.0]])
        obs = gen_doa(body, ORIGIN_ANCHOR, NO_NOISE, seed=0)
        assert obs.values[0, 0] == pytest.approx(math.pi / 2)

    def test_diagonal(self):
        body = np.array([[1.0], [1.0]])
        obs = gen_doa(body, ORIGIN_ANCHOR, NO_NOISE, seed=0)
        assert obs.values[0, 0] == pytest.approx(math.atan2(1.0, 1.0))
        assert obs.values[0, 0] == pytest.approx(math.pi / 4)

    def test_coincident_anchor_identifies_pair(self):
        anchors = AnchorSet(np.array([[0.0, 5.0], [0.0, 5.0]]))
        body = np.array([[1.0, 5.0], [1.0, 5.0]])
        with pytest.raises(UndefinedBearingError) as err:
            gen_doa(body, anchors, NO_NOISE, seed=0)
        assert (err.value.anchor_index, err.value.node_index) == (1, 1)

    def test_always_wrapped(self):
        rng = np.random.default_rng(1)
        body = rng.uniform(-5, 5, size=(2, 6))
        anchors = AnchorSet(rng.uniform(6, 12, size=(2, 4)))
        obs = gen_doa(body, anchors, NoiseSpec(sigma=50.0), seed=3)
        assert np.all(obs.values > -math.pi)
        assert np.all(obs.values <= math.pi)

    def test_3d_rejected(self):
        anchors = AnchorSet(np.zeros((3, 1)) + np.arange(3)[:, None])
        with pytest.raises(Exception):
            gen_doa(np.ones((3, 2)), anchors, NO_NOISE, seed=0)


class TestGenRange:
    def test_three_four_five(self):
        obs = gen_range(np.array([[3.0], [4.0]]), ORIGIN_ANCHOR, NO_NOISE, seed=0)
        assert obs.values[0, 0] == pytest.approx(5.0)

    def test_zero_distance(self):
        obs = gen_range(np.array([[0.0], [0.0]]), ORIGIN_ANCHOR, NO_NOISE, seed=0)
        assert obs.values[0, 0] == 0.0

    def test_seeded_determinism_bit_exact(self):
        rng = np.random.default_rng(2)
        body = rng.uniform(-5, 5, size=(2, 2))
        anchors = AnchorSet(rng.uniform(-10, 10, size=(2, 2)))
        noise = NoiseSpec(sigma=0.3, nlos_prob=0.2, nlos_bias=1.0)
        a = gen_range(body, anchors, noise, seed=12345)
        b = gen_range(body, anchors, noise, seed=12345)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.nlos, b.nlos)
        assert np.array_equal(a.clamped, b.clamped)
        c = gen_range(body, anchors, noise, seed=12346)
        assert not np.array_equal(a.values, c.values)

    def test_negative_ranges_clamped_and_flagged(self):
        # Node on the anchor: the Gaussian term alone decides the sign.
        noise = NoiseSpec(sigma=1.0)
        clamped_seen = unclamped_seen = False
        for seed in range(40):
            obs = gen_range(np.array([[0.0], [0.0]]), ORIGIN_ANCHOR, noise, seed=seed)
            if obs.clamped[0, 0]:
                clamped_seen = True
                assert obs.values[0, 0] == 0.0
            else:
                unclamped_seen = True
                assert obs.values[0, 0] >= 0.0
        assert clamped_seen and unclamped_seen

    def test_nlos_bias_added(self):
        noise = NoiseSpec(sigma=0.0, nlos_prob=1.0, nlos_bias=2.5)
        obs = gen_range(np.array([[3.0], [4.0]]), ORIGIN_ANCHOR, noise, seed=0)
        assert obs.values[0, 0] == pytest.approx(7.5)
        assert obs.nlos[0, 0]


class TestGenRssi:
    MODEL = RssiModelParams(p0=-40.0, d0=1.0, eta=2.0)

    def test_reference_distance(self):
        obs = gen_rssi(np.array([[1.0], [0.0]]), ORIGIN_ANCHOR, self.MODEL, NO_NOISE, seed=0)
        assert obs.values[0, 0] == pytest.approx(-40.0)

    def test_ten_times_reference(self):
        obs = gen_rssi(np.array([[10.0], [0.0]]), ORIGIN_ANCHOR, self.MODEL, NO_NOISE, seed=0)
        assert obs.values[0, 0] == pytest.approx(-60.0)

    def test_noiseless_identical_across_seeds(self):
        body = np.array([[2.0, 3.0], [1.0, -1.0]])
        a = gen_rssi(body, ORIGIN_ANCHOR, self.MODEL, NO_NOISE, seed=1)
        b = gen_rssi(body, ORIGIN_ANCHOR, self.MODEL, NO_NOISE, seed=999)
        assert np.array_equal(a.values, b.values)

    def test_zero_distance_singular(self):
        with pytest.raises(SingularityError):
            gen_rssi(np.array([[0.0], [0.0]]), ORIGIN_ANCHOR, self.MODEL, NO_NOISE, seed=0)

    def test_nlos_attenuates(self):
        noise = NoiseSpec(sigma=0.0, nlos_prob=1.0, nlos_bias=6.0)
        obs = gen_rssi(np.array([[1.0], [0.0]]), ORIGIN_ANCHOR, self.MODEL, noise, seed=0)
        assert obs.values[0, 0] == pytest.approx(-46.0)


class TestNoiseStatistics:
    def test_zero_sigma_matches_forward_model(self):
        rng = np.random.default_rng(4)
        body = rng.uniform(-5, 5, size=(2, 4))
        anchors = AnchorSet(rng.uniform(6, 14, size=(2, 3)))
        truth_range = np.array(
            [
                [np.linalg.norm(body[:, k] - anchors.positions[:, m]) for k in range(4)]
                for m in range(3)
            ]
        )
        obs = gen_range(body, anchors, NO_NOISE, seed=5)
        assert np.allclose(obs.values, truth_range, atol=1e-12)

        obs_doa = gen_doa(body, anchors, NO_NOISE, seed=5)
        truth_doa = np.array(
            [
                [
                    math.atan2(*(body[:, k] - anchors.positions[:, m])[::-1])
                    for k in range(4)
                ]
                for m in range(3)
            ]
        )
        assert np.allclose(obs_doa.values, truth_doa, atol=1e-12)

    def test_empirical_noise_moments(self):
        # 10^5 samples across seeds: std within 3% of sigma, mean within
        # 4 sigma / sqrt(n).
        sigma = 0.5
        noise = NoiseSpec(sigma=sigma)
        body = np.array([[30.0] * 10, np.linspace(0.0, 9.0, 10)])
        anchors = AnchorSet(np.stack([np.zeros(10), np.linspace(0.0, 9.0, 10)]))
        truth = np.array(
            [
                [np.linalg.norm(body[:, k] - anchors.positions[:, m]) for k in range(10)]
                for m in range(10)
            ]
        )
        deviations = np.empty((1000, 10, 10))
        for i in range(1000):
            obs = gen_range(body, anchors, noise, seed=i)
            deviations[i] = obs.values - truth
        flat = deviations.reshape(-1)
        assert flat.size == 100_000
        assert abs(flat.std() - sigma) < 0.03 * sigma
        assert abs(flat.mean()) < 4 * sigma / math.sqrt(flat.size)

    def test_per_entry_streams_independent_of_order(self):
        # Entry (m, k) depends only on (seed, m, k): a body with fewer
        # nodes reproduces the shared entries exactly.
        rng = np.random.default_rng(6)
        body = rng.uniform(-5, 5, size=(2, 4))
        anchors = AnchorSet(rng.uniform(6, 14, size=(2, 3)))
        noise = NoiseSpec(sigma=0.2)
        full = gen_range(body, anchors, noise, seed=77)
        partial = gen_range(body[:, :2], anchors, noise, seed=77)
        assert np.array_equal(full.values[:, :2], partial.values)


class TestObservationSetType:
    def test_negative_range_rejected(self):
        with pytest.raises(InvalidParameterError):
            ObservationSet(
                modality="range",
                values=np.array([[-1.0]]),
                noise=NO_NOISE,
                rng_seed=0,
            )

    def test_doa_range_check(self):
        with pytest.raises(InvalidParameterError):
            ObservationSet(
                modality="doa",
                values=np.array([[4.0]]),
                noise=NO_NOISE,
                rng_seed=0,
            )

    def test_values_readonly(self):
        obs = gen_range(np.array([[3.0], [4.0]]), ORIGIN_ANCHOR, NO_NOISE, seed=0)
        with pytest.raises(ValueError):
            obs.values[0, 0] = 1.0


class TestSerialization:
    def test_json_contract_keys(self):
        body = np.array([[3.0, 1.0], [4.0, 1.0]])
        anchors = AnchorSet(np.array([[0.0, 1.0], [0.0, -1.0]]))
        obs = gen_range(body, anchors, NoiseSpec(sigma=0.1), seed=9)
        doc = observations_to_dict(obs, anchors)
        assert set(doc) == {"modality", "anchors", "values", "sigma", "seed"}
        assert doc["modality"] == "range"
        assert doc["sigma"] == 0.1
        assert doc["seed"] == 9
        assert len(doc["anchors"]) == 2  # row per anchor
        assert len(doc["values"]) == 2  # row per anchor

    def test_json_roundtrip(self, tmp_path):
        body = np.array([[3.0, 1.0], [4.0, 1.0]])
        anchors = AnchorSet(np.array([[0.0, 1.0], [0.0, -1.0]]))
        obs = gen_range(body, anchors, NoiseSpec(sigma=0.1), seed=9)
        path = tmp_path / "obs.json"
        save_observations(obs, anchors, path)
        loaded_obs, loaded_anchors = load_observations(path)
        assert np.allclose(loaded_obs.values, obs.values)
        assert np.allclose(loaded_anchors.positions, anchors.positions)
        assert loaded_obs.rng_seed == obs.rng_seed
        assert json.loads(path.read_text())["modality"] == "range"

    def test_csv_export(self, tmp_path):
        body = np.array([[3.0, 1.0], [4.0, 1.0]])
        anchors = AnchorSet(np.array([[0.0, 1.0], [0.0, -1.0]]))
        obs = gen_range(body, anchors, NoiseSpec(sigma=0.0, nlos_prob=1.0, nlos_bias=1.0), seed=9)
        path = tmp_path / "obs.csv"
        observations_to_csv(obs, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "anchor_id,node_id,value,is_nlos"
        assert len(lines) == 1 + 4
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == "0"
        assert first[3] == "1"
