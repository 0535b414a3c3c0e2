import concurrent.futures
import json
import math

import pytest

from flcoex import scenario
from flcoex.scenario import (
    ScenarioError,
    ScenarioFormatError,
    freespace_gain_sq,
    generate,
    load,
    save,
)


class TestGenerate:
    def test_default_shape(self):
        sc = generate(1)
        assert sc.num_fl == 10
        assert sc.num_hb == 20
        assert sc.radio.num_rbs == 10
        assert sc.hb_threshold == pytest.approx(600e3)

    def test_freespace_reference_value(self):
        # independent evaluation of (c/(4*pi*d*f))^2 at 50 m, 3.5 GHz
        expected = (299792458.0 / (4 * math.pi * 50.0 * 3.5e9)) ** 2
        assert expected == pytest.approx(1.859e-8, rel=1e-3)
        assert freespace_gain_sq(50.0, 3.5e9) == pytest.approx(expected, rel=1e-12)
        # about -77.3 dB
        assert 10 * math.log10(expected) == pytest.approx(-77.3, abs=0.05)

    def test_singleton_override(self):
        sc = generate(3, {"num_fl": 1, "num_hb": 0})
        assert sc.num_fl == 1
        assert sc.num_hb == 0

    def test_channel_ordering_over_seeds(self):
        for seed in range(20):
            gains = generate(seed).fl_gains()
            assert all(gains[i] >= gains[i + 1] for i in range(len(gains) - 1))

    def test_sample_conservation(self):
        for seed in range(10):
            sc = generate(seed)
            assert sum(ue.workload.local_samples for ue in sc.fl_ues) == 60_000
            assert all(ue.workload.local_samples >= 1 for ue in sc.fl_ues)

    def test_determinism_across_threads(self):
        ref = generate(5)
        with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(generate, [5] * 8))
        for sc in results:
            assert sc == ref

    def test_homogeneous_override(self):
        sc = generate(2, {"homogeneous_fl": True, "num_fl": 5})
        gains = sc.fl_gains()
        assert all(g == gains[0] for g in gains)
        assert sum(ue.workload.local_samples for ue in sc.fl_ues) == 60_000

    def test_bad_overrides_rejected(self):
        with pytest.raises(ScenarioError):
            generate(1, {"cell_radius": -1.0})
        with pytest.raises(ScenarioError):
            generate(1, {"num_rbs": 0})
        with pytest.raises(ScenarioError):
            generate(1, {"num_fl": 0})
        with pytest.raises(ScenarioError):
            generate(1, {"no_such_key": 1})


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        sc = generate(1)
        path = tmp_path / "scenario.json"
        save(sc, path)
        again = load(path)
        assert again == sc

    def test_missing_field_names_it(self, tmp_path):
        sc = generate(1)
        doc = scenario.scenario_to_dict(sc)
        del doc["hb_threshold"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ScenarioFormatError, match="hb_threshold"):
            load(path)

    def test_handwritten_two_ue_file(self, tmp_path):
        doc = {
            "radio": {
                "num_rbs": 4, "subcarrier_bw": 60e3, "noise_psd": 4e-21,
                "bs_power_per_rb": 1.0, "ue_max_power": 0.2,
                "carrier_freq": 3.5e9, "tti_len": 1e-3,
            },
            "fl_ues": [
                {
                    "id": 0, "position": [10.0, 0.0], "gain_sq": 1e-7,
                    "workload": {
                        "model_bits": 1e6, "epochs": 2, "cycles_per_sample": 1000,
                        "local_samples": 50, "f_max": 1e9, "kappa": 1e-28,
                        "energy_weight": 0.05,
                    },
                },
                {
                    "id": 1, "position": [30.0, 0.0], "gain_sq": 1e-8,
                    "workload": {
                        "model_bits": 1e6, "epochs": 2, "cycles_per_sample": 1000,
                        "local_samples": 70, "f_max": 1e9, "kappa": 1e-28,
                        "energy_weight": 0.05,
                    },
                },
            ],
            "hb_ues": [],
            "hb_threshold": 1e5,
        }
        path = tmp_path / "two.json"
        path.write_text(json.dumps(doc))
        sc = load(path)
        assert sc.num_fl == 2
        assert sc.warnings == ()

    def test_unsorted_file_repaired_with_warning(self, tmp_path):
        sc = generate(1)
        doc = scenario.scenario_to_dict(sc)
        doc["fl_ues"] = list(reversed(doc["fl_ues"]))
        path = tmp_path / "unsorted.json"
        path.write_text(json.dumps(doc))
        again = load(path)
        assert again.warnings
        gains = again.fl_gains()
        assert all(gains[i] >= gains[i + 1] for i in range(len(gains) - 1))
