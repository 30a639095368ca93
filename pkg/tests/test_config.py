import json

import pytest

from promptad.config import RunConfig


class TestRunConfig:
    def test_defaults_match_reference_operating_point(self):
        cfg = RunConfig()
        assert cfg.image_size == 518
        assert cfg.patch_size == 14
        assert cfg.selected_layers == (6, 12, 18, 24)
        assert cfg.num_vision_layers == 24
        assert (cfg.alpha, cfg.sigma, cfg.n1, cfg.n2) == (0.8, 9.0, 500, 2500)
        assert cfg.learning_rate == 4e-5
        assert cfg.epochs == 15
        assert cfg.generic_term == "object"

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError) as err:
            RunConfig.from_dict({"iamge_size": 64})
        assert "iamge_size" in str(err.value)

    def test_scalar_vision_dims_expand_per_layer(self):
        cfg = RunConfig.from_dict({"vision_dims": 64})
        assert cfg.vision_dims == (64,) * 24

    def test_invalid_subconfig_caught_at_construction(self):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"n1": 2500, "n2": 500})
        with pytest.raises(ValueError):
            RunConfig.from_dict({"image_size": 100, "patch_size": 14})

    def test_override_applies_non_none_values_only(self):
        cfg = RunConfig().override(alpha=0.5, sigma=None)
        assert cfg.alpha == 0.5
        assert cfg.sigma == 9.0

    def test_snapshot_roundtrip(self, tmp_path):
        cfg = RunConfig.from_dict({"image_size": 64, "patch_size": 8, "alpha": 0.3})
        path = cfg.save_snapshot(tmp_path)
        again = RunConfig.from_file(path)
        assert again == cfg

    def test_file_errors_are_informative(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.from_file(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ValueError):
            RunConfig.from_file(bad)
        arr = tmp_path / "arr.json"
        arr.write_text(json.dumps([1, 2]))
        with pytest.raises(ValueError):
            RunConfig.from_file(arr)

    def test_subconfig_views_carry_values_through(self):
        cfg = RunConfig.from_dict(
            {"alpha": 0.25, "focal_gamma": 3.0, "learning_rate": 1e-3, "seed": 5}
        )
        assert cfg.scoring_config().alpha == 0.25
        assert cfg.loss_config().focal_gamma == 3.0
        assert cfg.train_config().learning_rate == 1e-3
        assert cfg.train_config().seed == 5

    def test_metric_pooling_validated(self):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"metric_pooling": "sideways"})
