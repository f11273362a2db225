"""Configuration parsing, validation, and the output-header hash."""

import pytest

from gridcox.config import (
    ConfigError,
    RunConfig,
    canonical_text,
    config_hash,
    load_config,
    output_header,
)


def write_cfg(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestDefaults:
    def test_no_file_gives_documented_defaults(self):
        cfg = load_config(None)
        assert cfg.model_id == "M0"
        assert cfg.pixel_area == 225.0
        assert cfg.n_folds == 10
        assert cfg.n_samples == 5000
        assert cfg.seed == 0
        assert cfg.priors.default_u == 1.0
        assert cfg.priors.default_alpha == 0.01
        assert cfg.priors.lse_u == 5.0
        assert cfg.priors.svr_u == 0.1
        assert cfg.priors.intercept_mean == -2.0
        assert cfg.priors.beta_mean == 1.0
        assert cfg.priors.beta_precision == 10.0
        assert cfg.inference.grid_step == 0.75
        assert cfg.inference.log_density_drop == 5.0

    def test_empty_file_equals_defaults(self, tmp_path):
        p = write_cfg(tmp_path, "")
        assert config_hash(load_config(p)) == config_hash(load_config(None))

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.ini")


class TestParsing:
    def test_sections_land_on_fields(self, tmp_path):
        p = write_cfg(tmp_path, """
[data]
pixels = px.csv
adjacency = adj.csv
pixel_area = 100.0

[model]
id = M3
svr_sum_to_zero = true

[priors]
lse_u = 2.5
beta_precision = 4.0

[inference]
grid_step = 0.5
max_newton_iter = 80

[cv]
n_folds = 5
n_samples = 800

[output]
directory = out
plots = false
""")
        cfg = load_config(p)
        assert cfg.pixels_path == "px.csv"
        assert cfg.adjacency_path == "adj.csv"
        assert cfg.pixel_area == 100.0
        assert cfg.model_id == "M3"
        assert cfg.priors.svr_sum_to_zero is True
        assert cfg.priors.lse_u == 2.5
        assert cfg.priors.beta_precision == 4.0
        assert cfg.inference.grid_step == 0.5
        assert cfg.inference.max_newton_iter == 80
        assert cfg.n_folds == 5
        assert cfg.n_samples == 800
        assert cfg.out_dir == "out"
        assert cfg.plots is False

    def test_component_pc_override(self, tmp_path):
        p = write_cfg(tmp_path, "[priors]\npc_aspect = 0.5, 0.05\n")
        cfg = load_config(p)
        assert cfg.priors.component_pc == {"aspect": (0.5, 0.05)}

    def test_component_pc_needs_pair(self, tmp_path):
        p = write_cfg(tmp_path, "[priors]\npc_aspect = 0.5\n")
        with pytest.raises(ConfigError, match="needs 'u,alpha'"):
            load_config(p)

    def test_simulate_truth_keys(self, tmp_path):
        p = write_cfg(tmp_path, """
[simulate]
nx = 12
ny = 9
n_su = 6
coef_intercept = -1.5
coef_cont_1 = 0.4
tau_aspect = 4.0
beta = 0.5
categorical_levels = 3, 2
""")
        cfg = load_config(p)
        assert cfg.sim_nx == 12 and cfg.sim_ny == 9 and cfg.sim_n_su == 6
        assert cfg.sim_fixed_effects == {"intercept": -1.5, "cont_1": 0.4}
        assert cfg.sim_hyperparameters == {"tau_aspect": 4.0, "beta": 0.5}
        assert cfg.sim_categorical_levels == (3, 2)

    def test_unknown_section_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "[folds]\nn = 3\n")
        with pytest.raises(ConfigError, match=r"unknown config section \[folds\]"):
            load_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "[cv]\nfolds = 3\n")
        with pytest.raises(ConfigError, match="unknown config key 'folds'"):
            load_config(p)

    def test_bad_value_rejected(self, tmp_path):
        p = write_cfg(tmp_path, "[cv]\nn_folds = soon\n")
        with pytest.raises(ConfigError, match="bad value 'soon'"):
            load_config(p)
        p2 = write_cfg(tmp_path, "[output]\nplots = maybe\n", name="b.ini")
        with pytest.raises(ConfigError, match="bad value"):
            load_config(p2)


class TestOverrides:
    def test_cli_overrides_beat_file(self, tmp_path):
        p = write_cfg(tmp_path, "[model]\nid = M2\n")
        cfg = load_config(p, model_id="M4", seed=17, out_dir="elsewhere",
                          threads=2)
        assert cfg.model_id == "M4"
        assert cfg.seed == 17
        assert cfg.out_dir == "elsewhere"
        assert cfg.inference.threads == 2

    def test_none_overrides_ignored(self, tmp_path):
        p = write_cfg(tmp_path, "[model]\nid = M2\n")
        cfg = load_config(p, model_id=None, seed=None)
        assert cfg.model_id == "M2"
        assert cfg.seed == 0

    def test_thread_count_validated(self):
        with pytest.raises(ConfigError, match="at least 1"):
            load_config(None, threads=0)


class TestValidation:
    @pytest.mark.parametrize("text,msg", [
        ("[data]\npixel_area = -3\n", "pixel area"),
        ("[cv]\nn_folds = 1\n", "two folds"),
        ("[cv]\nn_samples = 0\n", "one posterior sample"),
        ("[inference]\ngrid_step = 0\n", "grid step"),
        ("[inference]\nnewton_tol = -1e-8\n", "Newton tolerance"),
    ])
    def test_out_of_range_rejected(self, tmp_path, text, msg):
        p = write_cfg(tmp_path, text)
        with pytest.raises(ConfigError, match=msg):
            load_config(p)


class TestHash:
    def test_hash_is_stable_and_sensitive(self, tmp_path):
        a = load_config(None)
        b = load_config(None)
        assert config_hash(a) == config_hash(b)
        c = load_config(None, seed=1)
        assert config_hash(a) != config_hash(c)
        p = write_cfg(tmp_path, "[priors]\nlse_u = 2.0\n")
        assert config_hash(load_config(p)) != config_hash(a)

    def test_presentation_keys_not_hashed(self):
        a = load_config(None)
        b = load_config(None, out_dir="/tmp/somewhere/else", threads=4)
        assert config_hash(a) == config_hash(b)
        c = RunConfig(plots=False)
        assert config_hash(c) == config_hash(a)

    def test_canonical_text_sorted_and_flat(self):
        text = canonical_text(load_config(None))
        lines = text.split("\n")
        assert lines == sorted(lines)
        assert "model_id='M0'" in lines
        assert "priors.lse_u=5.0" in lines
        assert not any(line.startswith("out_dir") for line in lines)
        assert not any("threads" in line for line in lines)

    def test_output_header_format(self):
        cfg = load_config(None, seed=42)
        h = output_header(cfg)
        assert h == f"# config_hash={config_hash(cfg)} seed=42"
        assert len(config_hash(cfg)) == 64
