import pytest

from resdistill.config import (ConfigError, ExperimentConfig, apply_overrides,
                               config_from_dict, load_config,
                               write_run_manifest)


def test_defaults_validate():
    config = ExperimentConfig()
    assert config.validate() is config
    assert config.alpha == 0.5 and config.beta == 2.0 and config.rho == 4.0
    assert config.critic.tau == 0.1 and config.critic.n_negatives == 512
    assert config.bank.capacity == 4096
    assert config.optimizer.milestones == [21, 28, 32]


def test_validation_collects_all_problems():
    config = ExperimentConfig(alpha=-1.0, rho=0.0, cls_mode="nope")
    config.critic.tau = -0.5
    with pytest.raises(ConfigError) as err:
        config.validate()
    joined = "\n".join(err.value.problems)
    assert len(err.value.problems) == 4
    for needle in ("alpha", "rho", "cls_mode", "critic.tau"):
        assert needle in joined


def test_n_negatives_cannot_exceed_bank_capacity():
    config = ExperimentConfig()
    config.critic.n_negatives = 5000
    with pytest.raises(ConfigError, match="exceeds bank.capacity"):
        config.validate()


def test_unknown_fields_rejected_with_paths():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"alpha": 0.5, "bogus": 1, "critic": {"tau": 0.1, "nope": 2}})
    assert any("bogus" in p for p in err.value.problems)
    assert any("critic.nope" in p for p in err.value.problems)


def test_config_hash_stable_and_sensitive():
    a = ExperimentConfig()
    b = ExperimentConfig()
    assert a.config_hash() == b.config_hash()
    b.alpha = 0.6
    assert a.config_hash() != b.config_hash()


def test_roundtrip_through_dict():
    config = ExperimentConfig(alpha=0.1, seed=9)
    config.critic.n_negatives = 64
    rebuilt = config_from_dict(config.to_dict())
    assert rebuilt.config_hash() == config.config_hash()


def test_load_config_yaml(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("alpha: 0.25\nseed: 11\noptimizer:\n  lr: 0.01\n")
    config = load_config(path)
    assert config.alpha == 0.25
    assert config.seed == 11
    assert config.optimizer.lr == 0.01
    assert config.beta == 2.0  # untouched defaults survive


def test_load_config_rejects_non_mapping(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="top level must be a mapping"):
        load_config(path)


def test_apply_overrides_nested_and_typed():
    config = ExperimentConfig()
    out = apply_overrides(config, ["alpha=0.9", "optimizer.lr=0.001",
                                   "critic.n_negatives=32", "epochs=3"])
    assert out.alpha == 0.9
    assert out.optimizer.lr == 0.001
    assert out.critic.n_negatives == 32
    assert out.epochs == 3
    assert config.alpha == 0.5  # original untouched


def test_apply_overrides_unknown_key():
    with pytest.raises(ConfigError, match="unknown field"):
        apply_overrides(ExperimentConfig(), ["nope=1"])
    with pytest.raises(ConfigError, match="expected key=value"):
        apply_overrides(ExperimentConfig(), ["alpha"])


def test_run_manifest_lists_every_setting(tmp_path):
    config = ExperimentConfig()
    path = tmp_path / "manifest.txt"
    write_run_manifest(config, path, extra={"mode": "distill"})
    text = path.read_text()
    for key in ("config_hash:", "alpha: 0.5", "beta: 2.0", "rho: 4.0",
                "critic.tau: 0.1", "critic.n_negatives: 512",
                "bank.capacity: 4096", "optimizer.lr: 0.05", "seed: 5",
                "mode: distill", "platform:", "torch_version:"):
        assert key in text
    assert f"config_hash: {config.config_hash()}" in text
