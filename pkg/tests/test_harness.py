import json

import numpy as np
import pytest

from orthoddc.harness import cli
from orthoddc.harness.experiments import ConfigError, ExperimentConfig, ExperimentReport

SMALL = {"d_x": 5, "N": [200], "reps": 2, "n_paths": 10, "oracle_obs": 2000, "oracle_paths": 50,
         "grid": {"lo": [0, 0], "hi": [10, 3], "n": [11, 7]}}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("harness")
    cfg = dict(SMALL, cache=str(root / "cache"), out=str(root / "out"))
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    return root, path


@pytest.mark.parametrize("bad", [{"mode": "bayes"}, {"tau": 1.5}, {"N": [5]}, {"folds": 1},
                                 {"rule": "fixed"}, {"unknown_key": 1}, {"grid": {"lo": [0]}}])
def test_bad_configs_exit_with_code_2(tmp_path, bad):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(dict(SMALL, **bad)))
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == cli.CONFIG_ERROR


def test_missing_config_and_panel_exit_with_code_2(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json")]) == cli.CONFIG_ERROR
    assert cli.main(["estimate", "--panel", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == cli.CONFIG_ERROR


def test_montecarlo_needs_replications(small_config):
    _, path = small_config
    assert cli.main(["montecarlo", "--config", str(path), "--reps", "1"]) == cli.CONFIG_ERROR


def test_simulate_is_byte_identical(small_config, tmp_path):
    _, path = small_config
    for d in ("a", "b"):
        assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / d)]) == cli.OK
    assert (tmp_path / "a" / "panel.csv").read_bytes() == (tmp_path / "b" / "panel.csv").read_bytes()


def test_estimate_on_saved_panel(small_config, tmp_path):
    _, path = small_config
    cli.main(["simulate", "--config", str(path), "--out", str(tmp_path)])
    assert cli.main(["estimate", "--config", str(path), "--panel", str(tmp_path / "panel.csv"),
                     "--out", str(tmp_path)]) == cli.OK
    for name in ("surface.csv", "region.csv", "subsample.json", "nuisances.json", "estimate_manifest.json"):
        assert (tmp_path / name).exists()


def test_study_is_reproducible_across_workers(small_config, tmp_path):
    root, path = small_config
    outs = []
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        code = cli.main(["montecarlo", "--config", str(path), "--experiment", "rate",
                         "--workers", str(w), "--out", str(out)])
        assert code in (cli.OK, cli.FAILED)
        outs.append((out / "records.jsonl").read_text())
    assert outs[0] == outs[1]
    rep, man = ExperimentReport.read(str(tmp_path / "w1"))
    assert man["config_hash"] == rep.cfg.digest()
    assert len(rep.records) == 2
    summary = json.loads((tmp_path / "w1" / "summary.json").read_text())
    assert "200" in json.dumps(summary)


def test_config_digest_is_stable():
    a = ExperimentConfig.from_dict(SMALL)
    b = ExperimentConfig.from_dict(dict(SMALL, workers=4, out="elsewhere"))
    assert a.digest() == b.digest()
    assert a.digest() != ExperimentConfig.from_dict(dict(SMALL, seed=1)).digest()
    assert a.reps_for(200) == 2
    assert ExperimentConfig.from_dict(dict(SMALL, reps_by_n={"200": 5})).reps_for(200) == 5
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(dict(SMALL, reps_by_n={"200": 0}))


def test_pipeline_modes(small_config):
    from orthoddc import dgp
    from orthoddc.harness.experiments import estimate
    base = ExperimentConfig.from_dict(dict(SMALL, N=[400]))
    panel = dgp.simulate_panel(base.model, base.truth, 400, 9)
    surf = {}
    for mode in ("naive", "orthogonal", "oracle"):
        cfg = ExperimentConfig.from_dict(dict(base.to_dict(), mode=mode))
        est = estimate(panel, cfg, 9)
        surf[mode] = est.surface.Q
        assert est.set_est.contains((5.0, 1.0))
        assert np.isclose(est.c_hat, np.log(400))
    assert not np.allclose(surf["naive"], surf["orthogonal"])
    assert not np.allclose(surf["oracle"], surf["orthogonal"])
