from pathlib import Path

import numpy as np
import pytest

from fedmcc.cli import main
from fedmcc.data import load_csv, make_blobs, save_csv, stratified_split
from fedmcc.errors import ParseError, StageError, ValidationError
from fedmcc.experiment import ExperimentConfig, RunRecord, load_config, parse_config, run_experiment
from fedmcc.metrics import clustering_accuracy
from fedmcc.model import MccModel

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = dict(k=3, n_per_class=100, test_per_class=50, hidden=32, d1=8, n=50, lr=3e-3,
             grad_chunk=25, eval_every=1000)


# ---------------------------------------------------------------- config


def test_minimal_config_fills_defaults():
    cfg = parse_config("mode = cc\n")
    assert cfg.mode == "cc"
    assert cfg == ExperimentConfig(mode="cc")


def test_negative_temperature_rejected():
    with pytest.raises(ValidationError, match="tau_I must be > 0") as info:
        parse_config("tau_I = -1")
    assert info.value.field == "tau_I"


def test_reference_defaults_file():
    cfg = load_config(CONFIGS / "reference_defaults.cfg")
    assert (cfg.n, cfg.tau_I, cfg.tau_C, cfg.m) == (128, 0.5, 1.0, 0.99)
    assert (cfg.lr, cfg.d1, cfg.E, cfg.R, cfg.optimizer) == (0.0003, 128, 5, 100, "adam")


def test_all_shipped_configs_load():
    for path in CONFIGS.glob("*.cfg"):
        load_config(path)


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError) as info:
        parse_config("# comment\nseed = 1\nthis line is wrong\n")
    assert info.value.line == 3
    with pytest.raises(ParseError) as info:
        parse_config("seed = one")
    assert info.value.line == 1
    with pytest.raises(ParseError):
        parse_config("seed = 1\nseed = 2")


def test_unknown_key_names_field():
    with pytest.raises(ValidationError) as info:
        parse_config("batch_size = 4")
    assert info.value.field == "batch_size"


def test_overrides_and_roundtrip():
    cfg = parse_config("seed = 3  # inline comment\nrecord_timing = true", seed=9, output_dir=None)
    assert cfg.seed == 9 and cfg.record_timing is True
    assert parse_config(cfg.to_text()) == cfg


def test_missing_file_path_rejected(tmp_path):
    with pytest.raises(ValidationError) as info:
        parse_config(f"dataset = file\npath = {tmp_path / 'nope.csv'}")
    assert info.value.field == "path"


# ---------------------------------------------------------------- data


def test_blobs_far_apart_nearest_mean():
    rng = np.random.default_rng(0)
    data = make_blobs(2, 50, 5, 100.0, rng)
    means = np.stack([data.x[data.labels == c].mean(axis=0) for c in range(2)])
    pred = np.argmin(((data.x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(pred, data.labels)


def test_blob_means_are_sep_apart():
    from fedmcc.data import blob_means
    for k, dim in ((3, 2), (4, 5), (5, 2)):
        m = blob_means(k, dim, 6.0, np.random.default_rng(1))
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        assert d[~np.eye(k, dtype=bool)].min() == pytest.approx(6.0)


def test_blobs_deterministic():
    a = make_blobs(3, 20, 2, 6.0, np.random.default_rng(5))
    b = make_blobs(3, 20, 2, 6.0, np.random.default_rng(5))
    assert a.x.tobytes() == b.x.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_blobs_kmeans_baseline():
    cluster = pytest.importorskip("sklearn.cluster")
    data = make_blobs(3, 200, 2, 6.0, np.random.default_rng(0))
    pred = cluster.KMeans(3, n_init=10, random_state=0).fit_predict(data.x)
    # pinned from the first verified run: 0.995
    assert clustering_accuracy(pred, data.labels) >= 0.95


def test_csv_roundtrip_and_split(tmp_path):
    data = make_blobs(3, 10, 2, 6.0, np.random.default_rng(0))
    save_csv(tmp_path / "d.csv", data)
    back = load_csv(tmp_path / "d.csv")
    assert back.x.tobytes() == data.x.tobytes()
    assert np.array_equal(back.labels, data.labels)
    train, test = stratified_split(data, 3, np.random.default_rng(0))
    assert np.bincount(test.labels).tolist() == [3, 3, 3]
    assert len(train) == 21


def test_csv_bad_value(tmp_path):
    (tmp_path / "bad.csv").write_text("x0,label\n1.0,0\nfoo,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(tmp_path / "bad.csv")
    assert info.value.line == 3


# ---------------------------------------------------------------- runs


def test_record_csv_format():
    rec = RunRecord()
    rec.append(round=0, client_or_global="global", ACC=0.5)
    rec.append(round=1, client_or_global="client0", loss_instance=0.1)
    text = rec.to_csv()
    assert text.splitlines()[0] == "round,client_or_global,loss_instance,loss_cluster,ACC,NMI,ARI,wall_ms"
    assert text.endswith("\n") and "\r" not in text
    assert rec.last_eval()["ACC"] == 0.5
    with pytest.raises(ValueError):
        rec.append(bogus=1)


def test_untrained_structureless_is_chance(tmp_path):
    cfg = ExperimentConfig(mode="fedmcc", R=0, R_cluster=0, sep=1e-3, **SMALL)
    res = run_experiment(cfg, tmp_path)
    assert len(res.record) == 1 and res.record.rows[0]["round"] == 0
    assert abs(res.final["ACC"] - 1 / 3) < 0.1


def test_artifacts_written(tmp_path):
    cfg = ExperimentConfig(mode="mcc", epochs=2, **{**SMALL, "eval_every": 1})
    res = run_experiment(cfg, tmp_path)
    for name in ("metrics.csv", "model.ckpt", "config.cfg", "provenance.txt"):
        assert (tmp_path / name).is_file()
    assert parse_config((tmp_path / "config.cfg").read_text()) == cfg
    prov = (tmp_path / "provenance.txt").read_text()
    assert "seed = 0" in prov and "version = v" in prov
    model = MccModel.from_bytes((tmp_path / "model.ckpt").read_bytes())
    assert model.to_bytes() == res.model.to_bytes()
    rows = res.record.rows
    assert [r["round"] for r in rows] == [0, 1, 2]
    assert all(r["wall_ms"] is None for r in rows)


def test_timing_only_when_requested(tmp_path):
    cfg = ExperimentConfig(mode="cc", epochs=1, record_timing=True, **SMALL)
    rows = run_experiment(cfg, tmp_path).record.rows
    assert all(r["wall_ms"] is not None for r in rows)


@pytest.mark.parametrize("mode", ["mcc", "cc", "fedmcc"])
def test_same_seed_same_csv(tmp_path, mode):
    cfg = ExperimentConfig(mode=mode, epochs=3, K=2, R=2, R_cluster=1, E=1, **SMALL)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_single_client_federated_matches_centralized(tmp_path):
    for seed in (0, 1):
        mcc = run_experiment(ExperimentConfig(mode="mcc", epochs=60, seed=seed, **SMALL), tmp_path / f"m{seed}")
        fed = run_experiment(ExperimentConfig(mode="fedmcc", K=1, E=1, R=30, R_cluster=30, seed=seed, **SMALL),
                             tmp_path / f"f{seed}")
        assert mcc.final["ACC"] >= 0.9
        assert abs(mcc.final["ACC"] - fed.final["ACC"]) <= 0.05


def test_failing_stage_is_named(tmp_path):
    cfg = ExperimentConfig(mode="fedmcc", K=2, R=1, R_cluster=0, E=1, **{**SMALL, "n": 200})
    with pytest.raises(StageError) as info:
        run_experiment(cfg, tmp_path)
    assert info.value.stage == "stage1"


# ---------------------------------------------------------------- CLI


def test_cli_run_and_eval(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("mode = mcc\nepochs = 2\nk = 3\nn_per_class = 40\ntest_per_class = 20\n"
                   "hidden = 16\nd1 = 4\nn = 30\ngrad_chunk = 15\n")
    assert main(["run", str(cfg), "--seed", "4", "--out", str(tmp_path / "out")]) == 0
    assert "final ACC=" in capsys.readouterr().out
    assert "seed = 4" in (tmp_path / "out" / "provenance.txt").read_text()
    data = make_blobs(3, 10, 2, 6.0, np.random.default_rng(0))
    save_csv(tmp_path / "d.csv", data)
    assert main(["eval", str(tmp_path / "out" / "model.ckpt"), str(tmp_path / "d.csv")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ACC=") and "NMI=" in out and "ARI=" in out


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--trials", "10", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_cli_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("tau_I = -1\n")
    assert main(["run", str(bad)]) == 2
    assert "tau_I must be > 0" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.cfg")]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    assert main(["eval", str(tmp_path / "junk.ckpt"), str(bad)]) == 2
