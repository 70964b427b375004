import dataclasses
import json
import os

import pytest

from lrrseg import cli, phantom, preprocess, unet3d
from lrrseg.errors import ConfigError


@pytest.fixture(scope="module")
def tiny_cohort(tmp_path_factory):
    """Small cohort + config sized to exercise the pipeline in seconds."""
    root = tmp_path_factory.mktemp("tiny")
    cohort_dir = str(root / "cohort")
    params = {"dims": [24, 24, 20]}
    params_path = str(root / "params.json")
    with open(params_path, "w") as f:
        json.dump(params, f)
    manifest = cli.run_phantom(cohort_dir, n=10, n_pretrain=4, seed=9, params_file=params_path)
    return root, manifest


def tiny_config(root, manifest, out_name, **kw):
    train = unet3d.TrainConfig(lr0=0.02, max_epochs=2, ensemble_size=2, seed=5,
                               batch_size=2, plateau_patience=2, early_stop_patience=5)
    defaults = dict(manifest=manifest, out=str(root / out_name), seed=3,
                    crop_dims=(16, 16, 16), train=train,
                    methods=("ai_random", "suvmax", "gtv"))
    defaults.update(kw)
    return cli.ExperimentConfig(**defaults)


class TestPhantomCommand:
    def test_writes_manifest_and_key(self, tiny_cohort):
        root, manifest = tiny_cohort
        assert os.path.exists(manifest)
        entries = preprocess.read_manifest(manifest)
        assert len(entries) == 14
        assert sum(e["role"] == "pretrain-task" for e in entries) == 4
        assert os.path.exists(os.path.join(os.path.dirname(manifest), "answer_key.json"))


class TestSplitCommand:
    def test_split_only_relapse_cases(self, tiny_cohort):
        root, manifest = tiny_cohort
        cfg = tiny_config(root, manifest, "split_out")
        split = cli.run_split(cfg)
        ids = list(split.train) + list(split.val) + list(split.test)
        assert len(ids) == 10
        assert all(i.startswith("rel_") for i in ids)
        assert os.path.exists(cfg.split_path)


class TestPreprocessCommand:
    def test_writes_crops(self, tiny_cohort):
        root, manifest = tiny_cohort
        cfg = tiny_config(root, manifest, "prep_out")
        cli.run_split(cfg)
        out = cli.run_preprocess(cfg)
        split = preprocess.load_split(cfg.split_path)
        some_id = split.train[0]
        from lrrseg import volgrid
        ct = volgrid.load_vf32(os.path.join(out, f"{some_id}_input_ct"))
        assert ct.grid.dims == (16, 16, 16)
        label = volgrid.load_vf32(os.path.join(out, f"{some_id}_label"))
        assert label.count >= 1


@pytest.fixture(scope="module")
def trained(tiny_cohort):
    root, manifest = tiny_cohort
    cfg = tiny_config(root, manifest, "run")
    cli.run_split(cfg)
    summary = cli.run_train(cfg)
    return cfg, summary


class TestPipeline:

    def test_train_outputs(self, trained):
        cfg, summary = trained
        assert "ai_random" in summary["methods"]
        assert os.path.exists(os.path.join(cfg.out, "checkpoints", "ai_random_best.json"))
        assert os.path.exists(os.path.join(cfg.out, "history_ai_random_run0.csv"))
        assert len(summary["methods"]["ai_random"]["member_val_dice"]) == 2

    def test_sweep_outputs(self, trained):
        cfg, _ = trained
        result = cli.run_sweep(cfg)
        assert 1 <= result.best_percent <= 100
        lines = open(os.path.join(cfg.out, "sweep.csv")).read().splitlines()
        assert len(lines) == 101

    def test_evaluate_report(self, trained):
        cfg, _ = trained
        report = cli.run_evaluate(cfg)
        methods = {m["method"] for m in report["methods"]}
        assert methods == {"ai_random", "suvmax", "gtv"}
        assert report["best_cnn"] == "ai_random"
        assert os.path.exists(os.path.join(cfg.out, "report.txt"))
        split = preprocess.load_split(cfg.split_path)
        for cid in split.test:
            for m in methods:
                assert os.path.exists(os.path.join(cfg.out, "predictions", f"{cid}_{m}.vf32"))

    def test_evaluate_gtv_only(self, tiny_cohort, trained):
        root, manifest = tiny_cohort
        cfg_full, _ = trained
        cfg = dataclasses.replace(cfg_full, methods=("gtv",), out=str(root / "gtv_only"))
        cli.run_split(cfg)
        report = cli.run_evaluate(cfg)
        assert [m["method"] for m in report["methods"]] == ["gtv"]
        assert report["comparisons"] == []

    def test_evaluate_ci_mode(self, trained):
        cfg, _ = trained
        cli.run_evaluate(cfg, ci=True)  # must not raise

    def test_predict_command(self, trained):
        cfg, _ = trained
        pred_dir = cli.run_predict(cfg, methods=("gtv",))
        split = preprocess.load_split(cfg.split_path)
        assert os.path.exists(os.path.join(pred_dir, f"{split.test[0]}_gtv.vf32"))


class TestConfig:
    def test_load_and_overrides(self, tiny_cohort, tmp_path):
        root, manifest = tiny_cohort
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "manifest": manifest, "out": str(tmp_path / "o"), "seed": 4,
            "methods": ["gtv"], "train": {"max_epochs": 3, "lr0": 0.05},
            "crop_dims": [16, 16, 16],
        }))
        cfg = cli.load_config(str(cfg_path))
        assert cfg.train.max_epochs == 3 and cfg.train.lr0 == 0.05
        assert cfg.methods == ("gtv",)

    def test_bad_method_rejected(self, tiny_cohort):
        root, manifest = tiny_cohort
        with pytest.raises(ConfigError):
            tiny_config(root, manifest, "x", methods=("nope",))

    def test_missing_config_file(self):
        with pytest.raises(ConfigError):
            cli.load_config("/does/not/exist.json")


class TestMainEntry:
    def test_phantom_and_split_via_argv(self, tmp_path, capsys):
        out = str(tmp_path / "c")
        rc = cli.main(["phantom", "--out", out, "--n", "4", "--seed", "2"])
        assert rc == 0
        manifest = os.path.join(out, "cohort.json")
        rc = cli.main(["split", "--manifest", manifest, "--out", str(tmp_path / "r"),
                       "--seed", "1"])
        assert rc == 0
        assert os.path.exists(os.path.join(str(tmp_path / "r"), "split.json"))

    def test_missing_manifest_is_io_error(self, tmp_path):
        rc = cli.main(["split", "--manifest", str(tmp_path / "none.json"),
                       "--out", str(tmp_path / "o")])
        assert rc == 3
