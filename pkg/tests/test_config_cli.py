import csv
import json

import numpy as np
import pytest
import yaml

from cdn.cli import main
from cdn.config import ConfigError, from_dict, load_config
from cdn.data import write_idx


def write_yaml(path, obj):
    path.write_text(yaml.safe_dump(obj), encoding="utf-8")
    return path


def toy_config(tmp_path, kind="vb-cdn", **train):
    model = {"kind": kind, "layer_sizes": [1, 8, 1], "task": "regression", "hyper_hidden": [4], "noise_std": 3.0}
    if kind in ("mcd", "ensemble", "vmg"):
        model = {"kind": kind, "layer_sizes": [1, 8, 2], "task": "regression", "members": 2}
    objective = {"vb-cdn": "vb", "ml-cdn": "ml", "vmg": "vb"}.get(kind, "nll")
    t = {"iterations": 20, "batch_size": 10, "samples": 2, "objective": objective, "lam": 1e-3, "log_every": 5}
    t.update(train)
    cfg = {"seed": 5, "model": model, "train": t, "data": {"kind": "toy", "variant": "homoscedastic"},
           "eval": {"samples": 5, "grid_points": 50}, "out": str(tmp_path / "out")}
    return write_yaml(tmp_path / "cfg.yaml", cfg)


@pytest.fixture
def image_data(tmp_path):
    rng = np.random.default_rng(0)
    paths = {}
    for name, n in (("train", 60), ("test", 30), ("ood", 20)):
        y = rng.integers(0, 3, size=n)
        imgs = rng.integers(0, 60, size=(n, 3, 3))
        if name != "ood":
            imgs[np.arange(n), y, y] = 255  # learnable class signal on the diagonal
        ip, lp = tmp_path / f"{name}-images.gz", tmp_path / f"{name}-labels.gz"
        write_idx(imgs, y, ip, lp)
        paths[f"{name}_images"], paths[f"{name}_labels"] = str(ip), str(lp)
    return paths


def image_config(tmp_path, data, kind="ml-cdn", out="out", **extra_eval):
    objective = {"vb-cdn": "vb", "ml-cdn": "ml", "vmg": "vb"}.get(kind, "nll")
    cfg = {
        "seed": 3,
        "model": {"kind": kind, "layer_sizes": [9, 8, 3], "hyper_hidden": [6], "members": 2},
        "train": {"iterations": 40, "batch_size": 20, "objective": objective, "lr": 0.01, "log_every": 10},
        "data": {"kind": "idx", **data},
        "eval": {"samples": 4, "attack_size": 10, "eps_grid": [0.0, 0.2], **extra_eval},
        "out": str(tmp_path / out),
    }
    return write_yaml(tmp_path / f"{kind}.yaml", cfg)


class TestConfig:
    def test_defaults_valid(self):
        cfg = from_dict({"model": {"kind": "ml-cdn"}})
        assert cfg.model.layer_sizes == [784, 100, 10] and cfg.train.objective == "ml"

    @pytest.mark.parametrize(
        "raw, field",
        [
            ({"modle": {}}, "modle"),
            ({"model": {"width": 3}}, "model.width"),
            ({"train": {"lr": "fast"}}, "train.lr"),
            ({"train": {"lr": -1.0}}, "lr"),
            ({"train": {"iterations": 1.5}}, "train.iterations"),
            ({"model": {"kind": "gp"}}, "model.kind"),
            ({"model": {"kind": "vb-cdn"}}, "train.objective"),
            ({"data": {"validation_fraction": 1.5}}, "data.validation_fraction"),
            ({"data": {"train_images": "/nonexistent/file"}}, "data.train_images"),
            ({"eval": {"eps_grid": [0.5, 0.1]}}, "eval.eps_grid"),
            ({"eval": {"select_lambda": "yes"}}, "eval.select_lambda"),
            ({"seed": -1}, "seed"),
            ({"model": {"dropout": 1.0, "kind": "mcd"}, "train": {"objective": "nll"}}, "model.dropout"),
        ],
    )
    def test_rejections_name_the_field(self, raw, field):
        with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
            from_dict(raw)

    def test_yaml_errors(self, tmp_path):
        (tmp_path / "bad.yaml").write_text("model: [unclosed", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.yaml")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")


def read_csv(path):
    with open(path, encoding="utf-8") as f:
        return list(csv.reader(f))


class TestToyCommand:
    def test_curve(self, tmp_path):
        cfg = toy_config(tmp_path)
        assert main(["toy", "--config", str(cfg)]) == 0
        rows = read_csv(tmp_path / "out" / "toy_curve.csv")
        assert rows[0] == ["x", "mean", "std", "mixing_var", "posterior_var"]
        assert len(rows) == 51
        assert all(float(r[2]) >= 0 for r in rows[1:])
        summary = json.loads((tmp_path / "out" / "toy_summary.json").read_text())
        assert {"posterior_var", "mixing_var_neg", "mixing_var_nonneg", "std_ratio"} <= set(summary)

    def test_default_grid_has_1000_rows(self, tmp_path):
        cfg = yaml.safe_load(toy_config(tmp_path, kind="ml-cdn", iterations=2).read_text())
        cfg["eval"].pop("grid_points")
        write_yaml(tmp_path / "cfg.yaml", cfg)
        assert main(["toy", "--config", str(tmp_path / "cfg.yaml")]) == 0
        assert len(read_csv(tmp_path / "out" / "toy_curve.csv")) == 1001

    @pytest.mark.parametrize("kind", ["mcd", "ensemble", "vmg"])
    def test_baselines(self, tmp_path, kind):
        assert main(["toy", "--config", str(toy_config(tmp_path, kind=kind))]) == 0

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = toy_config(tmp_path)
        assert main(["toy", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["toy", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
        for name in ("toy_curve.csv", "toy_summary.json", "loss.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override_changes_output(self, tmp_path):
        cfg = toy_config(tmp_path)
        main(["toy", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["toy", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "6"])
        assert (tmp_path / "a" / "loss.csv").read_bytes() != (tmp_path / "b" / "loss.csv").read_bytes()


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        write_yaml(tmp_path / "c.yaml", {"train": {"lr": 0}})
        assert main(["train", "--config", str(tmp_path / "c.yaml")]) == 2
        assert "lr" in capsys.readouterr().err

    def test_data_error(self, tmp_path, image_data):
        with open(image_data["train_images"], "r+b") as f:
            f.truncate(30)
        assert main(["train", "--config", str(image_config(tmp_path, image_data))]) == 3

    def test_numerical_abort(self, tmp_path):
        cfg = toy_config(tmp_path, kind="ml-cdn", lr=1e30, iterations=200)
        assert main(["toy", "--config", str(cfg)]) == 4

    def test_missing_checkpoint_is_config_error(self, tmp_path, image_data):
        assert main(["attack", "--config", str(image_config(tmp_path, image_data))]) == 2

    def test_bad_seed(self, tmp_path):
        assert main(["toy", "--config", str(toy_config(tmp_path)), "--seed", str(2**64)]) == 2


class TestPipeline:
    def test_train_ood_attack(self, tmp_path, image_data):
        cfg = str(image_config(tmp_path, image_data, kind="vb-cdn"))
        ckpt = str(tmp_path / "m.ckpt")
        assert main(["train", "--config", cfg, "--checkpoint", ckpt]) == 0
        summary = json.loads((tmp_path / "out" / "train_summary.json").read_text())
        assert 0 <= summary["test_accuracy"] <= 1
        assert read_csv(tmp_path / "out" / "loss.csv")[0] == ["iteration", "nll_term", "kl_term", "total"]

        assert main(["ood", "--config", cfg, "--checkpoint", ckpt]) == 0
        report = json.loads((tmp_path / "out" / "ood_report.json").read_text())
        assert list(report) == ["mmc_in", "mmc_out", "auroc"]
        assert 0 <= report["auroc"] <= 1
        assert read_csv(tmp_path / "out" / "entropy_cdf_in.csv")[0] == ["entropy", "fraction"]

        assert main(["attack", "--config", cfg, "--checkpoint", ckpt]) == 0
        rows = read_csv(tmp_path / "out" / "robustness.csv")
        assert rows[0] == ["eps", "accuracy", "mean_entropy"] and len(rows) == 3

    def test_train_rerun_identical_checkpoint(self, tmp_path, image_data):
        cfg = str(image_config(tmp_path, image_data))
        main(["train", "--config", cfg, "--checkpoint", str(tmp_path / "a.ckpt")])
        main(["train", "--config", cfg, "--checkpoint", str(tmp_path / "b.ckpt")])
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_zero_iterations_checkpoint_is_initial(self, tmp_path, image_data):
        from cdn.checkpoint import load_checkpoint
        from cdn.cli import build

        path = image_config(tmp_path, image_data)
        raw = yaml.safe_load(path.read_text())
        raw["train"]["iterations"] = 0
        write_yaml(path, raw)
        assert main(["train", "--config", str(path), "--checkpoint", str(tmp_path / "m.ckpt")]) == 0
        loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
        fresh = build(load_config(path))
        for k, v in fresh.parameters().items():
            assert loaded.parameters()[k].data.tobytes() == v.data.tobytes()

    def test_ood_same_set_is_chance(self, tmp_path, image_data):
        data = dict(image_data, ood_images=image_data["test_images"], ood_labels=image_data["test_labels"])
        cfg = str(image_config(tmp_path, data, kind="mcd"))
        ckpt = str(tmp_path / "m.ckpt")
        assert main(["train", "--config", cfg, "--checkpoint", ckpt]) == 0
        assert main(["ood", "--config", cfg, "--checkpoint", ckpt]) == 0
        report = json.loads((tmp_path / "out" / "ood_report.json").read_text())
        assert abs(report["auroc"] - 0.5) < 0.1

    def test_attack_rejects_mismatched_checkpoint(self, tmp_path, image_data):
        ckpt = str(tmp_path / "m.ckpt")
        assert main(["train", "--config", str(image_config(tmp_path, image_data, kind="mcd")), "--checkpoint", ckpt]) == 0
        assert main(["attack", "--config", str(image_config(tmp_path, image_data, kind="ml-cdn")), "--checkpoint", ckpt]) == 2

    def test_attack_eps_zero_is_clean(self, tmp_path, image_data):
        cfg = str(image_config(tmp_path, image_data, kind="ensemble", eps_grid=[0.0]))
        ckpt = str(tmp_path / "m.ckpt")
        assert main(["train", "--config", cfg, "--checkpoint", ckpt]) == 0
        assert main(["attack", "--config", cfg, "--checkpoint", ckpt]) == 0
        rows = read_csv(tmp_path / "out" / "robustness.csv")
        assert len(rows) == 2 and float(rows[1][0]) == 0.0
