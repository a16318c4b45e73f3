import csv
import hashlib
import json

import numpy as np
import pytest
from click.testing import CliRunner

from ramannet import __version__
from ramannet.cli import main
from ramannet.data import KFOLD, SplitPlan, load_dataset, make_splits, write_matrix_csv
from ramannet.synthetic import peak_dataset

SMALL = ["--window", "20", "--step", "10", "--block-units", "3", "--summary-units", "8", "--embed-units", "4"]


@pytest.fixture
def runner():
    return CliRunner()


def write_dataset(path, n=30, classes=3, length=60, seed=0, names=None):
    ds = peak_dataset(n, length, np.linspace(10, length - 10, classes), width=3.0, rng=seed, class_names=names)
    write_matrix_csv(path, ds.shifts, ds.features, [ds.class_names[i] for i in ds.labels])
    return path


def run(runner, args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


class TestPreprocess:
    def test_two_overlapping(self, runner, tmp_path):
        raw = tmp_path / "raw.csv"
        raw.write_text("sample_id,label,shift,intensity\n"
                       + "".join(f"a,x,{s},{np.sin(s / 7):.6f}\n" for s in range(0, 100, 2))
                       + "".join(f"b,y,{s},{np.cos(s / 9):.6f}\n" for s in range(10, 130, 3)))
        out = tmp_path / "aligned.csv"
        res = run(runner, ["preprocess", raw, "-o", out])
        assert res.exit_code == 0, res.output
        ds = load_dataset(out)
        assert len(ds) == 2 and ds.shifts[0] == 10 and ds.shifts[-1] == 98
        assert ds.features.min() == 0 and ds.features.max() == 1
        report = json.loads((tmp_path / "aligned.csv.report.json").read_text())
        assert report["common_range"] == [10.0, 98.0]
        assert report["inputs"][str(raw)] == hashlib.sha256(raw.read_bytes()).hexdigest()

    def test_disjoint_ranges(self, runner, tmp_path):
        a = tmp_path / "a.csv"
        a.write_text("label,0,1,2\nx,1,2,3\n")
        b = tmp_path / "b.csv"
        b.write_text("label,5,6,7\ny,1,2,3\n")
        out = tmp_path / "o.csv"
        res = runner.invoke(main, ["preprocess", str(a), str(b), "-o", str(out)])
        assert res.exit_code == 1
        assert "error[NoCommonRangeError]" in res.output
        assert not out.exists()

    def test_min_class_size_and_filters(self, runner, tmp_path):
        raw = tmp_path / "raw.csv"
        rows = ["label,meta_laser,0,1,2,3"]
        rows += [f"big,532,{i},1,0,{i % 3}" for i in range(4)]
        rows += ["small,532,0,1,2,3", "big,785,3,2,1,0"]
        raw.write_text("\n".join(rows) + "\n")
        out = tmp_path / "o.csv"
        res = run(runner, ["preprocess", raw, "-o", out, "--min-class-size", "2", "--meta", "laser=532"])
        assert res.exit_code == 0, res.output
        ds = load_dataset(out)
        assert ds.class_names == ("big",) and len(ds) == 4
        report = json.loads((tmp_path / "o.csv.report.json").read_text())
        assert report["dropped_classes"] == {"small": 1}

    def test_inputs_untouched(self, runner, tmp_path):
        raw = write_dataset(tmp_path / "raw.csv", n=6)
        before = raw.read_bytes()
        run(runner, ["preprocess", raw, "-o", tmp_path / "o.csv"])
        assert raw.read_bytes() == before


class TestTrain:
    def test_kfold_checkpoints_and_report(self, runner, tmp_path):
        data = write_dataset(tmp_path / "d.csv")
        out = tmp_path / "run"
        res = run(runner, ["train", data, "--out", out, "--protocol", "kfold", "--folds", "5", "--epochs", "2",
                           "--batch-size", "8", *SMALL])
        assert res.exit_code == 0, res.output
        assert "windows: 5" in res.output and "trailing samples dropped: 0" in res.output
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [f"split_{i:03d}.ckpt" for i in range(5)]
        records = [json.loads(line) for line in (out / "records.jsonl").read_text().splitlines()]
        assert len(records) == 5 and records[0]["checkpoint"] == "checkpoints/split_000.ckpt"
        report = json.loads((out / "report.json").read_text())
        accs = [r["test_metrics"]["accuracy"] for r in records]
        assert report["aggregate"]["accuracy"]["mean"] == pytest.approx(np.mean(accs), abs=1e-12)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["inputs"][str(data)] == hashlib.sha256(data.read_bytes()).hexdigest()
        assert manifest["master_seed"] == 0 and manifest["tool_version"] == __version__
        assert manifest["resolved"]["epochs"] == 2

    def test_rerun_identical_records(self, runner, tmp_path):
        data = write_dataset(tmp_path / "d.csv")
        outs = []
        for name in ("r1", "r2"):
            res = run(runner, ["train", data, "--out", tmp_path / name, "--folds", "3", "--epochs", "2",
                               "--seed", "5", *SMALL])
            assert res.exit_code == 0, res.output
            recs = [json.loads(line) for line in (tmp_path / name / "records.jsonl").read_text().splitlines()]
            for r in recs:
                r.pop("wall_time_s")
            outs.append(recs)
        assert outs[0] == outs[1]
        for i in range(3):
            a = (tmp_path / "r1" / "checkpoints" / f"split_{i:03d}.ckpt").read_bytes()
            assert a == (tmp_path / "r2" / "checkpoints" / f"split_{i:03d}.ckpt").read_bytes()

    def test_missing_file(self, runner, tmp_path):
        missing = tmp_path / "nope.csv"
        res = runner.invoke(main, ["train", str(missing), "--out", str(tmp_path / "o")])
        assert res.exit_code != 0
        assert "nope.csv" in res.output

    @pytest.mark.parametrize("flags", [["--protocol", "kfold", "--repeats", "3"],
                                       ["--repeats", "3"],
                                       ["--protocol", "holdout-repeat", "--folds", "3"],
                                       ["--protocol", "kfold", "--finetune-epochs", "3"],
                                       ["--protocol", "pretrain-finetune"]])
    def test_conflicting_flags_are_usage_errors(self, runner, tmp_path, flags):
        data = write_dataset(tmp_path / "d.csv")
        out = tmp_path / "o"
        res = runner.invoke(main, ["train", str(data), "--out", str(out), *flags])
        assert res.exit_code == 2, res.output
        assert not out.exists()

    def test_config_precedence(self, runner, tmp_path):
        data = write_dataset(tmp_path / "d.csv")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"protocol": "holdout-repeat", "repeats": 2, "epochs": 3, "seed": 9,
                                   "window": 20, "step": 10, "block-units": 3, "summary_units": 8,
                                   "embed_units": 4}))
        out = tmp_path / "o"
        res = run(runner, ["train", data, "--out", out, "--config", cfg, "--epochs", "1"])
        assert res.exit_code == 0, res.output
        resolved = json.loads((out / "manifest.json").read_text())["resolved"]
        assert resolved["epochs"] == 1  # flag beats file
        assert resolved["repeats"] == 2 and resolved["seed"] == 9  # file beats default
        assert resolved["batch_size"] == 64  # default
        records = (out / "records.jsonl").read_text().splitlines()
        assert len(records) == 2 and all(json.loads(r)["epochs_run"] == 1 for r in records)

    def test_config_unknown_key(self, runner, tmp_path):
        data = write_dataset(tmp_path / "d.csv")
        cfg = tmp_path / "c.json"
        cfg.write_text('{"epoch": 3}')
        res = runner.invoke(main, ["train", str(data), "--out", str(tmp_path / "o"), "--config", str(cfg)])
        assert res.exit_code == 2 and "epoch" in res.output

    def test_pretrain_finetune(self, runner, tmp_path):
        ref = write_dataset(tmp_path / "ref.csv", n=45, seed=0)
        ft = write_dataset(tmp_path / "ft.csv", n=30, seed=1)
        test = write_dataset(tmp_path / "test.csv", n=15, seed=2)
        out = tmp_path / "o"
        res = run(runner, ["train", ref, "--out", out, "--protocol", "pretrain-finetune", "--folds", "3",
                           "--finetune-data", ft, "--test-data", test, "--epochs", "1", "--finetune-epochs", "1",
                           "--batch-size", "16", *SMALL])
        assert res.exit_code == 0, res.output
        report = json.loads((out / "report.json").read_text())
        assert len(report["test_evaluations"]) == 1 and report["test_evaluations"][0]["n"] == 15
        assert (out / "checkpoints" / "selected.ckpt").exists()
        assert len((out / "records.jsonl").read_text().splitlines()) == 6


@pytest.fixture
def trained(runner, tmp_path):
    """Two-class data with a 2-fold run; returns (data path, run dir)."""
    data = write_dataset(tmp_path / "d.csv", n=24, classes=2, names=("healthy", "sick"))
    out = tmp_path / "run"
    res = run(runner, ["train", data, "--out", out, "--folds", "2", "--epochs", "3", "--batch-size", "8",
                       "--top-k", "1,2", "--window", "20", "--step", "10", "--block-units", "3",
                       "--summary-units", "8"])
    assert res.exit_code == 0, res.output
    return data, out


class TestEval:
    def test_matches_record_and_binary_metrics(self, runner, tmp_path, trained):
        data, out = trained
        ds = load_dataset(data)
        split = make_splits(ds, SplitPlan(KFOLD, folds=2))[0]
        sub = tmp_path / "test0.csv"
        write_matrix_csv(sub, ds.shifts, ds.features[split.test], [ds.class_names[i] for i in ds.labels[split.test]])
        cm_path = tmp_path / "cm.csv"
        res = run(runner, ["eval", sub, "--checkpoint", out / "checkpoints" / "split_000.ckpt",
                           "--confusion-csv", cm_path, "--json"])
        assert res.exit_code == 0, res.output
        metrics = json.loads(res.output)
        record = json.loads((out / "records.jsonl").read_text().splitlines()[0])
        assert metrics["accuracy"] == record["test_metrics"]["accuracy"]
        assert metrics["confusion"] == record["test_metrics"]["confusion"]
        assert "sensitivity" in metrics and "specificity" in metrics
        rows = list(csv.reader(cm_path.open()))
        assert rows[0] == ["true\\predicted", "healthy", "sick"]

    def test_text_output_and_positive_class(self, runner, tmp_path, trained):
        data, out = trained
        res = run(runner, ["eval", data, "--checkpoint", out / "checkpoints" / "split_001.ckpt",
                           "--positive-class", "healthy", "--top-k", "1,2", "--confusion-csv", tmp_path / "c.csv"])
        assert res.exit_code == 0, res.output
        assert "sensitivity:" in res.output and "specificity:" in res.output
        assert "top-2 accuracy: 1.0000" in res.output

    def test_topk_non_decreasing(self, runner, tmp_path):
        data = write_dataset(tmp_path / "d20.csv", n=60, classes=20, length=80)
        out = tmp_path / "run"
        res = run(runner, ["train", data, "--out", out, "--protocol", "holdout-repeat", "--repeats", "1",
                           "--test-fraction", "0.34", "--val-fraction", "0", "--epochs", "2", *SMALL])
        assert res.exit_code == 0, res.output
        res = run(runner, ["eval", data, "--checkpoint", out / "checkpoints" / "split_000.ckpt",
                           "--top-k", "1,5,10", "--json", "--confusion-csv", tmp_path / "c.csv"])
        top = json.loads(res.output)["top_k"]
        assert set(top) == {"1", "5", "10"}
        assert top["1"] <= top["5"] <= top["10"]

    def test_shape_mismatch(self, runner, tmp_path, trained):
        _, out = trained
        other = write_dataset(tmp_path / "long.csv", n=6, classes=2, length=70, names=("healthy", "sick"))
        res = runner.invoke(main, ["eval", str(other), "--checkpoint", str(out / "checkpoints" / "split_000.ckpt")])
        assert res.exit_code == 1
        assert res.output.startswith("ramannet: error[ShapeError]") and "input_len=60" in res.output

    def test_unknown_label(self, runner, tmp_path, trained):
        _, out = trained
        other = write_dataset(tmp_path / "o.csv", n=6, classes=2, names=("healthy", "other"))
        res = runner.invoke(main, ["eval", str(other), "--checkpoint", str(out / "checkpoints" / "split_000.ckpt")])
        assert res.exit_code == 1 and "error[LabelError]" in res.output


class TestEmbed:
    def test_default_width_and_determinism(self, runner, tmp_path):
        data = write_dataset(tmp_path / "d.csv", n=12, classes=2)
        out = tmp_path / "run"
        res = run(runner, ["train", data, "--out", out, "--folds", "2", "--epochs", "1", "--window", "20",
                           "--step", "10", "--block-units", "3", "--summary-units", "8"])
        assert res.exit_code == 0, res.output
        # duplicate the first row so two inputs are identical
        lines = data.read_text().splitlines()
        dup = tmp_path / "dup.csv"
        dup.write_text("\n".join(lines + [lines[1]]) + "\n")
        ckpt = out / "checkpoints" / "split_000.ckpt"
        e1, e2 = tmp_path / "e1.csv", tmp_path / "e2.csv"
        assert run(runner, ["embed", dup, "--checkpoint", ckpt, "-o", e1]).exit_code == 0
        assert run(runner, ["embed", dup, "--checkpoint", ckpt, "-o", e2]).exit_code == 0
        rows = list(csv.reader(e1.open()))
        assert len(rows[0]) == 257 and rows[0][:2] == ["label", "e0"]
        assert len(rows) == 1 + 13
        assert rows[1] == rows[-1]
        assert e1.read_bytes() == e2.read_bytes()


def test_version(runner):
    res = runner.invoke(main, ["--version"])
    assert res.exit_code == 0 and __version__ in res.output
