import gzip
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlab import cli, models
from xlab.bench import (DatasetSplit, ExclusionFilter, IDXError, apply_filter, exclusion_metrics, find_split_files,
                        limited_pool, load_dataset, load_idx, read_idx, write_idx)
from xlab.bench.data import idx_bytes, parse_idx
from xlab.bench.experiments import (BenchConfig, format_report, load_reports, run_mnist_transfer, run_optimizer,
                                    run_table2, run_table3, run_table4, table2_checks, table3_checks, write_report)
from xlab.bench.filters import victim_probs
from xlab.nn.functional import softmax_np
from xlab.oracle import Oracle, OracleServer


def synthetic(n, seed):
    """Noisy images whose class is a bright stripe at row 2k+4."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n).astype(np.uint8)
    images = (rng.random((n, 28, 28)) * 60).astype(np.uint8)
    for i, k in enumerate(labels):
        images[i, 2 * k + 4: 2 * k + 6, 4:24] = 230
    return images, labels


def write_split(folder, prefix, n, seed, gz=False):
    images, labels = synthetic(n, seed)
    suffix = ".gz" if gz else ""
    write_idx(folder / f"{prefix}-images-idx3-ubyte{suffix}", images)
    write_idx(folder / f"{prefix}-labels-idx1-ubyte{suffix}", labels)


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    fm = root / "FashionMNIST" / "raw"
    fm.mkdir(parents=True)
    write_split(fm, "train", 600, 0)
    write_split(fm, "t10k", 200, 1, gz=True)
    mn = root / "mnist"
    mn.mkdir()
    write_split(mn, "train", 300, 2)
    write_split(mn, "t10k", 100, 3)
    return root


class TestIDX:
    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
           st.lists(st.integers(0, 5), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
    def test_round_trip(self, dtype, shape, seed):
        arr = (np.random.default_rng(seed).random(shape) * 100).astype(dtype)
        out = parse_idx(idx_bytes(arr))
        assert out.dtype == arr.dtype and out.shape == arr.shape
        assert out.tobytes() == arr.tobytes()

    def test_header_is_big_endian(self):
        raw = idx_bytes(np.zeros((3, 28, 28), dtype=np.uint8))
        assert raw[:16] == bytes.fromhex("00000803" "00000003" "0000001c" "0000001c")

    def test_gzip(self, tmp_path):
        arr = np.arange(12, dtype=np.uint8).reshape(3, 4)
        write_idx(tmp_path / "a.gz", arr)
        assert (tmp_path / "a.gz").read_bytes()[:2] == b"\x1f\x8b"
        np.testing.assert_array_equal(read_idx(tmp_path / "a.gz"), arr)

    def test_truncated(self, tmp_path):
        raw = idx_bytes(np.zeros((2, 28, 28), dtype=np.uint8))
        (tmp_path / "t").write_bytes(raw[:-10])
        with pytest.raises(IDXError, match=f"expected {len(raw)} bytes, got {len(raw) - 10}") as exc:
            read_idx(tmp_path / "t")
        assert exc.value.offset == len(raw) - 10

    def test_trailing_bytes(self):
        with pytest.raises(IDXError, match="trailing"):
            parse_idx(idx_bytes(np.zeros(3, dtype=np.uint8)) + b"\x00")

    def test_bad_magic(self):
        with pytest.raises(IDXError, match="offset 0"):
            parse_idx(b"\x01\x02\x08\x01" + b"\x00" * 8)
        with pytest.raises(IDXError, match="offset 0"):
            parse_idx(b"\x00\x00\x07\x01" + b"\x00" * 8)

    def test_short_dims(self):
        with pytest.raises(IDXError, match="dimension header"):
            parse_idx(b"\x00\x00\x08\x03\x00\x00")

    def test_load_split(self, tmp_path):
        images, labels = synthetic(7, 0)
        write_idx(tmp_path / "i", images)
        write_idx(tmp_path / "l", labels)
        split = load_idx(tmp_path / "i", tmp_path / "l", "x")
        assert split.images.shape == (7, 1, 28, 28) and split.images.dtype == np.float32
        np.testing.assert_allclose(split.images[:, 0] * 255, images, atol=1e-4)
        assert split.images.min() >= 0 and split.images.max() <= 1
        np.testing.assert_array_equal(split.labels, labels)

    def test_swapped_files(self, tmp_path):
        images, labels = synthetic(3, 0)
        write_idx(tmp_path / "i", images)
        write_idx(tmp_path / "l", labels)
        with pytest.raises(IDXError, match="image magic"):
            load_idx(tmp_path / "l", tmp_path / "i")

    def test_count_mismatch(self, tmp_path):
        images, labels = synthetic(3, 0)
        write_idx(tmp_path / "i", images)
        write_idx(tmp_path / "l", labels[:2])
        with pytest.raises(IDXError, match="2 labels for 3 images"):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_discovery(self, data_root):
        img, lab = find_split_files(data_root, "fashionmnist", "test")
        assert img.name.endswith(".gz") and lab.name.startswith("t10k-labels")
        train, test = load_dataset(data_root, "fashionmnist")
        assert (len(train), len(test)) == (600, 200)
        assert train.provenance == "fashionmnist-train"
        assert len(load_dataset(data_root, "mnist")[0]) == 300
        with pytest.raises(FileNotFoundError):
            find_split_files(data_root / "FashionMNIST", "mnist", "train")

    def test_limited_pool(self, data_root):
        train, _ = load_dataset(data_root)
        a, b = limited_pool(train, 20, seed=3), limited_pool(train, 20, seed=3)
        assert a.shape == (20, 1, 28, 28)
        np.testing.assert_array_equal(a, b)
        with pytest.raises(ValueError):
            limited_pool(train, 601)


@pytest.fixture(scope="module")
def split():
    images, labels = synthetic(300, 5)
    return DatasetSplit(images[:, None] / np.float32(255), labels)


@pytest.fixture(scope="module")
def victim(split):
    model = models.build("mlp", seed=0)
    models.train_supervised(model, split.images, split.labels, split.images, split.labels,
                            models.TrainingRecipe(epochs=3), seed=0)
    return model


class TestFilter:
    def test_by_label(self, split):
        out = apply_filter(split, ExclusionFilter((9,)))
        assert 9 not in out.labels and len(out) == (split.labels != 9).sum()

    def test_by_confidence(self, split, victim):
        filt = ExclusionFilter((9,), "by-confidence")
        out = apply_filter(split, filt, victim)
        assert 0 < len(out) < len(split)
        assert victim_probs(victim, out.images)[:, 9].max() <= 0.10

    def test_empty_is_identity(self, split, victim):
        for mode in ("by-label", "by-confidence"):
            out = apply_filter(split, ExclusionFilter((), mode), victim)
            np.testing.assert_array_equal(out.images, split.images)

    @settings(max_examples=30, deadline=None)
    @given(st.sets(st.integers(0, 9), max_size=4), st.sampled_from(["by-label", "by-confidence"]))
    def test_idempotent(self, split, victim, classes, mode):
        filt = ExclusionFilter(tuple(classes), mode)
        once = apply_filter(split, filt, victim)
        twice = apply_filter(once, filt, victim)
        np.testing.assert_array_equal(once.images, twice.images)
        np.testing.assert_array_equal(once.labels, twice.labels)

    def test_needs_victim(self, split):
        with pytest.raises(ValueError, match="victim"):
            apply_filter(split, ExclusionFilter((1,), "by-confidence"))

    def test_names(self):
        assert ExclusionFilter((9, 1)).name == "FMNIST-2"
        assert ExclusionFilter((0, 1, 9), "by-confidence").name == "FMNIST-3S"
        with pytest.raises(ValueError):
            ExclusionFilter((10,))


def brute_force(pred, labels, classes):
    cm = np.zeros((10, 10), dtype=int)
    for p, t in zip(pred, labels):
        cm[t, p] += 1
    correct = sum(cm[k, k] for k in classes)
    support = sum(cm[k, :].sum() for k in classes)
    predicted = sum(cm[:, k].sum() for k in classes)
    return (correct / support if support else None), (correct / predicted if predicted else None)


class TestMetrics:
    def test_worked_example(self):
        labels = np.array([9] * 10 + [0, 1, 2])
        pred = np.array([9] * 8 + [0, 1] + [9, 9, 2])
        m = exclusion_metrics(pred, labels, [9])
        assert m.recall == pytest.approx(0.8) and m.precision == pytest.approx(0.8)

    def test_perfect(self):
        labels = np.arange(10).repeat(3)
        m = exclusion_metrics(labels, labels, [2, 5])
        assert (m.recall, m.precision) == (1.0, 1.0)

    def test_undefined_precision(self):
        m = exclusion_metrics(np.zeros(5, int), np.array([9, 9, 0, 0, 0]), [9])
        assert m.precision is None and m.recall == 0.0

    def test_empty_k(self):
        with pytest.raises(ValueError):
            exclusion_metrics(np.zeros(3, int), np.zeros(3, int), [])

    @settings(max_examples=300)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 60), st.sets(st.integers(0, 9), min_size=1, max_size=9))
    def test_matches_confusion_matrix(self, seed, n, classes):
        rng = np.random.default_rng(seed)
        labels, pred = rng.integers(0, 10, n), rng.integers(0, 10, n)
        m = exclusion_metrics(pred, labels, sorted(classes))
        r, p = brute_force(pred, labels, classes)
        assert m.recall == (pytest.approx(r) if r is not None else None)
        assert m.precision == (pytest.approx(p) if p is not None else None)
        for v in (m.recall, m.precision):
            assert v is None or 0 <= v <= 1


def tiny_config(data_root, out, **kw):
    base = dict(data_root=str(data_root), out_dir=str(out), seeds=(0, 1), victim_arch="mlp",
                victim_recipe={"epochs": 2}, table2_archs=("mlp",), table2_queries=200, table2_epochs=2,
                transfer_attacker="mlp", transfer_epochs=2, table3_classes=((9,), (1, 9)),
                table4_methods=("algorithm1", "baseline1"), pool_size=5,
                extraction={"budget": 30, "scope": 8, "attacker": "mlp", "post_train_epochs": 1,
                            "eval_every": 10, "agent": {"warmup": 8, "batch_size": 8, "hidden": [16, 16]}})
    base.update(kw)
    return BenchConfig.from_dict(base)


def strip_timing(path):
    data = json.loads(path.read_text())
    data.pop("timing")
    data["config"].pop("out_dir")
    for row in data["rows"]:
        row.pop("seconds", None)
    return data


class TestExperiments:
    def test_table2(self, data_root, tmp_path):
        report = run_table2(tiny_config(data_root, tmp_path))
        assert [(r["victim"], r["attacker"]) for r in report.rows] == [("mlp", "mlp")]
        assert 0 <= report.rows[0]["best_top1"] <= 1
        assert any("60000" in a or "200" in a for a in report.assumptions)
        assert (tmp_path / "victims" / "mlp-seed0.xlab").exists()

    def test_table3(self, data_root, tmp_path):
        report = run_table3(tiny_config(data_root, tmp_path))
        assert [r["pool"] for r in report.rows] == ["FMNIST-1", "FMNIST-1S", "FMNIST-2", "FMNIST-2S"]
        for r in report.rows:
            assert r["pool_size"] < 600
        assert {c.criterion for c in report.checks} == {"4"}

    def test_table4_and_determinism(self, data_root, tmp_path):
        cfg = tiny_config(data_root, tmp_path / "a")
        a = write_report(tmp_path / "a", run_table4(cfg))[0]
        cfg.out_dir = str(tmp_path / "b")
        b = write_report(tmp_path / "b", run_table4(cfg))[0]
        assert strip_timing(a) == strip_timing(b)
        data = json.loads(a.read_text())
        assert data["schema_version"] == 1
        assert set(data["summary"]) == {"algorithm1/data-free", "baseline1/data-free",
                                        "algorithm1/limited-data", "baseline1/limited-data"}
        assert len(data["rows"]) == 8 and all(r["queries"] == 30 for r in data["rows"])
        assert (tmp_path / "a" / "table4.csv").read_text().startswith("# schema_version=1\n")

    def test_optimizer(self, data_root, tmp_path):
        report = run_optimizer(tiny_config(data_root, tmp_path, seeds=(0,)))
        assert set(report.summary) == {"sgd", "adam"}
        assert report.checks[0].criterion == "7"

    def test_mnist_transfer(self, data_root, tmp_path):
        report = run_mnist_transfer(tiny_config(data_root, tmp_path))
        assert report.rows[0]["queries"] == 300

    def test_no_data_root(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="data_root"):
            run_table2(BenchConfig(out_dir=str(tmp_path)))

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            BenchConfig.from_dict({"seedz": [1]})


class TestChecks:
    def test_table3_reference_values_pass(self):
        reference = {"FMNIST-1": (0.929, 0.978), "FMNIST-1S": (0.860, 0.989), "FMNIST-2": (0.932, 0.989),
                 "FMNIST-2S": (0.796, 0.991), "FMNIST-3": (0.906, 0.932), "FMNIST-3S": (0.755, 0.960),
                 "FMNIST-8": (0.687, 0.844), "FMNIST-8S": (0.169, 0.646)}
        rows = [{"pool": k, "recall": r, "precision": p} for k, (r, p) in reference.items()]
        checks = table3_checks(rows)
        assert len(checks) == 8 and all(c.passed for c in checks)
        rows[0]["recall"] = 0.5
        assert not all(c.passed for c in table3_checks(rows))

    def test_table2_alexnet_degradation_permitted(self):
        rows = [{"victim": v, "attacker": a, "best_top1": acc}
                for v, accs in {"mlp": (0.41, 0.45, 0.3), "lenet": (0.5, 0.63, 0.4),
                                "alexnet-mini": (0.15, 0.25, 0.12)}.items()
                for a, acc in zip(("mlp", "lenet", "alexnet-mini"), accs)]
        assert all(c.passed for c in table2_checks(rows))
        rows[0]["best_top1"] = 0.1
        assert not all(c.passed for c in table2_checks(rows))


class TestCLI:
    def test_experiment_and_report(self, data_root, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(tiny_config(data_root, tmp_path).to_dict()))
        assert cli.main(["experiment", "table2", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
        assert cli.main(["report", str(tmp_path / "r")]) == 0
        out = capsys.readouterr().out
        assert "criterion 3" in out
        failed = not load_reports(tmp_path / "r")[0]["checks"][0]["passed"]
        assert cli.main(["report", str(tmp_path / "r"), "--check"]) == int(failed)

    def test_check_failure_exit_code(self, tmp_path):
        from xlab.bench.experiments import Check, Report

        write_report(tmp_path, Report("demo", {}, [{"x": 1}], {"x": 1}, [Check("9", "always fails", 0, False)]))
        assert cli.main(["report", str(tmp_path)]) == 0
        assert cli.main(["report", str(tmp_path), "--check"]) == 1
        assert "[FAIL]" in format_report(load_reports(tmp_path)[0])

    def test_report_empty_dir(self, tmp_path):
        assert cli.main(["report", str(tmp_path)]) == 2

    def test_train_victim(self, data_root, tmp_path):
        code = cli.main(["train-victim", "--data-root", str(data_root), "--out", str(tmp_path), "--arch", "mlp",
                         "--epochs", "1", "--check"])
        report = json.loads((tmp_path / "train-victim.json").read_text())
        checks = report["checks"] + report["timing"]["checks"]
        assert len(checks) == 2
        assert code == (0 if all(c["passed"] for c in checks) else 1)
        trained = models.TrainedModel.load(tmp_path / "victims" / "mlp-seed0.xlab")
        assert trained.test_accuracy == report["summary"]["mlp"]
        assert (tmp_path / "victims" / "mlp-seed0.csv").read_text().startswith("epoch,train_loss,test_acc")

    @pytest.mark.parametrize("remote", [False, True])
    def test_extract(self, data_root, tmp_path, remote):
        victim = models.build("mlp", seed=4)
        ckpt = tmp_path / "victim.xlab"
        models.TrainedModel(victim).save(ckpt)
        cfg = {"method": "algorithm1", "budget": 12, "scope": 4, "attacker": "mlp", "post_train_epochs": 1,
               "eval_every": 0, "agent": {"warmup": 4, "batch_size": 4}, "victim": str(ckpt),
               "data_root": str(data_root), "pool_size": 5}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        args = ["extract", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "out"),
                "--dump-transfer-set", str(tmp_path / "dt")]
        if remote:
            with OracleServer(Oracle(victim, 12)) as server:
                host, port = server.address
                assert cli.main(args + ["--oracle", f"{host}:{port}"]) == 0
        else:
            assert cli.main(args) == 0
        images = read_idx(tmp_path / "dt-images.idx")
        labels = read_idx(tmp_path / "dt-labels.idx")
        assert images.shape == (12, 1, 28, 28) and labels.shape == (12, 10)
        np.testing.assert_allclose(labels, softmax_np(victim.logits(images)), atol=1e-6)
        assert (tmp_path / "out" / "result.json").exists()

    def test_local_extract_needs_victim(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"budget": 5, "scope": 2}))
        assert cli.main(["extract", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2


def test_gzip_detection_ignores_suffix(tmp_path):
    raw = idx_bytes(np.arange(4, dtype=np.uint8))
    (tmp_path / "plain.gz").write_bytes(raw)
    (tmp_path / "packed").write_bytes(gzip.compress(raw))
    np.testing.assert_array_equal(read_idx(tmp_path / "plain.gz"), read_idx(tmp_path / "packed"))


def test_serve_oracle_subprocess(tmp_path):
    import subprocess
    import sys

    from xlab.oracle import BudgetExhausted, RemoteOracle

    victim = models.build("mlp", seed=6)
    models.TrainedModel(victim).save(tmp_path / "v.xlab")
    proc = subprocess.Popen([sys.executable, "-m", "xlab.cli", "serve-oracle", "--checkpoint", str(tmp_path / "v.xlab"),
                             "--budget", "3", "--listen", "127.0.0.1:0"], stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("serving on ")
        client = RemoteOracle(line.split()[2])
        x = np.random.default_rng(0).random((3, 1, 28, 28), dtype=np.float32)
        assert client.query(x).tobytes() == Oracle(victim, 3).query(x).tobytes()
        with pytest.raises(BudgetExhausted):
            client.query(x[:1])
        client.close()
    finally:
        proc.terminate()
        proc.wait(timeout=10)
