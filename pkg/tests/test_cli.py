import json

import numpy as np
import pytest

from hashkv.cli import load_config, main, run_bench
from hashkv.hashers import MlpHasher, load_hasher
from hashkv.synthkv import read_dump


@pytest.fixture
def small_dump(tmp_path):
    path = tmp_path / "qk.splq"
    assert main(["generate", "--n", "256", "--dim", "32", "--out", str(path)]) == 0
    return path


def read_jsonl(path):
    return [json.loads(line) for line in open(path)]


class TestGenerate:
    def test_defaults(self, tmp_path, capsys):
        out = tmp_path / "d.splq"
        assert main(["generate", "--out", str(out)]) == 0
        dump = read_dump(out)
        assert (dump.n_queries, dump.n_keys, dump.d) == (2048, 2048, 128)
        assert "intra-cone mean cosine" in capsys.readouterr().out
        meta = json.loads(open(f"{out}.meta.json").read())
        assert meta["seed"] == 0 and len(meta["config_hash"]) == 16

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for p in (a, b):
            main(["generate", "--n", "64", "--dim", "32", "--seed", "4", "--out", str(p)])
        assert a.read_bytes() == b.read_bytes()
        main(["generate", "--n", "64", "--dim", "32", "--seed", "5", "--out", str(b)])
        assert a.read_bytes() != b.read_bytes()

    def test_narrow_spread(self, tmp_path):
        out = tmp_path / "n.splq"
        main(["generate", "--n", "512", "--dim", "64", "--spread", "0.01", "--out", str(out)])
        meta = json.loads(open(f"{out}.meta.json").read())
        assert meta["intra_cos_mean"] > 0.999

    def test_unwritable(self, tmp_path):
        assert main(["generate", "--n", "8", "--dim", "32", "--out", str(tmp_path / "no" / "x")]) == 2


class TestTrain:
    def test_zero_iters_is_init(self, tmp_path, small_dump):
        ckpt = tmp_path / "h.splh"
        rc = main(["train", "--data", str(small_dump), "--iters", "0", "--bits", "32", "--hidden", "16",
                   "--seed", "3", "--out", str(ckpt), "--report", str(tmp_path / "r.jsonl")])
        assert rc == 0
        init = MlpHasher.init(32, 16, 32, seed=3)
        trained = load_hasher(ckpt)
        for name, value in init.params().items():
            np.testing.assert_array_equal(trained.params()[name], value)

    @pytest.mark.parametrize("loss", ["rank", "recon"])
    def test_report_and_trend(self, tmp_path, small_dump, capsys, loss):
        report = tmp_path / "r.jsonl"
        rc = main(["train", "--data", str(small_dump), "--iters", "120", "--bits", "32",
                   "--hidden", "32", "--seq-len", "256", "--loss", loss, "--lr", "0.01",
                   "--out", str(tmp_path / "h.splh"), "--report", str(report)])
        assert rc == 0
        lines = read_jsonl(report)
        assert lines[0]["provenance"]["seed"] == 0
        records = lines[1:]
        assert len(records) == 120
        assert set(records[0]) == {"iter", "loss", "violation_rate", "lr"}
        losses = np.array([r["loss"] for r in records])
        assert losses[-512:].mean() < losses[:32].mean()
        assert "(falling)" in capsys.readouterr().out

    def test_linear_and_downproj(self, tmp_path, small_dump):
        for kind in ("linear", "downproj"):
            ckpt = tmp_path / f"{kind}.splh"
            rc = main(["train", "--data", str(small_dump), "--hasher", kind, "--bits", "32",
                       "--iters", "5", "--seq-len", "128", "--out", str(ckpt),
                       "--report", str(tmp_path / "r.jsonl")])
            assert rc == 0
            assert load_hasher(ckpt).name == kind

    def test_missing_data(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "h")]) == 1
        assert main(["train", "--data", str(tmp_path / "missing.splq")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort(self, tmp_path):
        from hashkv.synthkv import write_dump

        q = np.full((64, 32), 3e38, np.float32)  # first layer overflows
        path = tmp_path / "huge.splq"
        write_dump(path, q, q)
        rc = main(["train", "--data", str(path), "--iters", "3", "--bits", "32", "--hidden", "8",
                   "--query-subsample", "8", "--out", str(tmp_path / "h"), "--report", str(tmp_path / "r")])
        assert rc == 3

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--loss", "mse"])
        assert exc.value.code == 1


class TestEval:
    def test_oracle_row(self, tmp_path, small_dump, capsys):
        out = tmp_path / "e.jsonl"
        assert main(["eval", "--data", str(small_dump), "--methods", "oracle", "--out", str(out)]) == 0
        lines = read_jsonl(out)
        assert lines[1]["budget"] == 20
        assert lines[2]["method"] == "oracle" and lines[2]["mean_iou"] == 1.0
        assert "oracle" in capsys.readouterr().out

    def test_budget_arithmetic(self, tmp_path):
        dump = tmp_path / "d.splq"
        main(["generate", "--n", "2048", "--dim", "32", "--out", str(dump)])
        out = tmp_path / "e.jsonl"
        main(["eval", "--data", str(dump), "--budget-rate", "0.02", "--out", str(out)])
        assert read_jsonl(out)[1]["budget"] == 40

    def test_deterministic_bytes(self, tmp_path, small_dump):
        ckpt = tmp_path / "h.splh"
        main(["train", "--data", str(small_dump), "--iters", "5", "--bits", "32", "--hidden", "8",
              "--seq-len", "128", "--out", str(ckpt), "--report", str(tmp_path / "r.jsonl")])
        outputs = []
        out, csv = tmp_path / "e.jsonl", tmp_path / "q.csv"
        for _ in range(2):
            rc = main(["eval", "--data", str(small_dump), "--methods", "oracle,lsh,mlp",
                       "--checkpoint", f"mlp={ckpt}", "--out", str(out), "--csv", str(csv)])
            assert rc == 0
            outputs.append((out.read_bytes(), csv.read_bytes()))
        assert outputs[0] == outputs[1]
        csv_lines = outputs[0][1].decode().splitlines()
        assert csv_lines[0].startswith("# config_hash=")
        assert csv_lines[1] == "query,oracle,lsh,mlp"
        assert len(csv_lines) == 2 + 256

    def test_missing_checkpoint(self, tmp_path, small_dump):
        assert main(["eval", "--data", str(small_dump), "--methods", "mlp"]) == 1
        rc = main(["eval", "--data", str(small_dump), "--methods", "mlp",
                   "--checkpoint", f"mlp={tmp_path / 'nope.splh'}"])
        assert rc == 2


class TestConfigFile:
    def test_file_then_flags(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[global]\nseed = 7\n[generate]\nn = 100\n[loss]\nmax_oth = none\n")
        cfg = load_config(str(ini), {"generate": {"n": 50, "out": None}})
        assert cfg["global"]["seed"] == 7
        assert cfg["generate"]["n"] == 50
        assert cfg["generate"]["out"] == "qk.splq"
        assert cfg["loss"]["max_oth"] is None

    def test_unknown_key(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[generate]\ncount = 3\n")
        assert main(["generate", "--config", str(ini)]) == 1

    def test_config_drives_command(self, tmp_path):
        ini = tmp_path / "c.ini"
        out = tmp_path / "g.splq"
        ini.write_text(f"[cone]\ndim = 32\n[generate]\nn = 40\nout = {out}\n")
        assert main(["generate", "--config", str(ini)]) == 0
        assert read_dump(out).n_keys == 40


class TestBench:
    def test_rows(self, tmp_path, capsys):
        out = tmp_path / "b.jsonl"
        rc = main(["bench", "--sizes", "1024,4096", "--trials", "3", "--warmup", "1", "--out", str(out)])
        assert rc == 0
        rows = read_jsonl(out)[1:]
        assert [(r["op"], r["n"]) for r in rows] == [
            ("pack_bits", 1024), ("nxor_scores+top_k", 1024),
            ("pack_bits", 4096), ("nxor_scores+top_k", 4096),
        ]
        assert all(r["median_us"] > 0 and r["comparable_to_gpu_kernel"] is False for r in rows)
        assert "not comparable" in capsys.readouterr().out

    def test_trial_count_validated(self):
        with pytest.raises(Exception):
            run_bench([64], trials=0)
