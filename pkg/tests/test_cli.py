import re

import pytest
from click.testing import CliRunner

from fasterdan.cli import main
from fasterdan.net import load_checkpoint
from fasterdan.synthgen import read_corpus
from fasterdan.vocab import serialize_document

TINY = "d = 16\nlayers = 1\nheads = 2\nbatch_size = 4\nlr = 0.001\n"


def run(*args, ok=True):
    result = CliRunner().invoke(main, [str(a) for a in args])
    if ok:
        assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    run("gen", "--out", out, "--num-docs", 6, "--seed", 3)
    return out


@pytest.fixture(scope="module")
def models(tmp_path_factory, corpus):
    root = tmp_path_factory.mktemp("models")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY + "epochs = 0\n")
    paths = {}
    for mode in ("dan", "fasterdan"):
        paths[mode] = root / f"{mode}.ckpt"
        run("train", "--data", corpus, "--config", cfg, "--mode", mode, "--out", paths[mode])
    return paths


class TestGen:
    def test_zero_documents(self, tmp_path):
        run("gen", "--out", tmp_path, "--num-docs", 0)
        assert (tmp_path / "manifest.txt").read_text() == ""

    def test_same_seed_same_files(self, tmp_path):
        for name in ("a", "b"):
            run("gen", "--out", tmp_path / name, "--num-docs", 3, "--seed", 7)
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_bounds(self, tmp_path):
        run("gen", "--out", tmp_path, "--num-docs", 10, "--min-lines", 3, "--max-lines", 3,
            "--chars-per-line", "5:5", "--classes", "")
        samples, vocab = read_corpus(tmp_path)
        assert not vocab.has_layout
        assert all(len(doc.lines) == 3 and {len(x) for x in doc.lines} == {5} for _, doc in samples)

    @pytest.mark.parametrize("args", [["--num-docs", "-1"], ["--chars-per-line", "4-9"],
                                      ["--min-lines", "5", "--max-lines", "2"]])
    def test_bad_arguments(self, tmp_path, args):
        result = run("gen", "--out", tmp_path, *args, ok=False)
        assert result.exit_code == 1 and result.output.startswith("Error:")


class TestTrain:
    def test_zero_epochs_equals_initialization(self, models):
        model, meta = load_checkpoint(models["fasterdan"])
        assert meta["epochs_done"] == 0 and meta["mode"] == "fasterdan"
        assert model.cfg.d == 16

    def test_resume_matches_uninterrupted(self, tmp_path, corpus):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY + "epochs = 2\nseed = 5\n")
        run("train", "--data", corpus, "--config", cfg, "--out", tmp_path / "full.ckpt")
        run("train", "--data", corpus, "--config", cfg, "--out", tmp_path / "half.ckpt", "--stop-after", 1)
        run("train", "--data", corpus, "--config", cfg, "--out", tmp_path / "resumed.ckpt",
            "--resume", tmp_path / "half.ckpt")
        assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()
        rows = (tmp_path / "full.ckpt.csv").read_text().splitlines()
        assert rows[0].startswith("epoch,loss") and len(rows) == 3

    def test_dan_with_variant_rejected(self, tmp_path, corpus):
        result = run("train", "--data", corpus, "--mode", "dan", "--variant", "sum_pe",
                     "--out", tmp_path / "x.ckpt", ok=False)
        assert result.exit_code == 1
        assert "requires mode fasterdan" in result.output

    def test_unknown_config_key(self, tmp_path, corpus):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("warmup_steps = 3\n")
        result = run("train", "--data", corpus, "--config", cfg, "--out", tmp_path / "x", ok=False)
        assert result.exit_code == 1 and "unknown key" in result.output


class TestDecode:
    @pytest.mark.parametrize("mode", ["dan", "fasterdan"])
    def test_oracle_reproduces_truth(self, models, corpus, tmp_path, mode):
        result = run("decode", "--model", models[mode], "--image", corpus / "doc00002.pgm",
                     "--oracle", corpus / "doc00002.txt", "--dump-trace", tmp_path / "t.txt")
        samples, vocab = read_corpus(corpus)
        assert result.output.rstrip("\n") == vocab.to_string(serialize_document(samples[2][1], vocab))
        assert "invocations" in (tmp_path / "t.txt").read_text()

    def test_malformed_image(self, models, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P2\n8 32\n255\n")
        result = run("decode", "--model", models["dan"], "--image", tmp_path / "bad.pgm", ok=False)
        assert result.exit_code == 1 and "binary PGM" in result.output

    def test_off_stride_image(self, models, tmp_path):
        (tmp_path / "odd.pgm").write_bytes(b"P5\n8 33\n255\n" + bytes(8 * 33))
        result = run("decode", "--model", models["dan"], "--image", tmp_path / "odd.pgm", ok=False)
        assert result.exit_code == 1 and "stride" in result.output


class TestEval:
    def test_oracle_is_perfect(self, models, corpus, tmp_path):
        result = run("eval", "--model", models["fasterdan"], "--data", corpus, "--oracle",
                     "--csv", tmp_path / "r.csv", "--jobs", 2)
        values = dict(re.findall(r"^(\S.*?)\s+(-?[\d.]+|nan)$", result.output, re.M))
        assert {k: float(v) for k, v in values.items()} == {
            "CER": 0.0, "WER": 0.0, "first-pass CER": 0.0, "LOER": 0.0, "mAP_CER": 100.0}
        assert (tmp_path / "r.csv").read_text().splitlines()[-1] == "ALL,0.0000,0.0000,0.0000"

    def test_missing_corpus(self, models, tmp_path):
        result = run("eval", "--model", models["dan"], "--data", tmp_path, ok=False)
        assert result.exit_code == 1 and "manifest" in result.output


class TestBench:
    def test_long_lines_ratio(self, tmp_path):
        data = tmp_path / "long"
        run("gen", "--out", data, "--num-docs", 1, "--min-lines", 25, "--max-lines", 25,
            "--chars-per-line", "49:49", "--classes", "", "--max-entities", 1)
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY + "epochs = 0\n")
        for mode in ("dan", "fasterdan"):
            run("train", "--data", data, "--config", cfg, "--mode", mode, "--out", tmp_path / f"{mode}.ckpt")
        result = run("bench", "--model-dan", tmp_path / "dan.ckpt", "--model-fdan", tmp_path / "fasterdan.ckpt",
                     "--data", data, "--oracle")
        rows = {line.split()[0]: line.split() for line in result.output.splitlines() if line.split()}
        assert [float(x) for x in rows["dan"][1:4]] == [1251, 1251, 1251]
        assert [float(x) for x in rows["fasterdan"][1:4]] == [75, 76, 75]
        assert float(rows["dan"][4]) > 0 and float(rows["fasterdan"][4]) > 0
        assert "x4.0 to x5.8" in result.output

    def test_empty_manifest(self, models, tmp_path):
        run("gen", "--out", tmp_path, "--num-docs", 0)
        result = run("bench", "--model-dan", models["dan"], "--model-fdan", models["fasterdan"],
                     "--data", tmp_path, ok=False)
        assert result.exit_code == 1 and "empty manifest" in result.output
