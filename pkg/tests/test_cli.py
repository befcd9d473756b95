import json
import os

import pytest

from bpe import save_merges, save_vocab
from cli import main
from config import CONFIG_DIR, DistillSection
from corpus import read_tsv, write_tsv
from distill import encoder_config
from transformer import build_model, preset, save_model


def read_json_file(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return str(path)


@pytest.fixture
def synth_tsv(tmp_path, synth64):
    path = tmp_path / "synth.tsv"
    write_tsv(str(path), synth64)
    return str(path)


@pytest.fixture
def segmentation_files(tmp_path, synth_segmentation):
    bpe, vocab = synth_segmentation
    merges, vocab_path = str(tmp_path / "merges.bpe"), str(tmp_path / "vocab.txt")
    save_merges(merges, bpe)
    save_vocab(vocab_path, vocab)
    return merges, vocab_path


class TestEvaluateCommand:

    def test_identical_files_score_100(self, tmp_path):
        lines = ["a ka di n ye kosɛbɛ", "ne bɛ taa sugu la sini"]
        hyp = write_lines(tmp_path / "hyp.txt", lines)
        ref = write_lines(tmp_path / "ref.txt", lines)
        out = tmp_path / "eval"
        assert main(["evaluate", "--hyp", hyp, "--ref", ref, "--out", str(out), "--quiet"]) == 0
        assert read_json_file(out / "report.json")["bleu_percent"] == pytest.approx(100.0)
        summary = read_json_file(out / "summary.json")
        assert summary["status"] == "OK"
        assert summary["outputs"]["bleu"] == pytest.approx(100.0)
        assert os.path.exists(out / "resolved_config.json")

    def test_named_benchmarks(self, tmp_path):
        a = write_lines(tmp_path / "a.txt", ["x y z w"])
        b = write_lines(tmp_path / "b.txt", ["x y z w"])
        out = tmp_path / "eval"
        assert main(["evaluate", "--bench", f"own={a}:{b}", "--bench", f"flores={a}:{b}",
                     "--out", str(out), "--quiet"]) == 0
        rows = read_json_file(out / "benchmark.json")
        assert [r["benchmark"] for r in rows] == ["own", "flores"]

    def test_nothing_to_score(self, tmp_path, capsys):
        assert main(["evaluate", "--out", str(tmp_path / "eval"), "--quiet"]) == 2
        assert json.loads(capsys.readouterr().err)["error"] == "MissingInputError"


class TestErrors:

    def test_missing_token_batch_size(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"train": {"epochs": 1}}), encoding="utf-8")
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--quiet"])
        assert code == 3
        payload = json.loads(capsys.readouterr().err)
        assert payload["error"] == "ConfigError"
        assert "token_batch_size" in payload["message"]
        assert payload["exit_code"] == 3

    def test_train_without_train_section(self, tmp_path, capsys, synth_tsv):
        out = tmp_path / "run"
        assert main(["train", "--train", synth_tsv, "--out", str(out), "--quiet"]) == 3
        assert "token_batch_size" in json.loads(capsys.readouterr().err)["message"]
        assert read_json_file(out / "summary.json")["status"] == "ERROR"

    def test_missing_input_file(self, tmp_path, capsys):
        out = tmp_path / "split"
        assert main(["split", "--input", str(tmp_path / "absent.tsv"), "--out", str(out), "--quiet"]) == 2
        summary = read_json_file(out / "summary.json")
        assert summary["status"] == "ERROR"
        assert summary["success"] is False
        assert json.loads(capsys.readouterr().err)["stage"] == "split"

    def test_bad_override(self, tmp_path, capsys):
        assert main(["synth", "--set", "synth.n", "--out", str(tmp_path / "s"), "--quiet"]) == 3


class TestCorpusCommands:

    def test_synth(self, tmp_path):
        out = tmp_path / "synth"
        assert main(["synth", "--seed", "1", "--out", str(out), "--quiet"]) == 0
        data, _ = read_tsv(str(out / "synth.tsv"))
        assert len(data) == 64
        assert len(read_json_file(out / "lexicon.json")) == 20
        assert read_json_file(out / "resolved_config.json")["seed"] == 1

    def test_synth_flags(self, tmp_path):
        out = tmp_path / "synth"
        assert main(["synth", "--n", "10", "--vocab-size", "8", "--out", str(out), "--quiet"]) == 0
        assert len(read_tsv(str(out / "synth.tsv"))[0]) == 10

    def test_preprocess_matches_golden(self, tmp_path, preprocess_fixture, fixture_dir):
        out = tmp_path / "pre"
        assert main(["preprocess", "--input", preprocess_fixture, "--out", str(out), "--quiet"]) == 0
        golden = os.path.join(fixture_dir, "preprocess_golden.tsv")
        with open(golden, "rb") as f:
            assert (out / "clean.tsv").read_bytes() == f.read()
        assert os.path.exists(out / "instructions.jsonl")

    def test_split(self, tmp_path, synth_tsv):
        out = tmp_path / "split"
        assert main(["split", "--input", synth_tsv, "--out", str(out), "--quiet"]) == 0
        sizes = read_json_file(out / "summary.json")["outputs"]["sizes"]
        assert sum(sizes.values()) == 64
        assert os.path.exists(out / "corpus_stats.csv")

    def test_bpe_learn_apply_decode(self, tmp_path, synth_tsv, synth64):
        learned, applied, decoded = tmp_path / "learn", tmp_path / "apply", tmp_path / "decode"
        assert main(["bpe-learn", "--input", synth_tsv, "--set", "bpe.num_merges=20",
                     "--out", str(learned), "--quiet"]) == 0
        assert read_json_file(learned / "summary.json")["outputs"]["merges_learned"] == 20

        text = write_lines(tmp_path / "src.txt", synth64.sources)
        assert main(["bpe-apply", "--input", text, "--merges", str(learned / "merges.bpe"),
                     "--out", str(applied), "--quiet"]) == 0
        assert main(["bpe-apply", "--decode", "--input", str(applied / "segmented.txt"),
                     "--out", str(decoded), "--quiet"]) == 0
        assert (decoded / "segmented.txt").read_text(encoding="utf-8").splitlines() == synth64.sources


class TestModelCommands:

    def test_translate_text(self, tmp_path, synth_segmentation, segmentation_files):
        _, vocab = synth_segmentation
        merges, vocab_path = segmentation_files
        ckpt = str(tmp_path / "m.ckpt")
        save_model(ckpt, build_model(preset("T1-quarter", len(vocab), max_len=16), seed=0), vocab.hash())
        out = tmp_path / "tr"
        assert main(["translate", "--checkpoint", ckpt, "--merges", merges, "--vocab", vocab_path,
                     "--text", "bonjour", "--beam", "2", "--out", str(out), "--quiet"]) == 0
        assert len((out / "translations.txt").read_text(encoding="utf-8").splitlines()) == 1
        assert read_json_file(out / "summary.json")["outputs"]["beam_width"] == 2

    def test_translate_vocab_mismatch(self, tmp_path, synth_segmentation, segmentation_files, capsys):
        _, vocab = synth_segmentation
        merges, vocab_path = segmentation_files
        ckpt = str(tmp_path / "m.ckpt")
        save_model(ckpt, build_model(preset("T1-quarter", len(vocab), max_len=16), seed=0), "0" * 64)
        code = main(["translate", "--checkpoint", ckpt, "--merges", merges, "--vocab", vocab_path,
                     "--text", "bonjour", "--out", str(tmp_path / "tr"), "--quiet"])
        assert code == 1
        assert json.loads(capsys.readouterr().err)["error"] == "IntegrityError"

    def test_analyze(self, tmp_path, synth_tsv, synth64, synth_segmentation, segmentation_files):
        _, vocab = synth_segmentation
        merges, vocab_path = segmentation_files
        ckpt = str(tmp_path / "enc.ckpt")
        save_model(ckpt, build_model(encoder_config(DistillSection(max_len=32), len(vocab)), seed=0), vocab.hash())
        fr = write_lines(tmp_path / "fr.txt", synth64.sources[:10])
        bm = write_lines(tmp_path / "bm.txt", synth64.targets[:10])
        out = tmp_path / "an"
        assert main(["analyze", "--checkpoint", ckpt, "--merges", merges, "--vocab", vocab_path,
                     "--inputs", f"fr={fr}", "--inputs", f"bm={bm}", "--pairs", synth_tsv,
                     "--out", str(out), "--quiet"]) == 0
        outputs = read_json_file(out / "summary.json")["outputs"]
        assert outputs["pca"]["points"] == 20
        assert outputs["cosine"]["n_pairs"] == 64
        assert os.path.exists(out / "pca.csv") and os.path.exists(out / "cosine_hist.json")


@pytest.mark.slow
def test_end_to_end_synthetic(tmp_path):
    config = os.path.join(CONFIG_DIR, "t1_tiny.json")
    synth, run, ev = tmp_path / "synth", tmp_path / "train", tmp_path / "eval"
    assert main(["synth", "--config", config, "--out", str(synth), "--quiet"]) == 0
    data = str(synth / "synth.tsv")
    assert main(["train", "--config", config, "--train", data, "--valid", data, "--out", str(run), "--quiet"]) == 0
    assert os.path.exists(run / "best.ckpt") and os.path.exists(run / "history.jsonl")
    assert main(["evaluate", "--config", config, "--test", data, "--checkpoint", str(run / "best.ckpt"),
                 "--merges", str(run / "merges.bpe"), "--vocab", str(run / "vocab.txt"),
                 "--out", str(ev), "--quiet"]) == 0
    assert read_json_file(ev / "report.json")["bleu_percent"] >= 90.0
