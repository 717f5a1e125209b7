#!/usr/bin/env python3
"""
Tests for cli.py

Runs the subcommands in-process through run() and checks exit statuses, the
stderr error line and the files each step leaves behind.
"""
import re

from lstransducer.cli import exit_code_for, run
from lstransducer.dataset import read_dataset, read_text_corpus
from lstransducer.decoder import read_nbest
from lstransducer.errors import ConfigError, ContractError, DataError, NumericError

TINY = [
    "--set", "vocab_size=8", "--set", "feat_dim=4", "--set", "encoder_dim=8",
    "--set", "model_dim=8", "--set", "query_dim=8", "--set", "ff_dim=16",
    "--set", "encoder_layers=1", "--set", "pred_layers=2", "--set", "pred_tap_layer=1",
    "--set", "min_tokens=2", "--set", "max_tokens=3",
]


def _synth(tmp_path, name="data.txt", count=4, extra=()):
    path = tmp_path / name
    assert run(["synth", "--out", str(path), "--count", str(count)] + TINY + list(extra)) == 0
    return path


class TestErrors:
    """Test exit statuses and the error line."""

    def test_exit_codes(self):
        assert exit_code_for(DataError("x")) == 3
        assert exit_code_for(NumericError("x")) == 4
        assert exit_code_for(ConfigError("x")) == 2
        assert exit_code_for(ContractError("x")) == 2

    def test_unknown_config_key(self, capsys):
        assert run(["oracle-ctc", "--trials", "1", "--set", "lerning_rate=1"]) == 2
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err == "error kind=ConfigError message=unknown config key: lerning_rate"

    def test_missing_dataset(self, tmp_path, capsys):
        code = run(["eval", str(tmp_path / "none.txt"), str(tmp_path / "none.nbest")])
        assert code == 3
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("error kind=DataError message=dataset file not found")

    def test_bad_command_line(self, capsys):
        assert run(["train"]) == 2
        assert "error kind=UsageError message=invalid command line" in capsys.readouterr().err

    def test_invalid_value(self, tmp_path, capsys):
        code = run(["synth", "--out", str(tmp_path / "d.txt"), "--set", "gamma=3"])
        assert code == 2
        assert "gamma must be between 0 and 1" in capsys.readouterr().err


class TestCommands:
    """Test the subcommands end to end on a tiny configuration."""

    def test_synth_writes_dataset_and_text(self, tmp_path):
        text = tmp_path / "text.txt"
        data = _synth(tmp_path, count=3, extra=["--text-out", str(text), "--domain", "target"])
        utts = read_dataset(str(data))
        assert [u.domain for u in utts] == ["target"] * 3
        assert len(read_text_corpus(str(text))) == 3

    def test_eval_of_references_is_zero(self, tmp_path, capsys):
        data = _synth(tmp_path)
        nbest = tmp_path / "ref.nbest"
        lines = [f"{u.utt_id}\t1\t0.0\t0.0\t0.0\t{' '.join(map(str, u.tokens))}\t" for u in read_dataset(str(data))]
        nbest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert run(["eval", str(data), str(nbest)]) == 0
        assert "token_error_rate=0.000000" in capsys.readouterr().out

    def test_oracle(self, capsys):
        assert run(["oracle-ctc", "--trials", "20", "--max-T", "5", "--max-V", "3"]) == 0
        assert "max_abs_delta=" in capsys.readouterr().out

    def test_gradcheck(self, capsys):
        assert run(["gradcheck", "--params", "4"] + TINY) == 0
        out = capsys.readouterr().out
        assert "max_rel_error=" in out
        assert "composition" in out

    def test_train_decode_eval(self, tmp_path, capsys):
        data = _synth(tmp_path)
        run_dir = tmp_path / "run"
        train_args = ["--set", "epochs=1", "--set", "batch_size=4", "--set", "warmup_steps=0"]
        assert run(["train", str(data), "--out", str(run_dir)] + TINY + train_args) == 0
        assert (run_dir / "final.lstk").exists()
        assert (run_dir / "metrics.csv").exists()

        nbest = tmp_path / "out.nbest"
        assert run(["decode", str(run_dir), str(data), "--out", str(nbest), "--beam", "2", "--chunk-size", "3"]) == 0
        entries = read_nbest(str(nbest))
        assert sorted(entries) == sorted(u.utt_id for u in read_dataset(str(data)))
        assert all(1 <= len(e) <= 2 for e in entries.values())

        capsys.readouterr()
        assert run(["eval", str(data), str(nbest)]) == 0
        assert "token_error_rate=" in capsys.readouterr().out

    def test_greedy_decode_reports_count_error(self, tmp_path, capsys):
        """The per-seed experiment log reads the greedy n-best and the mean count error line."""
        data = _synth(tmp_path)
        run_dir = tmp_path / "run"
        train_args = ["--set", "epochs=1", "--set", "batch_size=4", "--set", "warmup_steps=0"]
        assert run(["train", str(data), "--out", str(run_dir)] + TINY + train_args) == 0
        capsys.readouterr()
        nbest = tmp_path / "greedy.nbest"
        assert run(["decode", str(run_dir), str(data), "--out", str(nbest), "--beam", "1"]) == 0
        out = capsys.readouterr().out
        assert re.search(r"Mean \|sum\(alpha\) - N\|: [0-9]+\.[0-9]{3}", out)
        assert all(len(e) == 1 for e in read_nbest(str(nbest)).values())

    def test_lm_then_adapt(self, tmp_path):
        text = tmp_path / "text.txt"
        data = _synth(tmp_path, extra=["--text-out", str(text)])
        small = TINY + ["--set", "epochs=1", "--set", "lm_epochs=1", "--set", "adapt_epochs=1",
                        "--set", "batch_size=4", "--set", "warmup_steps=0"]
        assert run(["pretrain-lm", str(text), "--out", str(tmp_path / "lm")] + small) == 0
        assert run(["train", str(data), "--out", str(tmp_path / "run"), "--lm", str(tmp_path / "lm")] + small) == 0
        assert run(["adapt", str(tmp_path / "run"), str(text), "--out", str(tmp_path / "adapted")] + small) == 0
        assert (tmp_path / "adapted" / "final.lstk").exists()
        assert run(["decode", str(tmp_path / "adapted"), str(data), "--out", str(tmp_path / "a.nbest"),
                    "--lm", str(tmp_path / "lm"), "--beam", "2"]) == 0
