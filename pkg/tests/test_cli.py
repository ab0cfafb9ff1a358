"""Command-line surface: artifacts, generation modes, config handling, errors."""

from __future__ import annotations

import csv
import re
import signal
import subprocess
import sys
import time

import pytest
from click.testing import CliRunner

from offsetlm import BigramTableModel, Server, SocketServer, TinyNeuralLM, load_adapter, load_model
from offsetlm.cli import main

RESULT_RE = re.compile(r"^record=result mode=(?P<mode>\S+) tokens=(?P<tokens>[\d,]*)$")


@pytest.fixture(scope="module")
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corpus_path(workdir):
    path = workdir / "corpus.txt"
    lines = []
    for start in (3, 4, 5, 6, 7):
        cycle = [3, 4, 5, 6, 7]
        k = cycle.index(start)
        doc = [cycle[(k + i) % 5] for i in range(12)]
        lines.append(" ".join(str(t) for t in doc))
    path.write_text("\n".join(lines * 3) + "\n")
    return path


@pytest.fixture(scope="module")
def blackbox_path(runner, workdir, corpus_path):
    out = workdir / "blackbox.prdm"
    result = runner.invoke(main, [
        "fit-blackbox", "--corpus", str(corpus_path), "--out", str(out),
        "--arch", "bigram", "--vocab-size", "8", "--eos-id", "1", "--bos-id", "2",
    ])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def base_proxy_path(runner, workdir, corpus_path):
    out = workdir / "base.prdm"
    result = runner.invoke(main, [
        "fit-blackbox", "--corpus", str(corpus_path), "--out", str(out),
        "--arch", "neural", "--vocab-size", "8", "--eos-id", "1", "--bos-id", "2",
        "--context", "2", "--embed-dim", "4", "--hidden-dim", "6", "--epochs", "2",
    ])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def adapter_path(runner, workdir, corpus_path, base_proxy_path):
    out = workdir / "adapter.prdl"
    result = runner.invoke(main, [
        "train-proxy", "--base", str(base_proxy_path), "--corpus", str(corpus_path),
        "--out", str(out), "--rank", "2", "--epochs", "3", "--lr", "0.1",
    ])
    assert result.exit_code == 0, result.output
    return out


def result_tokens(output: str) -> list[int]:
    for line in output.splitlines():
        m = RESULT_RE.match(line)
        if m:
            return [int(t) for t in m.group("tokens").split(",") if t]
    raise AssertionError(f"no result record in output:\n{output}")


class TestFitBlackbox:
    def test_bigram_record_and_artifact(self, runner, workdir, corpus_path):
        out = workdir / "bb2.prdm"
        result = runner.invoke(main, [
            "fit-blackbox", "--corpus", str(corpus_path), "--out", str(out),
            "--arch", "bigram", "--vocab-size", "8", "--eos-id", "1", "--bos-id", "2",
            "--alpha", "0.5",
        ])
        assert result.exit_code == 0, result.output
        m = re.match(
            r"record=model path=(\S+) arch=bigram fingerprint=([0-9a-f]{16})",
            result.output.strip(),
        )
        assert m is not None, result.output
        model = load_model(out)
        assert isinstance(model, BigramTableModel)
        assert f"{model.fingerprint():016x}" == m.group(2)
        assert model.alpha == 0.5

    def test_neural_arch(self, base_proxy_path):
        model = load_model(base_proxy_path)
        assert isinstance(model, TinyNeuralLM)
        assert (model.context, model.embed_dim, model.hidden_dim) == (2, 4, 6)

    def test_flags_beat_config_file(self, runner, workdir, corpus_path):
        cfg = workdir / "fit.cfg"
        cfg.write_text("alpha=9.0\nvocab_size=8\neos_id=1\nbos_id=2\n")
        out = workdir / "bb3.prdm"
        result = runner.invoke(main, [
            "fit-blackbox", "--corpus", str(corpus_path), "--out", str(out),
            "--config", str(cfg), "--alpha", "2.0",
        ])
        assert result.exit_code == 0, result.output
        assert load_model(out).alpha == 2.0

    def test_config_file_beats_defaults(self, runner, workdir, corpus_path):
        cfg = workdir / "fit2.cfg"
        cfg.write_text("alpha=3.0\nvocab_size=8\neos_id=1\nbos_id=2\n")
        out = workdir / "bb4.prdm"
        result = runner.invoke(main, [
            "fit-blackbox", "--corpus", str(corpus_path), "--out", str(out),
            "--config", str(cfg),
        ])
        assert result.exit_code == 0, result.output
        assert load_model(out).alpha == 3.0

    def test_bad_corpus_token_is_reported(self, runner, workdir):
        bad = workdir / "bad.txt"
        bad.write_text("3 4 99\n")
        result = runner.invoke(main, [
            "fit-blackbox", "--corpus", str(bad), "--out", str(workdir / "x.prdm"),
            "--vocab-size", "8", "--eos-id", "1", "--bos-id", "2",
        ])
        assert result.exit_code != 0
        assert "error code=" in result.stderr


class TestTrainProxy:
    def test_record_reports_losses(self, runner, workdir, corpus_path, base_proxy_path):
        out = workdir / "a2.prdl"
        result = runner.invoke(main, [
            "train-proxy", "--base", str(base_proxy_path), "--corpus", str(corpus_path),
            "--out", str(out), "--rank", "2", "--epochs", "2",
        ])
        assert result.exit_code == 0, result.output
        m = re.match(
            r"record=train path=\S+ rank=2 epochs=2 "
            r"initial_loss=([\d.]+) final_loss=([\d.]+)",
            result.output.strip(),
        )
        assert m is not None, result.output
        assert float(m.group(2)) < float(m.group(1))
        assert load_adapter(out).rank == 2

    def test_bigram_base_is_rejected(self, runner, workdir, corpus_path, blackbox_path):
        result = runner.invoke(main, [
            "train-proxy", "--base", str(blackbox_path), "--corpus", str(corpus_path),
            "--out", str(workdir / "nope.prdl"),
        ])
        assert result.exit_code != 0
        assert 'error code=bad-base msg="' in result.stderr


class TestGenerate:
    def invoke_mode(self, runner, mode, blackbox_path, base_proxy_path, adapter_path,
                    extra=()):
        args = [
            "generate", "--mode", mode, "--prompt", "3 4",
            "--blackbox", str(blackbox_path), "--max-new-tokens", "10",
        ]
        if mode != "api":
            args += ["--base-proxy", str(base_proxy_path), "--adapter", str(adapter_path)]
        return runner.invoke(main, args + list(extra))

    def test_all_modes_run_and_adapted_modes_agree(
        self, runner, blackbox_path, base_proxy_path, adapter_path
    ):
        outputs = {}
        for mode in ("api", "prada", "prada-sd", "prada-transfer"):
            result = self.invoke_mode(runner, mode, blackbox_path, base_proxy_path, adapter_path)
            assert result.exit_code == 0, f"{mode}: {result.output}\n{result.stderr}"
            assert f"record=result mode={mode} " in result.output
            outputs[mode] = result_tokens(result.output)
        assert outputs["prada"] == outputs["prada-sd"] == outputs["prada-transfer"]
        assert len(outputs["api"]) == 10

    def test_report_lines_are_machine_parseable(
        self, runner, blackbox_path, base_proxy_path, adapter_path
    ):
        result = self.invoke_mode(runner, "prada-sd", blackbox_path, base_proxy_path, adapter_path)
        lines = result.output.strip().splitlines()
        kinds = {line.split()[0] for line in lines}
        assert kinds == {
            "record=result", "record=ledger_bytes", "record=ledger_counter",
            "record=ledger_ratio", "record=latency",
        }
        for line in lines:
            for part in line.split():
                assert re.match(r"^[\w=.,:-]+$", part) and "=" in part, line

    def test_report_file_matches_stdout(
        self, runner, tmp_path, blackbox_path, base_proxy_path, adapter_path
    ):
        report = tmp_path / "run.report"
        result = self.invoke_mode(
            runner, "prada", blackbox_path, base_proxy_path, adapter_path,
            extra=["--report", str(report)],
        )
        assert result.exit_code == 0
        assert report.read_text() == result.output

    def test_api_mode_never_touches_proxy_loading(
        self, runner, blackbox_path, base_proxy_path, adapter_path, monkeypatch
    ):
        import offsetlm.cli as cli_mod

        def boom(*args, **kwargs):  # pragma: no cover - would mean api loaded proxies
            raise AssertionError("api mode must not load proxy models")

        monkeypatch.setattr(cli_mod, "_load_proxy_models", boom)
        result = runner.invoke(main, [
            "generate", "--mode", "api", "--prompt", "3 4",
            "--blackbox", str(blackbox_path), "--max-new-tokens", "5",
            # the flags may be present; api mode must still ignore them
            "--base-proxy", str(base_proxy_path), "--adapter", str(adapter_path),
        ])
        assert result.exit_code == 0, result.stderr

    def test_stochastic_is_reproducible_per_seed(
        self, runner, blackbox_path, base_proxy_path, adapter_path
    ):
        extra = ["--sampling", "stochastic", "--temperature", "0.9", "--seed", "11"]
        a = self.invoke_mode(runner, "prada", blackbox_path, base_proxy_path, adapter_path, extra)
        b = self.invoke_mode(runner, "prada", blackbox_path, base_proxy_path, adapter_path, extra)
        c = self.invoke_mode(
            runner, "prada", blackbox_path, base_proxy_path, adapter_path,
            ["--sampling", "stochastic", "--temperature", "0.9", "--seed", "12"],
        )
        assert result_tokens(a.output) == result_tokens(b.output)
        assert result_tokens(a.output) != result_tokens(c.output)

    def test_config_file_supplies_prompt_and_mode(
        self, runner, tmp_path, blackbox_path, base_proxy_path, adapter_path
    ):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text(
            f"mode=prada\nprompt=3 4\nmax_new_tokens=6\n"
            f"base_proxy={base_proxy_path}\nadapter={adapter_path}\n"
        )
        result = runner.invoke(main, [
            "generate", "--config", str(cfg), "--blackbox", str(blackbox_path),
        ])
        assert result.exit_code == 0, result.stderr
        assert len(result_tokens(result.output)) == 6

    def test_prompt_flag_beats_config_prompt(
        self, runner, tmp_path, blackbox_path, base_proxy_path, adapter_path
    ):
        cfg = tmp_path / "gen2.cfg"
        cfg.write_text("prompt=7 7 7\n")
        with_flag = runner.invoke(main, [
            "generate", "--mode", "prada", "--config", str(cfg), "--prompt", "3 4",
            "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path),
            "--adapter", str(adapter_path), "--max-new-tokens", "4",
        ])
        from_cfg = runner.invoke(main, [
            "generate", "--mode", "prada", "--config", str(cfg),
            "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path),
            "--adapter", str(adapter_path), "--max-new-tokens", "4",
        ])
        flag_direct = runner.invoke(main, [
            "generate", "--mode", "prada", "--prompt", "3 4",
            "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path),
            "--adapter", str(adapter_path), "--max-new-tokens", "4",
        ])
        cfg_direct = runner.invoke(main, [
            "generate", "--mode", "prada", "--prompt", "7 7 7",
            "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path),
            "--adapter", str(adapter_path), "--max-new-tokens", "4",
        ])
        assert result_tokens(with_flag.output) == result_tokens(flag_direct.output)
        assert result_tokens(from_cfg.output) == result_tokens(cfg_direct.output)

    @pytest.mark.parametrize(
        "args,code",
        [
            (["generate", "--mode", "prada", "--blackbox", "IGNORED"], "bad-prompt"),
            (["generate", "--prompt", "3"], "bad-mode"),
            (["generate", "--mode", "api", "--prompt", "3"], "bad-endpoint"),
            (["generate", "--mode", "api", "--prompt", "3", "--connect", "nonsense"], "bad-endpoint"),
            (["generate", "--mode", "api", "--prompt", "3", "--connect", "h:9"], "bad-vocab"),
            (["generate", "--mode", "prada", "--prompt", "3", "--blackbox", "IGNORED"], "missing-proxy"),
        ],
    )
    def test_error_codes(self, runner, blackbox_path, args, code):
        args = [str(blackbox_path) if a == "IGNORED" else a for a in args]
        result = runner.invoke(main, args)
        assert result.exit_code != 0
        assert f"error code={code} msg=\"" in result.stderr, result.stderr


class TestServeAndConnect:
    def test_generate_against_a_live_server(
        self, runner, blackbox_path, base_proxy_path, adapter_path
    ):
        blackbox = load_model(blackbox_path)
        with SocketServer(Server(blackbox, load_model(base_proxy_path))) as srv:
            host, port = srv.address
            in_process = runner.invoke(main, [
                "generate", "--mode", "prada-sd", "--prompt", "3 4",
                "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path),
                "--adapter", str(adapter_path), "--max-new-tokens", "8",
            ])
            over_socket = runner.invoke(main, [
                "generate", "--mode", "prada-sd", "--prompt", "3 4",
                "--connect", f"{host}:{port}", "--base-proxy", str(base_proxy_path),
                "--adapter", str(adapter_path), "--max-new-tokens", "8",
            ])
            api_socket = runner.invoke(main, [
                "generate", "--mode", "api", "--prompt", "3 4",
                "--connect", f"{host}:{port}", "--max-new-tokens", "8",
                "--vocab-size", "8", "--eos-id", "1", "--bos-id", "2",
            ])
        assert over_socket.exit_code == 0, over_socket.stderr
        assert api_socket.exit_code == 0, api_socket.stderr
        assert result_tokens(over_socket.output) == result_tokens(in_process.output)
        assert len(result_tokens(api_socket.output)) == 8

    def test_serve_command_prints_endpoint_and_serves(
        self, blackbox_path, base_proxy_path, adapter_path, runner
    ):
        proc = subprocess.Popen(
            [sys.executable, "-m", "offsetlm.cli", "serve",
             "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path)],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        try:
            line = proc.stdout.readline().strip()
            m = re.match(r"record=serve host=(\S+) port=(\d+)", line)
            assert m is not None, line
            result = runner.invoke(main, [
                "generate", "--mode", "prada-transfer", "--prompt", "3 4",
                "--connect", f"{m.group(1)}:{m.group(2)}",
                "--base-proxy", str(base_proxy_path), "--adapter", str(adapter_path),
                "--max-new-tokens", "6",
            ])
            assert result.exit_code == 0, result.stderr
            assert len(result_tokens(result.output)) == 6
        finally:
            proc.send_signal(signal.SIGINT)
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=10)


class TestBench:
    def test_sweep_rows_and_csv(self, runner, tmp_path, blackbox_path, base_proxy_path,
                                adapter_path):
        out_csv = tmp_path / "bench.csv"
        result = runner.invoke(main, [
            "bench", "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path),
            "--adapter", str(adapter_path), "--prompt", "3 4",
            "--modes", "api,prada,prada-sd,prada-transfer", "--draft-lens", "2,4",
            "--max-new-tokens", "12", "--csv", str(out_csv),
        ])
        assert result.exit_code == 0, result.stderr
        rows = [l for l in result.output.splitlines() if l.startswith("record=bench ")]
        assert len(rows) == 5  # api, prada, prada-sd x2, prada-transfer
        with open(out_csv, newline="") as fh:
            parsed = list(csv.DictReader(fh))
        assert len(parsed) == 5
        by_key = {(r["mode"], r["draft_len"]): r for r in parsed}
        assert float(by_key[("prada", "1")]["ms_per_token"]) > 0
        # speculative rounds never exceed the per-token round count
        assert int(by_key[("prada-sd", "4")]["rounds"]) < int(by_key[("prada", "1")]["rounds"])
        assert int(by_key[("prada-transfer", "0")]["model_bytes"]) > 0
        assert int(by_key[("api", "0")]["model_bytes"]) == 0

    def test_unknown_mode_rejected(self, runner, blackbox_path, base_proxy_path, adapter_path):
        result = runner.invoke(main, [
            "bench", "--blackbox", str(blackbox_path), "--base-proxy", str(base_proxy_path),
            "--adapter", str(adapter_path), "--prompt", "3", "--modes", "api,warp",
        ])
        assert result.exit_code != 0
        assert "error code=bad-mode" in result.stderr
