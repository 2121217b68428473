import json
import re

import pytest

from streamreason import env
from streamreason.cli import main
from streamreason.errors import EXIT_CODES

WALL = re.compile(r'"wall_time_ms": [0-9.e+-]+')


def demo():
    return str(env.demo_script_path())


def test_run_demo_writes_ten_records(tmp_path, capsys):
    assert main(["run", "--script", demo(), "--output-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    steps = [json.loads(x) for x in lines[:-1]]
    assert len(steps) == 10
    assert [s["chunk_index"] for s in steps] == list(range(1, 11))
    for key in ("raw_text", "parsed_action", "context_len", "attention_ops", "wall_time_ms", "evicted_tokens"):
        assert key in steps[0]
    report = json.loads((tmp_path / "reward.json").read_text())
    assert report == json.loads(lines[-1])["reward"]
    assert "10 steps" in capsys.readouterr().out


def test_run_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("STREAMREASON_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["run", "--script", demo()]) == 0
    assert (tmp_path / "env_out" / "trace.jsonl").is_file()


@pytest.mark.parametrize("extra", [[], ["--baseline", "--window-chunks", "3"]])
def test_run_is_deterministic(tmp_path, extra):
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--script", demo(), "--output-dir", str(out)] + extra) == 0
        texts.append(WALL.sub("", (out / "trace.jsonl").read_text()))
    assert texts[0] == texts[1]


def test_missing_script_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--script", str(tmp_path / "nope.jsonl")])
    assert info.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_bad_script_maps_to_ingest_code(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{}\n", encoding="utf-8")
    assert main(["run", "--script", str(bad), "--output-dir", str(tmp_path)]) == EXIT_CODES["IngestError"]


def test_steer_round_trip(tmp_path):
    from streamreason.cli import load_steer, save_steer
    from streamreason.decoder import SteerBias
    ref = SteerBias.reference()
    save_steer(tmp_path / "s.json", ref)
    assert (load_steer(tmp_path / "s.json").flatten() == ref.flatten()).all()
    assert main(["run", "--script", demo(), "--steer", str(tmp_path / "s.json"),
                 "--output-dir", str(tmp_path)]) == 0


def test_verify_zero_sessions(capsys):
    assert main(["verify", "--sessions", "0"]) == 0
    assert "0 comparisons" in capsys.readouterr().out


def test_verify_small_sweep_passes(capsys):
    assert main(["verify", "--sessions", "2", "--chunks", "6", "--windows", "2,3"]) == 0
    assert "worst abs diff" in capsys.readouterr().out


def test_verify_catches_injected_fault(capsys):
    code = main(["verify", "--sessions", "2", "--chunks", "6", "--windows", "2", "--inject-fault", "0,2,1"])
    assert code == 1
    assert "MISMATCH at seed 0, chunk 2" in capsys.readouterr().err


def test_bench_context_csv(tmp_path):
    assert main(["bench-context", "--lengths", "4,6", "--window-chunks", "2", "--output-dir", str(tmp_path)]) == 0
    rows = (tmp_path / "context.csv").read_text().splitlines()
    assert rows[0] == "length,chunk,mode,context_len,attention_ops,visual_tokens,generated_tokens,bound"
    assert len(rows) == 1 + 2 * (4 + 6)


def test_bench_latency_reports_fraction(tmp_path, capsys):
    assert main(["bench-latency", "--lengths", "3", "--window-chunks", "2", "--output-dir", str(tmp_path)]) == 0
    assert "% of chunks under 500 ms" in capsys.readouterr().out
    assert (tmp_path / "latency.csv").read_text().startswith("length,chunk,mode,wall_time_ms\n")


def test_train_tiny(tmp_path):
    args = ["train", "--pool-size", "3", "--min-chunks", "3", "--max-chunks", "3", "--iterations", "2",
            "--group-size", "2", "--batch-scripts", "1", "--max-new-tokens", "12", "--think-budget", "6"]
    for name in ("a", "b"):
        assert main(args + ["--output-dir", str(tmp_path / name)]) == 0
    for f in ("train_log.jsonl", "reward_curve.txt", "steer.json"):
        assert (tmp_path / "a" / f).read_text() == (tmp_path / "b" / f).read_text()
    assert (tmp_path / "a" / "reward_curve.txt").read_text().startswith("iteration mean_reward\n")


def test_checksum_stable(capsys):
    main(["checksum"])
    first = capsys.readouterr().out
    main(["checksum"])
    assert capsys.readouterr().out == first and len(first.strip()) == 64


def test_help_lists_every_exit_code(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for name, code in EXIT_CODES.items():
        assert re.search(rf"\b{code}\s+{name}\b", out)
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)
