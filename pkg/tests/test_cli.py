import json
import subprocess
import sys
from pathlib import Path

import pytest

from geomalloc.cli import main, parse_prealloc
from geomalloc.core import GeometryConfig, parse_rendering

GOLDEN = Path(__file__).parent / "golden"

STATS_KEYS = {"config", "allocator", "spaces", "events"}
CONFIG_KEYS = {"n", "m", "w", "policy", "seed", "max_pieces"}
ALLOCATOR_KEYS = {"bytes_allocated", "bytes_free", "niche_histogram", "node_count",
                  "alloc_count", "free_count", "oom_count"}

STEPS_TRACE = """# two large, four small
alloc L1 4
alloc s1 2
alloc s2 2
alloc s3 2
alloc s4 2
alloc L2 4
free s2
free s3
free s4
free s1
free L1
free L2
"""


def frames(text: str) -> list:
    """Split demo output into (header, rendering) pairs."""
    out = []
    for line in text.splitlines():
        if line and not line.startswith((" ", "Level")):
            out.append([line, []])
        elif out:
            out[-1][1].append(line)
    return [(head, "\n".join(body)) for head, body in out if body]


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def stats_doc(tmp_path, capsys, trace_text, *flags):
    trace = tmp_path / "t.trace"
    trace.write_text(trace_text)
    out = tmp_path / "stats.json"
    code, _, err = run_cli(capsys, "replay", str(trace), "--stats-out", str(out), *flags)
    assert code == 0, err
    return json.loads(out.read_text())


def check_schema(doc):
    assert STATS_KEYS <= set(doc)
    assert set(doc["config"]) == CONFIG_KEYS
    assert set(doc["allocator"]) == ALLOCATOR_KEYS
    assert set(doc["events"]) == {"oom", "traps", "invalid_ops"}
    al = doc["allocator"]
    assert al["bytes_allocated"] + al["bytes_free"] == 1 << doc["config"]["n"]
    for space in doc["spaces"].values():
        assert set(space) == {"backed_bytes", "node_count"}


class TestDemos:
    @pytest.mark.parametrize("name", ["steps", "sparse-tree", "niche-maps", "vtree-doubling", "fixed-11"])
    def test_matches_golden(self, capsys, name):
        code, out, _ = run_cli(capsys, "demo", name)
        assert code == 0
        assert out == (GOLDEN / f"demo_{name}.txt").read_text()

    def test_unknown(self, capsys):
        code, _, err = run_cli(capsys, "demo", "nope")
        assert code == 2 and "unknown demo" in err

    def test_steps_content(self):
        got = frames((GOLDEN / "demo_steps.txt").read_text())
        niches = [parse_rendering(body)["niches"] for _, body in got]
        assert niches == [
            set(),
            {(1, 3), (1, 4)},
            {(1, 3), (2, 2)},
            {(2, 1), (2, 2)},
            {(3, 0), (2, 2)},
            {(4, 0)},
        ]

    def test_niche_maps_content(self):
        want = {(4, 0): (0, 1, 1, 0), (3, 0): (0, 1, 0), (3, 1): (1, 0, 0), (2, 0): (0, 0),
                (2, 1): (1, 0), (2, 3): (0, 0), (1, 2): (0,)}
        got = frames((GOLDEN / "demo_niche-maps.txt").read_text())
        assert [head for head, _ in got] == ["niche maps, 2-bit counters", "niche maps, 1-bit counters"]
        for _, body in got:
            parsed = parse_rendering(body)
            assert parsed["nodes"] == want
            assert parsed["niches"] == {(1, 3), (2, 2)}

    def test_sparse_tree_content(self):
        got = frames((GOLDEN / "demo_sparse-tree.txt").read_text())
        assert got[1][0] == "alloc_block(level 1) -> 6"
        assert parse_rendering(got[1][1])["niches"] == {(2, 2)}

    def test_vtree_doubling_content(self):
        got = frames((GOLDEN / "demo_vtree-doubling.txt").read_text())
        heads = [head for head, _ in got]
        assert heads[1:] == ["access 8  backed: {8}", "access 9  backed: {8,9}",
                             "access B  backed: {8,9,A,B}"]
        pristine = parse_rendering(got[0][1])
        assert pristine == {"nodes": {}, "niches": {(4, 0)}}
        step2 = parse_rendering(got[2][1])["nodes"]
        assert step2[(1, 4)] == 1 and step2[(2, 2)] == 0
        step3 = parse_rendering(got[3][1])["nodes"]
        assert step3[(1, 5)] == 1 and step3[(2, 2)] == 1 and step3[(3, 1)] == 0

    def test_fixed_11_content(self):
        text = (GOLDEN / "demo_fixed-11.txt").read_text()
        head, body = frames(text)[0]
        assert "backed_bytes: 11" in head
        leaves = {k for k, v in parse_rendering(body)["nodes"].items() if v == 1 and k[0] in (3, 1, 0)}
        assert {(3, 0), (1, 4), (0, 10)} <= leaves
        assert "translate B -> trap" in text


class TestReplay:
    def test_steps_trace(self, tmp_path, capsys):
        doc = stats_doc(tmp_path, capsys, STEPS_TRACE, "--space-bits", "4", "--min-block-bits", "0")
        check_schema(doc)
        assert doc["allocator"]["bytes_free"] == 16
        assert doc["allocator"]["niche_histogram"] == {"4": 1}

    def test_empty_trace(self, tmp_path, capsys):
        doc = stats_doc(tmp_path, capsys, "")
        check_schema(doc)
        assert doc["config"] == {"n": 16, "m": 4, "w": 2, "policy": "leftmost", "seed": 0, "max_pieces": 0}
        assert doc["allocator"]["bytes_free"] == 1 << 16
        assert doc["allocator"]["niche_histogram"] == {"16": 1}
        assert doc["spaces"] == {} and doc["events"] == {"oom": 0, "traps": 0, "invalid_ops": 0}

    def test_spaces_and_events(self, tmp_path, capsys):
        trace = """vspace v doubling 0
vspace f fixed 11
access v 8
access v 9
access v 11
access f 11
alloc big 17
alloc z 0
"""
        doc = stats_doc(tmp_path, capsys, trace, "--space-bits", "4", "--min-block-bits", "0",
                        "--check-every-op", "--series")
        check_schema(doc)
        assert doc["spaces"]["v"]["backed_bytes"] == 4
        assert doc["spaces"]["f"]["backed_bytes"] == 11
        assert doc["events"] == {"oom": 0, "traps": 1, "invalid_ops": 2}
        assert doc["series"]["bytes_allocated"][-1] == 15

    def test_oom_counted(self, tmp_path, capsys):
        doc = stats_doc(tmp_path, capsys, "alloc a 16\nalloc b 1\n", "--space-bits", "4",
                        "--min-block-bits", "0")
        assert doc["events"]["oom"] == 1 and doc["allocator"]["oom_count"] == 1

    def test_deterministic_bytes(self, tmp_path, capsys):
        trace = tmp_path / "t.trace"
        trace.write_text(STEPS_TRACE)
        outs = []
        for i in range(2):
            path = tmp_path / f"s{i}.json"
            assert main(["replay", str(trace), "--policy", "random", "--seed", "7",
                         "--stats-out", str(path)]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    @pytest.mark.parametrize("trace,line", [
        ("alloc a 4\nfree b\n", 2),
        ("alloc a 4\nalloc a 4\n", 2),
        ("alloc a\n", 1),
        ("access v 3\n", 1),
        ("alloc a 1\n@tick 3\n", 2),
    ])
    def test_bad_trace_exit_2(self, tmp_path, capsys, trace, line):
        path = tmp_path / "bad.trace"
        path.write_text(trace)
        code, _, err = run_cli(capsys, "replay", str(path))
        assert code == 2
        assert f"line {line}" in err

    def test_missing_file(self, capsys):
        code, _, _ = run_cli(capsys, "replay", "/nonexistent/trace")
        assert code == 2

    def test_bad_flags(self, capsys, tmp_path):
        path = tmp_path / "t.trace"
        path.write_text("")
        assert run_cli(capsys, "replay", str(path), "--min-block-bits", "20")[0] == 2
        assert run_cli(capsys, "replay", str(path), "--policy", "best")[0] == 2

    def test_invariant_failure_exit_3(self, tmp_path, capsys, monkeypatch):
        from geomalloc import cli
        from geomalloc.core import StructuralError

        def broken(self):
            raise StructuralError("forced")
        monkeypatch.setattr(cli.Replayer, "check", broken)
        path = tmp_path / "t.trace"
        path.write_text("alloc a 4\n")
        assert run_cli(capsys, "replay", str(path))[0] == 3


class TestFuzz:
    def test_zero_ops(self, capsys):
        assert run_cli(capsys, "fuzz", "--ops", "0")[0] == 0

    def test_short_run(self, capsys):
        code, out, _ = run_cli(capsys, "fuzz", "--ops", "3000", "--space-bits", "12",
                               "--min-block-bits", "0", "--seed", "1")
        assert code == 0 and "ok" in out

    def test_sweep(self, capsys):
        code, out, _ = run_cli(capsys, "fuzz", "--ops", "3000", "--sweep", "--space-bits", "10")
        assert code == 0 and "15 configuration" in out

    def test_space_bits_limit(self, capsys):
        assert run_cli(capsys, "fuzz", "--space-bits", "17")[0] == 2

    def test_mutant_counterexample(self, tmp_path, capsys):
        cx = tmp_path / "cx.trace"
        code, out, _ = run_cli(capsys, "fuzz", "--ops", "5000", "--space-bits", "8",
                               "--min-block-bits", "0", "--mutant", "misaligned-coalesce",
                               "--counterexample", str(cx))
        assert code == 1
        text = cx.read_text()
        assert "misaligned" in text.splitlines()[0]
        assert "# allocator free set:" in text and "# oracle free set:" in text
        # the minimized trace still drives the mutant into a misaligned merge
        from geomalloc.fuzz import SlotAllocator
        from geomalloc.trace import parse_trace
        slots = SlotAllocator(GeometryConfig(8, 0, 2), check_alignment=False)
        live = {}
        for _, op in parse_trace(text):
            if op[0] == "alloc":
                level = (op[2] - 1).bit_length()
                live[op[1]] = (slots.alloc(level), level)
            else:
                slots.release(*live.pop(op[1]))
        assert slots.misaligned_merges >= 1

    def test_emit_replays_to_same_stats(self, tmp_path, capsys):
        emitted = tmp_path / "fuzz.trace"
        fuzz_stats = tmp_path / "fuzz.json"
        replay_stats = tmp_path / "replay.json"
        flags = ["--space-bits", "12", "--min-block-bits", "2", "--seed", "5"]
        assert main(["fuzz", "--ops", "2000", "--emit", str(emitted),
                     "--stats-out", str(fuzz_stats), *flags]) == 0
        assert main(["replay", str(emitted), "--stats-out", str(replay_stats), *flags]) == 0
        capsys.readouterr()
        a = json.loads(fuzz_stats.read_text())
        b = json.loads(replay_stats.read_text())
        assert a["allocator"] == b["allocator"]
        assert a["events"]["oom"] == b["events"]["oom"]


class TestPipelineCommand:
    def test_idle(self, tmp_path, capsys):
        path = tmp_path / "w.txt"
        path.write_text("# nothing\n")
        code, out, _ = run_cli(capsys, "pipeline", str(path))
        doc = json.loads(out)
        assert code == 0 and doc["completed"] == 0 and doc["spurious_failures"] == 0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random(self, capsys, seed):
        code, out, _ = run_cli(capsys, "pipeline", "--random", "300", "--seed", str(seed),
                               "--space-bits", "10", "--min-block-bits", "0", "--audit")
        assert code == 0 and json.loads(out)["spurious_failures"] == 0

    def test_prealloc_pair(self, tmp_path, capsys):
        lines = ["vspace v doubling 0"]
        for i in range(1, 120):
            lines += [f"@tick {i}", f"access v {(i * 37) % 1024}"]
        path = tmp_path / "w.txt"
        path.write_text("\n".join(lines) + "\n")
        flags = ["--space-bits", "10", "--min-block-bits", "0"]
        _, cold, _ = run_cli(capsys, "pipeline", str(path), *flags)
        _, warm, _ = run_cli(capsys, "pipeline", str(path), "--prealloc", "0-5:2", *flags)
        assert json.loads(cold)["stalled_ticks"] > json.loads(warm)["stalled_ticks"]

    def test_malformed_workload(self, tmp_path, capsys):
        path = tmp_path / "w.txt"
        path.write_text("@tick x\n")
        assert run_cli(capsys, "pipeline", str(path))[0] == 2

    def test_needs_input(self, capsys):
        assert run_cli(capsys, "pipeline")[0] == 2

    def test_bad_prealloc(self, tmp_path, capsys):
        assert run_cli(capsys, "pipeline", "--random", "5", "--prealloc", "a:b")[0] == 2

    def test_spurious_exit_3(self, capsys, monkeypatch):
        from geomalloc import pipeline
        real = pipeline.PipelineSim.run

        def run(self, *a, **kw):
            metrics = real(self, *a, **kw)
            metrics.spurious_failures = 1
            return metrics
        monkeypatch.setattr(pipeline.PipelineSim, "run", run)
        assert run_cli(capsys, "pipeline", "--random", "5")[0] == 3


def test_parse_prealloc():
    cfg = GeometryConfig(8, 0, 2)
    assert parse_prealloc("2", cfg) == {level: 2 for level in range(9)}
    assert parse_prealloc("0-2:1,5:3", cfg) == {0: 1, 1: 1, 2: 1, 5: 3}
    assert parse_prealloc(None, cfg) == {}


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "geomalloc.cli", "demo", "fixed-11"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "backed_bytes: 11" in out.stdout


def test_help_exit_0(capsys):
    assert run_cli(capsys, "--help")[0] == 0
