import json
import subprocess
import sys
from pathlib import Path

import pytest

from adstitch.cli import main

SAMPLE = Path(__file__).parent / "data" / "sample"
PAGES = str(SAMPLE / "pages.jsonl")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    return json.loads(out.strip().splitlines()[-1])


def pipeline(tmp: Path, capsys) -> dict[str, bytes]:
    """ingest -> filter -> select -> train in simulator -> exploit-serve fixed requests."""
    steps = [
        ["ingest", "--pages", PAGES, "--adcopy", SAMPLE / "adcopy.jsonl", "--out", tmp / "assets.jsonl"],
        ["filter", "--pages", PAGES, "--assets", tmp / "assets.jsonl", "--rules", SAMPLE / "rules.txt",
         "--out", tmp / "kept.jsonl", "--rejected", tmp / "rejected.jsonl"],
        ["select", "--pages", PAGES, "--assets", tmp / "kept.jsonl", "--titles", 4, "--descriptions", 3,
         "--out", tmp / "selected.jsonl"],
        ["simulate", "--pages", PAGES, "--assets", tmp / "selected.jsonl", "--srpv", 2000, "--mode", "Explore",
         "--train", "--joint", "--checkpoint-out", tmp / "model.ckpt", "--out", tmp / "log.jsonl",
         "--events-out", tmp / "events.jsonl"],
        ["train", "--pages", PAGES, "--assets", tmp / "selected.jsonl", "--log", tmp / "events.jsonl",
         "--checkpoint", tmp / "model.ckpt", "--joint", "--out", tmp / "model2.ckpt"],
        ["serve", "--pages", PAGES, "--assets", tmp / "selected.jsonl", "--checkpoint", tmp / "model2.ckpt",
         "--requests", SAMPLE / "requests.jsonl", "--omit-latency", "--out", tmp / "responses.jsonl"],
    ]
    for argv in steps:
        code, out, err = run(capsys, *argv)
        assert code == 0, err
        assert summary(out)["command"] == argv[0]
    return {p.name: p.read_bytes() for p in sorted(tmp.iterdir())}


def test_end_to_end_byte_identical(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = pipeline(tmp_path / "a", capsys)
    second = pipeline(tmp_path / "b", capsys)
    assert first.keys() == second.keys() and len(first) == 9
    for name in first:
        assert first[name] == second[name], name
    responses = [json.loads(x) for x in first["responses.jsonl"].decode().splitlines()]
    assert len(responses) == 9 and responses[-1]["error"] == "NotFoundError"
    rejected = [json.loads(x) for x in first["rejected.jsonl"].decode().splitlines()]
    assert {r["asset"]["text"] for r in rejected} == {
        "15% Discount on All Boots", "Official Store of Trailgear",
        "Summit Pro boots now at warehouse.com.", "Free Shipping on Every Mug"}


def test_diversity_and_gate(tmp_path, capsys):
    code, out, _ = run(capsys, "ingest", "--pages", PAGES, "--out", tmp_path / "a.jsonl")
    assert code == 0
    code, out, _ = run(capsys, "diversity", "--pages", PAGES, "--assets", tmp_path / "a.jsonl",
                       "--out", tmp_path / "d.jsonl")
    assert code == 0 and summary(out)["groups"] >= 2
    judg = tmp_path / "j.jsonl"
    good = {"asset_id": "a", "text_quality": "Good", "human_like": "Yes", "factual": "Yes", "relevant": "Yes"}
    bad = {**good, "factual": "No"}
    judg.write_text("".join(json.dumps(good if i < 450 else bad) + "\n" for i in range(500)))
    code, out, _ = run(capsys, "gate", "--judgments", judg)
    assert code == 0 and summary(out)["passed"] is False
    code, out, _ = run(capsys, "gate", "--judgments", judg, "--strict")
    assert code == 1


def test_simulate_ab_and_table(tmp_path, capsys):
    world = tmp_path / "w.json"
    world.write_text(json.dumps({"seed": 1, "hash_bits": 16, "titles_per_page": 5, "descs_per_page": 4}))
    for name, extra in (("t", ["--policy", "online"]), ("c", ["--policy", "prestitch", "--m", "2"])):
        code, out, err = run(capsys, "simulate", "--world", world, "--srpv", 2000, "--out", tmp_path / f"{name}.jsonl",
                             *extra)
        assert code == 0, err
    code, out, _ = run(capsys, "ab", "--treatment", tmp_path / "t.jsonl", "--control", tmp_path / "c.jsonl",
                       "--n-boot", 200, "--table")
    assert code == 0 and out.splitlines()[0].split() == ["metric", "treatment", "control", "delta_%", "p",
                                                          "significant"]
    assert len(out.splitlines()) == 6


def test_checkpoint_commands(tmp_path, capsys):
    path = tmp_path / "m.ckpt"
    assert run(capsys, "checkpoint", "init", path, "--hash-bits", 16)[0] == 0
    code, out, _ = run(capsys, "checkpoint", "verify", path)
    assert code == 0 and summary(out)["bit_exact"] is True
    path.write_bytes(path.read_bytes()[:50])
    code, _, err = run(capsys, "checkpoint", "inspect", path)
    assert code == 1 and json.loads(err)["error"] == "CheckpointError"


@pytest.mark.parametrize("argv,kind,code", [
    (["bogus"], "UsageError", 2),
    (["filter", "--out", "x"], "UsageError", 2),
    (["gate", "--judgments", "/no/such/file.jsonl"], "FileNotFoundError", 1),
])
def test_errors_are_one_json_line(capsys, argv, kind, code):
    got, out, err = run(capsys, *argv)
    assert got == code and out == ""
    lines = err.strip().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    assert rec["error"] == kind and rec["message"]


def test_bad_record_names_input(tmp_path, capsys):
    bad = tmp_path / "pages.jsonl"
    bad.write_text('{"url": "not a url"}\n')
    code, _, err = run(capsys, "ingest", "--pages", bad, "--out", tmp_path / "o.jsonl")
    rec = json.loads(err)
    assert code == 1 and str(bad) in rec["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adstitch", "checkpoint", "init", str(tmp_path / "m.ckpt"),
                           "--hash-bits", "16"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["hash_bits"] == 16
