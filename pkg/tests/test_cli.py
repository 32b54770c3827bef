import json

import pytest

from eve import cli, config

SMALL = ["--set", "dim=16", "--set", "heads=2", "--set", "image_size=16", "--set", "patch_size=4",
         "--set", "dec_dim=8", "--set", "dec_heads=2", "--set", "batch_size=8"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip().startswith("{") else out)


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    config.save(config.tiny(), p)
    return str(p)


def test_train_twice_identical_metrics(tmp_path, capsys, cfg_file):
    args = ["train", "--config", cfg_file, "--seed", "1", "--steps", "4", "--count", "32", *SMALL]
    code, rep = run(capsys, *args, "--out", str(tmp_path / "a"))
    assert code == 0 and rep["status"] == "ok"
    code, _ = run(capsys, *args, "--out", str(tmp_path / "b"))
    assert code == 0
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a and a == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_layout_flags(tmp_path, capsys):
    code, _ = run(capsys, "train", "--layers", "1-10:hard,11-12:soft", "--set", "depth=12", "--steps", "1",
                  "--count", "8", *SMALL, "--out", str(tmp_path / "base"))
    assert code == 0
    saved = config.load(str(tmp_path / "base" / "config.cfg"))
    assert [s.mode.value for s in saved.layer_specs()] == ["hard"] * 10 + ["soft"] * 2
    code, _ = run(capsys, "train", "--ffn", "all:shared", "--steps", "1", "--count", "8", *SMALL,
                  "--out", str(tmp_path / "shared"))
    assert code == 0
    saved = config.load(str(tmp_path / "shared" / "config.cfg"))
    assert {s.mode.value for s in saved.layer_specs()} == {"shared"}


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--layers", "1-9:hard", "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--set", "nonsense=1", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2
    assert cli.main(["probe", "--checkpoint", str(tmp_path / "missing.evek"), "--mode", "grounding"]) == 2


def test_data_gen(tmp_path, capsys):
    out = tmp_path / "c.evec"
    code, rep = run(capsys, "data", "gen", "--count", "6", "--set", "image_size=16", "--set", "patch_size=4",
                    "--out", str(out))
    assert code == 0 and rep["count"] == 6 and out.exists()


def test_router_stats_and_probe(tmp_path, capsys):
    code, _ = run(capsys, "train", "--steps", "2", "--count", "16", *SMALL, "--out", str(tmp_path / "r"))
    ck = str(tmp_path / "r" / "final.evek")
    code, rep = run(capsys, "router-stats", "--checkpoint", ck, "--count", "16")
    assert code == 0 and rep["layers"][0]["layer"] == 4
    code, rep = run(capsys, "probe", "--checkpoint", ck, "--mode", "grounding", "--count", "20")
    assert code == 0 and 0 <= rep["true"] <= 1
    assert cli.main(["probe", "--checkpoint", ck, "--mode", "retrieval", "--count", "8"]) == 2
    code, rep = run(capsys, "probe", "--checkpoint", ck, "--mode", "retrieval", "--count", "8",
                    "--finetune-steps", "2")
    assert code == 0 and 0 <= rep["i2t"] <= 1


def test_router_stats_without_soft_layers(tmp_path, capsys):
    run(capsys, "train", "--steps", "1", "--count", "8", "--layers", "all:hard", *SMALL, "--out", str(tmp_path))
    assert cli.main(["router-stats", "--checkpoint", str(tmp_path / "final.evek"), "--count", "4"]) == 2


def test_gradcheck_exit_code(capsys):
    code, rep = run(capsys, "gradcheck", "--seed", "1")
    assert code == 0 and rep["passed"]


def test_sweep_csv(tmp_path, capsys):
    csv_path = tmp_path / "s.csv"
    code, rep = run(capsys, "sweep", *SMALL, "--grid", "top_k=1;2", "--grid", "layers=1-3:hard,4:soft;all:soft",
                    "--steps", "2", "--count", "16", "--csv", str(csv_path))
    assert code == 0 and len(rep["rows"]) == 4
    assert len(csv_path.read_text().strip().splitlines()) == 5
