import json
import subprocess
import sys

import pytest

from leakedweb.cli import SUBCOMMANDS, main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert all(cmd in out for cmd in SUBCOMMANDS)


def test_unknown_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_train_without_family(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--dataset", str(tmp_path), "--out", "m.json")
    assert code == 2
    assert "--family" in err


def test_domain_error_exit_one(capsys, tmp_path):
    code, _, err = run(capsys, "predict", "--model", str(tmp_path / "nope.json"),
                       "--trace", str(tmp_path / "t.csv"))
    assert code == 1
    assert "error" in err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> rank -> train -> eval, run twice with the same seed."""
    outs = []
    for run_name in ("a", "b"):
        d = tmp_path_factory.mktemp(run_name)
        steps = [
            ["synth", "--sites", "5", "--traces", "12", "--samples", "30", "--out", f"{d}/data"],
            ["rank", "--dataset", f"{d}/data", "--out", f"{d}/rank.json"],
            ["train", "--family", "logitboost", "--dataset", f"{d}/data", "--ranking",
             f"{d}/rank.json", "--top-k", "4", "--params", '{"n_stages": 15}',
             "--out", f"{d}/model.json"],
            ["eval", "--model", f"{d}/model.json", "--dataset", f"{d}/data",
             "--format", "csv", "--out", f"{d}/report.csv"],
        ]
        codes = [main(step + ["--seed", "11"]) for step in steps]
        outs.append((d, codes))
    return outs


def test_pipeline_exit_zero(pipeline):
    for d, codes in pipeline:
        assert codes == [0, 0, 0, 0]
        assert (d / "report.csv").read_text().startswith("axis,")


def test_pipeline_byte_identical(pipeline):
    (a, _), (b, _) = pipeline
    for name in ("rank.json", "model.json", "report.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_config_overlay_and_precedence(pipeline, tmp_path, capsys):
    d = pipeline[0][0]
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"family": "rf", "top-k": 2, "dataset": f"{d}/data"}))
    assert main(["train", "--config", str(cfg), "--out", f"{tmp_path}/m1.json"]) == 0
    assert json.loads((tmp_path / "m1.json").read_text())["family"] == "random_forest"
    assert main(["train", "--config", str(cfg), "--family", "dtw",
                 "--out", f"{tmp_path}/m2.json"]) == 0
    m2 = json.loads((tmp_path / "m2.json").read_text())
    assert m2["family"] == "dtw_knn" and len(m2["events"]) == 2
    cfg.write_text(json.dumps({"family": "rf", "colour": "blue"}))
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", "x.json")
    assert code == 2 and "colour" in err


def test_seed_from_environment(pipeline, tmp_path, monkeypatch):
    d = pipeline[0][0]
    monkeypatch.setenv("LEAKEDWEB_SEED", "11")
    assert main(["rank", "--dataset", f"{d}/data", "--out", f"{tmp_path}/r.json"]) == 0
    assert (tmp_path / "r.json").read_bytes() == (d / "rank.json").read_bytes()


def test_predict_prints_label(pipeline, capsys):
    d = pipeline[0][0]
    trace = sorted((d / "data").glob("site-*/*.csv"))[0]
    code, out, _ = run(capsys, "predict", "--model", f"{d}/model.json", "--trace", str(trace))
    assert code == 0
    assert json.loads(out)["label"].startswith("site-")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "leakedweb", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep" in proc.stdout


def test_serve_and_send(pipeline, tmp_path, capsys):
    import socket
    import time

    d = pipeline[0][0]
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    server = subprocess.Popen([sys.executable, "-m", "leakedweb", "serve", "--bind",
                               f"127.0.0.1:{port}", "--model", f"{d}/model.json",
                               "--store", str(tmp_path / "store")])
    try:
        for _ in range(100):
            try:
                socket.create_connection(("127.0.0.1", port), timeout=1).close()
                break
            except OSError:
                time.sleep(0.1)
        trace = sorted((d / "data").glob("site-*/*.csv"))[0]
        code, out, _ = run(capsys, "send", "--endpoint", f"127.0.0.1:{port}",
                           "--trace", str(trace), "--client-id", "cli")
        assert code == 0
        assert json.loads(out)["label"].startswith("site-")
        assert len(list((tmp_path / "store" / "cli").glob("*.csv"))) == 1
    finally:
        server.terminate()
        server.wait(10)


def test_serve_bad_model_exits_nonzero(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "leakedweb", "serve", "--bind", "127.0.0.1:0",
                           "--model", str(tmp_path / "none.json"), "--store", str(tmp_path)],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 1
