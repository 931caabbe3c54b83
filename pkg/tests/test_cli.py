import json
import subprocess
import sys

import numpy as np
import pytest

from efficientfi import cli
from efficientfi import model as mdl
from efficientfi import synthetic_csi as sc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["generate", "--preset", "desk", "--per-class", "10", "--seed", "2",
                     "--out", str(data)]) == 0
    ckpt = root / "model.efi"
    assert cli.main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "1",
                     "--batch-size", "16", "--lr", "0.001", "--seed", "1"]) == 0
    return root, data, ckpt


def _manifest(path):
    return json.loads(path.read_text())


def test_generate_writes_dataset_and_manifest(workspace):
    root, data, _ = workspace
    train, test, cfg = sc.load_dataset(data)
    assert (len(train), len(test)) == (48, 12)
    m = _manifest(data / "run_manifest.json")
    assert m["command"] == "generate" and m["seed"] == 2
    assert m["config"]["per_class"] == 10
    assert {"started", "finished", "artifacts", "tool_version"} <= set(m)


def test_generate_class_subset(tmp_path):
    assert cli.main(["generate", "--classes", "3", "--per-class", "5", "--out", str(tmp_path / "d")]) == 0
    train, _, cfg = sc.load_dataset(tmp_path / "d")
    assert cfg.class_names == ["running", "walking", "falling_down"]
    assert set(train.labels) == {0, 1, 2}


def test_train_outputs(workspace):
    root, _, ckpt = workspace
    params = mdl.load_checkpoint(ckpt)
    assert params.config.preset == "desk" and params.config.codebook_size == 256
    rows = ckpt.with_suffix(".csv").read_text().splitlines()
    assert rows[0] == ",".join(mdl.METRIC_FIELDS) and len(rows) == 2
    m = _manifest(root / "model.efi.manifest.json")
    assert m["config"]["epochs"] == 1 and m["config"]["lr"] == 0.001


def test_train_defaults():
    args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "c"])
    cfg = cli._train_config(args)
    assert (cfg.lr, cfg.momentum, cfg.batch_size, cfg.epochs) == (0.01, 0.9, 128, 100)
    assert cfg.decay_epochs == (40, 80) and cfg.lam == 0.5
    assert (args.K, args.D) == (256, 256)


def test_eval_report(workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "eval.json"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert {"accuracy", "nmse_db", "gamma_paper", "gamma_payload", "confusion"} <= set(rep)
    assert rep["n_samples"] == 12


def test_eval_untrained_is_chance(tmp_path):
    data = tmp_path / "d"
    cli.main(["generate", "--per-class", "20", "--seed", "4", "--out", str(data)])
    train, _, _ = sc.load_dataset(data)
    params = mdl.build_from_config(mdl.desk_architecture(), seed=0)
    mdl.fit_normalization(params, train.x)
    ckpt = mdl.save_checkpoint(params, tmp_path / "untrained.efi")
    out = tmp_path / "e.json"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["accuracy"] == pytest.approx(1 / 6, abs=0.05)


def test_simulate_memory_matches_eval(workspace, tmp_path):
    _, data, ckpt = workspace
    ev, sim = tmp_path / "e.json", tmp_path / "s.json"
    cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(ev)])
    assert cli.main(["simulate", "--ckpt", str(ckpt), "--data", str(data), "--out", str(sim),
                     "--log", str(tmp_path / "recon.log")]) == 0
    e, s = json.loads(ev.read_text()), json.loads(sim.read_text())
    assert s["accuracy"] == e["accuracy"] and s["nmse_db"] == e["nmse_db"]
    assert (tmp_path / "recon.log").stat().st_size > 0


def test_compress_decompress_round_trip(workspace, tmp_path):
    _, data, ckpt = workspace
    _, test, _ = sc.load_dataset(data)
    frame = tmp_path / "f.npy"
    np.save(frame, test.x[0])
    msg, rec = tmp_path / "f.efq", tmp_path / "r.npy"
    assert cli.main(["compress", "--ckpt", str(ckpt), "--in", str(frame), "--out", str(msg),
                     "--sample-id", "9"]) == 0
    assert msg.stat().st_size == 16 + 28 + 4
    assert cli.main(["decompress", "--ckpt", str(ckpt), "--in", str(msg), "--out", str(rec)]) == 0
    params = mdl.load_checkpoint(ckpt)
    expect, probs = mdl.predict(test.x[0], params)
    assert np.load(rec).tobytes() == expect[0].tobytes()
    pred = json.loads((tmp_path / "r.npy.prediction.json").read_text())
    assert pred["sample_id"] == 9 and pred["predicted_class"] == int(probs[0].argmax())


def test_decompress_rejects_tampered(workspace, tmp_path, capsys):
    _, data, ckpt = workspace
    _, test, _ = sc.load_dataset(data)
    np.save(tmp_path / "f.npy", test.x[0])
    cli.main(["compress", "--ckpt", str(ckpt), "--in", str(tmp_path / "f.npy"), "--out", str(tmp_path / "m")])
    raw = bytearray((tmp_path / "m").read_bytes())
    raw[20] ^= 0xFF
    (tmp_path / "m").write_bytes(bytes(raw))
    assert cli.main(["decompress", "--ckpt", str(ckpt), "--in", str(tmp_path / "m"),
                     "--out", str(tmp_path / "r.npy")]) == 1
    assert "CRC" in capsys.readouterr().err
    assert not (tmp_path / "r.npy").exists()


def test_baseline(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "b.json"
    assert cli.main(["baseline", "--data", str(data), "--rate", "0.25", "--max-frames", "2",
                     "--max-iter", "100", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["gamma"] == 4.0 and rep["n_frames"] == 2


def test_sweep_lambda(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--data", str(data), "--param", "lambda", "--values", "0.1", "0.5",
                     "--epochs", "1", "--batch-size", "24", "--lr", "0.001", "--out", str(out)]) == 0
    rows = (out / "summary.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].startswith("lambda,0.1,")
    assert (out / "lambda_0.5.json").exists() and (out / "run_manifest.json").exists()
    assert mdl.load_checkpoint(out / "lambda_0.1.ckpt").metadata["train_config"]["lam"] == 0.1


def test_sweep_rejects_bad_value(workspace, tmp_path, capsys):
    _, data, _ = workspace
    assert cli.main(["sweep", "--data", str(data), "--param", "K", "--values", "abc",
                     "--out", str(tmp_path / "s")]) == 1
    assert "abc" in capsys.readouterr().err


def test_bench(workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--ckpt", str(ckpt), "--frames", "5", "--warmup", "1", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["frames"] == 5 and rep["median_ms"] > 0 and "2.1 ms" in rep["reference"]


def test_export_embeddings(workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "emb.csv"
    assert cli.main(["export-embeddings", "--ckpt", str(ckpt), "--data", str(data),
                     "--layer", "penultimate", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 13 and lines[0].count(",") == 129


def test_explicit_manifest_path(workspace, tmp_path):
    _, data, ckpt = workspace
    target = tmp_path / "custom" / "m.json"
    assert cli.main(["--manifest", str(target), "eval", "--ckpt", str(ckpt), "--data", str(data),
                     "--out", str(tmp_path / "e.json")]) == 0
    assert _manifest(target)["command"] == "eval"


def test_incompatible_checkpoint_is_an_error(tmp_path, capsys):
    cli.main(["generate", "--preset", "paper", "--per-class", "5", "--out", str(tmp_path / "p")])
    ckpt = mdl.save_checkpoint(mdl.build_from_config(mdl.desk_architecture()), tmp_path / "d.efi")
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(tmp_path / "p")]) == 1
    assert "preset 'desk'" in capsys.readouterr().err


def test_missing_files_exit_nonzero(tmp_path, capsys):
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.efi"), "--data", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_thread_setting(workspace, monkeypatch, tmp_path):
    _, data, ckpt = workspace
    monkeypatch.setenv("EFI_THREADS", "zero")
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(tmp_path / "e")]) == 1
    monkeypatch.setenv("EFI_THREADS", "1")
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(tmp_path / "e")]) == 0


def test_console_script_exit_codes(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "efficientfi.cli", *a],
                                    capture_output=True, text=True)
    assert run("--help").returncode == 0
    bad = run("train", "--data", "x", "--out", "y", "--bogus")
    assert bad.returncode == 2 and "unrecognized" in bad.stderr
    assert run("train", "--data", "x", "--out", "y", "--K", "100").returncode == 2
    assert run("--version").stdout.strip() == cli.__version__
