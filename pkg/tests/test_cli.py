import json

import pytest
import yaml

from dssdst import synthetic
from dssdst.cli import main, statistics_table

TINY = dict(
    hidden_size=16,
    num_layers=1,
    num_heads=2,
    max_len=128,
    epochs_preliminary=1,
    epochs_ult_gen=1,
    batch_size=4,
    lr_preliminary=1e-3,
    lr_ultimate_generator=1e-3,
    seed=7,
)


def _corpus(root, n=(6, 3, 3)):
    root.mkdir(parents=True, exist_ok=True)
    for (name, count), seed in zip(zip(("train", "dev", "test"), n), (1, 2, 3)):
        (root / f"{name}_dials.json").write_text(json.dumps(synthetic.generate_corpus(count, seed=seed, prefix=name)))
    return root


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = _corpus(root / "data")
    onto = root / "ontology.json"
    onto.write_text(json.dumps(synthetic.ontology().to_dict()))
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    code = main(["train", "--data", str(data), "--out", str(root / "model"), "--config", str(cfg), "--ontology", str(onto)])
    assert code == 0
    return root


def _track(run, out, *extra):
    return main(
        ["track", "--data", str(run / "data"), "--checkpoint", str(run / "model" / "best.pt"), "--out", str(out), *extra]
    )


def test_train_writes_artifacts(run):
    names = {p.name for p in (run / "model").iterdir()}
    assert {"best.pt", "last.pt", "train_log.jsonl", "config.json", "ontology.json", "summary.json"} <= names
    summary = json.loads((run / "model" / "summary.json").read_text())
    assert summary["seeds"] == [7]
    assert not [p for p in run.iterdir() if p.name.startswith(".model.")]


def test_train_refuses_existing_output(run, capsys):
    code = main(["train", "--data", str(run / "data"), "--out", str(run / "model"), "--config", str(run / "tiny.yaml")])
    assert code == 2
    assert "error[usage]" in capsys.readouterr().err


def test_track_then_eval(run, tmp_path, capsys):
    assert _track(run, tmp_path / "pred") == 0
    dump = json.loads((tmp_path / "pred" / "predictions.json").read_text())
    assert len(dump["dialogues"]) == 3
    assert main(["eval", "--data", str(run / "data"), "--predictions", str(tmp_path / "pred" / "predictions.json"), "--out", str(tmp_path / "ev")]) == 0
    text = capsys.readouterr().out
    assert "Overall (%)" in text
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert 0.0 <= metrics["joint_acc"] <= 1.0


def test_gold_forcing_scores_100(run, tmp_path, capsys):
    assert _track(run, tmp_path / "pred", "--forcing", "gold") == 0
    capsys.readouterr()
    assert main(["eval", "--data", str(run / "data"), "--predictions", str(tmp_path / "pred" / "predictions.json"), "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text())["joint_acc"] == 1.0


def test_reruns_are_byte_identical(run, tmp_path):
    assert _track(run, tmp_path / "a", "--debug") == 0
    assert _track(run, tmp_path / "b", "--debug") == 0
    assert (tmp_path / "a" / "predictions.json").read_bytes() == (tmp_path / "b" / "predictions.json").read_bytes()
    turn = json.loads((tmp_path / "a" / "predictions.json").read_text())["dialogues"][0]["turns"][0]
    assert "decisions" in turn and "generated" in turn


def test_training_reruns_log_identically(run, tmp_path):
    args = ["train", "--data", str(run / "data"), "--config", str(run / "tiny.yaml"), "--ontology", str(run / "ontology.json")]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "train_log.jsonl").read_bytes() == (run / "model" / "train_log.jsonl").read_bytes()


def test_empty_dialogue_file_gives_empty_dump(run, tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    code = main(["track", "--data", str(empty), "--checkpoint", str(run / "model" / "best.pt"), "--out", str(tmp_path / "p")])
    assert code == 0
    assert json.loads((tmp_path / "p" / "predictions.json").read_text())["dialogues"] == []


def test_missing_corpus_is_a_usage_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 2
    assert "error[usage]" in capsys.readouterr().err
    assert not (tmp_path / "m").exists()


def test_malformed_corpus_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "m")]) == 3
    assert "error[data]" in capsys.readouterr().err


def test_fingerprint_mismatch(run, tmp_path, capsys):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"hotel-area": ["north"]}))
    assert _track(run, tmp_path / "p", "--ontology", str(other)) == 4
    assert "error[mismatch]" in capsys.readouterr().err
    assert not (tmp_path / "p").exists()


def test_architecture_override_is_refused(run, tmp_path):
    assert _track(run, tmp_path / "p", "--set", "hidden_size=32") == 4
    assert _track(run, tmp_path / "q", "--set", "delta=0.5", "--ablate", "no-ultimate") == 0
    cfg = json.loads((tmp_path / "q" / "config.json").read_text())
    assert cfg["delta"] == 0.5 and cfg["use_ultimate"] is False and cfg["hidden_size"] == 16


def test_bad_flags(run, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(run / "data"), "--out", str(tmp_path / "m"), "--ablate", "k=0"])
    assert exc.value.code == 2
    assert main(["train", "--data", str(run / "data"), "--out", str(tmp_path / "m"), "--set", "nonsense"]) == 2
    assert main(["train", "--data", str(run / "data"), "--out", str(tmp_path / "m"), "--set", "no_such_key=1"]) == 2


def test_multi_seed_training(run, tmp_path):
    args = ["train", "--data", str(run / "data"), "--config", str(run / "tiny.yaml"), "--ontology", str(run / "ontology.json")]
    assert main(args + ["--seeds", "2", "--set", "epochs_ult_gen=0", "--out", str(tmp_path / "ms")]) == 0
    summary = json.loads((tmp_path / "ms" / "summary.json").read_text())
    assert summary["seeds"] == [7, 8]
    for seed in (7, 8):
        assert json.loads((tmp_path / "ms" / f"seed_{seed}" / "config.json").read_text())["seed"] == seed


def test_stats_on_empty_corpus(tmp_path, capsys):
    data = _corpus(tmp_path / "d", n=(0, 0, 0))
    assert main(["stats", "--data", str(data), "--out", str(tmp_path / "stats.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("Domain")
    rows = lines[2:]
    assert [r.split("|")[0].strip() for r in rows] == ["Hotel", "Attraction", "Restaurant", "Taxi", "Train"]
    assert all(cell.strip() == "0" for r in rows for cell in r.split("|")[2:])
    assert (tmp_path / "stats.txt").read_text().splitlines() == lines


def test_stats_counts(tmp_path):
    raw = synthetic.generate_corpus(5, seed=0)
    text = statistics_table({"train": raw, "dev": [], "test": raw[:2]})
    hotel = next(l for l in text.splitlines() if l.startswith("Hotel"))
    cells = [c.strip() for c in hotel.split("|")]
    n_hotel = sum("hotel" in d["domains"] for d in raw)
    assert cells[2] == str(n_hotel)
    assert cells[3] == "0"
