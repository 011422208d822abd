import json

import numpy as np
import pytest

from dbean.cli import build_parser, main, resolve_config
from dbean.data import (
    AgNewsRecord,
    find_agnews,
    load_agnews_csv,
    subsample,
    synthetic_agnews,
    write_agnews_csv,
)
from dbean.report import ClassificationReport, emit_report, fingerprint
from dbean.text import DataError


def _csv(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# CSV


def test_csv_label_mapping(tmp_path):
    recs = load_agnews_csv(_csv(tmp_path, '"3","T","D"\n"1","Wall St. ""bears""","x, y"\n'))
    assert recs[0] == AgNewsRecord(2, "T", "D")
    assert recs[0].label_name == "Business"
    assert recs[1].title == 'Wall St. "bears"' and recs[1].description == "x, y"
    assert recs[1].text == 'Wall St. "bears" x, y'


def test_csv_bad_label_has_row_number(tmp_path):
    path = _csv(tmp_path, '"1","a","b"\n"5","T","D"\n')
    with pytest.raises(DataError, match="row 2"):
        load_agnews_csv(path)


def test_csv_malformed_quoting(tmp_path):
    path = _csv(tmp_path, '"1","a","b"\n"2","T"x,"D"\n')
    with pytest.raises(DataError, match="row 2"):
        load_agnews_csv(path)


def test_csv_strict_counts(tmp_path):
    path = tmp_path / "t.csv"
    write_agnews_csv(synthetic_agnews(2, seed=0), path)
    assert len(load_agnews_csv(path)) == 8
    with pytest.raises(DataError, match="strict"):
        load_agnews_csv(path, strict=True)


def test_csv_roundtrip(tmp_path):
    recs = synthetic_agnews(3, seed=1)
    path = tmp_path / "r.csv"
    write_agnews_csv(recs, path)
    assert load_agnews_csv(path) == recs


def test_find_agnews(tmp_path):
    assert find_agnews(tmp_path) is None
    (tmp_path / "train.csv").write_text("")
    (tmp_path / "test.csv").write_text("")
    assert find_agnews(tmp_path) == (tmp_path / "train.csv", tmp_path / "test.csv")


# --------------------------------------------------------------------------
# subsample and synthetic corpus


def test_subsample_balanced_and_deterministic():
    recs = synthetic_agnews(10, seed=2)
    sub = subsample(recs, 2, seed=5)
    assert len(sub) == 8
    assert sorted(r.label for r in sub) == [0, 0, 1, 1, 2, 2, 3, 3]
    assert subsample(recs, 2, seed=5) == sub


def test_subsample_full_is_identity_up_to_order():
    recs = synthetic_agnews(4, seed=3)
    assert sorted(map(repr, subsample(recs, 4))) == sorted(map(repr, recs))


def test_subsample_insufficient():
    with pytest.raises(DataError):
        subsample(synthetic_agnews(2), 3)


def test_synthetic_splits_share_lexicon():
    a = {w for r in synthetic_agnews(20, seed=1) for w in r.description.split()}
    b = {w for r in synthetic_agnews(20, seed=2) for w in r.description.split()}
    assert len(a & b) > 0.5 * len(b)


# --------------------------------------------------------------------------
# reports


def test_report_roundtrip_and_invariants(tmp_path, capsys):
    rep = ClassificationReport.from_predictions([0, 1, 2, 3, 3], [0, 1, 2, 0, 3],
                                                config_fingerprint="abc", config={"seed": 1})
    assert rep.accuracy == pytest.approx(0.8)
    assert [sum(r) for r in rep.confusion] == [1, 1, 1, 2]
    assert rep.per_class_accuracy == [1.0, 1.0, 1.0, 0.5]
    path = tmp_path / "r.json"
    emit_report(rep, path)
    assert "accuracy 80.00%" in capsys.readouterr().out
    back = ClassificationReport.from_dict(json.loads(path.read_text()))
    assert back == rep
    assert list(json.loads(path.read_text())) == sorted(json.loads(path.read_text()))


def test_report_empty():
    with pytest.raises(ValueError):
        ClassificationReport.from_predictions([], [])


def test_fingerprint_changes_iff_config_changes():
    a = {"seed": 1, "lr": 0.5}
    assert fingerprint(a) == fingerprint({"lr": 0.5, "seed": 1})
    assert fingerprint(a) != fingerprint({"seed": 2, "lr": 0.5})


# --------------------------------------------------------------------------
# CLI


def test_cli_no_args_is_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_unknown_subcommand(capsys):
    assert main(["frobnicate"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert main(["gradcheck", "--tol", "0"]) == 3


def test_cli_missing_data_is_data_error(tmp_path, monkeypatch):
    assert main(["baseline", "bow", "--train", str(tmp_path / "no.csv"), "--test", str(tmp_path / "no.csv")]) == 2
    monkeypatch.delenv("DBEAN_AGNEWS_DIR", raising=False)
    monkeypatch.chdir(tmp_path)
    assert main(["baseline", "bow"]) == 2


def test_cli_bad_label_is_data_error(tmp_path):
    bad = _csv(tmp_path, '"7","a","b"\n')
    assert main(["baseline", "bow", "--train", str(bad), "--test", str(bad)]) == 2


def test_config_precedence(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"epochs": 3, "hidden": 16, "seed": 4}))
    args = build_parser().parse_args(["train", "--checkpoint", "x", "--config", str(cfg_path), "--hidden", "8"])
    cfg = resolve_config(args)
    assert cfg["epochs"] == 3        # from file
    assert cfg["hidden"] == 8        # flag beats file
    assert cfg["seed"] == 4
    assert cfg["batch_size"] == 8    # default


def test_config_unknown_key(tmp_path, monkeypatch):
    monkeypatch.delenv("DBEAN_AGNEWS_DIR", raising=False)
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"epoch": 3}))
    assert main(["gradcheck", "--config", str(cfg_path)]) == 2


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if "seconds" not in k}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def test_cli_train_eval_adapt_roundtrip(tmp_path):
    common = ["--synthetic", "40", "--seed", "2"]
    train = ["train", *common, "--epochs", "2", "--hidden", "8", "--att-hidden", "4", "--embed-dim", "6",
             "--num-merges", "200", "--vocab", str(tmp_path / "v.txt")]
    reports = []
    for run in range(2):
        out = tmp_path / f"train{run}.json"
        assert main([*train, "--checkpoint", str(tmp_path / f"m{run}.ckpt"), "--out", str(out)]) == 0
        reports.append(json.loads(out.read_text()))
    assert _strip_timing(reports[0]) == _strip_timing(reports[1])
    assert reports[0]["config_fingerprint"] == fingerprint(reports[0]["config"])
    assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()

    ev = tmp_path / "eval.json"
    assert main(["eval", *common, "--vocab", str(tmp_path / "v.txt"), "--checkpoint", str(tmp_path / "m0.ckpt"),
                 "--out", str(ev)]) == 0
    assert json.loads(ev.read_text())["accuracy"] == reports[0]["accuracy"]

    ad = tmp_path / "adapt.json"
    assert main(["adapt-eval", *common, "--vocab", str(tmp_path / "v.txt"),
                 "--checkpoint", str(tmp_path / "m0.ckpt"), "--lr-search", "--limit", "12", "--out", str(ad)]) == 0
    extra = json.loads(ad.read_text())["extra"]
    assert extra["restore_verified"] is True and extra["n_adapted"] > 0


def test_cli_vocab_mismatch_is_data_error(tmp_path):
    common = ["--synthetic", "8"]
    assert main(["train", *common, "--epochs", "1", "--hidden", "4", "--embed-dim", "4", "--num-merges", "50",
                 "--vocab", str(tmp_path / "v.txt"), "--checkpoint", str(tmp_path / "m.ckpt")]) == 0
    assert main(["tokenize-train", *common, "--num-merges", "10", "--out", str(tmp_path / "v2.txt")]) == 0
    assert main(["eval", *common, "--vocab", str(tmp_path / "v2.txt"), "--checkpoint", str(tmp_path / "m.ckpt")]) == 2


@pytest.mark.parametrize("kind", ["bow", "tfidf", "bom"])
def test_cli_baselines_deterministic(tmp_path, kind):
    args = ["baseline", kind, "--synthetic", "30", "--bom-k", "20"]
    outs = []
    for run in range(2):
        out = tmp_path / f"{kind}{run}.json"
        assert main([*args, "--out", str(out)]) == 0
        outs.append(json.loads(out.read_text()))
    assert _strip_timing(outs[0]) == _strip_timing(outs[1])
    assert 0.0 <= outs[0]["accuracy"] <= 1.0
    assert sum(map(sum, outs[0]["confusion"])) == outs[0]["n_examples"]


def test_cli_bom_with_word2vec(tmp_path):
    recs = synthetic_agnews(30, seed=0)
    words = sorted({w for r in recs for w in r.description.lower().split()})
    rng = np.random.default_rng(0)
    lines = [f"{len(words)} 4"] + [w + " " + " ".join(f"{v:.4f}" for v in rng.standard_normal(4)) for w in words]
    vec = _csv(tmp_path, "\n".join(lines) + "\n", "w2v.txt")
    out = tmp_path / "bom.json"
    assert main(["baseline", "bom", "--synthetic", "30", "--embeddings", str(vec), "--embed-dim", "4",
                 "--bom-k", "10", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["extra"]["embeddings"] == "word2vec"
