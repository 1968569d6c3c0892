import csv
import io
import json

import pytest

from avdetect.cli import main
from avdetect.config import RunConfig

TINY = {
    "seed": 3,
    "corpus": {"counts": {"train": 32, "in_domain": 16, "open_set_generator": 16, "open_set_style": 0,
                          "open_set_full": 16},
               "seq_len": 3, "d_audio": 3, "d_vision": 6, "d_latent": 2},
    "model": {"d_model": 8, "n_heads": 2, "n_enc_layers_audio": 1, "n_enc_layers_vision": 1,
              "n_dec_layers": 1, "d_ff": 8, "seq_len": 3, "d_audio_in": 3, "d_vision_in": 6},
    "stage1": {"steps": 3, "batch_size": 8},
    "stage2": {"steps": 2, "batch_size": 8},
    "eval_splits": ["in_domain", "open_set_full"],
    "ablation_seeds": [1, 2],
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY | {"out": str(tmp_path / "out")}))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


def test_print_config_defaults_round_trip(capsys):
    code, out, _ = run(capsys, "print-config")
    assert code == 0
    assert RunConfig.from_dict(json.loads(out)).to_json() == out == RunConfig().to_json()


def test_print_config_applies_overrides(capsys, cfg):
    code, out, _ = run(capsys, "print-config", "--config", cfg, "--seed", "9", "--plan", "stage2-first")
    doc = json.loads(out)
    assert code == 0 and doc["seed"] == 9 and doc["plan"] == "stage2-first"


def test_unknown_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2
    assert error_of(capsys.readouterr().err)["error"] == "usage"


def test_unknown_config_field_names_the_field(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"stage1": {"steps": 3, "warmup": 5}}))
    code, _, err = run(capsys, "print-config", "--config", str(path))
    assert code == 2 and error_of(err)["field"] == "stage1"


@pytest.mark.parametrize("doc,field", [({"colour": 1}, "colour"), ({"seed": "x"}, "seed"),
                                       ({"corpus": {"sigma": -1}}, "corpus.sigma"),
                                       ({"plan": "three"}, "plan"), ({"threads": 0}, "threads")])
def test_config_errors(capsys, tmp_path, doc, field):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    code, _, err = run(capsys, "print-config", "--config", str(path))
    assert code == 2 and error_of(err)["field"] == field


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "print-config", "--config", str(tmp_path / "nope.json"))
    assert code == 2 and error_of(err)["error"] == "config"


def test_gen_data_is_idempotent(capsys, cfg):
    code, out1, _ = run(capsys, "gen-data", "--config", cfg)
    code2, out2, _ = run(capsys, "gen-data", "--config", cfg)
    assert code == code2 == 0
    assert json.loads(out1)["corpus_hash"] == json.loads(out2)["corpus_hash"]


def test_train_dry_run_writes_nothing(capsys, cfg, tmp_path):
    code, out, _ = run(capsys, "train", "--config", cfg, "--dry-run")
    assert code == 0
    assert [s["mode"] for s in json.loads(out)["plan"]["stages"]] == ["lora", "full"]
    assert not (tmp_path / "out").exists()


def test_train_eval_report(capsys, cfg):
    code, out, _ = run(capsys, "train", "--config", cfg)
    assert code == 0
    result = json.loads(out)
    assert sorted(result["checkpoints"]) == ["stage-0.ckpt", "stage-1.ckpt", "stage-2.ckpt"]

    code, csv_out, _ = run(capsys, "eval", "--config", cfg)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(csv_out)))
    assert [r["metric"] for r in rows] == ["mAP", "AUC", "acc"]
    assert set(rows[0]) == {"metric", "in_domain", "open_set_full"}

    code, json_out, _ = run(capsys, "report", "--config", cfg, "--format", "json")
    assert code == 0
    for r_csv, r_json in zip(rows, json.loads(json_out)):
        for k, v in r_json.items():
            assert (r_csv[k] if k == "metric" else float(r_csv[k])) == v


def test_eval_reports_missing_split(capsys, cfg):
    run(capsys, "train", "--config", cfg, "--plan", "none")
    code, out, err = run(capsys, "eval", "--config", cfg, "--plan", "none",
                         "--splits", "in_domain", "open_set_style")
    assert code == 3
    assert error_of(err)["splits"] == ["open_set_style"]
    assert "in_domain" in out


def test_eval_without_checkpoint(capsys, cfg, tmp_path):
    code, _, err = run(capsys, "eval", "--config", cfg, "--checkpoint", str(tmp_path / "x.ckpt"))
    assert code == 3 and error_of(err)["error"] == "integrity"


def test_corpus_drift_is_refused(capsys, cfg, tmp_path):
    run(capsys, "gen-data", "--config", cfg)
    feats = tmp_path / "out" / "corpus" / "features.bin"
    raw = bytearray(feats.read_bytes())
    raw[0] ^= 1
    feats.write_bytes(bytes(raw))
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 3 and error_of(err)["error"] == "integrity"


def test_run_refuses_a_different_corpus(capsys, cfg, tmp_path):
    run(capsys, "train", "--config", cfg, "--plan", "none")
    doc = json.loads(open(cfg).read())
    doc["corpus"]["sigma"] = 0.2
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    code, _, err = run(capsys, "train", "--config", str(other), "--plan", "none")
    assert code == 3


def test_ablate_dry_run_lists_arms(capsys, cfg):
    code, out, _ = run(capsys, "ablate", "--config", cfg, "--dry-run", "--seeds", "7")
    doc = json.loads(out)
    assert code == 0 and doc["seeds"] == [7]
    assert set(doc["arms"]) == {"zero-shot", "stage-1-only", "stage-2-only", "two-stage"}


def test_ablate_exit_code_matches_verdict(capsys, cfg, tmp_path):
    code, out, _ = run(capsys, "ablate", "--config", cfg, "--seeds", "1")
    saved = json.loads((tmp_path / "out" / "ablation" / "ablation.json").read_text())
    assert code == (0 if saved["passed"] else 5)
    assert "two-stage" in out
