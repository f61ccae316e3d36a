import csv
import hashlib
import io
import json
import math

import pytest

from rationale_flow import trainer as trainer_mod
from rationale_flow.cli import main
from rationale_flow.sampler import PolicyParams, save_params
from rationale_flow.toyworld import load_world, save_world
from rationale_flow.trainer import METRICS_HEADER
from rationale_flow.verify import point_mass_world


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture()
def files(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps({"vocab_size": 3, "order": 2, "n_instances": 2,
                                                    "max_rationale_len": 3}))
    (tmp_path / "config.json").write_text(json.dumps({"steps": 60, "lam": 2, "max_rationale_len": 3,
                                                      "rng_seed": 1, "checkpoint_every": 20}))
    assert main(["make-world", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "world.json"),
                 "--seed", "3"]) == 0
    return tmp_path


class TestMakeWorld:
    def test_seeded_twice_same_hash(self, files):
        out = files / "again.json"
        assert main(["make-world", "--spec", str(files / "spec.json"), "--out", str(out), "--seed", "3"]) == 0
        assert sha(out) == sha(files / "world.json")

    def test_invalid_spec(self, files, capsys):
        (files / "bad.json").write_text(json.dumps({"vocab_size": 1}))
        code = main(["make-world", "--spec", str(files / "bad.json"), "--out", str(files / "x.json")])
        assert code == 3
        assert "vocab_size" in capsys.readouterr().err

    def test_instances_valid(self, files):
        model, inst = load_world(files / "world.json")
        assert len(inst) == 2
        for it in inst:
            assert 1 <= len(it.z_ref) <= 3
            assert all(0 <= t < model.vocab_size for t in it.x + it.y + it.z_ref)


class TestTrain:
    def _train(self, files, out, *extra):
        return main(["train", "--world", str(files / "world.json"), "--config", str(files / "config.json"),
                     "--out-dir", str(files / out), *extra])

    def test_outputs(self, files):
        assert self._train(files, "run") == 0
        run = files / "run"
        names = {p.name for p in run.iterdir()}
        assert {"manifest.json", "metrics.csv", "checkpoint_final.json", "checkpoint_0000020.json",
                "checkpoint_0000060.json"} <= names
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["version"] == 1 and manifest["seed"] == 1
        assert manifest["world_sha256"] == sha(files / "world.json")
        rows = list(csv.reader(io.StringIO((run / "metrics.csv").read_text())))
        assert tuple(rows[0]) == METRICS_HEADER and len(rows) == 61

    def test_zero_steps(self, files):
        (files / "config.json").write_text(json.dumps({"steps": 0}))
        assert self._train(files, "zero") == 0
        assert (files / "zero" / "metrics.csv").read_text() == ",".join(METRICS_HEADER) + "\n"

    def test_manifest_rerun_identical(self, files):
        assert self._train(files, "a", "--threads", "3") == 0
        assert main(["train", "--from-manifest", str(files / "a" / "manifest.json"),
                     "--out-dir", str(files / "b")]) == 0
        assert (files / "a" / "metrics.csv").read_bytes() == (files / "b" / "metrics.csv").read_bytes()
        assert (files / "a" / "checkpoint_final.json").read_bytes() == \
            (files / "b" / "checkpoint_final.json").read_bytes()

    def test_manifest_detects_changed_world(self, files):
        assert self._train(files, "a") == 0
        main(["make-world", "--spec", str(files / "spec.json"), "--out", str(files / "world.json"), "--seed", "4"])
        assert main(["train", "--from-manifest", str(files / "a" / "manifest.json"),
                     "--out-dir", str(files / "b")]) == 3

    def test_no_filter_arm(self, files):
        assert self._train(files, "nf", "--no-filter") == 0
        manifest = json.loads((files / "nf" / "manifest.json").read_text())
        assert manifest["config"]["use_filter"] is False
        rows = list(csv.DictReader(io.StringIO((files / "nf" / "metrics.csv").read_text())))
        assert all(r["accept_count"] == "6" for r in rows)

    def test_resume(self, files):
        assert self._train(files, "full") == 0
        assert self._train(files, "tail", "--resume", str(files / "full" / "checkpoint_0000020.json")) == 0
        full = (files / "full" / "metrics.csv").read_text().splitlines()
        tail = (files / "tail" / "metrics.csv").read_text().splitlines()
        assert tail[0] == full[0] and tail[1:] == full[21:]

    def test_missing_arguments(self, files):
        assert main(["train", "--out-dir", str(files / "x")]) == 2

    def test_bad_config(self, files):
        (files / "config.json").write_text(json.dumps({"m": 0}))
        assert self._train(files, "bad") == 3

    def test_numeric_error_exit(self, files, monkeypatch):
        monkeypatch.setattr(trainer_mod, "rgfn_step_loss", lambda *a, **k: (math.nan, {}, 1))
        assert self._train(files, "nan") == 4
        assert (files / "nan" / "failure_step0.json").exists()


class TestEval:
    def test_fresh_vs_point_mass(self, tmp_path, capsys):
        model, inst = point_mass_world()
        save_world(tmp_path / "pm.json", model, inst)
        save_params(PolicyParams(2), 0, tmp_path / "fresh.json")
        code = main(["eval", "--world", str(tmp_path / "pm.json"), "--checkpoint", str(tmp_path / "fresh.json"),
                     "--max-len", "2"])
        assert code == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["tv"] > 0.85 and rep["version"] == 1 and rep["sample_count"] == 0

    def test_trained_checkpoint(self, tmp_path, capsys):
        model, inst = point_mass_world()
        save_world(tmp_path / "pm.json", model, inst)
        (tmp_path / "c.json").write_text(json.dumps({"steps": 5000, "lam": 1, "max_rationale_len": 2}))
        assert main(["train", "--world", str(tmp_path / "pm.json"), "--config", str(tmp_path / "c.json"),
                     "--out-dir", str(tmp_path / "run")]) == 0
        capsys.readouterr()
        assert main(["eval", "--world", str(tmp_path / "pm.json"), "--checkpoint",
                     str(tmp_path / "run" / "checkpoint_final.json"), "--max-len", "2",
                     "--target-temperature", "0.7"]) == 0
        assert json.loads(capsys.readouterr().out)["tv"] <= 0.05

    def test_malformed_checkpoint(self, files):
        (files / "ck.json").write_text(json.dumps({"version": 5}))
        assert main(["eval", "--world", str(files / "world.json"), "--checkpoint", str(files / "ck.json")]) == 3

    def test_sampled_mode(self, files):
        save_params(PolicyParams(3), 0, files / "fresh.json")
        out = files / "rep.json"
        assert main(["eval", "--world", str(files / "world.json"), "--checkpoint", str(files / "fresh.json"),
                     "--mode", "sampled", "--samples", "2000", "--out", str(out)]) == 0
        assert json.loads(out.read_text())["sample_count"] == 2000

    def test_bad_instance(self, files):
        save_params(PolicyParams(3), 0, files / "fresh.json")
        assert main(["eval", "--world", str(files / "world.json"), "--checkpoint", str(files / "fresh.json"),
                     "--instance", "9"]) == 3


class TestRank:
    def _rank(self, files, out, *extra):
        save_params(PolicyParams(3), 0, files / "fresh.json")
        code = main(["rank", "--world", str(files / "world.json"), "--checkpoint", str(files / "fresh.json"),
                     "--out", str(files / out), *extra])
        return code, (json.loads((files / out).read_text()) if code == 0 else None)

    def test_n1_bin_equals_bon(self, files):
        _, a = self._rank(files, "a.json", "--n", "1", "--mode", "bin")
        _, b = self._rank(files, "b.json", "--n", "1", "--mode", "bon")
        assert a["selected"]["answer"] == b["selected"]["answer"]
        assert a["selected"]["support"] == b["selected"]["support"]

    def test_seed_reproducible(self, files):
        _, a = self._rank(files, "a.json", "--n", "16", "--seed", "5")
        _, b = self._rank(files, "b.json", "--n", "16", "--seed", "5")
        assert a == b

    def test_bad_n(self, files):
        assert self._rank(files, "x.json", "--n", "0")[0] == 2

    def test_bad_mode(self, files):
        assert self._rank(files, "x.json", "--mode", "vote")[0] == 2


def test_oracle_report(tmp_path):
    out = tmp_path / "oracle.json"
    assert main(["oracle", "--only", "2,3,6", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["version"] == 1
    assert [c["number"] for c in rep["criteria"]] == [2, 3, 6]
    assert rep["all_passed"] is True


def test_no_command():
    assert main([]) == 2
