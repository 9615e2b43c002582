import pytest

from gender_bias_recommender import EXIT_FAILED, EXIT_OK, EXIT_PARTIAL, main

CONFIG = """\
name: cli
synth:
  n_users: 40
  n_items: 20
  density: 0.6
models:
  - algorithm: user-knn
    knn: {k: 5}
evaluation:
  n: 5
"""


@pytest.fixture
def config_path(write_text):
    return write_text("exp.yaml", CONFIG)


class TestCli:
    def test_synth_writes_dataset(self, config_path, tmp_path, capsys):
        assert main(["synth", "--config", str(config_path), "--out", str(tmp_path / "synth"), "--seed", "3"]) == EXIT_OK
        for name in ("ratings.csv", "catalog.csv", "truth.csv", "realized.csv"):
            assert (tmp_path / "synth" / name).exists()
        assert "ratings.csv" in capsys.readouterr().out

    def test_run_then_report(self, config_path, tmp_path):
        run_dir = tmp_path / "run"
        assert main(["run", "--config", str(config_path), "--out", str(run_dir)]) == EXIT_OK
        assert (run_dir / "cells" / "user-knn" / "full" / "metrics.json").exists()
        (run_dir / "summary.csv").unlink()
        assert main(["report", str(run_dir)]) == EXIT_OK
        assert (run_dir / "summary.csv").exists()

    def test_prepare_needs_real_data(self, config_path):
        assert main(["prepare", "--config", str(config_path)]) == EXIT_FAILED

    def test_enrich_offline_without_fixtures(self, write_text, tmp_path):
        ratings = write_text("ratings.csv", "user_id,item_id,rating\nu1,0306406152,4\nu2,0198526636,5\n")
        code = main(["enrich", str(ratings), "--scale-max", "5", "--offline", "--out", str(tmp_path / "out")])
        assert code == EXIT_PARTIAL
        assert (tmp_path / "out" / "catalog.csv").read_text() == "item_id,group\n"
        assert len((tmp_path / "out" / "drops.csv").read_text().splitlines()) == 3

    def test_enrich_rerun_is_served_from_the_cache(self, write_text, tmp_path, monkeypatch):
        calls = []

        class Lookup:
            def __init__(self, provider_id, answers):
                self.provider_id = provider_id
                self.answers = answers

            def lookup(self, key):
                calls.append((self.provider_id, key))
                return self.answers.get(key, [])

        authors = Lookup("books", {"0306406152": ["Ann Leckie"], "0198526636": ["Iain Banks"]})
        names = Lookup("names", {"ann": ("female", 0.97), "iain": ("male", 0.99)})
        monkeypatch.setattr("components.enrichment.build_providers", lambda config, session=None: ([authors], names))
        ratings = write_text("ratings.csv", "user_id,item_id,rating\nu1,0306406152,4\nu2,0198526636,5\n")
        args = ["enrich", str(ratings), "--scale-max", "5", "--out", str(tmp_path / "out")]

        assert main(args) == EXIT_OK
        first = (tmp_path / "out" / "catalog.csv").read_bytes()
        assert len(calls) == 4
        assert (tmp_path / "out" / "lookup_cache.jsonl").exists()

        calls.clear()
        assert main(args) == EXIT_OK
        assert calls == []
        assert (tmp_path / "out" / "catalog.csv").read_bytes() == first

    def test_enrich_cache_flag(self, write_text, tmp_path):
        ratings = write_text("ratings.csv", "user_id,item_id,rating\nu1,0306406152,4\n")
        cache = tmp_path / "shared" / "cache.jsonl"
        cache.parent.mkdir()
        cache.write_text(
            '{"key": "0306406152", "kind": "author", "value": {"author": "Ann Leckie", "resolved": true, "source": "fixture"}}\n'
            '{"key": "ann", "kind": "gender", "value": {"gender": "female", "probability": 0.97, "source": "fixture"}}\n',
            encoding="utf-8")
        code = main(["enrich", str(ratings), "--scale-max", "5", "--offline", "--cache", str(cache),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_OK
        assert (tmp_path / "out" / "catalog.csv").read_text() == "item_id,group\n0306406152,D\n"
        assert not (tmp_path / "out" / "lookup_cache.jsonl").exists()

    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == EXIT_FAILED
